//! Text hash-table labels and prompt-template augmentation.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Sample, Triplet};
use crate::error::{Error, Result};

pub const DEFAULT_TEMPLATES: [&str; 2] = ["A photo of the {}.", "A cropped photo of {}."];

/// Descriptions with at most this many whitespace tokens get templated.
pub const SHORT_DESCRIPTION_TOKENS: usize = 2;

/// How a description is turned into a hash key.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct KeyOptions {
    pub case_insensitive: bool,
}

impl KeyOptions {
    pub fn key(&self, text: &str) -> String {
        let t = text.trim();
        if self.case_insensitive {
            t.to_lowercase()
        } else {
            t.to_string()
        }
    }
}

/// Bijection between unique descriptions and dense label ids in
/// first-appearance order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HashTable {
    options: KeyOptions,
    ids: HashMap<String, usize>,
    descriptions: Vec<String>,
}

impl HashTable {
    pub fn new(options: KeyOptions) -> Self {
        HashTable { options, ..Default::default() }
    }

    /// Label for `text`, assigning the next id on first sight.
    pub fn insert(&mut self, text: &str) -> usize {
        let key = self.options.key(text);
        if let Some(&id) = self.ids.get(&key) {
            return id;
        }
        let id = self.descriptions.len();
        self.ids.insert(key.clone(), id);
        self.descriptions.push(key);
        id
    }

    pub fn get(&self, text: &str) -> Option<usize> {
        self.ids.get(&self.options.key(text)).copied()
    }

    pub fn description(&self, label: usize) -> Option<&str> {
        self.descriptions.get(label).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.descriptions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptions.is_empty()
    }

    pub fn descriptions(&self) -> &[String] {
        &self.descriptions
    }
}

pub fn build_text_hash_table(samples: Vec<Sample>, options: KeyOptions) -> (HashTable, Vec<Triplet>) {
    let mut table = HashTable::new(options);
    let triplets = samples
        .into_iter()
        .map(|s| {
            let label = table.insert(&s.record.text);
            Triplet {
                id: s.record.id,
                image_path: s.record.image_path,
                x: s.image,
                text: s.record.text.trim().to_string(),
                label,
                augmented: false,
            }
        })
        .collect();
    (table, triplets)
}

/// Fills a uniformly chosen template with `word`.
pub fn augment_prompt<R: Rng>(word: &str, templates: &[String], rng: &mut R) -> Result<String> {
    if templates.is_empty() {
        return Err(Error::invalid("template list is empty"));
    }
    if word.trim().is_empty() {
        return Err(Error::invalid("cannot template an empty word"));
    }
    let t = &templates[rng.random_range(0..templates.len())];
    Ok(t.replacen("{}", word.trim(), 1))
}

pub fn default_templates() -> Vec<String> {
    DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect()
}

pub fn is_short_description(text: &str) -> bool {
    text.split_whitespace().count() <= SHORT_DESCRIPTION_TOKENS
}

/// Appends one templated copy of every short-description triplet. The copy
/// keeps its source's image and label. A templated text that already names a
/// different label would break the one-text-one-label rule, so such copies
/// are skipped.
pub fn augment_short_descriptions(
    triplets: &mut Vec<Triplet>,
    table: &HashTable,
    templates: &[String],
    seed: u64,
) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut extra = Vec::new();
    for t in triplets.iter().filter(|t| !t.augmented && is_short_description(&t.text)) {
        let text = augment_prompt(&t.text, templates, &mut rng)?;
        let clash = table.get(&text).is_some_and(|l| l != t.label);
        let owner = *seen.entry(table.options.key(&text)).or_insert(t.label);
        if clash || owner != t.label {
            continue;
        }
        extra.push(Triplet {
            id: format!("{}#aug", t.id),
            image_path: t.image_path.clone(),
            x: t.x.clone(),
            text,
            label: t.label,
            augmented: true,
        });
    }
    let n = extra.len();
    triplets.extend(extra);
    Ok(n)
}
