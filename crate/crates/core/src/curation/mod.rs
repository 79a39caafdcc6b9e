//! Corpus curation: near-duplicate removal, size filtering, hash-table
//! labels, prompt augmentation and stage streams.

pub mod dedup;
pub mod image;
pub mod labels;
pub mod stream;
pub mod synth;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Tensor, TensorValue};

pub use dedup::{average_hash, dedup_near_duplicates, filter_small_images, hamming, Removal};
pub use image::{crop, image_dims, resize_bilinear, DirSource, ImageSource, MemorySource};
pub use labels::{augment_prompt, build_text_hash_table, default_templates, HashTable, KeyOptions};
pub use stream::{make_stage_stream, Stage, StageStream};
pub use synth::{class_name, class_prototype, generate_synthetic_dataset, SynthConfig, SyntheticCorpus};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    #[serde(rename = "image")]
    pub image_path: String,
    pub text: String,
    pub source: String,
}

/// A record with its decoded image.
#[derive(Clone, Debug)]
pub struct Sample {
    pub record: RawRecord,
    pub image: Tensor,
}

#[derive(Clone, Debug)]
pub struct Triplet {
    pub id: String,
    pub image_path: String,
    pub x: Tensor,
    pub text: String,
    pub label: usize,
    pub augmented: bool,
}

/// On-disk form of a triplet; the image stays a path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub id: String,
    pub image: String,
    pub text: String,
    pub label: usize,
    pub augmented: bool,
}

impl Triplet {
    pub fn to_record(&self) -> TripletRecord {
        TripletRecord {
            id: self.id.clone(),
            image: self.image_path.clone(),
            text: self.text.clone(),
            label: self.label,
            augmented: self.augmented,
        }
    }

    pub fn from_record(r: TripletRecord, source: &dyn ImageSource) -> Result<Self> {
        Ok(Triplet {
            x: source.load(&r.image)?,
            id: r.id,
            image_path: r.image,
            text: r.text,
            label: r.label,
            augmented: r.augmented,
        })
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Loads every image and checks the record invariants.
pub fn load_samples(records: Vec<RawRecord>, source: &dyn ImageSource) -> Result<Vec<Sample>> {
    records
        .into_iter()
        .map(|record| {
            if record.text.trim().is_empty() {
                return Err(Error::invalid(format!("record `{}` has an empty description", record.id)));
            }
            let image = source.load(&record.image_path)?;
            image_dims(&image)?;
            Ok(Sample { record, image })
        })
        .collect()
}

/// Keeps records the predicate accepts. The default curation config accepts
/// everything.
pub fn filter_relevance(samples: Vec<Sample>, keep: &dyn Fn(&RawRecord) -> bool) -> Vec<Sample> {
    samples.into_iter().filter(|s| keep(&s.record)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurationConfig {
    pub dedup_threshold: u32,
    pub min_side: usize,
    pub case_insensitive: bool,
    pub augment: bool,
    /// Extra templates appended to the two defaults.
    pub extra_templates: Vec<String>,
    pub seed: u64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            dedup_threshold: dedup::DEFAULT_HAMMING_THRESHOLD,
            min_side: 8,
            case_insensitive: false,
            augment: true,
            extra_templates: Vec::new(),
            seed: 0,
        }
    }
}

impl CurationConfig {
    pub fn templates(&self) -> Vec<String> {
        let mut t = default_templates();
        t.extend(self.extra_templates.iter().cloned());
        t
    }
}

#[derive(Clone, Debug)]
pub struct CurationOutput {
    pub table: HashTable,
    pub triplets: Vec<Triplet>,
    pub removals: Vec<Removal>,
    pub small_removed: usize,
}

/// dedup → size filter → relevance → hash-table labels → augmentation.
pub fn curate(
    samples: Vec<Sample>,
    cfg: &CurationConfig,
    relevance: &dyn Fn(&RawRecord) -> bool,
) -> Result<CurationOutput> {
    let (kept, removals) = dedup_near_duplicates(samples, cfg.dedup_threshold)?;
    let before = kept.len();
    let kept = filter_small_images(kept, cfg.min_side);
    let small_removed = before - kept.len();
    let kept = filter_relevance(kept, relevance);
    let (table, mut triplets) = build_text_hash_table(kept, KeyOptions { case_insensitive: cfg.case_insensitive });
    if cfg.augment {
        labels::augment_short_descriptions(&mut triplets, &table, &cfg.templates(), cfg.seed)?;
    }
    Ok(CurationOutput { table, triplets, removals, small_removed })
}

/// SHA-256 over the triplet records and image bytes, in order.
pub fn triplets_digest(triplets: &[Triplet]) -> Result<String> {
    let mut h = Sha256::new();
    for t in triplets {
        h.update(serde_json::to_vec(&t.to_record())?);
        h.update(crate::numerics::container::encode_tensor(&TensorValue::from_tensor(&t.x))?);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn accept_all(_: &RawRecord) -> bool {
    true
}
