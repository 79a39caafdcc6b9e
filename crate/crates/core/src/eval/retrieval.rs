//! Cross-modal retrieval recall.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// R@k with image rows as queries and text rows as candidates.
    pub image_to_text: BTreeMap<usize, f64>,
    pub text_to_image: BTreeMap<usize, f64>,
    pub n: usize,
}

fn unit_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0])
        .map(|i| {
            let r = t.row(i);
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| if n > 0.0 { x / n } else { 0.0 }).collect()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// 1-based rank of candidate `truth` for every query. Candidates with a
/// higher similarity, or an equal one and a lower index, rank ahead.
pub fn ground_truth_ranks(queries: &Tensor, candidates: &Tensor) -> Vec<usize> {
    let q = unit_rows(queries);
    let c = unit_rows(candidates);
    q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let s: Vec<f64> = c.iter().map(|cj| dot(qi, cj)).collect();
            1 + s.iter().enumerate().filter(|&(j, &sj)| sj > s[i] || (sj == s[i] && j < i)).count()
        })
        .collect()
}

fn recall_at(ranks: &[usize], k: usize) -> f64 {
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Row `i` of `u` and of `v` form the ground-truth pair; both directions are
/// scored at every `k` by cosine similarity.
pub fn retrieval_recall(u: &Tensor, v: &Tensor, ks: &[usize]) -> Result<RetrievalReport> {
    if u.rank() != 2 || v.rank() != 2 || u.shape() != v.shape() {
        return Err(Error::shape("retrieval", format!("{:?} vs {:?}", u.shape(), v.shape())));
    }
    let n = u.shape()[0];
    if n < 2 {
        return Err(Error::invalid("retrieval needs at least 2 rows"));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::invalid("ks must be non-empty and positive"));
    }
    let i2t = ground_truth_ranks(u, v);
    let t2i = ground_truth_ranks(v, u);
    Ok(RetrievalReport {
        image_to_text: ks.iter().map(|&k| (k, recall_at(&i2t, k))).collect(),
        text_to_image: ks.iter().map(|&k| (k, recall_at(&t2i, k))).collect(),
        n,
    })
}

/// Query-to-gallery recall where several gallery rows may be relevant:
/// a hit at `k` means some relevant row is among the first `k`.
pub fn grouped_recall(queries: &Tensor, gallery: &Tensor, relevant: &[Vec<usize>], k: usize) -> Result<f64> {
    if queries.shape()[0] != relevant.len() {
        return Err(Error::invalid("one relevance list per query is required"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    let q = unit_rows(queries);
    let g = unit_rows(gallery);
    let mut hits = 0;
    for (qi, rel) in q.iter().zip(relevant) {
        let mut order: Vec<(usize, f64)> = g.iter().enumerate().map(|(j, gj)| (j, dot(qi, gj))).collect();
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        if order[..k.min(order.len())].iter().any(|(j, _)| rel.contains(j)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / relevant.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[[f64; 2]]) -> Tensor {
        Tensor::new(vec![rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn identity_and_shift() {
        let u = t(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.2]]);
        let r = retrieval_recall(&u, &u, &[1]).unwrap();
        assert_eq!(r.image_to_text[&1], 1.0);
        assert_eq!(r.text_to_image[&1], 1.0);
        let shifted = t(&[[0.0, 1.0], [-1.0, 0.2], [1.0, 0.0]]);
        let r = retrieval_recall(&u, &shifted, &[1, 3]).unwrap();
        assert_eq!(r.image_to_text[&1], 0.0);
        assert_eq!(r.text_to_image[&1], 0.0);
        assert_eq!(r.image_to_text[&3], 1.0);
    }

    #[test]
    fn errors() {
        let one = t(&[[1.0, 0.0]]);
        assert!(retrieval_recall(&one, &one, &[1]).is_err());
        let two = t(&[[1.0, 0.0], [0.0, 1.0]]);
        assert!(retrieval_recall(&two, &two, &[]).is_err());
    }

    #[test]
    fn grouped_hits() {
        let q = t(&[[1.0, 0.0]]);
        let g = t(&[[0.0, 1.0], [0.9, 0.1], [1.0, 0.0]]);
        assert_eq!(grouped_recall(&q, &g, &[vec![1]], 1).unwrap(), 0.0);
        assert_eq!(grouped_recall(&q, &g, &[vec![1]], 2).unwrap(), 1.0);
        assert_eq!(grouped_recall(&q, &g, &[vec![2, 0]], 1).unwrap(), 1.0);
    }
}
