//! Stage-aware shuffled batch streams.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Triplet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Every triplet, augmented ones included.
    One,
    /// Only non-augmented triplets.
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// Batches of triplet indices. Epoch `e` is a fresh shuffle drawn from the
/// seed and `e` alone, so any batch can be regenerated without replaying the
/// earlier ones.
#[derive(Clone, Debug)]
pub struct StageStream {
    pub stage: Stage,
    pub seed: u64,
    pub batch_size: usize,
    pool: Vec<usize>,
}

pub fn make_stage_stream(triplets: &[Triplet], stage: Stage, seed: u64, batch_size: usize) -> Result<StageStream> {
    if batch_size < 2 {
        return Err(Error::invalid(format!("batch size must be at least 2, got {batch_size}")));
    }
    let pool: Vec<usize> = (0..triplets.len()).filter(|&i| stage == Stage::One || !triplets[i].augmented).collect();
    if pool.len() < batch_size {
        return Err(Error::EmptyStream(stage.number()));
    }
    Ok(StageStream { stage, seed, batch_size, pool })
}

impl StageStream {
    /// Full batches per epoch; the short remainder is dropped.
    pub fn batches_per_epoch(&self) -> usize {
        self.pool.len() / self.batch_size
    }

    pub fn pool(&self) -> &[usize] {
        &self.pool
    }

    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut order = self.pool.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        order.chunks_exact(self.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// The `n`-th batch of the endless stream.
    pub fn batch(&self, n: u64) -> Vec<usize> {
        let per = self.batches_per_epoch() as u64;
        self.epoch(n / per).swap_remove((n % per) as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn pool(n: usize, augmented: usize) -> Vec<Triplet> {
        (0..n)
            .map(|i| Triplet {
                id: i.to_string(),
                image_path: String::new(),
                x: Tensor::zeros(vec![1, 1, 1]),
                text: i.to_string(),
                label: i,
                augmented: i < augmented,
            })
            .collect()
    }

    #[test]
    fn stage_two_excludes_augmented() {
        let t = pool(10, 4);
        let s = make_stage_stream(&t, Stage::Two, 1, 2).unwrap();
        let e = s.epoch(0);
        assert_eq!(e.len(), 3);
        assert!(e.iter().flatten().all(|&i| !t[i].augmented));
    }

    #[test]
    fn stage_one_covers_every_item_once() {
        let t = pool(10, 4);
        let s = make_stage_stream(&t, Stage::One, 1, 2).unwrap();
        let mut seen: Vec<usize> = s.epoch(0).concat();
        assert_eq!(seen.len(), 10);
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic_per_seed_and_epoch() {
        let t = pool(20, 0);
        let a = make_stage_stream(&t, Stage::One, 9, 4).unwrap();
        let b = make_stage_stream(&t, Stage::One, 9, 4).unwrap();
        assert_eq!(a.epoch(3), b.epoch(3));
        assert_ne!(a.epoch(0), a.epoch(1));
        assert_eq!(a.batch(7), a.epoch(1)[2]);
    }

    #[test]
    fn errors() {
        let t = pool(4, 4);
        assert!(matches!(make_stage_stream(&t, Stage::Two, 0, 2), Err(Error::EmptyStream(2))));
        assert!(make_stage_stream(&t, Stage::One, 0, 1).is_err());
    }
}
