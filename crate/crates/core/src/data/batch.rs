use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Minibatch layout for one epoch. Every party derives the same plan from the
/// shared `(seed, epoch)`, so no index lists are exchanged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub epoch: usize,
    pub seed: u64,
    pub batches: Vec<Vec<usize>>,
}

impl BatchPlan {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }
}

/// Seeded permutation of `0..n` chunked into `ceil(n / batch_size)` batches.
pub fn make_batch_plan(n: usize, batch_size: usize, epoch: usize, seed: u64) -> Result<BatchPlan> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::Validation("batch size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    Ok(BatchPlan {
        epoch,
        seed,
        batches: order.chunks(batch_size).map(<[usize]>::to_vec).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_plan_covers_everything() {
        let plan = make_batch_plan(4, 2, 1, 9).unwrap();
        assert_eq!(plan.len(), 2);
        let mut all: Vec<usize> = plan.batches.concat();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn short_last_batch() {
        let plan = make_batch_plan(5, 2, 0, 0).unwrap();
        assert_eq!(plan.batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
    }

    #[test]
    fn epochs_reshuffle() {
        let a = make_batch_plan(100, 10, 1, 5).unwrap();
        let b = make_batch_plan(100, 10, 2, 5).unwrap();
        assert_ne!(a.batches, b.batches);
        assert_eq!(a, make_batch_plan(100, 10, 1, 5).unwrap());
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(make_batch_plan(0, 4, 1, 0), Err(Error::EmptyDataset)));
    }
}
