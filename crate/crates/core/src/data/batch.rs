use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

/// Shuffled index batches for one epoch; the last batch may be short.
pub fn epoch_batches(num_samples: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..num_samples).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::tag::SHUFFLE, epoch]));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_final_batch() {
        let b = epoch_batches(10, 4, 1, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
    }

    #[test]
    fn seeded_order_and_partition() {
        assert_eq!(epoch_batches(10, 3, 9, 2).unwrap(), epoch_batches(10, 3, 9, 2).unwrap());
        assert_ne!(epoch_batches(50, 50, 9, 1).unwrap(), epoch_batches(50, 50, 9, 2).unwrap());
        let mut all: Vec<usize> = epoch_batches(10, 3, 9, 2).unwrap().concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn zero_batch_rejected() {
        assert!(epoch_batches(3, 0, 1, 0).is_err());
    }
}
