use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Shuffled index batches for one epoch. The shuffle seed is `master_seed ^ epoch`;
/// the final batch may be short.
pub fn make_batches(n: usize, batch_size: usize, master_seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::invalid("make_batches", "empty dataset"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("make_batches", "batch_size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(master_seed ^ epoch));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
