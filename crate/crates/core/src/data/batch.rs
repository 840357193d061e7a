use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded per-epoch permutation of `0..n_pairs`, chunked into batches; the
/// final short batch is kept.
pub fn batch_iter(n_pairs: usize, batch_pairs: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_pairs >= 1, "batch_pairs must be >= 1");
    let mut order: Vec<usize> = (0..n_pairs).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Stream 0 is left to model initialization.
    rng.set_stream(epoch + 1);
    order.shuffle(&mut rng);
    order.chunks(batch_pairs).map(<[usize]>::to_vec).collect()
}

/// The batch consumed by optimizer step `step` (0-based) when the data cycles
/// epoch after epoch.
pub fn batch_for_step(n_pairs: usize, batch_pairs: usize, seed: u64, step: u64) -> Vec<usize> {
    let per_epoch = n_pairs.div_ceil(batch_pairs) as u64;
    let epoch = step / per_epoch;
    let mut batches = batch_iter(n_pairs, batch_pairs, seed, epoch);
    batches.swap_remove((step % per_epoch) as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_last_batch_kept() {
        let b = batch_iter(10, 8, 1, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![8, 2]);
        let mut all: Vec<_> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn seeded_and_epoch_dependent() {
        assert_eq!(batch_iter(20, 4, 3, 2), batch_iter(20, 4, 3, 2));
        let orders: Vec<_> = (0..5).map(|e| batch_iter(20, 20, 3, e)).collect();
        for i in 0..5 {
            for j in i + 1..5 {
                assert_ne!(orders[i], orders[j]);
            }
        }
    }

    #[test]
    fn step_lookup_walks_epochs() {
        let flat: Vec<Vec<usize>> = (0..3).flat_map(|e| batch_iter(10, 4, 9, e)).collect();
        for (s, b) in flat.iter().enumerate() {
            assert_eq!(&batch_for_step(10, 4, 9, s as u64), b);
        }
    }
}
