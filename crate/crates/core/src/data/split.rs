//! Seeded fold splits over sequences.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Splits a dataset into (train, held) where `held` is the `fold`-th shard of
/// a seeded permutation of the sequences. Shards are disjoint and exhaustive;
/// the first `n % n_folds` shards carry one extra sequence. Sequence order
/// within each side follows the original dataset.
pub fn split_dataset(
    data: &Dataset,
    n_folds: usize,
    fold: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let n = data.n_sequences();
    if n_folds == 0 || fold >= n_folds {
        return Err(Error::invalid(format!(
            "fold {fold} out of range for {n_folds} folds"
        )));
    }
    if n_folds > n {
        return Err(Error::invalid(format!(
            "{n_folds} folds over {n} sequences"
        )));
    }

    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);

    let base = n / n_folds;
    let rem = n % n_folds;
    let shard_start = |k: usize| k * base + k.min(rem);
    let (lo, hi) = (shard_start(fold), shard_start(fold + 1));

    let mut held_idx: Vec<usize> = perm[lo..hi].to_vec();
    held_idx.sort_unstable();
    let in_held: std::collections::HashSet<usize> = held_idx.iter().copied().collect();
    let train_idx: Vec<usize> = (0..n).filter(|i| !in_held.contains(i)).collect();

    let pick = |idx: &[usize]| -> Result<Dataset> {
        Dataset::new(
            idx.iter().map(|&i| data.sequences[i].clone()).collect(),
            data.vocab.clone(),
            data.obs_vocab_size,
        )
    };
    Ok((pick(&train_idx)?, pick(&held_idx)?))
}
