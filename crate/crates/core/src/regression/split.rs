use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const TEST_FRACTION: f64 = 0.2;
pub const DEFAULT_FOLDS: usize = 4;

/// Seeded 80/20 partition of `0..n` into `(train, test)` index lists.
pub fn split_80_20(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 5 {
        return Err(Error::Data(format!("need at least 5 rows for an 80/20 split, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64 * TEST_FRACTION).round() as usize).clamp(1, n - 1);
    let test = idx[..n_test].to_vec();
    let train = idx[n_test..].to_vec();
    Ok((train, test))
}

/// Contiguous k-fold partition of `0..n`: `(fit, validation)` positions per
/// fold. Fold sizes differ by at most one.
pub fn kfold(n: usize, k: usize) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 || n < k {
        return Err(Error::Data(format!("cannot make {k} folds from {n} rows")));
    }
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let val: Vec<usize> = (start..start + len).collect();
        let fit: Vec<usize> = (0..start).chain(start + len..n).collect();
        folds.push((fit, val));
        start += len;
    }
    Ok(folds)
}
