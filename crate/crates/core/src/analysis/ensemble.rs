//! Sample-parallel execution with results in sample order.

use rayon::prelude::*;

use crate::error::{invalid, Result};

/// Evaluates `f(0..n_samples)` on `workers` threads (0 = all cores) and
/// returns the results in index order. On failure the error of the lowest
/// failing index is returned.
pub fn run_ensemble<T, F>(workers: usize, n_samples: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| invalid(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<T>> = pool.install(|| (0..n_samples).into_par_iter().map(&f).collect());
    results.into_iter().collect()
}
