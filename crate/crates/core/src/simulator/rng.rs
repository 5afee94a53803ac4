//! Deterministic per-replication random streams.
//!
//! Replication `r` of stream `tag` under `base_seed` always draws from the
//! same ChaCha8 stream, independent of scheduling, so serial and parallel
//! runs produce identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Generator for replication `replication` of stream `tag`.
pub fn replication_rng(base_seed: u64, tag: u64, replication: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed ^ tag.wrapping_add(1).wrapping_mul(GOLDEN));
    rng.set_stream(replication);
    rng
}

/// Runs `f(r)` for `r in 0..n` in parallel and returns the results in
/// replication order.
pub fn par_replications<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    (0..n as u64).into_par_iter().map(f).collect()
}
