//! Deterministic data parallelism over path indices.
//!
//! Work is split into fixed chunks of [`CHUNK`] indices. Chunk boundaries do
//! not depend on the number of workers, and partial results are combined in
//! chunk order, so every reduction is bit-identical for any thread count.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub const CHUNK: usize = 4096;

/// Random stream of path `index`: depends only on `(seed, index)`.
pub fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn chunks(len: usize) -> Vec<Range<usize>> {
    (0..len.div_ceil(CHUNK))
        .map(|c| c * CHUNK..((c + 1) * CHUNK).min(len))
        .collect()
}

/// Evaluate `f` on every chunk of `0..len` in parallel; results in chunk order.
pub fn map_chunks<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    chunks(len).into_par_iter().map(f).collect()
}

/// Fallible variant of [`map_chunks`]; the first error in chunk order wins.
pub fn try_map_chunks<T, F>(len: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Range<usize>) -> Result<T> + Sync + Send,
{
    chunks(len).into_par_iter().map(f).collect()
}

/// Chunked reduction: `partial` per chunk, folded left to right by `combine`.
pub fn reduce_chunks<T, F, C>(len: usize, init: T, partial: F, combine: C) -> T
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
    C: Fn(T, T) -> T,
{
    map_chunks(len, partial).into_iter().fold(init, combine)
}

/// Run `f` inside a dedicated pool of `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_independent_of_order() {
        let a: Vec<u64> = (0..5).map(|i| path_rng(9, i).random()).collect();
        let b: Vec<u64> = (0..5).rev().map(|i| path_rng(9, i).random()).collect();
        let b: Vec<u64> = b.into_iter().rev().collect();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn reductions_do_not_depend_on_thread_count() {
        let len = 3 * CHUNK + 17;
        let sum = |threads| {
            with_threads(threads, || {
                reduce_chunks(
                    len,
                    0.0f64,
                    |r| r.map(|i| (i as f64).sqrt().sin()).sum::<f64>(),
                    |a, b| a + b,
                )
            })
            .unwrap()
        };
        let one = sum(1);
        assert_eq!(one.to_bits(), sum(3).to_bits());
        assert_eq!(one.to_bits(), sum(8).to_bits());
    }

    #[test]
    fn chunks_cover_the_range() {
        let c = chunks(2 * CHUNK + 1);
        assert_eq!(c.len(), 3);
        assert_eq!(c[2], 2 * CHUNK..2 * CHUNK + 1);
        assert!(chunks(0).is_empty());
    }
}
