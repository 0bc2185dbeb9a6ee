//! Deterministic data-parallel helpers.
//!
//! Experiment layers parallelize over independent units (replicates, sweep
//! points, Monte Carlo runs) rather than inside numeric kernels.  The helpers
//! here keep results bit-identical between the rayon path (default `parallel`
//! feature) and the sequential fallback: outputs are collected in index order
//! and floating-point reductions are always combined in a fixed order, so
//! thread scheduling never leaks into results.

/// Maps `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn run_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Maps `f` over `0..n`, collecting results in index order.
#[cfg(not(feature = "parallel"))]
pub fn run_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    run_indexed_seq(n, f)
}

/// Sequential twin of [`run_indexed`], available regardless of features so
/// benchmarks can compare the two paths in one build.
pub fn run_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Splits `items` into fixed-size chunks, maps each chunk, and returns the
/// per-chunk results in chunk order.  Chunk boundaries depend only on
/// `chunk_len`, so a subsequent in-order fold is deterministic even though
/// chunks may be processed concurrently.
#[cfg(feature = "parallel")]
pub fn chunk_map<T, U, F>(items: &[T], chunk_len: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&[T]) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_chunks(chunk_len.max(1)).map(f).collect()
}

/// Splits `items` into fixed-size chunks, maps each chunk, and returns the
/// per-chunk results in chunk order.
#[cfg(not(feature = "parallel"))]
pub fn chunk_map<T, U, F>(items: &[T], chunk_len: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&[T]) -> U + Sync + Send,
{
    chunk_map_seq(items, chunk_len, f)
}

/// Sequential twin of [`chunk_map`].
pub fn chunk_map_seq<T, U, F>(items: &[T], chunk_len: usize, f: F) -> Vec<U>
where
    F: Fn(&[T]) -> U,
{
    items.chunks(chunk_len.max(1)).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let par = run_indexed(100, |i| (i as f64).sqrt());
        let seq = run_indexed_seq(100, |i| (i as f64).sqrt());
        assert_eq!(par, seq);
    }

    #[test]
    fn chunk_map_preserves_chunk_order() {
        let items: Vec<f64> = (0..1000).map(|i| i as f64 * 0.1).collect();
        let par = chunk_map(&items, 64, |c| c.iter().sum::<f64>());
        let seq = chunk_map_seq(&items, 64, |c| c.iter().sum::<f64>());
        assert_eq!(par, seq);
        assert_eq!(par.len(), 1000usize.div_ceil(64));
    }
}
