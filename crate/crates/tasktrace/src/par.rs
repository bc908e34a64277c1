//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) these fan work out over rayon's
//! global thread pool; without it they run sequentially. Callers that need
//! bit-identical results across thread counts must reduce the returned
//! vectors in index order, which every caller in this crate does.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, preserving order.
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Map `f` over fixed-size chunks of `items`, preserving chunk order.
///
/// Chunk boundaries depend only on `chunk_size`, so a deterministic
/// in-order reduction of the result is independent of thread count.
pub fn par_chunk_map<T, U, F>(items: &[T], chunk_size: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&[T]) -> U + Sync + Send,
{
    assert!(chunk_size > 0);
    #[cfg(feature = "parallel")]
    {
        items.par_chunks(chunk_size).map(|c| f(c)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.chunks(chunk_size).map(|c| f(c)).collect()
    }
}

/// Map `f` over an index range, preserving order.
pub fn par_map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}
