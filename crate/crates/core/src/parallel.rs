//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (the default) these run on rayon's current
//! thread pool; without it they degrade to plain loops. Callers must only
//! hand in work items whose results are independent — every helper assembles
//! results in input order, so output is identical for any worker count,
//! including one.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, returning results in index order.
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
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

/// Sequential reference version of [`map_indexed`]; used by benchmarks to
/// compare against the parallel path.
pub fn map_indexed_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

/// Apply `f` to disjoint mutable chunks of `data`, chunked by `chunk_len`.
/// `f` receives the chunk index and the chunk. Chunking depends only on
/// `chunk_len`, never on the worker count.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// True when the rayon-backed path is compiled in.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_matches_sequential() {
        let par = map_indexed(100, |i| i * i);
        let seq = map_indexed_seq(100, |i| i * i);
        assert_eq!(par, seq);
    }

    #[test]
    fn chunks_are_disjoint_and_ordered() {
        let mut v = vec![0usize; 10];
        for_each_chunk(&mut v, 3, |i, c| c.iter_mut().for_each(|x| *x = i));
        assert_eq!(v, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3]);
    }
}
