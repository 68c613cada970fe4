//! Loop-execution helpers that run via rayon when the `parallel` feature is
//! enabled and sequentially otherwise.
//!
//! Every helper is shaped so that results cannot depend on the number of
//! worker threads: work items write to disjoint output slots, and reductions
//! fold per-chunk partial results in chunk-index order.  A build without the
//! `parallel` feature therefore produces bit-identical numbers.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Applies `f` to consecutive disjoint chunks of `data`.  Chunk `c` starts at
/// element `c * chunk_len`; the last chunk may be shorter.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(chunk_len > 0, "chunk_len must be positive");
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(c, chunk)| f(c, chunk));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(c, chunk)| f(c, chunk));
}

/// Applies `f` to two equally chunked mutable slices in lockstep; chunk `c`
/// of `a` pairs with chunk `c` of `b`.  `a.len() / a_chunk` must equal
/// `b.len() / b_chunk` (including remainders pairing up).
pub fn for_each_chunk_pair_mut<A, B, F>(
    a: &mut [A],
    a_chunk: usize,
    b: &mut [B],
    b_chunk: usize,
    f: F,
) where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Sync,
{
    assert!(a_chunk > 0 && b_chunk > 0);
    assert_eq!(
        a.len().div_ceil(a_chunk),
        b.len().div_ceil(b_chunk),
        "chunk counts must agree"
    );
    #[cfg(feature = "parallel")]
    a.par_chunks_mut(a_chunk)
        .zip(b.par_chunks_mut(b_chunk))
        .enumerate()
        .for_each(|(c, (ca, cb))| f(c, ca, cb));
    #[cfg(not(feature = "parallel"))]
    a.chunks_mut(a_chunk)
        .zip(b.chunks_mut(b_chunk))
        .enumerate()
        .for_each(|(c, (ca, cb))| f(c, ca, cb));
}

/// Evaluates `f(0), …, f(n-1)` and collects the results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
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
