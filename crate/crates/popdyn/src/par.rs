//! Data-parallel map helpers.
//!
//! With the `parallel` feature (default) the maps run on rayon; without it
//! they run sequentially. Both paths materialize results in index order and
//! reduce in a fixed order, so outputs are bit-identical across feature
//! flags and thread counts.

#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, min_len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n)
        .into_par_iter()
        .with_min_len(min_len.max(1))
        .map(f)
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, _min_len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Sum of `f(i)` for `i in 0..n`. Chunk sums are computed (possibly in
/// parallel) over fixed chunk boundaries and folded in chunk order.
pub fn sum_indexed<F>(n: usize, chunk: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let chunk = chunk.max(1);
    let chunks = n.div_ceil(chunk);
    map_indexed(chunks, 1, |c| {
        let lo = c * chunk;
        let hi = ((c + 1) * chunk).min(n);
        let mut s = 0.0;
        for i in lo..hi {
            s += f(i);
        }
        s
    })
    .into_iter()
    .sum()
}
