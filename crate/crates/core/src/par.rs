//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these dispatch to rayon, otherwise they
//! run sequentially. Work is always split into chunks whose boundaries do not
//! depend on the thread count, and every output element is produced by exactly
//! one closure call, so results are bit-identical across thread counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Calls `f(chunk_index, chunk)` for consecutive chunks of `data`.
#[cfg(feature = "parallel")]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    data.par_chunks_mut(chunk.max(1)).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    data.chunks_mut(chunk.max(1)).enumerate().for_each(|(i, c)| f(i, c));
}

/// Maps `f` over `0..n`, preserving order.
#[cfg(feature = "parallel")]
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Sums `f(i)` over `0..n` in fixed-size blocks; block partials are added in order.
pub fn sum_range<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    const BLOCK: usize = 4096;
    let blocks = n.div_ceil(BLOCK);
    let partials = map_range(blocks, |b| {
        let lo = b * BLOCK;
        let hi = (lo + BLOCK).min(n);
        (lo..hi).map(&f).sum::<f64>()
    });
    partials.iter().sum()
}

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let t = sum + v;
        if f64::abs(sum) >= f64::abs(v) {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}
