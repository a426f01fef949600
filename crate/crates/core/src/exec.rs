//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) path-level work is spread over the
//! rayon pool; without it the same closures run sequentially. Every
//! reduction goes through [`pairwise_sum`] or fixed-size chunks combined in
//! index order, so results do not depend on the number of worker threads.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Paths per chunk for chunked reductions. Fixed, so the reduction tree
/// is independent of the schedule.
pub const CHUNK: usize = 256;

/// Evaluates `f(i)` for `i in 0..len` and collects the results in index order.
pub fn map_range<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..len).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..len).map(f).collect()
    }
}

/// Runs `f` on consecutive mutable chunks of `data` (chunk length `chunk`),
/// passing the chunk index.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Pairwise (cascade) summation with a fixed split rule.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        let mut s = 0.0;
        for v in values {
            s += v;
        }
        return s;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Mean via [`pairwise_sum`]. Empty input gives 0.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        pairwise_sum(values) / values.len() as f64
    }
}

/// Sample mean and standard error (sample std / sqrt(len)).
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mu = mean(values);
    if n == 1 {
        return (mu, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mu) * (v - mu)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (mu, (var / n as f64).sqrt())
}

/// Element-wise sum of equally sized vectors produced per chunk of paths.
///
/// `f(start, end)` accumulates the contribution of paths `start..end` into a
/// fresh vector of length `width`; chunk results are combined pairwise.
pub fn chunked_vector_sum<F>(len: usize, width: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, usize) -> Vec<f64> + Sync + Send,
{
    let chunks = len.div_ceil(CHUNK).max(1);
    let parts = map_range(chunks, |c| {
        let start = c * CHUNK;
        let end = ((c + 1) * CHUNK).min(len);
        let v = f(start, end);
        debug_assert_eq!(v.len(), width);
        v
    });
    combine_pairwise(&parts, width)
}

fn combine_pairwise(parts: &[Vec<f64>], width: usize) -> Vec<f64> {
    match parts.len() {
        0 => vec![0.0; width],
        1 => parts[0].clone(),
        _ => {
            let mid = parts.len() / 2;
            let mut a = combine_pairwise(&parts[..mid], width);
            let b = combine_pairwise(&parts[mid..], width);
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
            a
        }
    }
}
