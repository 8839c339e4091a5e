//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the helpers dispatch to rayon;
//! without it they run the same closures in a plain loop. Reductions use a
//! fixed chunking so both builds produce bit-identical sums.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Elements per work item; also the reduction chunk size.
pub const CHUNK: usize = 4096;

/// `out[i] = f(i)` for every index.
pub fn fill<F>(out: &mut [f64], f: F)
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if out.len() > CHUNK {
            out.par_chunks_mut(CHUNK)
                .enumerate()
                .for_each(|(c, chunk)| {
                    let base = c * CHUNK;
                    for (j, o) in chunk.iter_mut().enumerate() {
                        *o = f(base + j);
                    }
                });
            return;
        }
    }
    for (i, o) in out.iter_mut().enumerate() {
        *o = f(i);
    }
}

/// Allocating variant of [`fill`].
pub fn build<F>(len: usize, f: F) -> Vec<f64>
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let mut out = vec![0.0; len];
    fill(&mut out, f);
    out
}

/// `out[i] += f(i)`.
pub fn accumulate<F>(out: &mut [f64], f: F)
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if out.len() > CHUNK {
            out.par_chunks_mut(CHUNK)
                .enumerate()
                .for_each(|(c, chunk)| {
                    let base = c * CHUNK;
                    for (j, o) in chunk.iter_mut().enumerate() {
                        *o += f(base + j);
                    }
                });
            return;
        }
    }
    for (i, o) in out.iter_mut().enumerate() {
        *o += f(i);
    }
}

/// Ordered sum: fixed-size chunk partials combined left to right.
pub fn sum(x: &[f64]) -> f64 {
    #[cfg(feature = "parallel")]
    let partials: Vec<f64> = if x.len() > CHUNK {
        x.par_chunks(CHUNK).map(|c| c.iter().sum::<f64>()).collect()
    } else {
        x.chunks(CHUNK).map(|c| c.iter().sum::<f64>()).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let partials: Vec<f64> = x.chunks(CHUNK).map(|c| c.iter().sum::<f64>()).collect();
    partials.iter().sum()
}

/// Unordered sum, used only when deterministic mode is off.
pub fn sum_fast(x: &[f64]) -> f64 {
    #[cfg(feature = "parallel")]
    {
        x.par_iter().sum()
    }
    #[cfg(not(feature = "parallel"))]
    {
        x.iter().sum()
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
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

/// Applies `f` to consecutive row blocks of `out`, each `width` long.
pub fn rows_mut<F>(out: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if out.len() > CHUNK {
            out.par_chunks_mut(width)
                .enumerate()
                .for_each(|(r, row)| f(r, row));
            return;
        }
    }
    for (r, row) in out.chunks_mut(width).enumerate() {
        f(r, row);
    }
}
