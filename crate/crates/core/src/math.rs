//! Deterministic data-parallel primitives.
//!
//! Parallel and sequential execution must produce bit-identical results, so
//! every parallel op here works on a fixed decomposition (row chunks or
//! per-item slots) and never uses reduction orders that depend on thread
//! scheduling. With the `parallel` feature enabled, rayon distributes the
//! fixed chunks; [`set_parallelism`] toggles distribution at runtime so the
//! bench suite can compare both paths in one binary. Without the feature the
//! sequential path is the only one compiled.

use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Row-chunk granularity shared by both execution paths. Fixed so the
/// per-chunk kernels see identical sub-problems regardless of mode.
const ROW_CHUNK: usize = 32;

/// Enable or disable rayon distribution at runtime. Returns the previous
/// setting. A no-op (always sequential) when the `parallel` feature is off.
pub fn set_parallelism(enabled: bool) -> bool {
    PARALLEL.swap(enabled, Ordering::SeqCst)
}

/// Whether work is currently distributed across threads.
pub fn parallelism_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::SeqCst)
}

/// Apply `f` to each element of `items` with its index.
pub fn for_each_indexed<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if parallelism_enabled() {
        items
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, item)| f(i, item));
        return;
    }
    for (i, item) in items.iter_mut().enumerate() {
        f(i, item);
    }
}

/// Collect `f(0..n)` in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if parallelism_enabled() {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Apply `f` to fixed-size row chunks of `out`; chunk `i` covers rows
/// `[i*ROW_CHUNK, ...)`. The chunking is identical in both modes.
pub fn for_each_row_chunk_mut<F>(out: &mut Array2<f64>, f: F)
where
    F: Fn(usize, &mut ArrayViewMut2<f64>) + Send + Sync,
{
    let mut chunks: Vec<ArrayViewMut2<f64>> =
        out.axis_chunks_iter_mut(Axis(0), ROW_CHUNK).collect();
    for_each_indexed(&mut chunks, |i, c| f(i, c));
}

/// `a @ b` computed chunk-by-chunk over the rows of `a`. Each chunk is an
/// independent dense product, so the result is bitwise identical whether the
/// chunks run in parallel or serially.
pub fn matmul(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let (kb, n) = b.dim();
    assert_eq!(k, kb, "matmul inner dimensions {k} vs {kb}");
    let mut out = Array2::<f64>::zeros((m, n));
    let mut pairs: Vec<(ArrayViewMut2<f64>, ArrayView2<f64>)> = out
        .axis_chunks_iter_mut(Axis(0), ROW_CHUNK)
        .zip(a.axis_chunks_iter(Axis(0), ROW_CHUNK))
        .collect();
    for_each_indexed(&mut pairs, |_, (oc, ac)| {
        oc.assign(&ac.dot(b));
    });
    out
}
