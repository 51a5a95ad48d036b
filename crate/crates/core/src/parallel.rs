//! Data-parallel map helpers, feature-gated on `parallel`.
//!
//! With the `parallel` feature (the default) independent work items —
//! scenario replications, likelihood-surface grid points, particle weight
//! evaluations — run on the rayon thread pool.  Without it the same helpers
//! degrade to plain sequential iteration.  Results are always collected in
//! index order, so output is bit-identical in both modes and for any worker
//! count: randomness never crosses item boundaries.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn par_map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(not(feature = "parallel"))]
pub fn par_map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Map `f` over a slice, collecting results in input order.
#[cfg(feature = "parallel")]
pub fn par_map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Map `f` over a slice, collecting results in input order.
#[cfg(not(feature = "parallel"))]
pub fn par_map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}

/// True when the `parallel` feature is compiled in.
pub const fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}

/// Size the global worker pool to `n` threads.  Must be called before the
/// first parallel map; calling again (or after a map has already run) is an
/// error from the pool itself.  Without the `parallel` feature this is a
/// no-op, since work runs sequentially regardless.
#[cfg(feature = "parallel")]
pub fn configure_workers(n: usize) -> crate::Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| crate::CalibError::Invalid(format!("worker pool: {e}")))
}

/// Size the global worker pool to `n` threads (no-op without `parallel`).
#[cfg(not(feature = "parallel"))]
pub fn configure_workers(_n: usize) -> crate::Result<()> {
    Ok(())
}
