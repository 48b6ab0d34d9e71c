//! Data-parallel map with a sequential fallback.
//!
//! Batch items, evaluation images, and sweep runs are independent, so they
//! map in parallel when the `parallel` feature (default) is on. Outputs are
//! collected in input order and all reductions happen afterwards in a fixed
//! sequential order, so results are bit-identical with and without the
//! feature, and for any thread count.

/// Maps `f` over `items`, preserving order.
#[cfg(feature = "parallel")]
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

/// Maps `f` over `items`, preserving order (sequential build).
#[cfg(not(feature = "parallel"))]
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    items.iter().map(f).collect()
}

/// Runs `f` inside a pool of `threads` workers when the `parallel` feature is
/// on; otherwise runs it directly. Used by benches to compare thread counts
/// and by timing-sensitive tests to pin honest single-core numbers.
#[cfg(feature = "parallel")]
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool construction")
        .install(f)
}

#[cfg(not(feature = "parallel"))]
pub fn with_threads<R: Send>(_threads: usize, f: impl FnOnce() -> R + Send) -> R {
    f()
}
