//! Worker-pool plumbing with a sequential fallback.
//!
//! Every parallel loop in this crate distributes *independent* output
//! slices across threads; no floating-point reduction ever crosses a
//! thread boundary, so results are bitwise identical whether a loop runs
//! on one thread or many. The `parallel` cargo feature selects the rayon
//! backend; [`set_sequential`] additionally forces sequential execution
//! at runtime (used by `--deterministic`).

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force all subsequent loops onto the calling thread.
pub fn set_sequential(seq: bool) {
    FORCE_SEQUENTIAL.store(seq, Ordering::SeqCst);
}

/// True when runtime sequential mode is active.
pub fn sequential() -> bool {
    FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Cap the worker pool. Reads `REKD_THREADS` when `threads` is `None`.
/// Must be called before the first parallel loop to take effect.
#[cfg(feature = "parallel")]
pub fn init_threads(threads: Option<usize>) {
    let n = threads.or_else(|| {
        std::env::var("REKD_THREADS")
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
    });
    if let Some(n) = n {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

#[cfg(not(feature = "parallel"))]
pub fn init_threads(_threads: Option<usize>) {}

/// Run `f(i, &mut items[i])` for every element, in parallel when enabled.
#[cfg(feature = "parallel")]
pub fn for_each_mut<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync,
{
    use rayon::prelude::*;
    if sequential() {
        for (i, item) in items.iter_mut().enumerate() {
            f(i, item);
        }
    } else {
        items
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, item)| f(i, item));
    }
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_mut<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync,
{
    for (i, item) in items.iter_mut().enumerate() {
        f(i, item);
    }
}

/// Map `0..n` to a vector, computing elements in parallel when enabled.
/// Output order is always the index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    if sequential() {
        (0..n).map(f).collect()
    } else {
        (0..n).into_par_iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    (0..n).map(f).collect()
}

/// Run `f(i, chunk_i)` over disjoint equal-length chunks of `data`.
/// Panics if `data.len()` is not a multiple of `chunk`.
#[cfg(feature = "parallel")]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    use rayon::prelude::*;
    assert_eq!(data.len() % chunk.max(1), 0);
    if sequential() {
        for (i, c) in data.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    } else {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert_eq!(data.len() % chunk.max(1), 0);
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}
