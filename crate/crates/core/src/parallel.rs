//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) these dispatch to rayon; without it,
//! or after [`set_enabled(false)`](set_enabled), they run the same closures in
//! order on the calling thread. Every helper assigns each output element to
//! exactly one closure invocation, so results are bit-identical in both modes.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Work (in multiply-adds) below which splitting is not worth the overhead.
pub const MIN_PARALLEL_WORK: usize = 1 << 16;

/// Runtime switch, used by benchmarks to compare both paths in one binary.
pub fn set_enabled(on: bool) {
    ENABLED.store(on, Ordering::Relaxed);
}

pub fn enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// `(0..n).map(f).collect()`, possibly in parallel. Output order is index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if enabled() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Calls `f(chunk_index, chunk)` for consecutive `chunk_len`-sized chunks.
/// `work` is the caller's estimate of the total cost; small jobs stay serial.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    if enabled() && work >= MIN_PARALLEL_WORK && data.len() > chunk_len {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = work;
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Rows per task when splitting `rows` rows of roughly `row_work` each.
pub fn rows_per_task(rows: usize, row_work: usize) -> usize {
    if !enabled() {
        return rows.max(1);
    }
    let threads = threads();
    let by_threads = rows.div_ceil(threads * 4).max(1);
    let by_work = (MIN_PARALLEL_WORK / row_work.max(1)).max(1);
    by_threads.max(by_work).min(rows.max(1))
}

pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
