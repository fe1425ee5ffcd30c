//! Tiny indexed parallel map. Worker count is capped by the
//! `FASTINST_THREADS` env var (default 1); results keep input order, so
//! output is independent of the thread count for pure functions.

use crate::error::Result;

pub fn worker_threads() -> usize {
    std::env::var("FASTINST_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

pub fn parallel_map<T: Sync, U: Send>(
    items: &[T],
    f: impl Fn(&T) -> Result<U> + Sync,
) -> Result<Vec<U>> {
    let threads = worker_threads().min(items.len().max(1));
    if threads <= 1 {
        return items.iter().map(&f).collect();
    }
    let mut slots: Vec<Option<Result<U>>> = (0..items.len()).map(|_| None).collect();
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|scope| {
        for (t, out_chunk) in slots.chunks_mut(chunk).enumerate() {
            let f = &f;
            let start = t * chunk;
            let items = &items[start..(start + out_chunk.len()).min(items.len())];
            scope.spawn(move || {
                for (slot, item) in out_chunk.iter_mut().zip(items.iter()) {
                    *slot = Some(f(item));
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("worker filled slot"))
        .collect()
}
