//! Deterministic fan-out over batch items.
//!
//! Work is assigned round-robin to scoped worker threads and the outputs are
//! stitched back together in input order, so results are identical for any
//! thread count — reductions downstream always see the same operand order.

/// Apply `f` to every item, returning outputs in input order.
///
/// `threads <= 1` runs inline. Each worker handles the items whose index is
/// congruent to its worker id, which keeps the assignment independent of
/// scheduling.
pub fn map_ordered<T, O, F>(items: &[T], threads: usize, f: F) -> Vec<O>
where
    T: Sync,
    O: Send,
    F: Fn(usize, &T) -> O + Sync,
{
    let workers = threads.min(items.len());
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let mut slots: Vec<Option<O>> = Vec::with_capacity(items.len());
    slots.resize_with(items.len(), || None);
    std::thread::scope(|scope| {
        let f = &f;
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    let mut outs = Vec::new();
                    let mut i = w;
                    while i < items.len() {
                        outs.push((i, f(i, &items[i])));
                        i += workers;
                    }
                    outs
                })
            })
            .collect();
        for handle in handles {
            for (i, out) in handle.join().expect("worker panicked") {
                slots[i] = Some(out);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("all slots filled")).collect()
}

/// Resolve a thread count from the `OBJEMBED_THREADS` environment variable
/// (absent, empty, unparsable, or zero all mean one thread).
pub fn threads_from_env() -> usize {
    std::env::var("OBJEMBED_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}
