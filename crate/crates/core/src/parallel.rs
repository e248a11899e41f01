//! Bounded fan-out over a work list with order-preserving results.
//!
//! At most `max_concurrency` worker threads pull items off a shared cursor;
//! results land in the slot matching the input index, so aggregation is
//! independent of scheduling.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Applies `f` to every item, running at most `max_concurrency` invocations
/// at a time. Results are returned in input order.
pub fn run_bounded<T, R, F>(items: &[T], max_concurrency: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    assert!(max_concurrency >= 1, "max_concurrency must be >= 1");
    if items.is_empty() {
        return Vec::new();
    }
    if max_concurrency == 1 || items.len() == 1 {
        return items.iter().enumerate().map(|(i, item)| f(i, item)).collect();
    }

    let cursor = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = (0..items.len()).map(|_| Mutex::new(None)).collect();
    let workers = max_concurrency.min(items.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = cursor.fetch_add(1, Ordering::SeqCst);
                if idx >= items.len() {
                    break;
                }
                let result = f(idx, &items[idx]);
                *slots[idx].lock().unwrap() = Some(result);
            });
        }
    });

    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("worker filled every slot"))
        .collect()
}
