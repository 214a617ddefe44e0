//! Bounded worker pool for independent jobs (sweep models, PBT members).
//! Results come back in submission order regardless of scheduling, so callers
//! stay deterministic.

use std::collections::VecDeque;
use std::sync::Mutex;

/// Run `f` over all items with at most `max_workers` concurrent threads.
pub fn run_parallel<T, R, F>(items: Vec<T>, max_workers: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, T) -> R + Sync,
{
    let n = items.len();
    let workers = max_workers.max(1).min(n.max(1));
    let queue: Mutex<VecDeque<(usize, T)>> = Mutex::new(items.into_iter().enumerate().collect());
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..n).map(|_| None).collect());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let job = queue.lock().unwrap().pop_front();
                match job {
                    Some((idx, item)) => {
                        let out = f(idx, item);
                        results.lock().unwrap()[idx] = Some(out);
                    }
                    None => break,
                }
            });
        }
    });

    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("worker finished every job"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order_and_runs_everything() {
        let items: Vec<u64> = (0..37).collect();
        let out = run_parallel(items, 4, |idx, v| {
            // Uneven job sizes to shuffle completion order.
            std::thread::sleep(std::time::Duration::from_micros((37 - v) * 10));
            (idx, v * v)
        });
        for (i, (idx, sq)) in out.iter().enumerate() {
            assert_eq!(*idx, i);
            assert_eq!(*sq, (i * i) as u64);
        }
    }

    #[test]
    fn single_worker_and_empty_input() {
        let out = run_parallel(vec![1, 2, 3], 1, |_, v| v + 1);
        assert_eq!(out, vec![2, 3, 4]);
        let empty: Vec<i32> = run_parallel(Vec::<i32>::new(), 8, |_, v| v);
        assert!(empty.is_empty());
    }
}
