//! Order-preserving parallel map over indices.

use std::thread;

use crate::error::{Error, Result};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "BWS_THREADS";

/// Worker count: `BWS_THREADS` if set to a positive integer, otherwise the
/// available parallelism.
pub fn worker_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::config(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// `(0..n).map(f)` evaluated on up to `workers` threads; results keep index
/// order and the first error (by index) is returned.
pub fn map_indexed<R, F>(n: usize, workers: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize) -> Result<R> + Sync,
{
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let f = &f;
    let mut slots: Vec<Option<Result<R>>> = (0..n).map(|_| None).collect();
    thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| s.spawn(move || (w..n).step_by(workers).map(|i| (i, f(i))).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every index visited")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_for_any_worker_count() {
        for workers in [1, 2, 3, 8] {
            let out = map_indexed(17, workers, |i| Ok(i * i)).unwrap();
            assert_eq!(out, (0..17).map(|i| i * i).collect::<Vec<_>>());
        }
        assert!(map_indexed(0, 4, |i| Ok(i)).unwrap().is_empty());
    }

    #[test]
    fn first_error_wins() {
        let err = map_indexed(10, 3, |i| if i >= 4 { Err(Error::contract(format!("bad {i}"))) } else { Ok(i) }).unwrap_err();
        assert!(err.to_string().contains("bad 4"));
    }
}
