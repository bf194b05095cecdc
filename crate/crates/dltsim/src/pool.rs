//! Scoped worker threads for trace generation and search trials.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::thread;

use dltsim_core::search::{run_batches, Dispatch, Evaluator, SearchDriver, SearchOutcome};

/// Number of worker threads for `--jobs 0` (auto).
pub fn default_jobs() -> usize {
    thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Applies `f` to every item on up to `jobs` threads; results keep item order.
pub fn par_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut parts: Vec<Vec<(usize, R)>> = thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|_| {
                s.spawn(|| {
                    let mut out = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(item) = items.get(i) else { break };
                        out.push((i, f(item)));
                    }
                    out
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });
    let mut all: Vec<(usize, R)> = parts.drain(..).flatten().collect();
    all.sort_unstable_by_key(|p| p.0);
    all.into_iter().map(|p| p.1).collect()
}

/// Deterministic parallel search: trials are dispatched in batches of `jobs`
/// and recorded in dispatch order, so the result depends only on `jobs`.
pub fn search_batched<E: Evaluator + Sync + ?Sized>(
    driver: SearchDriver,
    evaluator: &E,
    jobs: usize,
) -> SearchOutcome {
    let jobs = jobs.max(1);
    run_batches(driver, jobs, |configs| {
        par_map(configs, jobs, |c| evaluator.evaluate(c))
    })
}

/// Free-running parallel search: each worker takes the next trial as soon as
/// it is idle. Trial order, and so tactic verdicts, may vary between runs.
pub fn search_concurrent<E: Evaluator + Sync + ?Sized>(
    driver: SearchDriver,
    evaluator: &E,
    jobs: usize,
) -> SearchOutcome {
    let jobs = jobs.max(1);
    if jobs == 1 {
        return search_batched(driver, evaluator, 1);
    }
    let state = Mutex::new(driver);
    let changed = Condvar::new();
    thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| {
                let mut d = state.lock().expect("driver lock");
                loop {
                    match d.next_dispatch() {
                        Dispatch::Evaluate { ticket, config } => {
                            drop(d);
                            let outcome = evaluator.evaluate(&config);
                            d = state.lock().expect("driver lock");
                            d.complete(ticket, outcome);
                            changed.notify_all();
                        }
                        Dispatch::Wait => d = changed.wait(d).expect("driver lock"),
                        Dispatch::Finished => {
                            changed.notify_all();
                            break;
                        }
                    }
                }
            });
        }
    });
    state.into_inner().expect("driver lock").finish()
}
