use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use debias_core::study::ReplicateRunner;
use debias_core::train::{IterationRecord, TrainObserver};
use debias_core::Result;
use serde_json::json;

/// Runs `f(0..n)` on up to `jobs` threads and returns results in index order.
///
/// The first error by index wins, so the outcome does not depend on scheduling.
pub fn parallel_map<T, F>(n: usize, jobs: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if jobs <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(n) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every index ran"))
        .collect()
}

/// Bootstrap replicates spread over worker threads.
pub struct Threaded {
    pub jobs: usize,
    pub progress: Progress,
}

impl ReplicateRunner for Threaded {
    fn run(&self, b: usize, job: &(dyn Fn(usize) -> Result<Vec<f64>> + Sync)) -> Result<Vec<Vec<f64>>> {
        parallel_map(b, self.jobs, |i| {
            let out = job(i);
            self.progress.event("replicate", json!({ "index": i, "of": b, "ok": out.is_ok() }));
            out
        })
    }
}

/// Line-delimited JSON progress events on stderr, when enabled.
#[derive(Debug, Clone, Copy)]
pub struct Progress {
    pub enabled: bool,
}

impl Progress {
    pub fn event(&self, kind: &str, body: serde_json::Value) {
        if !self.enabled {
            return;
        }
        let mut line = json!({ "event": kind });
        if let (Some(obj), serde_json::Value::Object(extra)) = (line.as_object_mut(), body) {
            obj.extend(extra);
        }
        let mut err = std::io::stderr().lock();
        let _ = writeln!(err, "{line}");
    }

    pub fn observer(&self, label: &str) -> ProgressObserver {
        ProgressObserver {
            progress: *self,
            label: label.to_string(),
            every: 100,
        }
    }
}

/// Training observer that reports every `every`-th iteration and each checkpoint.
pub struct ProgressObserver {
    progress: Progress,
    label: String,
    every: usize,
}

impl TrainObserver for ProgressObserver {
    fn on_iteration(&mut self, r: &IterationRecord) {
        if self.progress.enabled && r.iteration.is_multiple_of(self.every) {
            self.progress.event(
                "iteration",
                json!({
                    "run": self.label,
                    "iteration": r.iteration,
                    "primary_loss": r.primary_loss,
                    "adversary_loss": r.adversary_loss,
                    "objective": r.objective,
                }),
            );
        }
    }

    fn on_checkpoint(&mut self, iteration: usize, gamma_hat: f64, p_value: f64) {
        self.progress.event(
            "checkpoint",
            json!({ "run": self.label, "iteration": iteration, "gamma_hat": gamma_hat, "p": p_value }),
        );
    }
}
