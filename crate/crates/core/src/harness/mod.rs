//! Deterministic scenario simulator and its metrics.

pub mod config;
pub mod export;
pub mod sim;
pub mod transcript;

pub use config::{ConfigError, Layout, ScenarioConfig};
pub use sim::{mean, run_scenario, stddev, MetricsReport, PeerMetrics, Simulation};
pub use transcript::{verify_transcript, write_transcript, Record, Transcript, TranscriptError, VerifyOutcome};

/// Mean and spread of container requests per honest peer at one size.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub n: usize,
    pub mean: f64,
    pub stddev: f64,
}

/// Runs `configs` on up to `workers` threads; results keep input order.
pub fn run_many<T: Send>(
    configs: Vec<ScenarioConfig>,
    workers: usize,
    f: impl Fn(ScenarioConfig) -> T + Sync,
) -> Vec<T> {
    let workers = workers.max(1).min(configs.len().max(1));
    let jobs: Vec<(usize, ScenarioConfig)> = configs.into_iter().enumerate().collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results = std::sync::Mutex::new(Vec::with_capacity(jobs.len()));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some((idx, c)) = jobs.get(i).cloned() else { break };
                let r = f(c);
                results.lock().unwrap().push((idx, r));
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(i, _)| *i);
    results.into_iter().map(|(_, r)| r).collect()
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Seeds `base.seed .. base.seed + repeats` for each size in `ns`. The
/// spread is over all honest peers of all runs.
pub fn complexity_curve(ns: &[usize], base: &ScenarioConfig) -> Result<Vec<CurvePoint>, ConfigError> {
    let mut configs = Vec::new();
    for &n in ns {
        for r in 0..base.repeats {
            let c = ScenarioConfig {
                n,
                seed: base.seed + r as u64,
                ..base.clone()
            };
            c.validate()?;
            configs.push(c);
        }
    }
    let per_run = run_many(configs, default_workers(), |c| {
        let (_, report) = run_scenario(c).expect("validated");
        (
            report.n,
            report.honest().map(|p| p.container_requests as f64).collect::<Vec<_>>(),
        )
    });
    Ok(ns
        .iter()
        .map(|&n| {
            let all: Vec<f64> = per_run.iter().filter(|(m, _)| *m == n).flat_map(|(_, v)| v.clone()).collect();
            CurvePoint {
                n,
                mean: mean(all.iter().copied()),
                stddev: stddev(&all),
            }
        })
        .collect())
}
