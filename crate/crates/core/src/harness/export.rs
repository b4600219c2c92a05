//! CSV and summary exports.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::harness::sim::MetricsReport;
use crate::harness::CurvePoint;

fn column(values: impl Iterator<Item = String>) -> String {
    let mut s = String::new();
    for v in values {
        s.push_str(&v);
        s.push('\n');
    }
    s
}

/// File stem `<n>-<run>` shared by the per-run exports.
pub fn run_stem(n: usize, run: u32) -> String {
    format!("{n}-{run:02}")
}

/// Writes the four per-peer columns of one run; returns the paths.
pub fn write_run_csvs(dir: &Path, run: u32, report: &MetricsReport) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let stem = run_stem(report.n, run);
    let files = [
        ("leakedInformation", column(report.peers.iter().map(|p| p.leaked.to_string()))),
        ("receivedInformation", column(report.peers.iter().map(|p| p.received.to_string()))),
        ("inbox", column(report.peers.iter().map(|p| p.inbox.to_string()))),
        ("outbox", column(report.peers.iter().map(|p| p.outbox.to_string()))),
    ];
    let mut out = Vec::new();
    for (name, body) in files {
        let path = dir.join(format!("{stem}-{name}.csv"));
        fs::write(&path, body)?;
        out.push(path);
    }
    Ok(out)
}

/// Line-oriented `key=value` summary of one run.
pub fn summary(report: &MetricsReport) -> String {
    let mut s = String::new();
    let honest: Vec<_> = report.honest().collect();
    let ls: Vec<f64> = honest.iter().map(|p| p.l).collect();
    let rs: Vec<f64> = honest.iter().map(|p| p.r).collect();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k}={v}");
    };
    kv("n", report.n.to_string());
    kv("seed", report.seed.to_string());
    kv("robustAccounting", report.robust_accounting.to_string());
    kv("honest", honest.len().to_string());
    kv("meanL", format!("{:.6}", crate::harness::sim::mean(honest.iter().map(|p| to_f64(&p.leaked)))));
    kv("meanl", format!("{:.6}", crate::harness::sim::mean(ls.iter().copied())));
    kv("stddevl", format!("{:.6}", crate::harness::sim::stddev(&ls)));
    kv("meanr", format!("{:.6}", crate::harness::sim::mean(rs.iter().copied())));
    kv("stddevr", format!("{:.6}", crate::harness::sim::stddev(&rs)));
    kv("meanLookupCycles", format!("{:.4}", report.mean_lookup_cycles));
    kv("meanContainerRequests", format!("{:.4}", report.mean_container_requests));
    kv("inboxTotal", report.peers.iter().map(|p| p.inbox).sum::<u64>().to_string());
    kv("outboxTotal", report.peers.iter().map(|p| p.outbox).sum::<u64>().to_string());
    kv("complete", report.complete.to_string());
    kv("incomplete", report.incomplete.to_string());
    kv("aborted", report.aborted.to_string());
    kv("unauthorizedPulls", report.unauthorized_pulls.to_string());
    kv("unauthorizedServed", report.unauthorized_served.to_string());
    for (h, count) in &report.root_hashes {
        kv(&format!("root.{h}"), count.to_string());
    }
    kv(
        "detectedCulprits",
        report.detected_culprits.iter().map(|k| hex::encode(k.0)).collect::<Vec<_>>().join(","),
    );
    s
}

fn to_f64(r: &num_rational::BigRational) -> f64 {
    use num_traits::ToPrimitive;
    r.to_f64().unwrap_or(f64::NAN)
}

pub fn write_summary(dir: &Path, run: u32, report: &MetricsReport) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}-summary.txt", run_stem(report.n, run)));
    fs::write(&path, summary(report))?;
    Ok(path)
}

/// `n,mean,stddev` rows.
pub fn complexity_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("n,mean,stddev\n");
    for p in points {
        let _ = writeln!(s, "{},{:.6},{:.6}", p.n, p.mean, p.stddev);
    }
    s
}
