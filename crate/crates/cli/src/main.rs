use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use advokat::harness::{self, export, ConfigError, ScenarioConfig, Simulation, TranscriptError, VerifyOutcome};
use advokat::AbortMode;
use anyhow::Context;
use clap::{Args, Parser, Subcommand};

const EXIT_INVALID: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_ABORTED: u8 = 3;
const EXIT_INCOMPLETE: u8 = 4;

#[derive(Parser)]
#[command(name = "advokat", version, about = "Confidential aggregation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario per repeat and write its exports.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Skip the JSON-lines transcript.
        #[arg(long)]
        no_transcript: bool,
    },
    /// Mean container requests per peer over several network sizes.
    Sweep {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        ns: Vec<usize>,
    },
    /// Check that a peer's leaf is included in the agreed root.
    Verify {
        #[arg(long)]
        transcript: PathBuf,
        #[arg(long)]
        peer: usize,
    },
    /// Summarize the CSV exports in a directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, dotted keys for nested tables.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repeats: Option<u32>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl ScenarioArgs {
    fn resolve(&self) -> Result<ScenarioConfig, ConfigError> {
        let mut c = match &self.config {
            Some(p) => ScenarioConfig::load(p)?,
            None => ScenarioConfig::default(),
        };
        for o in &self.overrides {
            c = c.apply_override(o)?;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(r) = self.repeats {
            c.repeats = r;
        }
        c.validate()?;
        Ok(c)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { scenario, no_transcript } => with_config(&scenario, |c| run(c, &scenario.out, !no_transcript)),
        Command::Sweep { scenario, ns } => with_config(&scenario, |c| sweep(c, &ns, &scenario.out)),
        Command::Verify { transcript, peer } => verify(&transcript, peer),
        Command::Report { dir } => report(&dir),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn with_config(args: &ScenarioArgs, f: impl FnOnce(ScenarioConfig) -> anyhow::Result<u8>) -> anyhow::Result<u8> {
    match args.resolve() {
        Ok(c) => f(c),
        Err(e) => {
            eprintln!("error: {e}");
            Ok(EXIT_USAGE)
        }
    }
}

fn run(config: ScenarioConfig, out: &Path, transcript: bool) -> anyhow::Result<u8> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut aborted = 0;
    for r in 0..config.repeats {
        let c = ScenarioConfig {
            seed: config.seed + r as u64,
            ..config.clone()
        };
        let mut sim = Simulation::new(c, transcript)?;
        sim.aggregate();
        let report = sim.report();
        export::write_run_csvs(out, r, &report)?;
        let summary = export::write_summary(out, r, &report)?;
        if transcript {
            let path = out.join(format!("{}-transcript.jsonl", export::run_stem(report.n, r)));
            let mut w = BufWriter::new(File::create(&path)?);
            harness::write_transcript(&sim, &mut w)?;
            w.flush()?;
        }
        println!(
            "run {r}: seed={} l={:.4}% r={:.4}% requests={:.2} complete={} aborted={} -> {}",
            report.seed,
            100.0 * report.mean_l(),
            100.0 * report.mean_r(),
            report.mean_container_requests,
            report.complete,
            report.aborted,
            summary.display()
        );
        aborted += report.aborted;
    }
    if config.mode == AbortMode::Strict && aborted > 0 {
        eprintln!("error: {aborted} peers aborted");
        return Ok(EXIT_ABORTED);
    }
    Ok(0)
}

fn sweep(config: ScenarioConfig, ns: &[usize], out: &Path) -> anyhow::Result<u8> {
    if ns.is_empty() {
        eprintln!("error: --ns is empty");
        return Ok(EXIT_USAGE);
    }
    let points = match harness::complexity_curve(ns, &config) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(EXIT_USAGE);
        }
    };
    fs::create_dir_all(out)?;
    let csv = export::complexity_csv(&points);
    fs::write(out.join("complexity.csv"), &csv)?;
    print!("{csv}");
    Ok(0)
}

fn verify(path: &Path, peer: usize) -> anyhow::Result<u8> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: cannot open {}: {e}", path.display());
            return Ok(EXIT_USAGE);
        }
    };
    match harness::verify_transcript(BufReader::new(file), peer) {
        Ok(VerifyOutcome::Valid) => {
            println!("valid");
            Ok(0)
        }
        Ok(VerifyOutcome::Invalid(why)) => {
            println!("invalid: {why}");
            Ok(EXIT_INVALID)
        }
        Ok(VerifyOutcome::Incomplete(h)) => {
            println!("incomplete: missing container {}", h.iter().map(|b| format!("{b:02x}")).collect::<String>());
            Ok(EXIT_INCOMPLETE)
        }
        Err(e @ TranscriptError::NoSuchPeer(_)) => {
            eprintln!("error: {e}");
            Ok(EXIT_USAGE)
        }
        Err(e) => Err(e.into()),
    }
}

fn parse_column(path: &Path) -> anyhow::Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| parse_value(l.trim()).with_context(|| format!("{}: bad value `{l}`", path.display())))
        .collect()
}

fn parse_value(s: &str) -> Option<f64> {
    match s.split_once('/') {
        Some((a, b)) => Some(a.parse::<f64>().ok()? / b.parse::<f64>().ok()?),
        None => s.parse().ok(),
    }
}

fn histogram(values: &[f64], buckets: usize) -> Vec<(f64, usize)> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / buckets as f64 } else { 1.0 };
    let mut counts = vec![0; buckets];
    for v in values {
        let i = (((v - lo) / width) as usize).min(buckets - 1);
        counts[i] += 1;
    }
    counts.into_iter().enumerate().map(|(i, c)| (lo + i as f64 * width, c)).collect()
}

fn report(dir: &Path) -> anyhow::Result<u8> {
    let mut files: Vec<PathBuf> = match fs::read_dir(dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect(),
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", dir.display());
            return Ok(EXIT_USAGE);
        }
    };
    files.sort();
    if files.is_empty() {
        eprintln!("error: no CSV files in {}", dir.display());
        return Ok(EXIT_USAGE);
    }
    for path in files {
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        if name == "complexity.csv" {
            print!("{name}\n{}", fs::read_to_string(&path)?);
            continue;
        }
        let values = parse_column(&path)?;
        if values.is_empty() {
            println!("{name}: empty");
            continue;
        }
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        println!(
            "{name}: n={} mean={:.6} stddev={:.6} min={:.6} median={:.6} max={:.6}",
            values.len(),
            harness::mean(values.iter().copied()),
            harness::stddev(&values),
            sorted[0],
            sorted[sorted.len() / 2],
            sorted[sorted.len() - 1]
        );
        for (from, count) in histogram(&values, 8) {
            println!("  {from:>12.6} {count:>6} {}", "#".repeat(count.min(60)));
        }
    }
    Ok(0)
}
