//! Command-line entry point: `run`, `sweep`, `report`, and `gradcheck`.
//!
//! Flags override the optional flat key-value config file (`--config`),
//! which overrides built-in defaults. Errors print a single machine-readable
//! JSON line on stderr; exit code 2 flags configuration problems, 1
//! everything else.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use tta_core::data::{ArchSpec, Regime, ShiftKind};
use tta_core::tta::Method;
use tta_core::{CoreError, Result};
use tta_harness::config::{parse_config_file, RunConfig, TaskSpec};
use tta_harness::report::{load_records, load_timings, render, ReportKind};
use tta_harness::{run_experiment, sweep_threshold};

#[derive(Parser)]
#[command(name = "tta", about = "Test-time adaptation experiments on synthetic shift benchmarks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one method over a scenario and seed list, writing metrics files.
    Run(RunArgs),
    /// Run a threshold sweep (method x entropy-factor grid).
    Sweep(SweepArgs),
    /// Render a CSV report from persisted metrics files.
    Report(ReportArgs),
    /// Run the seeded finite-difference gradient check suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Default, Clone)]
struct RunArgs {
    /// Flat key-value config file; CLI flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task spec, e.g. "c=10,d=32,train=4096,test=2048,sep=6.0".
    #[arg(long)]
    task: Option<String>,
    /// Architecture, e.g. "64b|64b" (blocks, '|' marks the split).
    #[arg(long)]
    arch: Option<String>,
    /// no_adapt | tent | threshold_tent | poem.
    #[arg(long)]
    method: Option<String>,
    /// standard | imbalanced_label | single_sample | mixed_shift.
    #[arg(long)]
    scenario: Option<String>,
    /// gauss_noise | feature_scale | rotation | mean_shift.
    #[arg(long)]
    shift: Option<String>,
    /// Severity level 1..=5.
    #[arg(long)]
    severity: Option<u8>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// Entropy threshold factor (threshold = factor * ln C).
    #[arg(long = "entropy-factor")]
    entropy_factor: Option<f64>,
    /// Maximum re-selection rounds per batch.
    #[arg(long = "max-iters")]
    max_iters: Option<usize>,
    /// Source-branch weight in the fused prediction.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long = "lr-shallow")]
    lr_shallow: Option<f64>,
    #[arg(long = "lr-adapt")]
    lr_adapt: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Comma-separated seed list, e.g. "0,1,2".
    #[arg(long)]
    seed: Option<String>,
    /// Output directory for metrics files.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "train-epochs")]
    train_epochs: Option<usize>,
    #[arg(long = "train-lr")]
    train_lr: Option<f64>,
    /// Also record per-sample (entropy x gradient-norm) banding (poem only).
    #[arg(long)]
    bands: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated entropy factors, default "0.2,0.4,0.6,0.8,1.0".
    #[arg(long)]
    factors: Option<String>,
    /// Comma-separated methods to sweep, default all four.
    #[arg(long)]
    methods: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics file or directory of .jsonl files.
    #[arg(long = "in")]
    input: PathBuf,
    /// summary | prs | accounting | sweep.
    #[arg(long)]
    kind: String,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn parse_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<T>()
                .map_err(|_| CoreError::Parse(format!("bad {what} entry '{t}'")))
        })
        .collect()
}

/// Applies config-file values underneath the CLI flags and resolves the
/// final RunConfig.
fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let mut file: BTreeMap<String, String> = BTreeMap::new();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)?;
        for (k, v) in parse_config_file(&text)? {
            file.insert(k, v);
        }
    }
    let known = [
        "task", "arch", "method", "scenario", "shift", "severity", "batch_size",
        "entropy_factor", "max_iters", "alpha", "lr_shallow", "lr_adapt", "momentum",
        "seed", "out", "train_epochs", "train_lr", "bands",
    ];
    if let Some(bad) = file.keys().find(|k| !known.contains(&k.as_str())) {
        return Err(CoreError::InvalidConfig(format!("unknown config key '{bad}'")));
    }
    let pick = |cli: Option<String>, key: &str| -> Option<String> {
        cli.or_else(|| file.get(key).cloned())
    };
    let parse_as = |v: Option<String>, key: &str| -> Result<Option<f64>> {
        v.map(|s| {
            s.parse::<f64>()
                .map_err(|_| CoreError::Parse(format!("bad value for {key}: '{s}'")))
        })
        .transpose()
    };

    let mut cfg = RunConfig::default();
    if let Some(t) = pick(args.task.clone(), "task") {
        cfg.task = TaskSpec::parse(&t)?;
    }
    if let Some(a) = pick(args.arch.clone(), "arch") {
        cfg.arch = ArchSpec::parse(&a)?;
    }
    if let Some(m) = pick(args.method.clone(), "method") {
        cfg.adapt.method = Method::parse(&m)?;
    }
    if let Some(s) = pick(args.scenario.clone(), "scenario") {
        cfg.regime = Regime::parse(&s)?;
        if cfg.regime == Regime::SingleSample {
            cfg.batch_size = 1;
        }
    }
    if let Some(s) = pick(args.shift.clone(), "shift") {
        cfg.shift = if s == "none" { None } else { Some(ShiftKind::parse(&s)?) };
    }
    if let Some(s) = pick(args.severity.map(|v| v.to_string()), "severity") {
        cfg.severity = s
            .parse()
            .map_err(|_| CoreError::Parse(format!("bad severity '{s}'")))?;
    }
    if let Some(b) = pick(args.batch_size.map(|v| v.to_string()), "batch_size") {
        cfg.batch_size = b
            .parse()
            .map_err(|_| CoreError::Parse(format!("bad batch size '{b}'")))?;
    }
    if let Some(f) = parse_as(pick(args.entropy_factor.map(|v| v.to_string()), "entropy_factor"), "entropy_factor")? {
        cfg.adapt.entropy_factor = f;
    }
    if let Some(n) = pick(args.max_iters.map(|v| v.to_string()), "max_iters") {
        cfg.adapt.max_iters = n
            .parse()
            .map_err(|_| CoreError::Parse(format!("bad max_iters '{n}'")))?;
    }
    if let Some(a) = parse_as(pick(args.alpha.map(|v| v.to_string()), "alpha"), "alpha")? {
        cfg.adapt.fusion_alpha = a;
    }
    if let Some(l) = parse_as(pick(args.lr_shallow.map(|v| v.to_string()), "lr_shallow"), "lr_shallow")? {
        cfg.adapt.lr_shallow = l;
    }
    if let Some(l) = parse_as(pick(args.lr_adapt.map(|v| v.to_string()), "lr_adapt"), "lr_adapt")? {
        cfg.adapt.lr_adapt = l;
    }
    if let Some(m) = parse_as(pick(args.momentum.map(|v| v.to_string()), "momentum"), "momentum")? {
        cfg.adapt.momentum = m;
    }
    if let Some(s) = pick(args.seed.clone(), "seed") {
        cfg.seeds = parse_list(&s, "seed")?;
    }
    if let Some(o) = pick(args.out.clone().map(|p| p.display().to_string()), "out") {
        cfg.out = PathBuf::from(o);
    }
    if let Some(e) = pick(args.train_epochs.map(|v| v.to_string()), "train_epochs") {
        cfg.train.epochs = e
            .parse()
            .map_err(|_| CoreError::Parse(format!("bad train_epochs '{e}'")))?;
    }
    if let Some(l) = parse_as(pick(args.train_lr.map(|v| v.to_string()), "train_lr"), "train_lr")? {
        cfg.train.lr = l;
    }
    cfg.bands = args.bands
        || file
            .get("bands")
            .is_some_and(|v| v == "true" || v == "1");
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = resolve(args)?;
    let summaries = run_experiment(&cfg)?;
    for s in &summaries {
        println!(
            "run {}: accuracy={:.4} acc_pre={:.4}{} batches={} forwards={} backwards={}",
            s.run_id,
            s.accuracy,
            s.accuracy_pre,
            s.accuracy_post
                .map(|a| format!(" acc_post={a:.4}"))
                .unwrap_or_default(),
            s.batches,
            s.total_forwards,
            s.total_backwards,
        );
    }
    println!("wrote {} run(s) under {}", summaries.len(), cfg.out.display());
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let cfg = resolve(&args.run)?;
    let factors: Vec<f64> = match &args.factors {
        Some(s) => parse_list(s, "factor")?,
        None => vec![0.2, 0.4, 0.6, 0.8, 1.0],
    };
    let methods: Vec<Method> = match &args.methods {
        Some(s) => s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(Method::parse)
            .collect::<Result<_>>()?,
        None => vec![Method::NoAdapt, Method::Tent, Method::ThresholdTent, Method::Poem],
    };
    let summaries = sweep_threshold(&cfg, &factors, &methods)?;
    let records: Vec<tta_harness::Record> = summaries
        .iter()
        .cloned()
        .map(tta_harness::Record::Summary)
        .collect();
    let table = tta_harness::report::report_sweep(&records);
    std::fs::write(cfg.out.join("sweep.csv"), &table)?;
    print!("{table}");
    println!("wrote {} run(s) and sweep.csv under {}", summaries.len(), cfg.out.display());
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let kind = ReportKind::parse(&args.kind)?;
    let records = load_records(&args.input)?;
    let timings = load_timings(&args.input);
    let table = render(kind, &records, &timings);
    match &args.out {
        Some(path) => std::fs::write(path, table)?,
        None => print!("{table}"),
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let report = tta_core::gradcheck::run_suite(args.trials, args.seed)?;
    println!(
        "gradcheck: trials={} entries={} max_rel_err={:.3e} -> {}",
        report.trials,
        report.entries_checked,
        report.max_rel_err,
        if report.passed() { "PASS" } else { "FAIL" }
    );
    if !report.passed() {
        for f in report.failures.iter().take(20) {
            println!(
                "  FAIL trial={} layer={} kind={:?} entry={}: analytic={:.6e} numeric={:.6e}",
                f.trial, f.layer, f.kind, f.entry, f.analytic, f.numeric
            );
        }
        return Err(CoreError::InvalidConfig(format!(
            "{} gradient entries disagreed",
            report.failures.len()
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Sweep(args) => cmd_sweep(args),
        Cmd::Report(args) => cmd_report(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match &e {
                CoreError::InvalidConfig(_) | CoreError::Parse(_) | CoreError::NothingToAdapt => {
                    "config"
                }
                CoreError::Io(_) => "io",
                _ => "runtime",
            };
            eprintln!("{}", serde_json::json!({ "error": e.to_string(), "kind": kind }));
            if kind == "config" {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
