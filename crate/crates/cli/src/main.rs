//! `saspec`: spectral alignment monitoring, toy training and theory checks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;

use saspec_core::analyze::{
    analyze_series, collect_snapshot_paths, summarize_log, AnalyzeConfig, Analyzer, FiniteMode, LogReport, Thresholds,
};
use saspec_core::mlp::{Scenario, ScenarioConfig, DEFAULT_EXPLOSION_FACTOR};
use saspec_core::sa::{CollapseConfig, DiversityStatus};
use saspec_core::snapshot::{read_metric_log, MetricLogWriter};
use saspec_core::theory::{run_suite, Suite};

const EXIT_ERROR: u8 = 1;
const EXIT_WARNING: u8 = 2;
const EXIT_COLLAPSED: u8 = 3;
const EXIT_VERIFY_FAILED: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "saspec", version, about = "Spectral alignment monitoring toolkit")]
struct Cli {
    /// Log filter (error, warn, info, debug, trace).
    #[arg(long, global = true, env = "SASPEC_LOG_LEVEL", default_value = "info")]
    log_level: String,

    /// Base seed for everything random.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output directory for metric logs and snapshots.
    #[arg(long, global = true, default_value = "saspec-out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute SA metrics over a series of SASN snapshots.
    Analyze(AnalyzeArgs),
    /// Train a toy MLP scenario with SA monitoring.
    TrainToy(TrainArgs),
    /// Run the theory verification suites.
    Verify(VerifyArgs),
    /// Summarize a metric log: explosion, collapse onset and lead times.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
struct CollapseArgs {
    /// Minimum share of the dominant sign.
    #[arg(long, default_value_t = 0.9)]
    sign_frac: f64,
    /// Minimum |mean SA|.
    #[arg(long, default_value_t = 0.15)]
    mean_abs: f64,
    /// Recent checks inspected for a warning.
    #[arg(long, default_value_t = 10)]
    window: usize,
    /// Consecutive qualifying checks that make a collapse.
    #[arg(long, default_value_t = 3)]
    consecutive: usize,
}

impl CollapseArgs {
    fn config(&self) -> CollapseConfig {
        CollapseConfig {
            sign_frac_threshold: self.sign_frac,
            mean_abs_threshold: self.mean_abs,
            window: self.window,
            consecutive_required: self.consecutive,
            ..CollapseConfig::default()
        }
    }
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Snapshot files or directories of `*.sasn` files.
    #[arg(required = true)]
    paths: Vec<PathBuf>,
    /// Name of the weight tensor.
    #[arg(long)]
    weight: String,
    /// Name of the layer-input activation tensor.
    #[arg(long)]
    input: String,
    /// Name of the weight-gradient tensor.
    #[arg(long)]
    grad: Option<String>,
    /// Layer label for the records (default: weight name without ".weight").
    #[arg(long)]
    layer: Option<String>,
    /// Count non-finite values instead of rejecting the snapshot.
    #[arg(long)]
    lenient: bool,
    #[command(flatten)]
    collapse: CollapseArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "lowercase")]
enum ScenarioArg {
    Stable,
    Explosive,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "stable")]
    scenario: ScenarioArg,
    #[arg(long)]
    eta: Option<f64>,
    /// Layer widths, input first, e.g. 256,64,64,10.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long)]
    steps: Option<u64>,
    /// Layers to monitor (1-based).
    #[arg(long, value_delimiter = ',')]
    monitor: Option<Vec<usize>>,
    /// Dump SASN snapshots of the monitored layers every N steps (0 = never).
    #[arg(long, default_value_t = 0)]
    snapshot_every: u64,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
enum SuiteArg {
    Gradient,
    Perturbation,
    Growth,
    Lemma,
    Amplification,
    All,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    suite: SuiteArg,
    /// Trials per suite (default depends on the suite).
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Table,
    Records,
}

#[derive(Args, Debug)]
struct ReportArgs {
    log: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
    #[arg(long)]
    weight_sigma1: Option<f64>,
    #[arg(long)]
    grad_sigma1: Option<f64>,
    #[arg(long)]
    max_activation: Option<f64>,
    /// Alarm when the stable rank falls below this value.
    #[arg(long)]
    stable_rank: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_EXPLOSION_FACTOR)]
    explosion_factor: f64,
    #[command(flatten)]
    collapse: CollapseArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log_level).format_timestamp(None).init();

    let result = match &cli.command {
        Command::Analyze(a) => run_analyze(&cli, a),
        Command::TrainToy(a) => run_train_toy(&cli, a),
        Command::Verify(a) => run_verify(&cli, a),
        Command::Report(a) => run_report(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn print_config<T: Serialize>(cfg: &T) -> Result<()> {
    println!("config: {}", serde_json::to_string(cfg)?);
    Ok(())
}

fn status_code(s: DiversityStatus) -> u8 {
    match s {
        DiversityStatus::Healthy => 0,
        DiversityStatus::Warning => EXIT_WARNING,
        DiversityStatus::Collapsed => EXIT_COLLAPSED,
    }
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn run_analyze(cli: &Cli, a: &AnalyzeArgs) -> Result<u8> {
    let mut cfg = AnalyzeConfig::new(&a.weight, &a.input);
    cfg.grad = a.grad.clone();
    if let Some(l) = &a.layer {
        cfg.layer = l.clone();
    }
    cfg.collapse = a.collapse.config();
    cfg.finite = if a.lenient { FiniteMode::Lenient } else { FiniteMode::Strict };
    let log_path = cli.out.join("analyze.jsonl");

    #[derive(Serialize)]
    struct Resolved<'a> {
        paths: &'a [PathBuf],
        analysis: &'a AnalyzeConfig,
        metric_log: &'a Path,
    }
    print_config(&Resolved { paths: &a.paths, analysis: &cfg, metric_log: &log_path })?;

    let files = collect_snapshot_paths(&a.paths)?;
    if files.is_empty() {
        bail!("no snapshots found");
    }
    info!("analyzing {} snapshots", files.len());
    let mut analyzer = Analyzer::new(cfg)?;
    analyze_series(&mut analyzer, &files)?;

    create_out(&cli.out)?;
    let mut log = MetricLogWriter::create(&log_path)?;
    for r in analyzer.records() {
        log.write(r)?;
        println!(
            "step {:>8}  sa_mean {:>8.4}  pos {:.3}  neg {:.3}  sigma1 {:.4}  srank {:.3}  {}",
            r.step,
            r.sa_mean,
            r.sa_frac_positive,
            r.sa_frac_negative,
            r.weight_sigma1,
            r.stable_rank,
            r.verdict.as_str()
        );
    }
    log.flush()?;
    let v = analyzer.verdict()?;
    match v.onset_step {
        Some(on) => println!("verdict: {} (onset step {on})", v.status.as_str()),
        None => println!("verdict: {}", v.status.as_str()),
    }
    Ok(status_code(v.status))
}

fn run_train_toy(cli: &Cli, a: &TrainArgs) -> Result<u8> {
    let scenario = match a.scenario {
        ScenarioArg::Stable => Scenario::Stable,
        ScenarioArg::Explosive => Scenario::Explosive,
    };
    let mut cfg: ScenarioConfig = scenario.defaults(cli.seed);
    if let Some(eta) = a.eta {
        cfg.train.eta = eta;
    }
    if let Some(dims) = &a.dims {
        if dims.len() < 3 {
            bail!("--dims needs at least three widths, got {dims:?}");
        }
        cfg.dims = dims.clone();
        cfg.train.dataset.dim = dims[0];
        cfg.train.dataset.n_classes = *dims.last().unwrap();
    }
    if let Some(steps) = a.steps {
        cfg.train.steps = steps;
    }
    if let Some(m) = &a.monitor {
        cfg.monitors = m.clone();
    }
    if a.snapshot_every > 0 {
        cfg.train.snapshot_every = a.snapshot_every;
        cfg.train.snapshot_dir = Some(cli.out.join("snapshots"));
    }
    let log_path = cli.out.join("train.jsonl");
    print_config(&cfg)?;

    create_out(&cli.out)?;
    let (_, run) = cfg.run()?;
    let mut log = MetricLogWriter::create(&log_path)?;
    for r in &run.records {
        log.write(r)?;
    }
    log.flush()?;
    info!("wrote {} records to {}", run.records.len(), log_path.display());
    if let Some(msg) = &run.aborted {
        warn!("{msg}");
    }

    println!("steps run: {}", run.steps_run);
    match run.explosion_step {
        Some(s) => println!("explosion step: {s}"),
        None => println!("explosion step: none"),
    }
    match run.collapse_onset {
        Some(s) => println!("collapse onset: {s}"),
        None => println!("collapse onset: none"),
    }
    for (layer, v) in &run.verdicts {
        println!("layer{layer}: {}", v.status.as_str());
    }
    Ok(0)
}

fn run_verify(cli: &Cli, a: &VerifyArgs) -> Result<u8> {
    let suites: Vec<Suite> = match a.suite {
        SuiteArg::All => Suite::ALL.to_vec(),
        SuiteArg::Gradient => vec![Suite::Gradient],
        SuiteArg::Perturbation => vec![Suite::Perturbation],
        SuiteArg::Growth => vec![Suite::Growth],
        SuiteArg::Lemma => vec![Suite::Lemma],
        SuiteArg::Amplification => vec![Suite::Amplification],
    };
    if a.trials == Some(0) {
        bail!("--trials must be positive");
    }

    #[derive(Serialize)]
    struct Resolved {
        suites: Vec<(Suite, usize)>,
        seed: u64,
    }
    let plan: Vec<(Suite, usize)> =
        suites.iter().map(|&s| (s, a.trials.unwrap_or_else(|| s.default_trials()))).collect();
    print_config(&Resolved { suites: plan.clone(), seed: cli.seed })?;

    let mut all_ok = true;
    for (suite, trials) in plan {
        let rep = run_suite(suite, trials, cli.seed);
        println!("[{}] {} ({} trials)", if rep.passed { "PASS" } else { "FAIL" }, suite.name(), rep.trials);
        for l in &rep.lines {
            println!("    {l}");
        }
        for f in &rep.failures {
            println!("    violated: {f}");
        }
        all_ok &= rep.passed;
    }
    Ok(if all_ok { 0 } else { EXIT_VERIFY_FAILED })
}

fn run_report(a: &ReportArgs) -> Result<u8> {
    let thresholds = Thresholds {
        weight_sigma1: a.weight_sigma1,
        grad_sigma1: a.grad_sigma1,
        max_activation: a.max_activation,
        stable_rank: a.stable_rank,
    };
    let collapse = a.collapse.config();

    #[derive(Serialize)]
    struct Resolved<'a> {
        log: &'a Path,
        format: Format,
        thresholds: &'a Thresholds,
        collapse: &'a CollapseConfig,
        explosion_factor: f64,
    }
    print_config(&Resolved {
        log: &a.log,
        format: a.format,
        thresholds: &thresholds,
        collapse: &collapse,
        explosion_factor: a.explosion_factor,
    })?;

    let records = read_metric_log(&a.log).with_context(|| format!("reading {}", a.log.display()))?;
    let rep = summarize_log(&records, &thresholds, &collapse, a.explosion_factor)?;
    match a.format {
        Format::Records => println!("{}", serde_json::to_string(&rep)?),
        Format::Table => print_table(&rep),
    }
    Ok(0)
}

fn opt<T: std::fmt::Display>(x: Option<T>) -> String {
    x.map_or_else(|| "-".to_string(), |v| v.to_string())
}

fn print_table(rep: &LogReport) {
    match (rep.explosion_step, rep.worst_status()) {
        (None, DiversityStatus::Healthy) => println!("no explosion; verdict healthy"),
        (None, s) => println!("no explosion; verdict {}", s.as_str()),
        (Some(e), _) => println!("explosion at step {e}"),
    }
    println!("{:<24} {:<16} {:>10} {:>10} {:>8}", "layer", "signal", "threshold", "step", "lead");
    for l in &rep.layers {
        println!("{:<24} {:<16} {:>10} {:>10} {:>8}", l.layer, "sa_collapse", "-", opt(l.onset), opt(l.onset_lead));
        for c in &l.crossings {
            println!(
                "{:<24} {:<16} {:>10} {:>10} {:>8}",
                l.layer,
                c.metric,
                format!("{}", c.threshold),
                opt(c.step),
                opt(c.lead)
            );
        }
        println!("{:<24} verdict: {}", l.layer, l.verdict.status.as_str());
    }
}
