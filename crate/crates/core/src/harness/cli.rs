//! `qndfb` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::analysis::estimate_exponent;
use crate::conditions::check_parameter_domain;
use crate::model::spectral_structure;

use super::batch::{run_batch, RunOptions};
use super::config::{ExperimentConfig, ModelConfig};
use super::output::{read_distance_series, resolve_out_dir, write_summary, write_trajectory_file};
use super::{scenarios, HarnessError, EXIT_USAGE, EXIT_VIOLATION};

#[derive(Debug, Parser)]
#[command(
    name = "qndfb",
    version,
    about = "Feedback stabilization under QND measurement: checks, simulations, exponent fits"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the condition report for a model and target as JSON.
    Check(CheckArgs),
    /// Run a Monte Carlo batch and write summary.json (and trajectories.csv).
    Simulate(SimulateArgs),
    /// Fit the sample Lyapunov exponent from a trajectory CSV.
    Exponent(ExponentArgs),
    /// List the stock scenarios, or write their configs with --out-dir.
    Scenarios(ScenarioArgs),
}

/// Where the experiment comes from.
#[derive(Debug, Args)]
pub struct Source {
    /// Experiment config (JSON).
    #[arg(long, conflicts_with = "scenario")]
    pub config: Option<PathBuf>,
    /// Stock scenario name.
    #[arg(long)]
    pub scenario: Option<String>,
}

impl Source {
    fn load(&self) -> Result<Option<ExperimentConfig>, HarnessError> {
        match (&self.config, &self.scenario) {
            (Some(p), _) => ExperimentConfig::load(p).map(Some),
            (None, Some(name)) => scenarios::by_name(name)
                .map(Some)
                .ok_or_else(|| HarnessError::Config(format!("unknown scenario {name}"))),
            (None, None) => Ok(None),
        }
    }
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub source: Source,
    /// Stock model name or model file, used when no config is given.
    #[arg(long)]
    pub model: Option<String>,
    /// Target subspace (0-based); overrides the config.
    #[arg(long)]
    pub target: Option<usize>,
    /// Record a user assertion that H4 holds.
    #[arg(long)]
    pub assert_h4: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub trajectories: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Also write trajectories.csv.
    #[arg(long)]
    pub dump: bool,
}

#[derive(Debug, Args)]
pub struct ExponentArgs {
    /// Trajectory CSV (from `simulate --dump`, or any file with trajectory_id, t and distance columns).
    pub input: PathBuf,
    /// Fit window start; defaults to 20% of the longest series.
    #[arg(long)]
    pub burn_in: Option<f64>,
    /// Numerical floor; the window ends once the distance drops below 10·floor.
    #[arg(long, default_value_t = 1e-10)]
    pub floor: f64,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    /// Write `<name>.json` for each stock scenario here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Parses `argv` and runs; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32, HarnessError> {
    match cmd {
        Command::Check(a) => check(a),
        Command::Simulate(a) => simulate(a),
        Command::Exponent(a) => exponent(a),
        Command::Scenarios(a) => list_scenarios(a),
    }
}

fn check(a: CheckArgs) -> Result<i32, HarnessError> {
    let cfg = a.source.load()?;
    let model_cfg = match (&a.model, &cfg) {
        (Some(m), _) if scenarios::STOCK_MODELS.contains(&m.as_str()) => ModelConfig::stock(m),
        (Some(m), _) => ModelConfig { path: Some(PathBuf::from(m)), ..Default::default() },
        (None, Some(c)) => c.model.clone(),
        (None, None) => return Err(HarnessError::Config("check needs --config, --scenario or --model".into())),
    };
    let model = model_cfg.build(None)?;
    let spectral = spectral_structure(&model)?;
    let target = a.target.or(cfg.as_ref().map(|c| c.target)).unwrap_or(0);
    let mut report = check_parameter_domain(&model, &spectral, target)?;
    report.h4.user_asserted = a.assert_h4 || cfg.as_ref().is_some_and(|c| c.h4_asserted);
    let verdicts: serde_json::Map<String, serde_json::Value> =
        report.verdicts().into_iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
    let doc = json!({ "verdicts": verdicts, "report": report });
    println!("{}", serde_json::to_string_pretty(&doc).expect("report serializes"));
    Ok(0)
}

fn simulate(a: SimulateArgs) -> Result<i32, HarnessError> {
    let mut cfg =
        a.source.load()?.ok_or_else(|| HarnessError::Config("simulate needs --config or --scenario".into()))?;
    if let Some(s) = a.seed {
        cfg.master_seed = s;
    }
    if let Some(n) = a.trajectories {
        cfg.n_trajectories = n;
    }
    if let Some(dt) = a.dt {
        cfg.dt = dt;
    }
    if let Some(h) = a.horizon {
        cfg.horizon = h;
    }
    if a.threads == Some(0) {
        return Err(HarnessError::Config("--threads must be at least 1".into()));
    }
    let out = resolve_out_dir(a.out_dir.as_deref(), cfg.outputs.out_dir.as_deref());
    let verbose = cfg.outputs.verbosity > 0;
    if verbose {
        eprintln!("running {} ({} trajectories)", cfg.name, cfg.n_trajectories);
    }
    let result = run_batch(&cfg, RunOptions { threads: a.threads })?;
    let summary_path = write_summary(&result, &out)?;
    if a.dump || cfg.outputs.trajectories {
        write_trajectory_file(&result, &out)?;
    }
    let s = &result.summary;
    let mut o = std::io::stdout().lock();
    writeln!(o, "scenario        {}", s.name)?;
    for w in &s.warnings {
        writeln!(o, "warning         {w}")?;
    }
    if s.conditions_flagged {
        writeln!(o, "conditions      FLAGGED (some hypothesis for this law fails)")?;
    }
    let counts: Vec<String> = s.tally.counts.iter().map(|c| c.to_string()).collect();
    writeln!(o, "terminal tally  [{}] unresolved {}", counts.join(", "), s.tally.unresolved)?;
    if let Some(e) = &s.exponent {
        writeln!(o, "exponent        {:.4} ± {:.4} (bound {:?})", e.slope, e.ci_halfwidth, s.exponent_bound)?;
    }
    if let Some(e) = &s.exponent_error {
        writeln!(o, "exponent        n/a: {e}")?;
    }
    if let Some(e) = &s.escape {
        writeln!(o, "escape          {}/{} exited, mean {:?}", e.exited, e.total, e.mean)?;
    }
    writeln!(o, "hard violations {}", s.hard_violations)?;
    writeln!(o, "summary         {}", summary_path.display())?;
    Ok(if result.is_clean() { 0 } else { EXIT_VIOLATION })
}

fn exponent(a: ExponentArgs) -> Result<i32, HarnessError> {
    let series = read_distance_series(&a.input)?;
    let burn_in =
        a.burn_in.unwrap_or_else(|| 0.2 * series.iter().filter_map(|s| s.t.last().copied()).fold(0.0, f64::max));
    let est = estimate_exponent(&series, burn_in, a.floor)?;
    println!("{}", serde_json::to_string_pretty(&est).expect("estimate serializes"));
    Ok(0)
}

fn list_scenarios(a: ScenarioArgs) -> Result<i32, HarnessError> {
    let all = scenarios::all();
    if let Some(dir) = a.out_dir {
        std::fs::create_dir_all(&dir)?;
        for c in &all {
            std::fs::write(dir.join(format!("{}.json", c.name)), c.to_json())?;
        }
    }
    for c in &all {
        println!("{:<30} {}", c.name, c.description);
    }
    Ok(0)
}
