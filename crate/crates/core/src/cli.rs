//! `copsamp` command-line interface.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{CopsError, Result};
use crate::io::{self, CsvOptions};
use crate::model::fisher_info;
use crate::sampler::{draw_subsample, plan_from_values, SamplingConfig, ScoreTransform, DEFAULT_BETA_FLOOR};
use crate::selfcheck::run_selfcheck;
use crate::simulation::{generate_dataset, run_experiment, ExperimentConfig, ExperimentReport, PAPER_SIM_JSON};
use crate::solver::{fit_mle, fit_weighted_mle, FitConfig};
use crate::uncertainty::{score_dataset, train_ensemble, EnsembleMode, ExactScorer, ProbeEnsemble, ScoreKind};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "copsamp", version, about = "Uncertainty-driven subsampling for softmax regression")]
pub struct Cli {
    /// Master seed. Defaults to the config's seed for `simulate`, 0 elsewhere.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the corrupted-logistic simulation experiment.
    Simulate(SimulateArgs),
    /// Write one dataset drawn from a simulation config.
    Generate(GenerateArgs),
    /// Fit softmax regression by (weighted) maximum likelihood.
    Fit(FitArgs),
    /// Train a probe ensemble on a labeled dataset.
    TrainEnsemble(TrainArgs),
    /// Score every row of a dataset.
    Score(ScoreArgs),
    /// Build a sampling plan from scores and draw a subsample.
    Sample(SampleArgs),
    /// Run the built-in numerical checks.
    Selfcheck(SelfcheckArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Experiment config (JSON). Uses the bundled three-atom design if absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the number of trials.
    #[arg(long)]
    pub trials: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corruption case name.
    #[arg(long)]
    pub case: String,
    /// Draw labels without the corruption offsets.
    #[arg(long)]
    pub clean: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Column of per-row weights.
    #[arg(long)]
    pub weights_col: Option<String>,
    /// Number of non-reference classes (inferred from labels if absent).
    #[arg(long)]
    pub classes: Option<usize>,
    /// Exit 1 when the solver does not converge.
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub max_iters: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Splits,
    Bootstrap,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub members: usize,
    #[arg(long, value_enum, default_value = "splits")]
    pub mode: ModeArg,
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Coreset,
    Active,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EstimatorArg {
    Ensemble,
    Exact,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ensemble: PathBuf,
    #[arg(long, value_enum, default_value = "coreset")]
    pub kind: KindArg,
    #[arg(long, value_enum, default_value = "ensemble")]
    pub estimator: EstimatorArg,
    /// Multiply ensemble scores by the probe size.
    #[arg(long)]
    pub calibrate: bool,
    /// Ridge for the exact estimator (default scales with the trace).
    #[arg(long)]
    pub ridge: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TransformArg {
    Sqrt,
    Identity,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    pub r: i64,
    #[arg(long)]
    pub alpha_mult: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_BETA_FLOOR)]
    pub beta_floor: f64,
    #[arg(long, value_enum, default_value = "sqrt")]
    pub transform: TransformArg,
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    /// Skip the ensemble/exact correspondence check.
    #[arg(long)]
    pub quick: bool,
}

/// Provenance attached to every command's output.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: Value,
    pub inputs: Vec<String>,
    /// File names relative to the output directory.
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration_secs: Option<f64>,
}

impl RunManifest {
    fn new(command: &str, seed: u64, config: Value, inputs: Vec<String>, outputs: &[&str]) -> Self {
        Self {
            command: command.to_string(),
            version: VERSION.to_string(),
            seed,
            config,
            inputs,
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            duration_secs: None,
        }
    }

    fn write(mut self, out: &Path, started: Instant) -> Result<()> {
        self.duration_secs = Some(started.elapsed().as_secs_f64());
        io::write_json(&out.join("manifest.json"), &self)
    }
}

/// Process exit status for an error.
pub fn exit_code(err: &CopsError) -> i32 {
    match err {
        CopsError::InvalidInput(_) | CopsError::DimensionMismatch { .. } | CopsError::Parse(_) => 2,
        CopsError::SingularInformation(_) | CopsError::Labeling { .. } | CopsError::Io(_) => 1,
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

/// Runs a parsed command line and returns the process exit status.
pub fn run(cli: Cli) -> i32 {
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let started = Instant::now();
    let result = match &cli.command {
        Command::Simulate(a) => simulate(&cli, a, started),
        Command::Generate(a) => generate(&cli, a, started),
        Command::Fit(a) => fit(&cli, a, started),
        Command::TrainEnsemble(a) => train(&cli, a, started),
        Command::Score(a) => score(&cli, a, started),
        Command::Sample(a) => sample(&cli, a, started),
        Command::Selfcheck(a) => selfcheck(&cli, a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<(ExperimentConfig, String)> {
    let (config, origin): (ExperimentConfig, String) = match path {
        Some(p) => (io::read_json(p)?, display(p)),
        None => (io::parse_json(PAPER_SIM_JSON, "paper_sim.json")?, "bundled:paper_sim.json".into()),
    };
    config.validate()?;
    Ok((config, origin))
}

fn trials_csv(report: &ExperimentReport) -> String {
    let dims = report
        .records
        .first()
        .map_or(0, |r| r.result.param_error_components.len());
    let mut out = String::from("method,case");
    for j in 0..dims {
        out.push_str(&format!(",param_error_d{}", j + 1));
    }
    out.push_str(",param_error_l2,regret,seed\n");
    for rec in &report.records {
        out.push_str(&format!("{},{}", rec.result.method, rec.case));
        for e in &rec.result.param_error_components {
            out.push_str(&format!(",{}", io::fmt_f64(*e)));
        }
        out.push_str(&format!(
            ",{},{},{}\n",
            io::fmt_f64(rec.result.param_error_l2),
            io::fmt_f64(rec.result.regret),
            rec.result.seed
        ));
    }
    out
}

fn simulate(cli: &Cli, args: &SimulateArgs, started: Instant) -> Result<i32> {
    let (mut config, origin) = load_config(args.config.as_deref())?;
    if let Some(t) = args.trials {
        if t == 0 {
            return Err(CopsError::InvalidInput("--trials must be at least 1".into()));
        }
        config.trials = t;
    }
    let seed = cli.seed.unwrap_or(config.seed);
    config.seed = seed;
    let methods = config.methods();
    let report = run_experiment(&config, &methods, config.trials, seed)?;
    for f in &report.failures {
        log::warn!("trial {} of {} / {} failed: {}", f.trial, f.case, f.method, f.error);
    }
    let manifest = RunManifest::new(
        "simulate",
        seed,
        to_value(&config),
        vec![origin],
        &["report.json", "trials.csv"],
    );
    io::write_json(&cli.out.join("report.json"), &json!({ "manifest": manifest, "report": report }))?;
    io::write_atomic(&cli.out.join("trials.csv"), trials_csv(&report).as_bytes())?;
    manifest.write(&cli.out, started)?;
    for s in &report.summaries {
        println!(
            "{:<16} {:<16} regret {:.6e}  l2 {:.4}",
            s.case, s.method, s.regret.mean, s.param_error_l2.mean
        );
    }
    Ok(0)
}

fn generate(cli: &Cli, args: &GenerateArgs, started: Instant) -> Result<i32> {
    let (config, origin) = load_config(args.config.as_deref())?;
    let case = config
        .cases
        .iter()
        .find(|c| c.name == args.case)
        .ok_or_else(|| CopsError::InvalidInput(format!("no corruption case named `{}`", args.case)))?;
    let seed = cli.seed.unwrap_or(0);
    let data = generate_dataset(&config.spec_for(case)?, seed, !args.clean)?;
    io::write_dataset_csv(&cli.out.join("data.csv"), &data)?;
    RunManifest::new(
        "generate",
        seed,
        json!({ "case": args.case, "clean": args.clean }),
        vec![origin],
        &["data.csv"],
    )
    .write(&cli.out, started)?;
    Ok(0)
}

fn fit(cli: &Cli, args: &FitArgs, started: Instant) -> Result<i32> {
    let loaded = io::read_dataset_csv(
        &args.data,
        &CsvOptions {
            classes: args.classes,
            weights_col: args.weights_col.clone(),
            ignore_labels: false,
        },
    )?;
    let mut config = FitConfig::default();
    if let Some(m) = args.max_iters {
        config.max_iters = m;
    }
    config.validate()?;
    let report = match &loaded.weights {
        Some(w) => fit_weighted_mle(&loaded.data, w, &config)?,
        None => fit_mle(&loaded.data, &config)?,
    };
    let manifest = RunManifest::new(
        "fit",
        cli.seed.unwrap_or(0),
        json!({ "fit": config, "weights_col": args.weights_col, "classes": loaded.data.classes() }),
        vec![display(&args.data)],
        &["fit.json"],
    );
    io::write_json(&cli.out.join("fit.json"), &json!({ "manifest": manifest, "fit": report }))?;
    manifest.write(&cli.out, started)?;
    if !report.converged {
        log::warn!(
            "solver stopped after {} iterations with gradient norm {:e}",
            report.iterations,
            report.final_grad_norm
        );
        if args.strict {
            eprintln!("error: solver did not converge");
            return Ok(1);
        }
    }
    Ok(0)
}

fn train(cli: &Cli, args: &TrainArgs, started: Instant) -> Result<i32> {
    let loaded = io::read_dataset_csv(
        &args.data,
        &CsvOptions {
            classes: args.classes,
            ..Default::default()
        },
    )?;
    let mode = match args.mode {
        ModeArg::Splits => EnsembleMode::IndependentSplits,
        ModeArg::Bootstrap => EnsembleMode::Bootstrap,
    };
    let seed = cli.seed.unwrap_or(0);
    let ensemble = train_ensemble(&loaded.data, args.members, mode, seed, &FitConfig::default())?;
    io::write_json(&cli.out.join("ensemble.json"), &ensemble)?;
    RunManifest::new(
        "train-ensemble",
        seed,
        json!({ "members": args.members, "mode": mode }),
        vec![display(&args.data)],
        &["ensemble.json"],
    )
    .write(&cli.out, started)?;
    Ok(0)
}

fn score(cli: &Cli, args: &ScoreArgs, started: Instant) -> Result<i32> {
    let ensemble: ProbeEnsemble = io::read_json(&args.ensemble)?;
    let kind = match args.kind {
        KindArg::Coreset => ScoreKind::Coreset,
        KindArg::Active => ScoreKind::Active,
    };
    let loaded = io::read_dataset_csv(
        &args.data,
        &CsvOptions {
            classes: Some(ensemble.classes()),
            weights_col: None,
            ignore_labels: kind == ScoreKind::Active,
        },
    )?;
    let data = loaded.data;
    CopsError::check_dim("dataset dimension", ensemble.dim(), data.dim())?;
    let scores = match args.estimator {
        EstimatorArg::Ensemble => {
            let s = score_dataset(&ensemble, &data, kind)?;
            if args.calibrate {
                s.scaled(ensemble.probe_size() as f64)
            } else {
                s
            }
        }
        EstimatorArg::Exact => {
            let beta = ensemble.mean().clone();
            let info = fisher_info(&beta, &data)?;
            let scorer = ExactScorer::new(beta, &info, args.ridge)?;
            score_dataset(&scorer, &data, kind)?
        }
    };
    io::write_scores_csv(&cli.out.join("scores.csv"), &scores.u)?;
    RunManifest::new(
        "score",
        cli.seed.unwrap_or(0),
        json!({
            "kind": scores.kind,
            "estimator": scores.estimator,
            "calibrate": args.calibrate,
            "ridge": args.ridge,
        }),
        vec![display(&args.data), display(&args.ensemble)],
        &["scores.csv"],
    )
    .write(&cli.out, started)?;
    Ok(0)
}

fn sample(cli: &Cli, args: &SampleArgs, started: Instant) -> Result<i32> {
    if args.r <= 0 {
        return Err(CopsError::InvalidInput(format!("--r must be at least 1, got {}", args.r)));
    }
    let u = io::read_scores_csv(&args.scores)?;
    let seed = cli.seed.unwrap_or(0);
    let mut config = SamplingConfig::new(args.r as usize, seed);
    config.alpha_multiplier = args.alpha_mult;
    config.beta_floor = args.beta_floor;
    config.transform = match args.transform {
        TransformArg::Sqrt => ScoreTransform::Sqrt,
        TransformArg::Identity => ScoreTransform::Identity,
    };
    let plan = plan_from_values(&u, &config)?;
    let subsample = draw_subsample(&plan, u.len(), config.subsample_size, seed)?;
    let manifest = RunManifest::new(
        "sample",
        seed,
        to_value(&config),
        vec![display(&args.scores)],
        &["subsample.csv", "plan.json"],
    );
    io::write_atomic(&cli.out.join("subsample.csv"), io::subsample_to_csv(&subsample).as_bytes())?;
    io::write_json(&cli.out.join("plan.json"), &json!({ "manifest": manifest, "plan": plan }))?;
    manifest.write(&cli.out, started)?;
    Ok(0)
}

fn selfcheck(cli: &Cli, args: &SelfcheckArgs) -> Result<i32> {
    let outcomes = run_selfcheck(args.quick, cli.seed.unwrap_or(0))?;
    for o in &outcomes {
        println!("{}", o.line());
    }
    Ok(if outcomes.iter().all(|o| o.passed) { 0 } else { 1 })
}
