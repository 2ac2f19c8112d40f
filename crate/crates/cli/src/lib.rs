//! Command-line front end: synthesis, preparation, training, evaluation,
//! routing diagnostics and gradient checking driven by one flat config.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use magnet::data::SyntheticSpec;
use magnet::train::GradCheckOptions;
use serde_json::Value;

use crate::commands::{Scope, ScoreRequest, Weights};
use crate::config::{RunConfig, SwitchMode, ViewMode};
use crate::error::CliError;

pub use crate::config::Precision;

#[derive(Parser, Debug)]
#[command(name = "magnet", version, about = "Modality-guided mixture-of-experts recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the planted block-structured dataset.
    Synth(SynthArgs),
    /// Filter, split, align features and build the content graph cache.
    Prepare(PrepareArgs),
    /// Train on a prepared directory and report test metrics.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Routing profile of a checkpoint on one split.
    Diagnose(DiagnoseArgs),
    /// Finite-difference check of the analytic gradients on a micro model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 120)]
    items: usize,
    #[arg(long, default_value_t = 4)]
    blocks: usize,
    #[arg(long, default_value_t = 32)]
    dim_a: usize,
    #[arg(long, default_value_t = 16)]
    dim_s: usize,
    #[arg(long, default_value_t = 0.1)]
    density: f64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
}

/// Configuration sources, applied as defaults, then `--config`, then the
/// flags, then each `--set` in order.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Flat JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override; the value is parsed as JSON when possible.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Neighbors kept per item in each modality.
    #[arg(long)]
    knn_k: Option<usize>,
    /// Induced candidates kept per user.
    #[arg(long)]
    expand_r: Option<usize>,
    /// Single fusion head over concatenated representations.
    #[arg(long)]
    no_moe: bool,
    /// Trainable per-expert triplets instead of fixed templates.
    #[arg(long)]
    free_templates: bool,
    /// Switch stages after half the epoch budget.
    #[arg(long)]
    fixed_step_switch: bool,
    /// Stay in the coverage stage for the whole run.
    #[arg(long, conflicts_with_all = ["confidence_only", "fixed_step_switch"])]
    coverage_only: bool,
    /// Start in the confidence stage and stay there.
    #[arg(long, conflicts_with = "fixed_step_switch")]
    confidence_only: bool,
    /// Drop the cross-view contrastive term.
    #[arg(long)]
    no_view_ctr: bool,
    /// Drop both routing regularizers.
    #[arg(long)]
    no_routing_reg: bool,
    /// Encode on the observed graph only.
    #[arg(long)]
    single_view: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(k) = self.knn_k {
            cfg.knn_k = k;
        }
        if let Some(r) = self.expand_r {
            cfg.expand_r = r;
        }
        if self.no_moe && self.free_templates {
            return Err(CliError::Usage("--no-moe and --free-templates are exclusive".into()));
        }
        if self.no_moe {
            cfg.fusion = magnet::model::FusionMode::NoMoe;
        }
        if self.free_templates {
            cfg.fusion = magnet::model::FusionMode::FreeTemplates;
        }
        if self.fixed_step_switch {
            cfg.switch = SwitchMode::FixedStep;
        }
        if self.coverage_only {
            cfg.switch = SwitchMode::CoverageOnly;
        }
        if self.confidence_only {
            cfg.switch = SwitchMode::ConfidenceOnly;
        }
        if self.no_view_ctr {
            cfg.lambda_ctr = 0.0;
        }
        if self.no_routing_reg {
            cfg.lambda_r = 0.0;
        }
        if self.single_view {
            cfg.view = ViewMode::Sv;
        }
        for s in &self.set {
            cfg.set(s)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct PrepareArgs {
    #[arg(long)]
    out: PathBuf,
    /// Directory holding `interactions.tsv`, `features_a.mgf` and `features_s.mgf`.
    #[arg(long)]
    from: Option<PathBuf>,
    #[arg(long)]
    interactions: Option<PathBuf>,
    #[arg(long)]
    features_a: Option<PathBuf>,
    #[arg(long)]
    features_s: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Prepared data directory.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for logs, reports and the checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Continue from `OUT/checkpoint`.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, value_enum, default_value_t = Weights::Best)]
    weights: Weights,
}

impl ScoreArgs {
    fn request(&self) -> ScoreRequest<'_> {
        ScoreRequest {
            data_dir: &self.data,
            checkpoint: &self.checkpoint,
            split: &self.split,
            weights: self.weights,
        }
    }
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    score: ScoreArgs,
    /// Per-user metrics CSV.
    #[arg(long)]
    per_user: Option<PathBuf>,
    /// Directory to write `eval_<split>.json` into.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[command(flatten)]
    score: ScoreArgs,
    /// Directory for `routing.csv` and `diagnostics.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Scope::All)]
    scope: Scope,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    h: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Directory to write `gradcheck.json` into.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

impl Command {
    fn out(&self) -> Option<&Path> {
        match self {
            Command::Synth(a) => Some(&a.out),
            Command::Prepare(a) => Some(&a.out),
            Command::Train(a) => Some(&a.out),
            Command::Evaluate(a) => a.out.as_deref(),
            Command::Diagnose(a) => Some(&a.out),
            Command::Gradcheck(a) => a.out.as_deref(),
        }
    }

    fn execute(&self) -> Result<Value, CliError> {
        match self {
            Command::Synth(a) => {
                let spec = SyntheticSpec {
                    num_users: a.users,
                    num_items: a.items,
                    num_blocks: a.blocks,
                    feature_dim_a: a.dim_a,
                    feature_dim_s: a.dim_s,
                    density: a.density,
                    noise: a.noise,
                    seed: a.seed,
                };
                commands::synth(&spec, &a.out)
            }
            Command::Prepare(a) => {
                let mut cfg = a.config.resolve()?;
                if let Some(dir) = &a.from {
                    cfg.interactions = Some(dir.join("interactions.tsv"));
                    cfg.features_a = Some(dir.join("features_a.mgf"));
                    cfg.features_s = Some(dir.join("features_s.mgf"));
                }
                for (slot, flag) in [
                    (&mut cfg.interactions, &a.interactions),
                    (&mut cfg.features_a, &a.features_a),
                    (&mut cfg.features_s, &a.features_s),
                ] {
                    if flag.is_some() {
                        *slot = flag.clone();
                    }
                }
                commands::prepare(&cfg, &a.out)
            }
            Command::Train(a) => commands::train(&a.config.resolve()?, &a.data, &a.out, a.resume),
            Command::Evaluate(a) => {
                let report = commands::evaluate(&a.score.request(), a.per_user.as_deref())?;
                if let Some(out) = &a.out {
                    io::write_json(&out.join(format!("eval_{}.json", a.score.split)), &report)?;
                }
                Ok(report)
            }
            Command::Diagnose(a) => commands::diagnose(&a.score.request(), &a.out),
            Command::Gradcheck(a) => {
                let cfg = a.config.resolve()?;
                let opts = GradCheckOptions {
                    h: a.h,
                    tolerance: a.tolerance,
                    ..Default::default()
                };
                let report = commands::gradcheck(&cfg, a.scope, &opts)?;
                if let Some(out) = &a.out {
                    io::write_json(&out.join("gradcheck.json"), &report)?;
                }
                if report["passed"] == Value::Bool(true) {
                    Ok(report)
                } else {
                    println!("{report}");
                    let failing: Vec<&str> = report["failing"].as_array().into_iter().flatten().filter_map(Value::as_str).collect();
                    Err(CliError::GradCheck(failing.join("; ")))
                }
            }
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("MAGNET_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("MAGNET_THREADS={raw:?} is not a positive integer")))?;
    // A pool that already exists in this process keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn report_error(err: &CliError, out: Option<&Path>) -> i32 {
    let record = err.record();
    eprintln!("{record}");
    if let Some(dir) = out {
        if let Err(e) = io::write_json(&dir.join("error.json"), &record) {
            eprintln!("could not write the error record: {e}");
        }
    }
    err.code()
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprint!("{e}");
            return report_error(&CliError::Usage(e.kind().to_string()), None);
        }
    };
    let out = cli.command.out();
    if let Err(e) = configure_threads() {
        return report_error(&e, out);
    }
    match cli.command.execute() {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => report_error(&e, out),
    }
}
