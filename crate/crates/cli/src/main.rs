//! herdcast: simulate the herding task, build datasets, train and evaluate
//! the target-selection classifier, explain it, and analyze trials.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

mod config;
mod pipeline;
mod stages;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use config::PipelineConfig;
use herdcast_core::dataset::Balance;
use herdcast_core::nn::LossMode;
use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "herdcast",
    version,
    about = "Herding-task simulation, decision prediction, and explanation pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate trials with scripted herder pairs and write a trial file.
    Simulate(SimulateArgs),
    /// Export per-frame state vectors of a trial file as a matrix.
    Featurize(FeaturizeArgs),
    /// Window labeled trials into train/validation/test sample files.
    BuildSamples(BuildSamplesArgs),
    /// Train the sequence classifier on sample files.
    Train(TrainArgs),
    /// Evaluate checkpoints on test sample files.
    Eval(EvalArgs),
    /// Shapley-explain a checkpoint over test samples.
    Explain(ExplainArgs),
    /// Behavioral analytics over a trial file.
    Analyze(AnalyzeArgs),
    /// Assemble the report tables of a finished pipeline run.
    Report(ReportArgs),
    /// Run the configured pipeline stages end to end.
    Run(RunArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Herder policy: expert or novice.
    #[arg(long)]
    policy: String,
    /// Simulated pairs.
    #[arg(long, default_value_t = 6)]
    pairs: usize,
    /// Trials per pair.
    #[arg(long, default_value_t = 20)]
    trials_per_pair: usize,
    #[arg(long)]
    seed: u64,
    /// Output trial file (one JSON object per line).
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct FeaturizeArgs {
    #[arg(long)]
    trials: PathBuf,
    /// Focal herder index (0 or 1).
    #[arg(long, default_value_t = 0)]
    focal: usize,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct BuildSamplesArgs {
    #[arg(long)]
    trials: PathBuf,
    #[arg(long = "t-hor", default_value_t = 16)]
    t_hor: u16,
    #[arg(long, default_value_t = 2)]
    stride: u8,
    /// Draw equal counts of each behavioral sub-class.
    #[arg(long, conflicts_with = "representative")]
    balanced: bool,
    /// Preserve the pool's sub-class proportions.
    #[arg(long)]
    representative: bool,
    #[arg(long = "n-train", default_value_t = 8000)]
    n_train: usize,
    #[arg(long = "n-test", default_value_t = 2000)]
    n_test: usize,
    #[arg(long = "n-test-sets", default_value_t = 3)]
    n_test_sets: usize,
    #[arg(long, default_value_t = 0.10)]
    validation_fraction: f64,
    #[arg(long)]
    seed: u64,
    /// Output directory for train.hxs, val.hxs, test_XX.hxs.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Sample directory holding train.hxs and val.hxs (from build-samples).
    #[arg(long, conflicts_with_all = ["train", "val"])]
    samples: Option<PathBuf>,
    /// Training samples (.hxs).
    #[arg(long, required_unless_present = "samples")]
    train: Option<PathBuf>,
    /// Validation samples (.hxs).
    #[arg(long, required_unless_present = "samples")]
    val: Option<PathBuf>,
    /// Expected label horizon; errors if the sample files disagree.
    #[arg(long = "t-hor")]
    t_hor: Option<u16>,
    /// Hidden-width multiplier; 1.0 is the full architecture.
    #[arg(long, default_value_t = 0.25)]
    scale: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 0.0018)]
    alpha: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 200)]
    max_epochs: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 1e-4)]
    min_delta: f64,
    /// Skip feature standardization.
    #[arg(long)]
    no_standardize: bool,
    /// Loss over timesteps: final or all.
    #[arg(long, default_value = "final")]
    loss: String,
    /// Expertise tag for the checkpoint; inferred from trial ids if omitted.
    #[arg(long)]
    expertise: Option<String>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Test sample files; repeatable.
    #[arg(long, required = true)]
    test: Vec<PathBuf>,
    /// Cross-evaluation: a second checkpoint followed by its test files.
    #[arg(long, num_args = 2.., value_names = ["MODEL", "TEST"])]
    cross: Option<Vec<PathBuf>>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    model: PathBuf,
    /// Test samples to draw explained samples from.
    #[arg(long)]
    test: PathBuf,
    /// Training samples to draw the background set from.
    #[arg(long)]
    background: PathBuf,
    /// Explained sample count.
    #[arg(short = 'n', long = "n", default_value_t = 6)]
    n_samples: usize,
    #[arg(long, default_value_t = 200)]
    perms: usize,
    #[arg(long, default_value_t = 200)]
    background_size: usize,
    #[arg(long)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    trials: PathBuf,
    /// Only the inter-target movement-time tables.
    #[arg(long)]
    movement_times: bool,
    /// Only the herding performance measures table.
    #[arg(long)]
    measures: bool,
    /// Movement-time histogram bin width, milliseconds.
    #[arg(long, default_value_t = 40.0)]
    bin_ms: f64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Pipeline output directory to assemble the report for.
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Pipeline configuration file (TOML).
    #[arg(short, long)]
    config: PathBuf,
}

/// Configuration problems exit with code 2; everything else is a runtime
/// failure (exit 1).
#[derive(Debug)]
pub struct ConfigError(String);

/// Wrap a message as a configuration error (exit code 2).
pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ConfigError(msg.into()))
}

impl fmt::Display for ConfigError {
    // single line so scripts can match on it
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.replace('\n', "; "))
    }
}

impl std::error::Error for ConfigError {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if err.downcast_ref::<ConfigError>().is_some() {
                eprintln!("herdcast: error[config]: {}", one_line(&err));
                ExitCode::from(2)
            } else {
                eprintln!("herdcast: error[runtime]: {}", one_line(&err));
                ExitCode::from(1)
            }
        }
    }
}

fn one_line(err: &anyhow::Error) -> String {
    format!("{err:#}").replace('\n', "; ")
}

fn init_threads() {
    let threads = std::env::var("HERDCAST_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok());
    if let Some(n) = threads.filter(|&n| n > 0) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .ok();
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => {
            let expertise = stages::parse_expertise(&a.policy).map_err(|e| config_error(e.to_string()))?;
            let (total, ok) = stages::simulate(expertise, a.pairs, a.trials_per_pair, a.seed, &a.output)?;
            println!("{ok}/{total} successful trials -> {}", a.output.display());
            Ok(())
        }
        Command::Featurize(a) => {
            if a.focal > 1 {
                return Err(config_error("focal must be 0 or 1"));
            }
            let rows = stages::featurize(&a.trials, a.focal, &a.output)?;
            println!("{rows} rows -> {}", a.output.display());
            Ok(())
        }
        Command::BuildSamples(a) => {
            let balance = if a.representative {
                Balance::Representative
            } else {
                Balance::Balanced
            };
            let params = stages::SampleParams {
                t_hor: a.t_hor,
                stride: a.stride,
                balance,
                n_train: a.n_train,
                n_test: a.n_test,
                n_test_sets: a.n_test_sets,
                validation_fraction: a.validation_fraction,
                seed: a.seed,
            };
            stages::build_samples(&a.trials, &params, &a.output)?;
            println!("sample files -> {}", a.output.display());
            Ok(())
        }
        Command::Train(a) => {
            let loss_mode = match a.loss.as_str() {
                "final" => LossMode::FinalStep,
                "all" => LossMode::AllSteps,
                other => {
                    return Err(config_error(format!(
                        "loss must be 'final' or 'all', got '{other}'"
                    )))
                }
            };
            let expertise = match &a.expertise {
                Some(s) => Some(stages::parse_expertise(s).map_err(|e| config_error(e.to_string()))?),
                None => None,
            };
            let params = stages::TrainParams {
                scale: a.scale,
                seed: a.seed,
                alpha: a.alpha,
                batch_size: a.batch_size,
                max_epochs: a.max_epochs,
                patience: a.patience,
                min_delta: a.min_delta,
                standardize: !a.no_standardize,
                loss_mode,
                expertise,
                config_hash: 0,
                expected_horizon: a.t_hor,
            };
            let (train_path, val_path) = match (&a.samples, &a.train, &a.val) {
                (Some(dir), _, _) => (dir.join("train.hxs"), dir.join("val.hxs")),
                (None, Some(t), Some(v)) => (t.clone(), v.clone()),
                _ => {
                    return Err(config_error(
                        "pass either --samples DIR or both --train and --val",
                    ))
                }
            };
            let (epochs, acc) = stages::train(&train_path, &val_path, &params, &a.output)?;
            println!(
                "{epochs} epochs, best validation accuracy {acc:.3} -> {}",
                a.output.display()
            );
            Ok(())
        }
        Command::Eval(a) => {
            let cross_parsed;
            let cross = match &a.cross {
                None => None,
                Some(vals) if vals.len() >= 2 => {
                    cross_parsed = (vals[0].clone(), vals[1..].to_vec());
                    Some((cross_parsed.0.as_path(), cross_parsed.1.as_slice()))
                }
                Some(_) => {
                    return Err(config_error(
                        "--cross needs a checkpoint followed by at least one test file",
                    ))
                }
            };
            let json = stages::eval(&a.model, &a.test, cross, &a.output)?;
            for row in &json.rows {
                println!(
                    "{} on {}: accuracy {:.4}  precision {:.4}  recall {:.4}  F1 {:.4}",
                    row.model, row.test_set, row.accuracy, row.macro_precision, row.macro_recall, row.macro_f1
                );
            }
            if let Some(cross) = &json.cross {
                println!("cross table (mean accuracy +/- sd):");
                for (mi, row) in cross.iter().enumerate() {
                    for (di, cell) in row.iter().enumerate() {
                        println!(
                            "  model {} on {} data: {:.4} +/- {:.4}",
                            json.model_names[mi], json.model_names[di], cell.mean, cell.sd
                        );
                    }
                }
            }
            Ok(())
        }
        Command::Explain(a) => {
            let params = stages::ExplainParams {
                n_samples: a.n_samples,
                n_perms: a.perms,
                background_size: a.background_size,
                seed: a.seed,
            };
            stages::explain(&a.model, &a.test, &a.background, &params, &a.output)?;
            println!("attribution tables -> {}", a.output.display());
            Ok(())
        }
        Command::Analyze(a) => {
            let parts = match (a.movement_times, a.measures) {
                (true, false) => stages::AnalyzeParts::MovementTimes,
                (false, true) => stages::AnalyzeParts::Measures,
                _ => stages::AnalyzeParts::Both,
            };
            stages::analyze_parts(&a.trials, a.bin_ms, parts, &a.output)?;
            println!("analytics tables -> {}", a.output.display());
            Ok(())
        }
        Command::Report(a) => {
            let config_path = a.run.join("config.toml");
            let (hash, seed) = if config_path.exists() {
                let text = std::fs::read_to_string(&config_path)?;
                let cfg: PipelineConfig =
                    toml::from_str(&text).map_err(|e| config_error(e.to_string()))?;
                let mut hasher = <sha2::Sha256 as sha2::Digest>::new();
                sha2::Digest::update(&mut hasher, cfg.canonical().as_bytes());
                let digest = sha2::Digest::finalize(hasher);
                (
                    digest.iter().map(|b| format!("{b:02x}")).collect::<String>(),
                    cfg.pipeline.seed,
                )
            } else {
                ("unknown".repeat(2), 0)
            };
            let paths = pipeline::RunPaths { root: a.run };
            pipeline::assemble_report(&paths, &hash, seed)?;
            println!("report -> {}", paths.report_dir().display());
            Ok(())
        }
        Command::Run(a) => {
            let text = std::fs::read_to_string(&a.config).map_err(|e| {
                config_error(format!("cannot read {}: {e}", a.config.display()))
            })?;
            let cfg: PipelineConfig =
                toml::from_str(&text).map_err(|e| config_error(e.to_string()))?;
            cfg.validate().map_err(config_error)?;
            if cfg.pipeline.threads > 0 && std::env::var("HERDCAST_THREADS").is_err() {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.pipeline.threads)
                    .build_global()
                    .ok();
            }
            pipeline::run_pipeline(&cfg)
        }
    }
}
