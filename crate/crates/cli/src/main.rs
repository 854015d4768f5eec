use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use hsomrl::checkpoint::CheckpointError;
use hsomrl::config::{ConfigError, RunConfig};
use hsomrl::contrastive::LossVariant;
use hsomrl::datagen::DataError;
use hsomrl::eval::{EvalError, QualityBucket};
use hsomrl::iql::IqlError;
use hsomrl::pipeline::{self, PipelineError, RunLayout, Split};

const THREADS_VAR: &str = "HSOMRL_THREADS";

/// Offline meta-RL pipeline: data generation, contrastive context encoders,
/// IQL policies and quality-bucketed evaluation.
#[derive(Parser, Debug)]
#[command(name = "hsomrl", version)]
struct Cli {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Environment family (overrides `family`).
    #[arg(long, global = true)]
    family: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    Scl,
    Hg,
    Hp,
    Hphg,
}

impl From<LossArg> for LossVariant {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Scl => LossVariant::Scl,
            LossArg::Hg => LossVariant::Hg,
            LossArg::Hp => LossVariant::Hp,
            LossArg::Hphg => LossVariant::Hphg,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the train and test datasets.
    GenData,
    /// Train a context encoder on the train split.
    TrainEncoder {
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
    },
    /// Train an IQL policy with a frozen encoder.
    TrainPolicy {
        #[arg(long)]
        encoder: PathBuf,
    },
    /// Evaluate a policy on test tasks with contexts from one quality bucket.
    Eval {
        /// low, medium, high or a bucket index 0-9.
        #[arg(long)]
        bucket: Option<String>,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Uniformity, alignment and separability of an embeddings CSV.
    Metrics {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Uniformity temperature (overrides `metrics.uniformity_temperature`).
        #[arg(long)]
        t: Option<f64>,
    },
    /// Write context embeddings of a dataset split as CSV.
    ExportEmbeddings {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        bucket: Option<String>,
        /// Rows per trajectory; 2 emits paired random crops for alignment.
        #[arg(long, default_value_t = 1)]
        views: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Process exit status per error class.
fn exit_code(e: &PipelineError) -> u8 {
    match e {
        PipelineError::Config(ConfigError::Locked(_)) => 8,
        PipelineError::Config(ConfigError::Io { .. }) | PipelineError::Io { .. } => 4,
        PipelineError::Config(_) => 2,
        PipelineError::MissingInput { .. } | PipelineError::Data(DataError::MissingManifest(_)) => 3,
        PipelineError::Data(DataError::Io { .. }) | PipelineError::Checkpoint(CheckpointError::Io { .. }) => 4,
        PipelineError::Eval(EvalError::Io { .. }) => 4,
        PipelineError::Data(_) | PipelineError::Checkpoint(_) => 5,
        PipelineError::FamilyMismatch { .. }
        | PipelineError::ContextMismatch { .. }
        | PipelineError::EncoderIdentity
        | PipelineError::Iql(IqlError::EncoderMismatch { .. }) => 6,
        PipelineError::Eval(EvalError::BadBucket(_) | EvalError::BucketOutOfRange { .. } | EvalError::Config(_)) => 2,
        PipelineError::Contrastive(_) | PipelineError::Iql(_) | PipelineError::Eval(_) | PipelineError::Env(_) => 7,
    }
}

fn effective_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            if !path.exists() {
                return Err(PipelineError::MissingInput {
                    what: "config file",
                    path: path.clone(),
                });
            }
            RunConfig::load(path)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(family) = &cli.family {
        cfg.family = family.clone();
    }
    match &cli.command {
        Command::TrainEncoder { loss: Some(l) } => cfg.encoder.loss.variant = (*l).into(),
        Command::Eval { bucket, episodes, .. } => {
            if let Some(b) = bucket {
                cfg.eval.bucket = b.clone();
            }
            if let Some(n) = episodes {
                cfg.eval.episodes = *n;
            }
        }
        Command::Metrics { t: Some(t), .. } => cfg.metrics.uniformity_temperature = *t,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_bucket(s: &str) -> Result<QualityBucket, PipelineError> {
    Ok(s.parse::<QualityBucket>()?)
}

fn configure_threads() -> Result<(), PipelineError> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ConfigError::Invalid(format!("{THREADS_VAR} must be a positive integer, got `{raw}`")))?;
    // a second build fails harmlessly if a pool already exists
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    configure_threads()?;
    let cfg = effective_config(cli)?;
    let layout = RunLayout::new(&cfg.out_dir);
    match &cli.command {
        Command::GenData => {
            let (train, test) = pipeline::gen_data(&cfg, &layout)?;
            println!("wrote {} and {}", display(&train), display(&test));
        }
        Command::TrainEncoder { .. } => {
            let ckpt = pipeline::train_encoder_stage(&cfg, &layout)?;
            println!("wrote {}", display(&ckpt));
        }
        Command::TrainPolicy { encoder } => {
            let ckpt = pipeline::train_policy_stage(&cfg, &layout, encoder)?;
            println!("wrote {}", display(&ckpt));
        }
        Command::Eval { encoder, policy, .. } => {
            let bucket = cfg.bucket()?;
            let (path, report) = pipeline::eval_stage(&cfg, &layout, encoder, policy, bucket)?;
            println!(
                "bucket {bucket}: {:.3} ± {:.3} over {} tasks ({})",
                report.aggregate.mean,
                report.aggregate.std,
                report.per_task.len(),
                display(&path)
            );
        }
        Command::Metrics { embeddings, output, .. } => {
            let out = output.clone().unwrap_or_else(|| layout.root.join("metrics.json"));
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|source| PipelineError::Io {
                    path: display(parent),
                    source,
                })?;
            }
            let m = pipeline::metrics_stage(&cfg, embeddings, &out)?;
            println!("{}", serde_json::to_string(&m).expect("metrics serialize"));
        }
        Command::ExportEmbeddings {
            encoder,
            split,
            bucket,
            views,
            output,
        } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let bucket = bucket.as_deref().map(parse_bucket).transpose()?;
            let out = output
                .clone()
                .unwrap_or_else(|| layout.root.join(format!("embeddings_{}.csv", split.name())));
            let rows = pipeline::export_embeddings_stage(&cfg, &layout, encoder, split, bucket, *views, &out)?;
            println!("wrote {rows} rows to {}", display(&out));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
