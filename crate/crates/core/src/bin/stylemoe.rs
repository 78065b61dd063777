use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stylemoe::commands::{self, ErrorRecord, JudgeChoice};
use stylemoe::config::RunConfig;
use stylemoe::Error;

#[derive(Parser)]
#[command(name = "stylemoe", version, about = "Style-routed mixture of LoRA experts at desk scale")]
struct Cli {
    /// Run configuration (TOML). Defaults to the desk profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a preset configuration (desk or paper).
    Config {
        #[arg(long, default_value = "desk")]
        preset: String,
    },
    /// Generate content scenes, stylizations and a triplet manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Encoder checkpoint used for reference selection instead of surrogate features.
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Filter a manifest with a judge (`mock` or `remote:URL`).
    Curate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "mock")]
        judge: String,
    },
    /// Train the style encoder contrastively on a manifest.
    TrainEncoder {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Pretrain the base model if needed, then train the MoE adapters.
    TrainStylizer {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        /// Pretrained base checkpoint; pretrained from the manifest when absent.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Render a content image in the style of a reference image.
    Stylize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        style: PathBuf,
        /// Content category index.
        #[arg(long, default_value_t = 0)]
        category: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Expert-overlap IoU for similar and dissimilar style pairs.
    EvalIou {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        split: Option<String>,
    },
    /// Top-1 style retrieval accuracy of an encoder.
    EvalRetrieval {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        split: Option<String>,
    },
    /// Score stylizations with a semantic judge.
    EvalSemantic {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "mock")]
        judge: String,
        #[arg(long, default_value_t = 40)]
        limit: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare frozen-pretrained and random-trainable encoders in stage 2.
    AblateConvergence {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
    },
}

fn print_json(v: &impl serde::Serialize) -> Result<(), Error> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    let seed = cli.seed.unwrap_or(cfg.seed);
    match cli.command {
        Command::Config { preset } => {
            let c = match preset.as_str() {
                "desk" => RunConfig::desk(),
                "paper" => RunConfig::paper(),
                other => return Err(Error::Config(format!("unknown preset {other:?}"))),
            };
            print!("{}", c.to_toml()?);
        }
        Command::GenData { out, encoder } => {
            let m = commands::cmd_gen_data(&cfg, &out, seed, encoder.as_deref())?;
            print_json(&serde_json::json!({ "manifest": m }))?;
        }
        Command::Curate { manifest, judge } => {
            let (outcome, path) = commands::cmd_curate(&cfg, &manifest, &judge.parse::<JudgeChoice>()?)?;
            print_json(&serde_json::json!({
                "curated": path,
                "kept": outcome.kept.len(),
                "rejected": outcome.rejected.len(),
                "held": outcome.held.len(),
            }))?;
            if !outcome.held.is_empty() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::TrainEncoder { manifest, out, steps } => {
            commands::cmd_train_encoder(&cfg, &manifest, &out, seed, steps)?;
            print_json(&serde_json::json!({ "checkpoint": out }))?;
        }
        Command::TrainStylizer {
            manifest,
            encoder,
            out,
            iterations,
            base,
        } => {
            let s = commands::cmd_train_stylizer(&cfg, &manifest, &encoder, &out, seed, iterations, base.as_deref())?;
            print_json(&s)?;
        }
        Command::Stylize {
            model,
            content,
            style,
            category,
            out,
            steps,
        } => {
            commands::cmd_stylize(&model, &content, &style, category, &out, steps, seed)?;
            print_json(&serde_json::json!({ "image": out }))?;
        }
        Command::EvalIou {
            model,
            manifest,
            samples,
            out,
            split,
        } => {
            let r = commands::cmd_eval_iou(&cfg, &model, &manifest, samples.unwrap_or(cfg.eval.samples), &out, seed, split.as_deref())?;
            print!("{}", stylemoe::eval::render_iou_table(&r));
        }
        Command::EvalRetrieval {
            encoder,
            manifest,
            out,
            split,
        } => print_json(&commands::cmd_eval_retrieval(&encoder, &manifest, &out, split.as_deref())?)?,
        Command::EvalSemantic {
            model,
            manifest,
            judge,
            limit,
            out,
        } => {
            let r = commands::cmd_eval_semantic(&cfg, &model, &manifest, &judge.parse()?, limit, &out, seed)?;
            print_json(&serde_json::json!({ "mean": r.mean, "scored": r.scores.len() - r.unscored, "unscored": r.unscored }))?;
        }
        Command::AblateConvergence {
            manifest,
            encoder,
            out,
            iterations,
        } => {
            let r = commands::cmd_ablate_convergence(&cfg, &manifest, &encoder, &out, seed, iterations)?;
            print_json(&serde_json::json!({ "medians": r.medians, "divergences": {
                "frozen_pretrained": r.frozen.total_divergences(),
                "random_trainable": r.random.total_divergences(),
            }}))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let record = ErrorRecord::from(&e);
            eprintln!("{}", serde_json::to_string(&record).unwrap_or_else(|_| e.to_string()));
            ExitCode::FAILURE
        }
    }
}
