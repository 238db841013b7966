//! Config loading, hashing and command dispatch for the `mlat` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mlat::backbone::{build_hybrid_mask, verify_no_leakage, Modality, SegmentLayout};
use mlat::pipeline::{self, PipelineError, RunConfig, RunContext, Stage};
use mlat::synth::MotionTag;
use sha2::{Digest, Sha256};

#[derive(Debug, Parser)]
#[command(name = "mlat", version, about = "Synthetic motion corpus, staged latent training, sampling and evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes the synthetic corpus and its manifest.
    GenCorpus,
    /// Trains one stage: vae, lra (stage0) or flow (stage1a).
    Train {
        #[arg(long)]
        stage: Option<Stage>,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluates a trained stage and writes `<stage>_metrics.csv`.
    Analyze {
        #[arg(long)]
        stage: Option<Stage>,
    },
    /// Draws class-conditional samples from the flow checkpoint.
    Sample {
        /// walk, wave or squat; cycles through all classes when omitted.
        #[arg(long)]
        class: Option<MotionTag>,
        #[arg(long, default_value_t = 6)]
        count: usize,
    },
    /// Compares motion files under PRED with their counterparts under GT.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Prints the attention mask for a layout such as `text:3,motion:4`.
    Mask {
        #[arg(long)]
        layout: String,
    },
    /// Corpus, all three stages and every analysis.
    Run,
    /// Prints the resolved config as TOML.
    Config,
}

/// Thread cap from `MLAT_THREADS`. Computation is single-threaded, so the
/// value is only validated.
pub fn thread_cap() -> Result<Option<usize>, PipelineError> {
    match std::env::var("MLAT_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(PipelineError::Config(format!("MLAT_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig, PipelineError> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig, PipelineError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?;
            parse_config(&text)
        }
    }
}

pub fn config_toml(cfg: &RunConfig) -> String {
    toml::to_string(cfg).expect("config serializes")
}

/// Hex SHA-256 of the canonical TOML of the hashed part of the config.
pub fn config_hash(cfg: &RunConfig) -> String {
    let digest = Sha256::digest(config_toml(&cfg.hashed_part()).as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn resolve(global: &GlobalArgs) -> Result<RunContext, PipelineError> {
    let mut cfg = load_config(global.config.as_deref())?;
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(o) = &global.out {
        cfg.paths.out = o.clone();
    }
    cfg.validate()?;
    let hash = config_hash(&cfg);
    Ok(RunContext::new(cfg, hash))
}

/// Parses `text:3,motion:4,image:2` into a layout.
pub fn parse_layout(s: &str) -> Result<SegmentLayout, PipelineError> {
    let mut spans = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let (kind, len) = part
            .split_once(':')
            .ok_or_else(|| PipelineError::Config(format!("span `{part}` is not of the form kind:length")))?;
        let modality = match kind.trim() {
            "text" => Modality::Text,
            "image" => Modality::Image,
            "motion" => Modality::Motion,
            other => return Err(PipelineError::Config(format!("unknown modality `{other}`"))),
        };
        let len = len.trim().parse().map_err(|_| PipelineError::Config(format!("bad span length in `{part}`")))?;
        spans.push((modality, len));
    }
    SegmentLayout::from_lengths(&spans).map_err(|e| PipelineError::Config(e.to_string()))
}

fn print_rows(rows: &[mlat::metrics::MetricRow]) {
    for r in rows {
        println!("{:<28} {:<16} {:>14.6} {}", r.metric, r.scope, r.value, r.units);
    }
}

pub fn execute(cli: Cli) -> Result<(), PipelineError> {
    thread_cap()?;
    let ctx = resolve(&cli.global)?;
    match cli.command {
        Command::Config => print!("{}", config_toml(&ctx.cfg)),
        Command::GenCorpus => {
            let entries = pipeline::gen_corpus(&ctx)?;
            println!("wrote {} motions to {}", entries.len(), ctx.corpus_dir().display());
        }
        Command::Train { stage, resume } => {
            fs::create_dir_all(&ctx.out)?;
            let stage = stage.unwrap_or(ctx.cfg.stage);
            let r = pipeline::train(&ctx, stage, resume.as_deref())?;
            println!(
                "{} steps {}..{} final loss {:.6} -> {}",
                stage.name(),
                r.start_step,
                r.end_step,
                r.final_loss,
                ctx.checkpoint(stage).display()
            );
        }
        Command::Analyze { stage } => print_rows(&pipeline::analyze(&ctx, stage.unwrap_or(ctx.cfg.stage))?),
        Command::Sample { class, count } => {
            let files = pipeline::sample(&ctx, class, count, ctx.cfg.seed)?;
            println!("wrote {} samples to {}", files.len(), ctx.out.join("samples").display());
        }
        Command::Eval { pred, gt } => {
            let eval = pipeline::eval_dirs(&pred, &gt, ctx.cfg.eval.accuracy_threshold_mm)?;
            fs::create_dir_all(&ctx.out)?;
            pipeline::write_paired_eval(&ctx.out, "eval", &eval, &ctx.hash)?;
            print_rows(&eval.rows);
        }
        Command::Mask { layout } => {
            let layout = parse_layout(&layout)?;
            let mask = build_hybrid_mask(&layout);
            for i in 0..mask.rows() {
                let row: String = (0..mask.cols()).map(|j| if mask.get(i, j) == 0.0 { '1' } else { '.' }).collect();
                println!("{row}");
            }
            verify_no_leakage(&layout, &mask).map_err(|e| PipelineError::Numerical(format!("{e:?}")))?;
        }
        Command::Run => print_rows(&pipeline::run_all(&ctx)?),
    }
    Ok(())
}
