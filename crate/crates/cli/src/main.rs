use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};
use vidnormal::config::PipelineConfig;
use vidnormal::denoiser::BlockId;
use vidnormal::inference::InferenceConfig;
use vidnormal::pipeline::{self, ABLATION_TAPS};
use vidnormal::synthdata::SynthSpec;
use vidnormal::{Error, Result};

#[derive(Parser)]
#[command(name = "vidnormal", version, about = "Video surface-normal estimation with a latent video diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug)]
struct Size(usize, usize);

impl FromStr for Size {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad size component {v:?}"));
        Ok(Size(parse(h)?, parse(w)?))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic corpus, one directory per scene.
    Synth {
        #[arg(long)]
        scenes: usize,
        #[arg(long)]
        frames: usize,
        #[arg(long, default_value = "64x64")]
        size: Size,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the VAE on the configured corpus.
    TrainVae {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fine-tune the stored VAE decoder on normal maps.
    FinetuneVaeDecoder {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one denoiser training stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Directory of precomputed `<clip_id>.ntf` patch features.
        #[arg(long)]
        semantic_features: Option<PathBuf>,
    },
    /// Estimate normals for a video file, a clip directory or a corpus.
    Infer {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 14)]
        window: usize,
        #[arg(long, default_value_t = 4)]
        overlap: usize,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        #[arg(long, default_value_t = 700.0)]
        sigma: f64,
    },
    /// Compare predicted and ground-truth normals.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "vidnormal")]
        method: String,
    },
    /// Write the y-t slice of one column.
    Profile {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        x0: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// PCA visualisation of a patch-feature file.
    VizFeatures {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        grid: Option<Size>,
    },
    /// Stage-1 training per alignment tap, with a comparison table.
    AblateSfrLocation {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated block ids; defaults to Down1..Up2.
        #[arg(long, value_delimiter = ',')]
        taps: Vec<String>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            scenes,
            frames,
            size,
            seed,
            out,
        } => {
            let dirs = pipeline::synth(
                &SynthSpec {
                    scenes,
                    frames,
                    height: size.0,
                    width: size.1,
                    seed,
                },
                &out,
            )?;
            log::info!("wrote {} clip directories to {}", dirs.len(), out.display());
        }
        Command::TrainVae { config } => {
            let dir = pipeline::train_vae_cmd(&PipelineConfig::load(&config)?)?;
            log::info!("VAE stored in {}", dir.display());
        }
        Command::FinetuneVaeDecoder { config } => {
            pipeline::finetune_vae_cmd(&PipelineConfig::load(&config)?)?;
        }
        Command::Train {
            stage,
            config,
            resume,
            semantic_features,
        } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if semantic_features.is_some() {
                cfg.sfr.semantic_features = semantic_features;
            }
            let outcome = pipeline::train_cmd(&cfg, stage, resume.as_deref())?;
            if let Some(ckpt) = outcome.checkpoint {
                log::info!("stage {stage} checkpoint: {}", ckpt.display());
            }
        }
        Command::Infer {
            input,
            checkpoint,
            out,
            window,
            overlap,
            steps,
            sigma,
        } => {
            let icfg = InferenceConfig {
                window,
                overlap,
                steps,
                sigma_star: sigma,
                noise_seed: None,
            };
            let dirs = pipeline::infer_cmd(&input, &checkpoint, &out, &icfg)?;
            log::info!("wrote {} prediction(s)", dirs.len());
        }
        Command::Eval { pred, gt, out, method } => {
            let r = pipeline::eval_cmd(&pred, &gt, &out, &method)?;
            log::info!(
                "mean {:.3} median {:.3} <11.25 {:.2}% <22.5 {:.2}% <30 {:.2}%",
                r.aggregate.mean,
                r.aggregate.median,
                r.aggregate.a11_25,
                r.aggregate.a22_5,
                r.aggregate.a30
            );
        }
        Command::Profile { pred, x0, out } => {
            pipeline::profile_cmd(&pred, x0, &out)?;
        }
        Command::VizFeatures { features, out, grid } => {
            let files = pipeline::viz_features_cmd(&features, &out, grid.map(|g| (g.0, g.1)))?;
            log::info!("wrote {} images", files.len());
        }
        Command::AblateSfrLocation { config, taps } => {
            let cfg = PipelineConfig::load(&config)?;
            let taps = if taps.is_empty() {
                ABLATION_TAPS.to_vec()
            } else {
                taps.iter().map(|t| t.parse::<BlockId>()).collect::<Result<Vec<_>>>()?
            };
            let rows = pipeline::ablate_sfr_location(&cfg, &taps)?;
            eprint!("{}", pipeline::ablation_markdown(&rows));
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        "config" => 3,
        "io" => 4,
        "shape" => 5,
        "training" => 6,
        "domain" => 7,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
