//! End-to-end commands over the on-disk layout used by the CLI.
//!
//! Under `output_root`: `vae/`, `semantic/`, `stage1/`, `stage2/` (each with
//! `step_NNNNNN/` checkpoints, `loss.csv` and a `latest` pointer) and
//! `ablation/`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::denoiser::{BlockId, UNet};
use crate::error::{Error, Result};
use crate::evalkit::{
    evaluate, pca_feature_viz, rank_methods, save_profile_png, save_rgb_grid_png, temporal_profile, EvalReport,
    EvalSummary, TemporalProfile,
};
use crate::inference::{estimate_normals, InferenceConfig};
use crate::ntf;
use crate::sfr::{pretrain_semantic, PatchFeatures, Projector, SemanticEncoder};
use crate::synthdata::{
    dataset_hash, generate_corpus, list_clip_dirs, read_corpus, read_normals, read_rgb, save_normal_png,
    write_clip_dir, write_normals, ClipData, NormalSequence, SynthSpec, VideoClip,
};
use crate::trainer::{
    latest_checkpoint, load_checkpoint, train_stage, write_loss_csv, LossRow, SemanticSource, SfrSetup, StageInputs,
    StageOutcome,
};
use crate::vae::{evaluate_normal_reconstruction, finetune_decoder, train_vae, ReconMetrics, Vae, FACTOR};

/// Taps swept by the location ablation.
pub const ABLATION_TAPS: [BlockId; 7] = [
    BlockId::Down1,
    BlockId::Down2,
    BlockId::Down3,
    BlockId::Mid,
    BlockId::Up0,
    BlockId::Up1,
    BlockId::Up2,
];

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ntf::write_atomic(path, &serde_json::to_vec_pretty(value)?)
}

/// Renders a corpus and writes one directory per clip.
pub fn synth(spec: &SynthSpec, out: &Path) -> Result<Vec<PathBuf>> {
    mkdir(out)?;
    let clips = generate_corpus(spec)?;
    clips
        .iter()
        .map(|c| {
            let dir = out.join(&c.id);
            write_clip_dir(&dir, c)?;
            Ok(dir)
        })
        .collect()
}

pub struct Splits {
    pub train: Vec<ClipData>,
    pub holdout: Vec<ClipData>,
}

/// Holds out every clip of the last `holdout` scene ids (sorted).
pub fn split_clips(clips: Vec<ClipData>, holdout: usize) -> Result<Splits> {
    let mut scenes: Vec<String> = clips.iter().map(|c| c.meta.scene_id.clone()).collect();
    scenes.sort();
    scenes.dedup();
    if holdout >= scenes.len() {
        return Err(Error::Config(format!("cannot hold out {holdout} of {} scenes", scenes.len())));
    }
    let held = &scenes[scenes.len() - holdout..];
    let (holdout, train) = clips.into_iter().partition(|c| held.contains(&c.meta.scene_id));
    Ok(Splits { train, holdout })
}

pub fn load_splits(cfg: &PipelineConfig) -> Result<Splits> {
    split_clips(read_corpus(&cfg.data.root)?, cfg.data.holdout_scenes)
}

pub fn vae_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.output_root.join("vae")
}

pub fn stage_dir(cfg: &PipelineConfig, stage: u8) -> PathBuf {
    cfg.output_root.join(format!("stage{stage}"))
}

fn begin(cfg: &PipelineConfig) -> Result<()> {
    let path = cfg.write_resolved(&cfg.output_root)?;
    log::info!("resolved config written to {}", path.display());
    Ok(())
}

/// Trains the VAE on the training split and stores it under `vae/`.
pub fn train_vae_cmd(cfg: &PipelineConfig) -> Result<PathBuf> {
    begin(cfg)?;
    let splits = load_splits(cfg)?;
    let (mut vae, losses) = train_vae(&splits.train, cfg.vae.arch, &cfg.vae.train, cfg.seed)?;
    vae.data_hash = dataset_hash(&splits.train);
    let dir = vae_dir(cfg);
    vae.save(&dir)?;
    let rows: Vec<LossRow> = losses
        .iter()
        .enumerate()
        .map(|(i, &l)| LossRow {
            step: i + 1,
            loss_total: l,
            loss_main: l,
            loss_reg: 0.0,
            lr: cfg.vae.train.lr,
            sigma: 0.0,
        })
        .collect();
    write_loss_csv(&dir.join("loss.csv"), &rows)?;
    Ok(dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub before: ReconMetrics,
    pub after: ReconMetrics,
}

/// Fine-tunes the stored VAE's decoder and reports held-out reconstruction
/// quality before and after.
pub fn finetune_vae_cmd(cfg: &PipelineConfig) -> Result<FinetuneReport> {
    begin(cfg)?;
    let splits = load_splits(cfg)?;
    let dir = vae_dir(cfg);
    let mut vae = Vae::load(&dir, false)?;
    let before = evaluate_normal_reconstruction(&vae, &splits.holdout)?;
    finetune_decoder(&mut vae, &splits.train, &cfg.vae.finetune, cfg.seed)?;
    let after = evaluate_normal_reconstruction(&vae, &splits.holdout)?;
    vae.save(&dir)?;
    let report = FinetuneReport { before, after };
    write_json(&cfg.output_root.join("vae_finetune.json"), &report)?;
    log::info!(
        "decoder fine-tuning: angular {:.3} -> {:.3} deg, PSNR {:.2} -> {:.2} dB",
        before.mean_angular_deg,
        after.mean_angular_deg,
        before.psnr_db,
        after.psnr_db
    );
    Ok(report)
}

/// Image sizes whose patch grid matches each tap at the training resolution.
fn semantic_sizes(cfg: &PipelineConfig, taps: &[BlockId]) -> Vec<usize> {
    let latent = cfg.trainer.short_edge / FACTOR;
    let mut sizes: Vec<usize> = taps
        .iter()
        .map(|t| (latent / t.reduction()).max(1) * cfg.sfr.encoder.patch)
        .collect();
    sizes.sort_unstable();
    sizes.dedup();
    sizes
}

/// Loads `semantic/` or pretrains and stores a new encoder.
pub fn semantic_encoder(cfg: &PipelineConfig, train: &[ClipData]) -> Result<SemanticEncoder> {
    let dir = cfg.output_root.join("semantic");
    if dir.join("semantic.json").exists() {
        return SemanticEncoder::load(&dir);
    }
    let mut taps = ABLATION_TAPS.to_vec();
    taps.push(cfg.sfr.tap_block);
    let enc = pretrain_semantic(
        train,
        cfg.sfr.encoder,
        &cfg.sfr.pretrain,
        &semantic_sizes(cfg, &taps),
        cfg.seed ^ 0x5346_52,
    )?;
    enc.save(&dir)?;
    Ok(enc)
}

fn new_projector(cfg: &PipelineConfig, unet: &UNet, tap: BlockId) -> Result<Projector> {
    Projector::new(
        unet.arch().block_channels(tap),
        cfg.sfr.projector_hidden,
        cfg.sfr.encoder.dim,
        cfg.seed ^ 0x5052_4f4a,
    )
}

fn semantic_source(cfg: &PipelineConfig, train: &[ClipData]) -> Result<SemanticSource> {
    Ok(match &cfg.sfr.semantic_features {
        Some(dir) => SemanticSource::Precomputed(dir.clone()),
        None => SemanticSource::Encoder(semantic_encoder(cfg, train)?),
    })
}

/// Runs one training stage. Stage 1 starts from a fresh denoiser; stage 2
/// starts from the latest stage-1 checkpoint. `resume` continues an
/// interrupted run of the same stage from one of its checkpoints.
pub fn train_cmd(cfg: &PipelineConfig, stage: u8, resume: Option<&Path>) -> Result<StageOutcome> {
    train_with(cfg, stage, resume, cfg.sfr.enabled.then_some(cfg.sfr.tap_block), &stage_dir(cfg, stage))
}

fn train_with(
    cfg: &PipelineConfig,
    stage: u8,
    resume: Option<&Path>,
    tap: Option<BlockId>,
    out_dir: &Path,
) -> Result<StageOutcome> {
    begin(cfg)?;
    let stage_cfg = cfg.stage(stage);
    stage_cfg.validate()?;
    let vae = Vae::load(&vae_dir(cfg), true)?;
    let splits = load_splits(cfg)?;
    let (unet, projector, start_step) = match resume {
        Some(ckpt) => {
            let (unet, proj, manifest) = load_checkpoint(ckpt)?;
            if manifest.stage != stage {
                return Err(Error::Config(format!(
                    "checkpoint {} belongs to stage {}, not {stage}",
                    ckpt.display(),
                    manifest.stage
                )));
            }
            (unet, proj, manifest.step)
        }
        None if stage == 2 => {
            let (unet, proj, _) = load_checkpoint(&latest_checkpoint(&stage_dir(cfg, 1))?)?;
            (unet, proj, 0)
        }
        None => (UNet::new(cfg.unet, cfg.diffusion.preconditioner(), cfg.seed)?, None, 0),
    };
    let sfr = match tap {
        Some(tap) => {
            let projector = match projector {
                Some(p) if p.in_dim == unet.arch().block_channels(tap) => p,
                _ => new_projector(cfg, &unet, tap)?,
            };
            Some(SfrSetup {
                source: semantic_source(cfg, &splits.train)?,
                projector,
                tap,
            })
        }
        None => None,
    };
    mkdir(out_dir)?;
    train_stage(
        &stage_cfg,
        &StageInputs {
            clips: &splits.train,
            vae: &vae,
            unet: &unet,
            sfr: sfr.as_ref(),
            seed: cfg.seed,
            out_dir: Some(out_dir),
            start_step,
        },
    )
}

/// Loads the VAE and denoiser stored in a stage checkpoint. `ckpt` may also
/// be a stage directory or its `latest` pointer file.
pub fn load_model(ckpt: &Path) -> Result<(Vae, UNet)> {
    let resolved;
    let ckpt = if ckpt.is_file() && ckpt.file_name().is_some_and(|n| n == "latest") {
        resolved = latest_checkpoint(ckpt.parent().unwrap_or(Path::new(".")))?;
        &resolved
    } else if ckpt.join("latest").is_file() {
        resolved = latest_checkpoint(ckpt)?;
        &resolved
    } else {
        ckpt
    };
    let vae = Vae::load(&ckpt.join("vae"), true)?;
    let (unet, _) = UNet::load(&ckpt.join("unet"))?;
    Ok((vae, unet))
}

/// Writes `normal.ntf` and one PNG per frame.
pub fn write_prediction(dir: &Path, normals: &NormalSequence) -> Result<()> {
    mkdir(dir)?;
    write_normals(&dir.join("normal.ntf"), normals)?;
    for f in 0..normals.dims.frames {
        save_normal_png(normals, f, &dir.join(format!("frame_{f:04}.png")))?;
    }
    Ok(())
}

/// Named RGB videos from a `.ntf` file, a clip directory, or a directory of
/// clip directories.
pub fn read_videos(input: &Path) -> Result<Vec<(String, VideoClip)>> {
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if input.is_file() {
        return Ok(vec![(stem(input), read_rgb(input)?)]);
    }
    if input.join("rgb.ntf").is_file() {
        return Ok(vec![(stem(input), read_rgb(&input.join("rgb.ntf"))?)]);
    }
    let dirs = list_clip_dirs(input)?;
    if dirs.is_empty() {
        return Err(Error::Config(format!("{} holds no rgb.ntf or clip directories", input.display())));
    }
    dirs.iter().map(|d| Ok((stem(d), read_rgb(&d.join("rgb.ntf"))?))).collect()
}

/// Predicts normals for every input video. A single video is written to
/// `out` directly, several go to `out/<name>/`.
pub fn infer_cmd(input: &Path, ckpt: &Path, out: &Path, icfg: &InferenceConfig) -> Result<Vec<PathBuf>> {
    let (vae, unet) = load_model(ckpt)?;
    let videos = read_videos(input)?;
    let single = videos.len() == 1;
    let mut written = Vec::with_capacity(videos.len());
    for (name, video) in &videos {
        let normals = estimate_normals(&vae, &unet, video, icfg)?;
        let dir = if single { out.to_path_buf() } else { out.join(name) };
        write_prediction(&dir, &normals)?;
        written.push(dir);
    }
    Ok(written)
}

fn normal_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    if root.join("normal.ntf").is_file() {
        let name = root.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![(name, root.to_path_buf())]);
    }
    let mut dirs: Vec<(String, PathBuf)> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("normal.ntf").is_file())
        .map(|p| (p.file_name().unwrap_or_default().to_string_lossy().into_owned(), p))
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Compares prediction and ground-truth directories sequence by sequence.
pub fn eval_cmd(pred: &Path, gt: &Path, out: &Path, method: &str) -> Result<EvalReport> {
    let gts = normal_dirs(gt)?;
    if gts.is_empty() {
        return Err(Error::Config(format!("no normal.ntf under {}", gt.display())));
    }
    let single = gts.len() == 1 && gt.join("normal.ntf").is_file();
    let mut pairs = Vec::with_capacity(gts.len());
    for (name, gdir) in gts {
        let pdir = if single { pred.to_path_buf() } else { pred.join(&name) };
        if !pdir.join("normal.ntf").is_file() {
            return Err(Error::Config(format!("missing prediction {}", pdir.join("normal.ntf").display())));
        }
        pairs.push((name, read_normals(&pdir)?, read_normals(&gdir)?));
    }
    let report = evaluate(method, &pairs)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    write_json(out, &report)?;
    Ok(report)
}

/// Writes the y-t slice of column `x0` (middle column when `None`).
pub fn profile_cmd(pred: &Path, x0: Option<usize>, out: &Path) -> Result<TemporalProfile> {
    let seq = read_normals(pred)?;
    let profile = temporal_profile(&seq, x0.unwrap_or(seq.dims.width / 2))?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    save_profile_png(&profile, out)?;
    log::info!("flicker at column {}: {:.4} deg", profile.x0, profile.flicker);
    Ok(profile)
}

/// Square grid side for `patches`, if it is a perfect square.
fn square_grid(patches: usize) -> Option<usize> {
    let s = (patches as f64).sqrt().round() as usize;
    (s * s == patches).then_some(s)
}

/// PCA visualisation of a features file, one PNG per frame.
pub fn viz_features_cmd(features: &Path, out: &Path, grid: Option<(usize, usize)>) -> Result<Vec<PathBuf>> {
    let feats = PatchFeatures::read(features)?;
    let (gh, gw) = match grid {
        Some(g) => g,
        None => {
            let s = square_grid(feats.patches).ok_or_else(|| {
                Error::Config(format!("{} patches are not a square grid; pass --grid HxW", feats.patches))
            })?;
            (s, s)
        }
    };
    let images = pca_feature_viz(&feats, gh, gw)?;
    mkdir(out)?;
    images
        .iter()
        .enumerate()
        .map(|(f, img)| {
            let path = out.join(format!("pca_{f:04}.png"));
            save_rgb_grid_png(img, gh, gw, &path)?;
            Ok(path)
        })
        .collect()
}

/// Predictions paired with ground truth for every clip.
pub fn predict_pairs(
    vae: &Vae,
    unet: &UNet,
    clips: &[ClipData],
    icfg: &InferenceConfig,
) -> Result<Vec<(String, NormalSequence, NormalSequence)>> {
    clips
        .iter()
        .map(|c| Ok((c.id.clone(), estimate_normals(vae, unet, &c.rgb, icfg)?, c.normals.clone())))
        .collect()
}

pub fn evaluate_model(method: &str, vae: &Vae, unet: &UNet, clips: &[ClipData], icfg: &InferenceConfig) -> Result<EvalReport> {
    evaluate(method, &predict_pairs(vae, unet, clips, icfg)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub tap: String,
    pub summary: EvalSummary,
    pub rank: f64,
}

/// Stage-1 training once per tap (plus a run without the alignment term)
/// from the same seed, each evaluated on the held-out scenes.
pub fn ablate_sfr_location(cfg: &PipelineConfig, taps: &[BlockId]) -> Result<Vec<AblationRow>> {
    begin(cfg)?;
    let root = cfg.output_root.join("ablation");
    let splits = load_splits(cfg)?;
    let icfg = cfg.inference_config();
    let mut runs: Vec<(String, Option<BlockId>)> = vec![("none".into(), None)];
    runs.extend(taps.iter().map(|t| (t.to_string(), Some(*t))));
    let mut summaries = Vec::with_capacity(runs.len());
    for (name, tap) in &runs {
        log::info!("ablation run: tap {name}");
        let out = root.join(name);
        let outcome = train_with(cfg, 1, None, *tap, &out)?;
        let ckpt = outcome
            .checkpoint
            .ok_or_else(|| Error::Config("ablation run wrote no checkpoint".into()))?;
        let (vae, unet) = load_model(&ckpt)?;
        summaries.push((name.clone(), evaluate_model(name, &vae, &unet, &splits.holdout, &icfg)?.aggregate));
    }
    let ranks = rank_methods(&summaries);
    let rows: Vec<AblationRow> = summaries
        .iter()
        .zip(&ranks)
        .map(|((tap, summary), (_, rank))| AblationRow {
            tap: tap.clone(),
            summary: *summary,
            rank: *rank,
        })
        .collect();
    write_json(&root.join("table.json"), &rows)?;
    ntf::write_atomic(&root.join("table.md"), ablation_markdown(&rows).as_bytes())?;
    Ok(rows)
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut s = String::from("| tap | mean | median | <11.25 | <22.5 | <30 | rank |\n|---|---|---|---|---|---|---|\n");
    for r in rows {
        let m = &r.summary;
        s.push_str(&format!(
            "| {} | {:.2} | {:.2} | {:.1} | {:.1} | {:.1} | {:.2} |\n",
            r.tap, m.mean, m.median, m.a11_25, m.a22_5, m.a30, r.rank
        ));
    }
    s
}
