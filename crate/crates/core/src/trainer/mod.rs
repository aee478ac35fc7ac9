//! Two-stage denoiser training: latent denoising over clips of 1 to 14
//! frames, then spatial-only refinement through the frozen decoder over clips
//! of 1 to 4 frames. Both stages may add the semantic alignment term.

mod loss;
mod schedule;

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use loss::{angular_loss, angular_loss_tensor};
pub use schedule::{clip_length_sampler, grad_norm, lr_at, AdamConfig, OptimizerSchedule, Trainable};

use crate::denoiser::{split_params, BlockId, ForwardOptions, UNet};
use crate::diffusion::{lambda_weight, NoiseSampler};
use crate::error::{Error, Result};
use crate::nn::{checksum_vars, randn};
use crate::ntf;
use crate::sfr::{load_clip_features, reg_loss, Projector, SemanticEncoder};
use crate::synthdata::{
    augment, dataset_hash, resize_normals_region, resize_rgb_region, resize_short_edge, AugmentationConfig, ClipData,
    ClipEntry, DatasetManifest, NormalSequence, VideoClip,
};
use crate::tensors::{mask_tensor, normal_tensor, rgb_tensor};
use crate::vae::{Vae, FACTOR};

/// Pixel sizes fed to the denoiser must give latent grids divisible by 4.
const PIXEL_MULTIPLE: usize = FACTOR * 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub half_life: f64,
    pub clip_range: (usize, usize),
    pub short_edge: usize,
    pub reg_weight: f64,
    pub noise: NoiseSampler,
    /// Noise level of the deterministic one-step prediction in stage 2.
    pub sigma_star: f64,
    pub augmentation: AugmentationConfig,
    pub adam: AdamConfig,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl StageConfig {
    pub fn stage1() -> Self {
        Self {
            stage: 1,
            steps: 4000,
            batch_size: 4,
            base_lr: 2e-4,
            warmup_steps: 100,
            half_life: 10_000.0,
            clip_range: (1, 14),
            short_edge: 64,
            reg_weight: 1.0,
            noise: NoiseSampler::default(),
            sigma_star: 700.0,
            augmentation: AugmentationConfig::default(),
            adam: AdamConfig::default(),
            checkpoint_every: 1000,
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: 2,
            steps: 2000,
            base_lr: 1e-4,
            clip_range: (1, 4),
            ..Self::stage1()
        }
    }

    /// Published full-scale recipe.
    pub fn full_scale(stage: u8) -> Self {
        let base = if stage == 2 { Self::stage2() } else { Self::stage1() };
        Self {
            steps: if stage == 2 { 10_000 } else { 20_000 },
            batch_size: 8,
            base_lr: if stage == 2 { 1e-5 } else { 3e-5 },
            short_edge: 576,
            ..base
        }
    }

    pub fn schedule(&self) -> OptimizerSchedule {
        OptimizerSchedule {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            half_life: self.half_life,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        let (lo, hi) = self.clip_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("invalid clip-length range [{lo}, {hi}]")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.short_edge < PIXEL_MULTIPLE {
            return Err(Error::Config(format!("short_edge must be at least {PIXEL_MULTIPLE}")));
        }
        if !(self.base_lr >= 0.0 && self.half_life > 0.0 && self.reg_weight >= 0.0 && self.sigma_star > 0.0) {
            return Err(Error::Config("learning rate, half-life, reg weight and sigma_star must be valid".into()));
        }
        self.noise.validate()?;
        self.augmentation.validate()
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(serde_json::to_vec(self)?)))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub enum SemanticSource {
    Encoder(SemanticEncoder),
    /// Directory of `<clip_id>.ntf` feature files aligned with clip frames.
    Precomputed(PathBuf),
}

/// Everything the alignment term needs.
pub struct SfrSetup {
    pub source: SemanticSource,
    pub projector: Projector,
    pub tap: BlockId,
}

impl SfrSetup {
    fn encoder_checksum(&self) -> Result<Option<String>> {
        match &self.source {
            SemanticSource::Encoder(e) => Ok(Some(e.checksum()?)),
            SemanticSource::Precomputed(_) => Ok(None),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub loss_total: f64,
    pub loss_main: f64,
    pub loss_reg: f64,
    pub lr: f64,
    /// Mean noise level of the batch.
    pub sigma: f64,
}

const CSV_HEADER: &str = "step,loss_total,loss_dsm_or_angular,loss_reg,lr,sigma";

pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e}\n",
            r.step, r.loss_total, r.loss_main, r.loss_reg, r.lr, r.sigma
        ));
    }
    ntf::write_atomic(path, s.as_bytes())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: &str| Error::Format {
        path: path.display().to_string(),
        reason: format!("malformed loss row {line:?}"),
    };
    let mut rows = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(line));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(line));
        rows.push(LossRow {
            step: f[0].parse().map_err(|_| bad(line))?,
            loss_total: num(1)?,
            loss_main: num(2)?,
            loss_reg: num(3)?,
            lr: num(4)?,
            sigma: num(5)?,
        });
    }
    Ok(rows)
}

/// Contents of `run.json` in every checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: u8,
    pub step: usize,
    pub seed: u64,
    pub config_hash: String,
    pub dataset_hash: String,
    pub config: StageConfig,
    pub tap: Option<BlockId>,
    pub vae_checksum: String,
    pub semantic_checksum: Option<String>,
    pub loss_log: String,
    pub checkpoints: Vec<String>,
}

impl RunManifest {
    pub fn read(ckpt: &Path) -> Result<Self> {
        let path = ckpt.join("run.json");
        Ok(serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?)
    }
}

pub struct StageInputs<'a> {
    pub clips: &'a [ClipData],
    pub vae: &'a Vae,
    pub unet: &'a UNet,
    pub sfr: Option<&'a SfrSetup>,
    pub seed: u64,
    /// Where checkpoints and the loss log go; `None` keeps everything in memory.
    pub out_dir: Option<&'a Path>,
    /// Steps already completed by a resumed run; its loss log is kept.
    pub start_step: usize,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub log: Vec<LossRow>,
    pub checkpoint: Option<PathBuf>,
    /// Steps whose alignment loss saw an all-zero feature tensor.
    pub degenerate_reg_steps: usize,
}

impl StageOutcome {
    pub fn totals(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.loss_total).collect()
    }
}

/// Trailing moving average over `window` values (shorter at the start).
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= w {
            sum -= values[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

struct Batch {
    rgb: Tensor,
    normals: Tensor,
    mask: Tensor,
    semantic: Option<Tensor>,
    frames: usize,
    clips: usize,
}

fn manifest_for(clips: &[ClipData]) -> Result<DatasetManifest> {
    DatasetManifest::build(
        clips
            .iter()
            .map(|c| ClipEntry {
                path: c.id.clone(),
                frames: c.rgb.dims.frames,
                scene_id: c.meta.scene_id.clone(),
                repeat: 1,
            })
            .collect(),
    )
}

fn center_crop(clip: &VideoClip, normals: &NormalSequence, h: usize, w: usize) -> (VideoClip, NormalSequence) {
    let d = clip.dims;
    if (d.height, d.width) == (h, w) {
        return (clip.clone(), normals.clone());
    }
    let region = ((d.height - h) / 2, (d.width - w) / 2, h, w);
    (resize_rgb_region(clip, region, h, w), resize_normals_region(normals, region, h, w))
}

/// Step-local generator so a resumed run draws the same data as an
/// uninterrupted one.
fn step_rng(seed: u64, stage: u8, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((stage as u64) << 56))
}

fn sample_batch<R: Rng>(
    clips: &[ClipData],
    manifest: &DatasetManifest,
    cfg: &StageConfig,
    sfr: Option<&SfrSetup>,
    rng: &mut R,
) -> Result<Batch> {
    let len = clip_length_sampler(cfg.clip_range, rng)?;
    let mut aug = cfg.augmentation;
    let precomputed = matches!(sfr.map(|s| &s.source), Some(SemanticSource::Precomputed(_)));
    if precomputed {
        // Stored features describe the unaltered frames.
        aug.hflip = 0.0;
        aug.crop = 0.0;
    }
    let mut rgb = Vec::with_capacity(cfg.batch_size);
    let mut normals = Vec::with_capacity(cfg.batch_size);
    let mut masks = Vec::with_capacity(cfg.batch_size);
    let mut semantic = Vec::new();
    let mut size: Option<(usize, usize)> = None;
    for _ in 0..cfg.batch_size {
        let idx = manifest
            .sample_clip_with_min_frames(rng, len)
            .ok_or_else(|| Error::Config(format!("no training clip holds {len} frames")))?;
        let clip = &clips[idx];
        let start = rng.random_range(0..=clip.rgb.dims.frames - len);
        let part = clip.slice(start, start + len, clip.id.clone());
        let (c, n) = augment(&part.rgb, &part.normals, rng.random(), &aug)?;
        let (c, n) = resize_short_edge(&c, &n, cfg.short_edge);
        let (h, w) = *size.get_or_insert((
            c.dims.height / PIXEL_MULTIPLE * PIXEL_MULTIPLE,
            c.dims.width / PIXEL_MULTIPLE * PIXEL_MULTIPLE,
        ));
        if c.dims.height < h || c.dims.width < w {
            return Err(Error::Shape(format!(
                "clip {} resizes to {}x{}, smaller than the batch size {h}x{w}",
                clip.id, c.dims.height, c.dims.width
            )));
        }
        let (c, n) = center_crop(&c, &n, h, w);
        if let Some(s) = sfr {
            let reduction = FACTOR * s.tap.reduction();
            let (gh, gw) = (h / reduction, w / reduction);
            semantic.push(match &s.source {
                SemanticSource::Encoder(e) => e.encode_semantic(&c, gh, gw)?,
                SemanticSource::Precomputed(dir) => {
                    let f = load_clip_features(dir, &clip.id)?;
                    if f.patches != gh * gw || f.frames != clip.rgb.dims.frames {
                        return Err(Error::Config(format!(
                            "features for {} are {}x{}, expected {} frames of {} patches",
                            clip.id,
                            f.frames,
                            f.patches,
                            clip.rgb.dims.frames,
                            gh * gw
                        )));
                    }
                    f.slice_frames(start, start + len).to_tensor()?
                }
            });
        }
        rgb.push(rgb_tensor(&c)?);
        normals.push(normal_tensor(&n)?);
        masks.push(mask_tensor(&n)?);
    }
    Ok(Batch {
        rgb: Tensor::cat(&rgb, 0)?,
        normals: Tensor::cat(&normals, 0)?,
        mask: Tensor::cat(&masks, 0)?,
        semantic: if semantic.is_empty() { None } else { Some(Tensor::cat(&semantic, 0)?) },
        frames: len,
        clips: cfg.batch_size,
    })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn per_row(values: &[f64], frames: usize) -> Result<Tensor> {
    let v: Vec<f32> = values.iter().flat_map(|&s| std::iter::repeat_n(s as f32, frames)).collect();
    let n = v.len();
    Ok(Tensor::from_vec(v, (n, 1, 1, 1), &Device::Cpu)?)
}

/// Stage-1 loss for one batch: λ-weighted denoising error plus the weighted
/// alignment term. Returns (total, main, reg, mean σ, degenerate).
fn stage1_loss<R: Rng>(
    inputs: &StageInputs,
    cfg: &StageConfig,
    batch: &Batch,
    rng: &mut R,
) -> Result<(Tensor, Tensor, Option<Tensor>, f64, bool)> {
    let z_c = inputs.vae.encode(&batch.rgb)?.detach();
    let z0 = inputs.vae.encode(&batch.normals)?.detach();
    let sigmas: Vec<f64> = (0..batch.clips).map(|_| cfg.noise.sample(rng)).collect();
    let eps = randn(rng, z0.dims(), z0.dtype())?;
    let z_t = (&z0 + eps.broadcast_mul(&per_row(&sigmas, batch.frames)?)?)?;
    let opts = ForwardOptions {
        tap: inputs.sfr.map(|s| s.tap),
        temporal: true,
    };
    let out = inputs.unet.forward(&z_t, &sigmas, &z_c, batch.frames, opts)?;
    let weights: Vec<f64> = sigmas.iter().map(|&s| lambda_weight(s)).collect();
    let main = (out.denoised - &z0)?
        .sqr()?
        .broadcast_mul(&per_row(&weights, batch.frames)?)?
        .mean_all()?;
    let mean_sigma = sigmas.iter().sum::<f64>() / sigmas.len() as f64;
    let (total, reg, degenerate) = add_reg(inputs, cfg, main.clone(), out.features.as_ref(), batch)?;
    Ok((total, main, reg, mean_sigma, degenerate))
}

fn stage2_loss(inputs: &StageInputs, cfg: &StageConfig, batch: &Batch) -> Result<(Tensor, Tensor, Option<Tensor>, f64, bool)> {
    let z_c = inputs.vae.encode(&batch.rgb)?.detach();
    let sigmas = vec![cfg.sigma_star; batch.clips];
    let opts = ForwardOptions {
        tap: inputs.sfr.map(|s| s.tap),
        temporal: true,
    };
    // Deterministic one-step prediction: the start latent is σ*·0.
    let z_t = z_c.zeros_like()?;
    let out = inputs.unet.forward(&z_t, &sigmas, &z_c, batch.frames, opts)?;
    let decoded = inputs.vae.decode_raw(&out.denoised)?;
    let main = angular_loss_tensor(&decoded, &batch.normals, &batch.mask)?;
    let (total, reg, degenerate) = add_reg(inputs, cfg, main.clone(), out.features.as_ref(), batch)?;
    Ok((total, main, reg, cfg.sigma_star, degenerate))
}

fn add_reg(
    inputs: &StageInputs,
    cfg: &StageConfig,
    main: Tensor,
    features: Option<&Tensor>,
    batch: &Batch,
) -> Result<(Tensor, Option<Tensor>, bool)> {
    let (Some(sfr), Some(features), Some(semantic)) = (inputs.sfr, features, batch.semantic.as_ref()) else {
        return Ok((main, None, false));
    };
    let projected = sfr.projector.project(features)?;
    let r = reg_loss(semantic, &projected)?;
    let total = (main + (&r.loss * cfg.reg_weight)?)?;
    Ok((total, Some(r.loss), r.degenerate))
}

/// Loss of the configured stage on one freshly drawn batch, without updating
/// anything. Exposed for gradient checks.
pub fn stage_loss(inputs: &StageInputs, cfg: &StageConfig, step: usize) -> Result<Tensor> {
    let manifest = manifest_for(inputs.clips)?;
    let mut rng = step_rng(inputs.seed, cfg.stage, step);
    let batch = sample_batch(inputs.clips, &manifest, cfg, inputs.sfr, &mut rng)?;
    Ok(match cfg.stage {
        1 => stage1_loss(inputs, cfg, &batch, &mut rng)?.0,
        _ => stage2_loss(inputs, cfg, &batch)?.0,
    })
}

pub fn train_stage1(cfg: &StageConfig, inputs: &StageInputs) -> Result<StageOutcome> {
    if cfg.stage != 1 {
        return Err(Error::Config("train_stage1 needs a stage-1 config".into()));
    }
    train_stage(cfg, inputs)
}

pub fn train_stage2(cfg: &StageConfig, inputs: &StageInputs) -> Result<StageOutcome> {
    if cfg.stage != 2 {
        return Err(Error::Config("train_stage2 needs a stage-2 config".into()));
    }
    train_stage(cfg, inputs)
}

/// Runs the configured stage from `inputs.start_step` to `cfg.steps`.
pub fn train_stage(cfg: &StageConfig, inputs: &StageInputs) -> Result<StageOutcome> {
    cfg.validate()?;
    if inputs.clips.is_empty() {
        return Err(Error::Config("training needs at least one clip".into()));
    }
    let manifest = manifest_for(inputs.clips)?;
    let (spatial, temporal) = split_params(inputs.unet.store())?;
    let mut vars: Vec<Var> = match cfg.stage {
        1 => inputs.unet.store().vars(),
        _ => spatial.iter().map(|(_, v)| v.clone()).collect(),
    };
    if let Some(s) = inputs.sfr {
        vars.extend(s.projector.store().vars());
    }
    let mut opt = Trainable::new(vars, &cfg.adam)?;
    let schedule = cfg.schedule();
    let vae_sum = inputs.vae.checksum()?;
    let semantic_sum = match inputs.sfr {
        Some(s) => s.encoder_checksum()?,
        None => None,
    };
    let temporal_sum = checksum_vars(&temporal)?;

    let mut log = match inputs.out_dir {
        Some(dir) if inputs.start_step > 0 && dir.join("loss.csv").exists() => {
            let mut rows = read_loss_csv(&dir.join("loss.csv"))?;
            rows.retain(|r| r.step <= inputs.start_step);
            rows
        }
        _ => Vec::new(),
    };
    let mut checkpoints = Vec::new();
    let mut last_ckpt = None;
    let mut degenerate_reg_steps = 0;
    for step in inputs.start_step + 1..=cfg.steps {
        let mut rng = step_rng(inputs.seed, cfg.stage, step);
        let batch = sample_batch(inputs.clips, &manifest, cfg, inputs.sfr, &mut rng)?;
        let (total, main, reg, sigma, degenerate) = match cfg.stage {
            1 => stage1_loss(inputs, cfg, &batch, &mut rng)?,
            _ => stage2_loss(inputs, cfg, &batch)?,
        };
        let fail = |reason: String| Error::Training {
            step,
            seed: inputs.seed,
            reason,
        };
        let value = scalar(&total)?;
        if !value.is_finite() {
            return Err(fail(format!("non-finite stage-{} loss {value}", cfg.stage)));
        }
        let lr = lr_at(&schedule, step);
        opt.step(&total, lr).map_err(|e| fail(e.to_string()))?;
        if cfg.stage == 2 && checksum_vars(&temporal)? != temporal_sum {
            return Err(Error::Integrity(format!("temporal parameters changed at stage-2 step {step}")));
        }
        degenerate_reg_steps += usize::from(degenerate);
        log.push(LossRow {
            step,
            loss_total: value,
            loss_main: scalar(&main)?,
            loss_reg: reg.as_ref().map(scalar).transpose()?.unwrap_or(0.0),
            lr,
            sigma,
        });
        if step % 100 == 0 || step == inputs.start_step + 1 {
            log::info!("stage {} step {step}/{}: loss {value:.5} (L={})", cfg.stage, cfg.steps, batch.frames);
        }
        let due = cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0;
        if let Some(dir) = inputs.out_dir {
            if due || step == cfg.steps {
                let manifest = RunManifest {
                    stage: cfg.stage,
                    step,
                    seed: inputs.seed,
                    config_hash: cfg.hash()?,
                    dataset_hash: dataset_hash(inputs.clips),
                    config: cfg.clone(),
                    tap: inputs.sfr.map(|s| s.tap),
                    vae_checksum: vae_sum.clone(),
                    semantic_checksum: semantic_sum.clone(),
                    loss_log: "loss.csv".into(),
                    checkpoints: checkpoints.clone(),
                };
                let path = write_checkpoint(dir, inputs, &manifest, &log)?;
                checkpoints.push(path.file_name().unwrap_or_default().to_string_lossy().into_owned());
                last_ckpt = Some(path);
            }
        }
    }
    if inputs.vae.checksum()? != vae_sum {
        return Err(Error::Integrity("VAE parameters changed during denoiser training".into()));
    }
    if let Some(s) = inputs.sfr {
        if s.encoder_checksum()? != semantic_sum {
            return Err(Error::Integrity("semantic encoder parameters changed during training".into()));
        }
    }
    Ok(StageOutcome {
        log,
        checkpoint: last_ckpt,
        degenerate_reg_steps,
    })
}

/// Writes `dir/step_NNNNNN/{unet,projector,vae}/` plus `run.json` via a
/// temporary directory and a rename, then refreshes `dir/loss.csv`.
fn write_checkpoint(dir: &Path, inputs: &StageInputs, manifest: &RunManifest, log: &[LossRow]) -> Result<PathBuf> {
    let name = format!("step_{:06}", manifest.step);
    let final_path = dir.join(&name);
    let tmp = dir.join(format!(".{name}.tmp"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    inputs.unet.save(&tmp.join("unet"), manifest.tap)?;
    if let Some(s) = inputs.sfr {
        s.projector.save(&tmp.join("projector"))?;
    }
    inputs.vae.save(&tmp.join("vae"))?;
    let mut with_log = manifest.clone();
    with_log.loss_log = "../loss.csv".into();
    ntf::write_atomic(&tmp.join("run.json"), &serde_json::to_vec_pretty(&with_log)?)?;
    if final_path.exists() {
        fs::remove_dir_all(&final_path).map_err(|e| Error::io(&final_path, e))?;
    }
    fs::rename(&tmp, &final_path).map_err(|e| Error::io(&final_path, e))?;
    write_loss_csv(&dir.join("loss.csv"), log)?;
    ntf::write_atomic(&dir.join("latest"), name.as_bytes())?;
    Ok(final_path)
}

/// The checkpoint named by `dir/latest`.
pub fn latest_checkpoint(dir: &Path) -> Result<PathBuf> {
    let pointer = dir.join("latest");
    let name = fs::read_to_string(&pointer).map_err(|e| Error::io(&pointer, e))?;
    Ok(dir.join(name.trim()))
}

/// Loads the denoiser and projector of a checkpoint written by a stage.
pub fn load_checkpoint(ckpt: &Path) -> Result<(UNet, Option<Projector>, RunManifest)> {
    let manifest = RunManifest::read(ckpt)?;
    let (unet, _) = UNet::load(&ckpt.join("unet"))?;
    let proj_dir = ckpt.join("projector");
    let projector = if proj_dir.exists() { Some(Projector::load(&proj_dir)?) } else { None };
    Ok((unet, projector, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::UNetArch;
    use crate::diffusion::Preconditioner;
    use crate::sfr::{pretrain_semantic, SemanticArch, SemanticPretrainConfig};
    use crate::synthdata::{generate_corpus, SynthSpec};
    use crate::vae::VaeArch;

    fn tiny() -> (Vec<ClipData>, Vae, UNet) {
        let clips = generate_corpus(&SynthSpec {
            scenes: 2,
            frames: 6,
            height: 32,
            width: 32,
            seed: 3,
        })
        .unwrap();
        let vae = Vae::new(
            VaeArch {
                channels: 8,
                latent_channels: 4,
            },
            1,
        )
        .unwrap();
        let unet = UNet::new(
            UNetArch {
                base_channels: 8,
                latent_channels: 4,
                head_dim: 8,
            },
            Preconditioner::default(),
            2,
        )
        .unwrap();
        (clips, vae, unet)
    }

    fn cfg(stage: u8, steps: usize) -> StageConfig {
        let base = if stage == 1 { StageConfig::stage1() } else { StageConfig::stage2() };
        StageConfig {
            steps,
            batch_size: 2,
            short_edge: 32,
            clip_range: (1, if stage == 1 { 4 } else { 2 }),
            warmup_steps: 1,
            checkpoint_every: 0,
            ..base
        }
    }

    #[test]
    fn config_validation() {
        assert!(StageConfig::stage1().validate().is_ok());
        assert!(StageConfig::full_scale(2).validate().is_ok());
        let bad = StageConfig {
            clip_range: (3, 2),
            ..StageConfig::stage1()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let json = serde_json::to_string(&StageConfig::stage2()).unwrap();
        let back: StageConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, StageConfig::stage2());
        let extra = json.replacen('{', "{\"bogus\":1,", 1);
        assert!(serde_json::from_str::<StageConfig>(&extra).is_err());
    }

    #[test]
    fn moving_average_matches_direct_window() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(moving_average(&v, 2), vec![1.0, 1.5, 2.5, 3.5, 4.5]);
    }

    #[test]
    fn stage_runs_are_deterministic_and_logged() {
        let (clips, vae, unet) = tiny();
        let c = cfg(1, 3);
        let inputs = StageInputs {
            clips: &clips,
            vae: &vae,
            unet: &unet,
            sfr: None,
            seed: 9,
            out_dir: None,
            start_step: 0,
        };
        let first = train_stage1(&c, &inputs).unwrap();
        let (_, _, unet2) = tiny();
        let second = train_stage1(
            &c,
            &StageInputs {
                unet: &unet2,
                ..inputs
            },
        )
        .unwrap();
        assert_eq!(first.totals(), second.totals());
        assert_eq!(first.log.len(), 3);
        assert!(first.log.iter().all(|r| r.loss_total.is_finite() && r.loss_reg == 0.0));
    }

    #[test]
    fn stage2_freezes_temporal_and_checkpoints() {
        let (clips, vae, unet) = tiny();
        let sem = pretrain_semantic(
            &clips,
            SemanticArch {
                patch: 8,
                dim: 8,
                hidden: 8,
            },
            &SemanticPretrainConfig {
                steps: 1,
                batch_frames: 2,
                ..Default::default()
            },
            &[16],
            0,
        )
        .unwrap();
        let tap = BlockId::Down1;
        let sfr = SfrSetup {
            source: SemanticSource::Encoder(sem),
            projector: Projector::new(unet.arch().block_channels(tap), 16, 8, 4).unwrap(),
            tap,
        };
        let (spatial, temporal) = split_params(unet.store()).unwrap();
        let before_t = checksum_vars(&temporal).unwrap();
        let before_s = unet.store().param_checksums().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(2, 2);
        let out = train_stage2(
            &c,
            &StageInputs {
                clips: &clips,
                vae: &vae,
                unet: &unet,
                sfr: Some(&sfr),
                seed: 1,
                out_dir: Some(dir.path()),
                start_step: 0,
            },
        )
        .unwrap();
        assert_eq!(checksum_vars(&temporal).unwrap(), before_t);
        let after_s = unet.store().param_checksums().unwrap();
        let changed = spatial.iter().filter(|(n, _)| before_s[n] != after_s[n]).count();
        assert!(changed * 100 >= spatial.len() * 95, "{changed}/{}", spatial.len());
        assert!(out.log.iter().all(|r| r.loss_reg != 0.0 && r.sigma == c.sigma_star));

        let ckpt = out.checkpoint.unwrap();
        let (loaded, proj, manifest) = load_checkpoint(&ckpt).unwrap();
        assert_eq!(loaded.store().checksum().unwrap(), unet.store().checksum().unwrap());
        assert!(proj.is_some());
        assert_eq!(manifest.step, 2);
        assert_eq!(manifest.config_hash, c.hash().unwrap());
        let rows = read_loss_csv(&dir.path().join("loss.csv")).unwrap();
        assert_eq!(rows.len(), 2);
        assert!((rows[1].loss_total - out.log[1].loss_total).abs() <= 1e-12 * out.log[1].loss_total.abs());
    }

    #[test]
    fn wrong_stage_config_is_rejected() {
        let (clips, vae, unet) = tiny();
        let inputs = StageInputs {
            clips: &clips,
            vae: &vae,
            unet: &unet,
            sfr: None,
            seed: 0,
            out_dir: None,
            start_step: 0,
        };
        assert!(train_stage2(&cfg(1, 1), &inputs).is_err());
        let too_long = StageConfig {
            clip_range: (7, 7),
            ..cfg(1, 1)
        };
        assert!(matches!(train_stage1(&too_long, &inputs), Err(Error::Config(_))));
    }
}
