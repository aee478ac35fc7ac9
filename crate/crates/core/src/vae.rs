//! Per-frame convolutional autoencoder shared by RGB and normal sequences.
//!
//! The spatial factor is fixed at 8: a 4× pixel unshuffle, one learned 2×
//! reduction, and the mirror image in the decoder. All convolutions run at
//! `H/4` or `H/8`, which keeps CPU training affordable.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::angle_between;
use crate::nn::{checksum_vars, depth_to_space, randn, space_to_depth, Conv2d, GroupNorm, ParamStore, Scope};
use crate::ntf;
use crate::synthdata::{ClipData, NormalSequence};
use crate::tensors::{mask_tensor, normal_tensor, rgb_tensor, tensor_to_normals};
use crate::trainer::{angular_loss_tensor, lr_at, AdamConfig, OptimizerSchedule, Trainable};

pub const FACTOR: usize = 8;
const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeArch {
    pub channels: usize,
    pub latent_channels: usize,
}

impl Default for VaeArch {
    fn default() -> Self {
        Self {
            channels: 64,
            latent_channels: 4,
        }
    }
}

/// Contents of `vae.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeMeta {
    pub arch: VaeArch,
    pub factor: usize,
    pub latent_scale: f64,
    pub train_steps: usize,
    pub decoder_finetune_steps: usize,
    pub data_hash: String,
}

struct ResBlock {
    n1: GroupNorm,
    c1: Conv2d,
    n2: GroupNorm,
    c2: Conv2d,
}

impl ResBlock {
    fn new(s: &Scope, ch: usize) -> Result<Self> {
        Ok(Self {
            n1: GroupNorm::new(&s.pp("norm1"), ch, 8)?,
            c1: Conv2d::new(&s.pp("conv1"), ch, ch, 3, 1)?,
            n2: GroupNorm::new(&s.pp("norm2"), ch, 8)?,
            c2: Conv2d::new(&s.pp("conv2"), ch, ch, 3, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.c1.forward(&self.n1.forward(x)?.silu()?)?;
        let h = self.c2.forward(&self.n2.forward(&h)?.silu()?)?;
        Ok((x + h)?)
    }
}

struct Encoder {
    conv_in: Conv2d,
    res1: ResBlock,
    down: Conv2d,
    res2: ResBlock,
    norm: GroupNorm,
    conv_out: Conv2d,
}

impl Encoder {
    fn new(s: &Scope, a: &VaeArch) -> Result<Self> {
        let c = a.channels;
        Ok(Self {
            conv_in: Conv2d::new(&s.pp("conv_in"), 48, c, 3, 1)?,
            res1: ResBlock::new(&s.pp("res1"), c)?,
            down: Conv2d::new(&s.pp("down"), 4 * c, c, 1, 1)?,
            res2: ResBlock::new(&s.pp("res2"), c)?,
            norm: GroupNorm::new(&s.pp("norm_out"), c, 8)?,
            conv_out: Conv2d::new(&s.pp("conv_out"), c, 2 * a.latent_channels, 3, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv_in.forward(&space_to_depth(x, 4)?)?;
        let h = self.res1.forward(&h)?;
        let h = self.down.forward(&space_to_depth(&h, 2)?)?;
        let h = self.res2.forward(&h)?;
        self.conv_out.forward(&self.norm.forward(&h)?.silu()?)
    }
}

struct Decoder {
    conv_in: Conv2d,
    res1: ResBlock,
    res2: ResBlock,
    up: Conv2d,
    res3: ResBlock,
    norm: GroupNorm,
    conv_out: Conv2d,
}

impl Decoder {
    fn new(s: &Scope, a: &VaeArch) -> Result<Self> {
        let c = a.channels;
        Ok(Self {
            conv_in: Conv2d::new(&s.pp("conv_in"), a.latent_channels, c, 3, 1)?,
            res1: ResBlock::new(&s.pp("res1"), c)?,
            res2: ResBlock::new(&s.pp("res2"), c)?,
            up: Conv2d::new(&s.pp("up"), c, 4 * c, 1, 1)?,
            res3: ResBlock::new(&s.pp("res3"), c)?,
            norm: GroupNorm::new(&s.pp("norm_out"), c, 8)?,
            conv_out: Conv2d::new(&s.pp("conv_out"), c, 48, 3, 1)?,
        })
    }

    fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let h = self.conv_in.forward(z)?;
        let h = self.res2.forward(&self.res1.forward(&h)?)?;
        let h = depth_to_space(&self.up.forward(&h)?, 2)?;
        let h = self.res3.forward(&h)?;
        let h = self.conv_out.forward(&self.norm.forward(&h)?.silu()?)?;
        depth_to_space(&h, 4)
    }
}

pub struct Vae {
    store: ParamStore,
    arch: VaeArch,
    enc: Encoder,
    dec: Decoder,
    /// Multiplies encoder means so latents have roughly unit-σ_data spread.
    pub latent_scale: f64,
    pub train_steps: usize,
    pub decoder_finetune_steps: usize,
    pub data_hash: String,
}

impl Vae {
    pub fn new(arch: VaeArch, seed: u64) -> Result<Self> {
        Self::build(ParamStore::new(seed), arch)
    }

    /// Parameters stored as `dtype`; pair with `store().copy_from` to mirror a model.
    pub fn with_dtype(arch: VaeArch, seed: u64, dtype: DType) -> Result<Self> {
        Self::build(ParamStore::with_dtype(seed, dtype), arch)
    }

    fn build(store: ParamStore, arch: VaeArch) -> Result<Self> {
        if arch.channels == 0 || arch.latent_channels == 0 {
            return Err(Error::Config("VAE widths must be positive".into()));
        }
        let root = store.root();
        Ok(Self {
            enc: Encoder::new(&root.pp("encoder"), &arch)?,
            dec: Decoder::new(&root.pp("decoder"), &arch)?,
            store,
            arch,
            latent_scale: 1.0,
            train_steps: 0,
            decoder_finetune_steps: 0,
            data_hash: String::new(),
        })
    }

    pub fn arch(&self) -> VaeArch {
        self.arch
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn latent_channels(&self) -> usize {
        self.arch.latent_channels
    }

    fn check_input(x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("VAE expects 3 input channels, got {c}")));
        }
        if h % FACTOR != 0 || w % FACTOR != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("{h}x{w} is not divisible by {FACTOR}")));
        }
        Ok(())
    }

    /// Unscaled posterior mean and log-variance.
    pub fn encode_moments(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        Self::check_input(x)?;
        let x = x.to_dtype(self.store.dtype())?;
        let out = chunked(&x, |c| self.enc.forward(c))?;
        let lc = self.arch.latent_channels;
        Ok((out.narrow(1, 0, lc)?, out.narrow(1, lc, lc)?.clamp(-30.0, 20.0)?))
    }

    /// `(F, 3, H, W)` in `[-1, 1]` to scaled posterior means `(F, C, H/8, W/8)`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok((self.encode_moments(x)?.0 * self.latent_scale)?)
    }

    /// Unclamped decoder output, used inside losses.
    pub fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = z.dims4()?;
        if c != self.arch.latent_channels {
            return Err(Error::Shape(format!(
                "latent has {c} channels, decoder expects {}",
                self.arch.latent_channels
            )));
        }
        let z = (z.to_dtype(self.store.dtype())? / self.latent_scale)?;
        chunked(&z, |c| self.dec.forward(c))
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.decode_raw(z)?.clamp(-1.0, 1.0)?)
    }

    pub fn encoder_vars(&self) -> Vec<(String, candle_core::Var)> {
        self.store.vars_with_prefix("encoder.")
    }

    pub fn decoder_vars(&self) -> Vec<(String, candle_core::Var)> {
        self.store.vars_with_prefix("decoder.")
    }

    pub fn encoder_checksum(&self) -> Result<String> {
        checksum_vars(&self.encoder_vars())
    }

    pub fn decoder_checksum(&self) -> Result<String> {
        checksum_vars(&self.decoder_vars())
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    pub fn meta(&self) -> VaeMeta {
        VaeMeta {
            arch: self.arch,
            factor: FACTOR,
            latent_scale: self.latent_scale,
            train_steps: self.train_steps,
            decoder_finetune_steps: self.decoder_finetune_steps,
            data_hash: self.data_hash.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.store.save(dir)?;
        ntf::write_atomic(&dir.join("vae.json"), &serde_json::to_vec_pretty(&self.meta())?)
    }

    /// Loads a checkpoint; `frozen` builds layers on detached weights.
    pub fn load(dir: &Path, frozen: bool) -> Result<Self> {
        let meta_path = dir.join("vae.json");
        let bytes = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: VaeMeta = serde_json::from_slice(&bytes)?;
        if meta.factor != FACTOR {
            return Err(Error::Config(format!("checkpoint factor {} unsupported", meta.factor)));
        }
        let store = if frozen { ParamStore::new(0).frozen() } else { ParamStore::new(0) };
        let mut vae = Self::build(store, meta.arch)?;
        vae.store.load(dir)?;
        vae.latent_scale = meta.latent_scale;
        vae.train_steps = meta.train_steps;
        vae.decoder_finetune_steps = meta.decoder_finetune_steps;
        vae.data_hash = meta.data_hash;
        Ok(vae)
    }

    /// Encodes a normal sequence and decodes it back, renormalised.
    pub fn reconstruct_normals(&self, seq: &NormalSequence) -> Result<NormalSequence> {
        let z = self.encode(&normal_tensor(seq)?)?;
        tensor_to_normals(&self.decode(&z)?)
    }
}

fn chunked(x: &Tensor, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let n = x.dim(0)?;
    if n <= CHUNK {
        return f(x);
    }
    let parts = (0..n)
        .step_by(CHUNK)
        .map(|s| f(&x.narrow(0, s, CHUNK.min(n - s))?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch_frames: usize,
    pub lr: f64,
    pub kl_weight: f64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_frames: 16,
            lr: 1e-3,
            kl_weight: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderFinetuneConfig {
    pub steps: usize,
    pub batch_frames: usize,
    pub lr: f64,
    pub l2_weight: f64,
}

impl Default for DecoderFinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_frames: 16,
            lr: 3e-4,
            l2_weight: 0.1,
        }
    }
}

/// Per-clip `(F, 3, H, W)` tensors for frame-level sampling.
struct FramePool {
    rgb: Vec<Tensor>,
    normals: Vec<Tensor>,
    masks: Vec<Tensor>,
    cumulative: Vec<usize>,
}

impl FramePool {
    fn new(clips: &[ClipData]) -> Result<Self> {
        if clips.iter().all(|c| c.rgb.dims.frames == 0) {
            return Err(Error::Config("empty dataset".into()));
        }
        let mut cumulative = Vec::with_capacity(clips.len());
        let mut total = 0;
        for c in clips {
            total += c.rgb.dims.frames;
            cumulative.push(total);
        }
        Ok(Self {
            rgb: clips.iter().map(|c| rgb_tensor(&c.rgb)).collect::<Result<_>>()?,
            normals: clips.iter().map(|c| normal_tensor(&c.normals)).collect::<Result<_>>()?,
            masks: clips.iter().map(|c| mask_tensor(&c.normals)).collect::<Result<_>>()?,
            cumulative,
        })
    }

    fn total(&self) -> usize {
        *self.cumulative.last().expect("non-empty")
    }

    fn locate(&self, i: usize) -> (usize, usize) {
        let clip = self.cumulative.partition_point(|&c| c <= i);
        let start = if clip == 0 { 0 } else { self.cumulative[clip - 1] };
        (clip, i - start)
    }

    /// Uniformly drawn frames, each flipped horizontally with probability ½.
    fn batch<R: Rng>(&self, rng: &mut R, n: usize) -> Result<(Tensor, Tensor, Tensor)> {
        let mut rgb = Vec::with_capacity(n);
        let mut nor = Vec::with_capacity(n);
        let mut msk = Vec::with_capacity(n);
        for _ in 0..n {
            let (c, f) = self.locate(rng.random_range(0..self.total()));
            let (mut r, mut nn, mut m) = (self.rgb[c].get(f)?, self.normals[c].get(f)?, self.masks[c].get(f)?);
            if rng.random_bool(0.5) {
                r = r.flip(&[2])?;
                m = m.flip(&[2])?;
                let flipped = nn.flip(&[2])?;
                let sign = Tensor::from_vec(vec![-1f32, 1.0, 1.0], (3, 1, 1), &Device::Cpu)?;
                nn = flipped.broadcast_mul(&sign)?;
            }
            rgb.push(r);
            nor.push(nn);
            msk.push(m);
        }
        Ok((Tensor::stack(&rgb, 0)?, Tensor::stack(&nor, 0)?, Tensor::stack(&msk, 0)?))
    }
}

/// RGB reconstruction objective: L2 through a reparameterized sample plus a
/// weighted KL term. `eps` has the latent shape.
pub fn vae_loss(vae: &Vae, x: &Tensor, eps: &Tensor, kl_weight: f64) -> Result<Tensor> {
    let (x, eps) = (&x.to_dtype(vae.store.dtype())?, eps.to_dtype(vae.store.dtype())?);
    let (mean, logvar) = vae.encode_moments(x)?;
    let z = (&mean + (logvar.affine(0.5, 0.0)?.exp()? * eps)?)?;
    let xhat = chunked(&z, |c| vae.dec.forward(c))?;
    let l2 = (xhat - x)?.sqr()?.mean_all()?;
    let kl = ((mean.sqr()? + logvar.exp()?)? - 1.0)?.sub(&logvar)?.mean_all()?.affine(0.5, 0.0)?;
    Ok((l2 + (kl * kl_weight)?)?)
}

fn warmup_schedule(lr: f64, steps: usize) -> OptimizerSchedule {
    OptimizerSchedule {
        base_lr: lr,
        warmup_steps: (steps / 10).clamp(1, 100),
        half_life: f64::INFINITY,
    }
}

/// Trains a fresh VAE on RGB frames with an L2 + KL objective, then sets the
/// latent scale from the spread of encoded RGB and normal frames.
pub fn train_vae(clips: &[ClipData], arch: VaeArch, cfg: &VaeTrainConfig, seed: u64) -> Result<(Vae, Vec<f64>)> {
    if clips.is_empty() {
        return Err(Error::Config("train_vae needs at least one clip".into()));
    }
    let pool = FramePool::new(clips)?;
    let mut vae = Vae::new(arch, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5641_45);
    let mut opt = Trainable::new(vae.store.vars(), &AdamConfig::default())?;
    let schedule = warmup_schedule(cfg.lr, cfg.steps);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (x, _, _) = pool.batch(&mut rng, cfg.batch_frames)?;
        let (f, _, h, w) = x.dims4()?;
        let eps = randn(&mut rng, &[f, arch.latent_channels, h / FACTOR, w / FACTOR], vae.store.dtype())?;
        let loss = vae_loss(&vae, &x, &eps, cfg.kl_weight)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Training {
                step,
                seed,
                reason: "non-finite VAE loss".into(),
            });
        }
        opt.step(&loss, lr_at(&schedule, step + 1))?;
        losses.push(value);
        if step % 200 == 0 {
            log::info!("vae step {step}: loss {value:.5}");
        }
    }
    vae.train_steps = cfg.steps;
    vae.latent_scale = calibrate_scale(&vae, &pool, &mut rng)?;
    Ok((vae, losses))
}

fn calibrate_scale<R: Rng>(vae: &Vae, pool: &FramePool, rng: &mut R) -> Result<f64> {
    let n = pool.total().min(128);
    let (rgb, normals, _) = pool.batch(rng, n)?;
    let z = Tensor::cat(&[vae.encode_moments(&rgb)?.0, vae.encode_moments(&normals)?.0], 0)?;
    let v = z.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
    Ok(if std > 1e-8 { 0.5 / std } else { 1.0 })
}

/// Fine-tunes only the decoder on normal frames with angular + weighted L2
/// loss; encoder parameters are untouched.
pub fn finetune_decoder(vae: &mut Vae, clips: &[ClipData], cfg: &DecoderFinetuneConfig, seed: u64) -> Result<Vec<f64>> {
    if clips.is_empty() {
        return Err(Error::Config("finetune_decoder needs at least one clip".into()));
    }
    if vae.store.is_frozen() {
        return Err(Error::Config("cannot fine-tune a frozen VAE".into()));
    }
    let pool = FramePool::new(clips)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4445_43);
    let vars = vae.decoder_vars().into_iter().map(|(_, v)| v).collect();
    let mut opt = Trainable::new(vars, &AdamConfig::default())?;
    let schedule = warmup_schedule(cfg.lr, cfg.steps);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (_, n, m) = pool.batch(&mut rng, cfg.batch_frames)?;
        let z = vae.encode(&n)?.detach();
        let nhat = vae.decode_raw(&z)?;
        let ang = angular_loss_tensor(&nhat, &n, &m)?;
        let l2 = (&nhat - &n)?.sqr()?.mean_all()?;
        let loss = (ang + (l2 * cfg.l2_weight)?)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Training {
                step,
                seed,
                reason: "non-finite decoder fine-tuning loss".into(),
            });
        }
        opt.step(&loss, lr_at(&schedule, step + 1))?;
        losses.push(value);
        if step % 200 == 0 {
            log::info!("decoder fine-tune step {step}: loss {value:.5}");
        }
    }
    vae.decoder_finetune_steps += cfg.steps;
    Ok(losses)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconMetrics {
    pub mean_angular_deg: f64,
    /// `+∞` for a perfect reconstruction.
    pub psnr_db: f64,
}

impl ReconMetrics {
    /// PSNR capped at 99 dB for reporting.
    pub fn capped(self) -> Self {
        Self {
            psnr_db: self.psnr_db.min(99.0),
            ..self
        }
    }
}

#[derive(Default)]
struct ReconAccumulator {
    angle_sum: f64,
    angle_count: usize,
    sq_sum: f64,
    sq_count: usize,
}

impl ReconAccumulator {
    fn add(&mut self, x: &NormalSequence, xhat: &NormalSequence) -> Result<()> {
        if x.dims != xhat.dims {
            return Err(Error::Shape(format!("{:?} vs {:?}", x.dims, xhat.dims)));
        }
        for i in 0..x.dims.pixels() {
            if !(x.mask[i] && xhat.mask[i]) {
                continue;
            }
            let (a, b) = (&x.normals[i * 3..i * 3 + 3], &xhat.normals[i * 3..i * 3 + 3]);
            self.angle_sum += angle_between(a, b);
            self.angle_count += 1;
            let (ua, ub) = (unit(a), unit(b));
            self.sq_sum += (0..3).map(|c| (ua[c] - ub[c]).powi(2)).sum::<f64>();
            self.sq_count += 3;
        }
        Ok(())
    }

    fn finish(&self) -> Result<ReconMetrics> {
        if self.angle_count == 0 {
            return Err(Error::UndefinedMetric("no valid pixels for reconstruction metrics".into()));
        }
        let mse = self.sq_sum / self.sq_count as f64;
        Ok(ReconMetrics {
            mean_angular_deg: self.angle_sum / self.angle_count as f64,
            psnr_db: if mse == 0.0 { f64::INFINITY } else { 10.0 * (4.0 / mse).log10() },
        })
    }
}

fn unit(n: &[f32]) -> [f64; 3] {
    let v = [n[0] as f64, n[1] as f64, n[2] as f64];
    let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if len == 0.0 {
        v
    } else {
        v.map(|c| c / len)
    }
}

/// Mean angular error over jointly valid pixels and PSNR (peak 2) of the
/// renormalised vectors.
pub fn reconstruction_metrics(x: &NormalSequence, xhat: &NormalSequence) -> Result<ReconMetrics> {
    let mut acc = ReconAccumulator::default();
    acc.add(x, xhat)?;
    acc.finish()
}

/// Normal reconstruction quality pooled over every valid pixel of `clips`.
pub fn evaluate_normal_reconstruction(vae: &Vae, clips: &[ClipData]) -> Result<ReconMetrics> {
    let mut acc = ReconAccumulator::default();
    for c in clips {
        let rec = vae.reconstruct_normals(&c.normals)?;
        acc.add(&c.normals, &rec)?;
    }
    acc.finish()
}

/// RGB reconstruction PSNR in dB over `[0, 1]` values mapped to `[-1, 1]`.
pub fn rgb_psnr(vae: &Vae, clips: &[ClipData]) -> Result<f64> {
    let (mut sq, mut n) = (0f64, 0usize);
    for c in clips {
        let x = rgb_tensor(&c.rgb)?;
        let xhat = vae.decode(&vae.encode(&x)?)?;
        sq += (xhat - &x)?.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        n += x.elem_count();
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("no frames".into()));
    }
    let mse = sq / n as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (4.0 / mse).log10() })
}
