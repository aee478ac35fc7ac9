//! Alignment of intermediate denoiser features with a frozen patch encoder.
//!
//! The encoder here is a small convolutional patch network pretrained by
//! masked patch reconstruction on the synthetic corpus. Precomputed features
//! from any other encoder can be supplied as NTF files instead.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{space_to_depth, Conv2d, Linear, ParamStore};
use crate::ntf::{self, NtfTensor};
use crate::synthdata::{resize_rgb_region, ClipData, VideoClip};
use crate::tensors::rgb_tensor;
use crate::trainer::{lr_at, AdamConfig, OptimizerSchedule, Trainable};

/// Per-frame grids of patch features, `frames × patches × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatures {
    pub frames: usize,
    pub patches: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl PatchFeatures {
    pub fn new(frames: usize, patches: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * patches * dim {
            return Err(Error::Shape(format!("{} values for {frames}x{patches}x{dim} features", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite patch feature".into()));
        }
        Ok(Self {
            frames,
            patches,
            dim,
            data,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (f, n, d) = t.dims3()?;
        Self::new(f, n, d, t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), (self.frames, self.patches, self.dim), &Device::Cpu)?)
    }

    pub fn slice_frames(&self, start: usize, end: usize) -> Self {
        let per = self.patches * self.dim;
        Self {
            frames: end - start,
            patches: self.patches,
            dim: self.dim,
            data: self.data[start * per..end * per].to_vec(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        ntf::write(path, &NtfTensor::f32(vec![self.frames, self.patches, self.dim], self.data.clone())?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let t = ntf::read(path)?;
        if t.dims.len() != 3 {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: format!("patch features must be rank 3, got {:?}", t.dims),
            });
        }
        let (f, n, d) = (t.dims[0], t.dims[1], t.dims[2]);
        Self::new(f, n, d, t.into_f32()?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticArch {
    pub patch: usize,
    pub dim: usize,
    pub hidden: usize,
}

impl Default for SemanticArch {
    fn default() -> Self {
        Self {
            patch: 8,
            dim: 32,
            hidden: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticPretrainConfig {
    pub steps: usize,
    pub batch_frames: usize,
    pub lr: f64,
    pub mask_ratio: f64,
}

impl Default for SemanticPretrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_frames: 16,
            lr: 1e-3,
            mask_ratio: 0.5,
        }
    }
}

/// Frozen patch-feature extractor.
pub struct SemanticEncoder {
    store: ParamStore,
    arch: SemanticArch,
    embed: Conv2d,
    ctx1: Conv2d,
    ctx2: Conv2d,
    out: Conv2d,
}

impl SemanticEncoder {
    fn build(store: ParamStore, arch: SemanticArch) -> Result<Self> {
        let root = store.root();
        let p2 = 3 * arch.patch * arch.patch;
        Ok(Self {
            embed: Conv2d::new(&root.pp("embed"), p2, arch.hidden, 1, 1)?,
            ctx1: Conv2d::new(&root.pp("ctx1"), arch.hidden, arch.hidden, 3, 1)?,
            ctx2: Conv2d::new(&root.pp("ctx2"), arch.hidden, arch.hidden, 3, 1)?,
            out: Conv2d::new(&root.pp("out"), arch.hidden, arch.dim, 1, 1)?,
            store,
            arch,
        })
    }

    pub fn arch(&self) -> SemanticArch {
        self.arch
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    /// `(F, 3, S, S')` images in `[-1, 1]` to `(F, D, S/p, S'/p)` features.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.embed.forward(&space_to_depth(x, self.arch.patch)?)?.gelu()?;
        let h = (&h + self.ctx1.forward(&h)?.gelu()?)?;
        let h = (&h + self.ctx2.forward(&h)?.gelu()?)?;
        self.out.forward(&h)
    }

    /// Resizes every frame so the patch grid is `grid_h × grid_w` and returns
    /// constant (gradient-free) `(F, N, D)` features.
    pub fn encode_semantic(&self, frames: &VideoClip, grid_h: usize, grid_w: usize) -> Result<Tensor> {
        let p = self.arch.patch;
        let d = frames.dims;
        let resized = resize_rgb_region(frames, (0, 0, d.height, d.width), grid_h * p, grid_w * p);
        let feats = self.forward(&rgb_tensor(&resized)?)?.detach();
        let (f, dim, gh, gw) = feats.dims4()?;
        if (gh, gw) != (grid_h, grid_w) {
            return Err(Error::Config(format!("semantic grid {gh}x{gw} does not match tap grid {grid_h}x{grid_w}")));
        }
        Ok(feats.reshape((f, dim, gh * gw))?.transpose(1, 2)?.contiguous()?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.store.save(dir)?;
        ntf::write_atomic(&dir.join("semantic.json"), &serde_json::to_vec_pretty(&self.arch)?)
    }

    /// Loads a checkpoint; the returned encoder is always frozen.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("semantic.json");
        let arch: SemanticArch = serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        let enc = Self::build(ParamStore::new(0).frozen(), arch)?;
        enc.store.load(dir)?;
        Ok(enc)
    }
}

/// Masked patch reconstruction: random patches are zeroed and a linear head
/// must recover their pixels from the surrounding features. The head is
/// discarded and the encoder returned frozen.
pub fn pretrain_semantic(
    clips: &[ClipData],
    arch: SemanticArch,
    cfg: &SemanticPretrainConfig,
    image_sizes: &[usize],
    seed: u64,
) -> Result<SemanticEncoder> {
    if clips.is_empty() || image_sizes.is_empty() {
        return Err(Error::Config("semantic pretraining needs clips and image sizes".into()));
    }
    if image_sizes.iter().any(|s| s % arch.patch != 0 || *s == 0) {
        return Err(Error::Config(format!("image sizes {image_sizes:?} must be multiples of the patch size")));
    }
    let store = ParamStore::new(seed);
    let enc = SemanticEncoder::build(store.clone(), arch)?;
    let head_store = ParamStore::new(seed ^ 1);
    let p2 = 3 * arch.patch * arch.patch;
    let head = Conv2d::new(&head_store.root().pp("head"), arch.dim, p2, 1, 1)?;
    let mut vars = store.vars();
    vars.extend(head_store.vars());
    let mut opt = Trainable::new(vars, &AdamConfig::default())?;
    let schedule = OptimizerSchedule {
        base_lr: cfg.lr,
        warmup_steps: (cfg.steps / 10).clamp(1, 100),
        half_life: f64::INFINITY,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5345_4d);
    let weights: Vec<usize> = clips.iter().map(|c| c.rgb.dims.frames).collect();
    let total: usize = weights.iter().sum();
    for step in 0..cfg.steps {
        let size = image_sizes[step % image_sizes.len()];
        let mut frames = Vec::with_capacity(cfg.batch_frames);
        for _ in 0..cfg.batch_frames {
            let mut k = rng.random_range(0..total);
            let mut ci = 0;
            while k >= weights[ci] {
                k -= weights[ci];
                ci += 1;
            }
            let clip = clips[ci].rgb.slice_frames(k, k + 1);
            let d = clip.dims;
            frames.push(rgb_tensor(&resize_rgb_region(&clip, (0, 0, d.height, d.width), size, size))?);
        }
        let x = Tensor::cat(&frames, 0)?;
        let g = size / arch.patch;
        let b = x.dim(0)?;
        let keep: Vec<f32> = (0..b * g * g)
            .map(|_| if rng.random::<f64>() < cfg.mask_ratio { 0.0 } else { 1.0 })
            .collect();
        let keep = Tensor::from_vec(keep, (b, 1, g, g), &Device::Cpu)?;
        let masked_patches = (1.0 - &keep)?;
        let target = space_to_depth(&x, arch.patch)?;
        let pix_keep = keep.upsample_nearest2d(size, size)?;
        let feats = enc.forward(&x.broadcast_mul(&pix_keep)?)?;
        let recon = head.forward(&feats)?;
        let err = (recon - target)?.sqr()?.mean_keepdim(1)?;
        let denom = masked_patches.sum_all()?.to_scalar::<f32>()?.max(1.0) as f64;
        let loss = ((err * masked_patches)?.sum_all()? / denom)?;
        opt.step(&loss, lr_at(&schedule, step + 1))?;
        if step % 100 == 0 {
            log::info!("semantic pretrain step {step}: loss {:.5}", loss.to_scalar::<f32>()?);
        }
    }
    // Rebuild on detached weights so no later graph can reach them.
    let frozen = SemanticEncoder::build(ParamStore::new(0).frozen(), arch)?;
    frozen.store.copy_from(&store)?;
    Ok(frozen)
}

/// Three-layer perceptron applied to every patch of the tapped feature map.
pub struct Projector {
    store: ParamStore,
    layers: [Linear; 3],
    identity_activation: bool,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectorMeta {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

impl Projector {
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, seed: u64) -> Result<Self> {
        if hidden < out_dim {
            return Err(Error::Config(format!("projector hidden width {hidden} below output dim {out_dim}")));
        }
        let store = ParamStore::new(seed);
        let r = store.root();
        Ok(Self {
            layers: [
                Linear::new(&r.pp("fc1"), in_dim, hidden)?,
                Linear::new(&r.pp("fc2"), hidden, hidden)?,
                Linear::new(&r.pp("fc3"), hidden, out_dim)?,
            ],
            store,
            identity_activation: false,
            in_dim,
            out_dim,
        })
    }

    /// Identity weights, zero biases and no activation: `project` returns
    /// its input. Used to test the wiring.
    pub fn identity(dim: usize) -> Result<Self> {
        let mut p = Self::new(dim, dim, dim, 0)?;
        let eye = Tensor::eye(dim, DType::F32, &Device::Cpu)?;
        for name in ["fc1", "fc2", "fc3"] {
            p.store.set(&format!("{name}.weight"), &eye)?;
        }
        p.identity_activation = true;
        Ok(p)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn meta(&self) -> ProjectorMeta {
        ProjectorMeta {
            in_dim: self.in_dim,
            hidden: self.layers[1].out_dim(),
            out_dim: self.out_dim,
        }
    }

    /// `(F, C_l, h, w)` tapped features to `(F, h·w, D)`.
    pub fn project(&self, tapped: &Tensor) -> Result<Tensor> {
        let (f, c, h, w) = tapped.dims4()?;
        if c != self.in_dim {
            return Err(Error::Shape(format!("projector expects {} channels, got {c}", self.in_dim)));
        }
        let mut x = tapped.reshape((f, c, h * w))?.transpose(1, 2)?;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x)?;
            if i < 2 && !self.identity_activation {
                x = x.silu()?;
            }
        }
        Ok(x)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.store.save(dir)?;
        ntf::write_atomic(&dir.join("projector.json"), &serde_json::to_vec_pretty(&self.meta())?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("projector.json");
        let m: ProjectorMeta = serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        let p = Self::new(m.in_dim, m.hidden, m.out_dim, 0)?;
        p.store.load(dir)?;
        Ok(p)
    }
}

pub struct RegLoss {
    pub loss: Tensor,
    /// Set when either argument is entirely zero, making the loss meaningless.
    pub degenerate: bool,
}

const COS_EPS: f64 = 1e-8;

/// Negative mean cosine similarity between matching patches of two
/// `(F, N, D)` tensors.
pub fn reg_loss(semantic: &Tensor, projected: &Tensor) -> Result<RegLoss> {
    if semantic.dims() != projected.dims() {
        return Err(Error::Shape(format!("semantic {:?} vs projected {:?}", semantic.dims(), projected.dims())));
    }
    let semantic = semantic.to_dtype(projected.dtype())?;
    let norm = |t: &Tensor| -> Result<Tensor> { Ok(t.sqr()?.sum_keepdim(2)?.sqrt()?.maximum(COS_EPS)?) };
    let dot = (&semantic * projected)?.sum_keepdim(2)?;
    let cos = (dot / (norm(&semantic)? * norm(projected)?)?)?;
    let loss = cos.mean_all()?.neg()?.clamp(-1.0, 1.0)?;
    let all_zero = |t: &Tensor| -> Result<bool> { Ok(t.abs()?.max_all()?.to_dtype(DType::F32)?.to_scalar::<f32>()? == 0.0) };
    let degenerate = all_zero(&semantic)? || all_zero(projected)?;
    if degenerate {
        log::warn!("regularisation loss evaluated on all-zero features");
    }
    Ok(RegLoss { loss, degenerate })
}

/// Features for `clip_id` from a directory of `<clip_id>.ntf` files.
pub fn load_clip_features(dir: &Path, clip_id: &str) -> Result<PatchFeatures> {
    PatchFeatures::read(&dir.join(format!("{clip_id}.ntf")))
}
