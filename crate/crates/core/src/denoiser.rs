//! Spatio-temporal U-Net over `(B·F, C, h, w)` latents.
//!
//! Every block is a residual conv block conditioned on the noise embedding,
//! optional spatial self-attention (at `h/2` and `h/4`), and temporal
//! self-attention across the frames of each clip at every spatial location.
//! Temporal layers carry [`ParamTag::Temporal`]; everything else is spatial.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoise, Preconditioner};
use crate::error::{Error, Result};
use crate::nn::{self_attention, space_to_depth, Conv2d, GroupNorm, LayerNorm, Linear, ParamStore, ParamTag, Scope};
use crate::ntf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BlockId {
    Down0,
    Down1,
    Down2,
    Down3,
    Mid,
    Up0,
    Up1,
    Up2,
    Up3,
}

impl BlockId {
    pub const ALL: [BlockId; 9] = [
        BlockId::Down0,
        BlockId::Down1,
        BlockId::Down2,
        BlockId::Down3,
        BlockId::Mid,
        BlockId::Up0,
        BlockId::Up1,
        BlockId::Up2,
        BlockId::Up3,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Channel multiplier of the block output relative to the base width.
    fn mult(self) -> usize {
        match self {
            BlockId::Down0 | BlockId::Up3 => 1,
            BlockId::Down1 | BlockId::Up2 => 2,
            _ => 4,
        }
    }

    /// Downsampling of the block output relative to the latent grid.
    pub fn reduction(self) -> usize {
        match self {
            BlockId::Down0 | BlockId::Up1 => 2,
            BlockId::Up2 | BlockId::Up3 => 1,
            _ => 4,
        }
    }

    /// Resolution the block's layers run at (before any resampling).
    fn inner_reduction(self) -> usize {
        match self {
            BlockId::Down0 | BlockId::Up3 => 1,
            BlockId::Down1 | BlockId::Up2 => 2,
            _ => 4,
        }
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for BlockId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BlockId::ALL
            .into_iter()
            .find(|b| b.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown block id {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetArch {
    pub base_channels: usize,
    pub latent_channels: usize,
    pub head_dim: usize,
}

impl Default for UNetArch {
    fn default() -> Self {
        Self {
            base_channels: 64,
            latent_channels: 4,
            head_dim: 32,
        }
    }
}

impl UNetArch {
    pub fn block_channels(&self, b: BlockId) -> usize {
        self.base_channels * b.mult()
    }

    fn emb_dim(&self) -> usize {
        self.base_channels * 4
    }
}

struct ResBlock {
    n1: GroupNorm,
    c1: Conv2d,
    emb: Linear,
    n2: GroupNorm,
    c2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(s: &Scope, cin: usize, cout: usize, emb_dim: usize) -> Result<Self> {
        Ok(Self {
            n1: GroupNorm::new(&s.pp("norm1"), cin, 8)?,
            c1: Conv2d::new(&s.pp("conv1"), cin, cout, 3, 1)?,
            emb: Linear::new(&s.pp("emb"), emb_dim, cout)?,
            n2: GroupNorm::new(&s.pp("norm2"), cout, 8)?,
            c2: Conv2d::new(&s.pp("conv2"), cout, cout, 3, 1)?,
            skip: if cin == cout {
                None
            } else {
                Some(Conv2d::new(&s.pp("skip"), cin, cout, 1, 1)?)
            },
        })
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let h = self.c1.forward(&self.n1.forward(x)?.silu()?)?;
        let e = self.emb.forward(emb)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&e)?;
        let h = self.c2.forward(&self.n2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

struct SpatialAttention {
    norm: GroupNorm,
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl SpatialAttention {
    fn new(s: &Scope, ch: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&s.pp("norm"), ch, 8)?,
            qkv: Linear::new(&s.pp("qkv"), ch, 3 * ch)?,
            proj: Linear::with_std(&s.pp("proj"), ch, ch, 0.1 / (ch as f64).sqrt())?,
            heads,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let tokens = self.norm.forward(x)?.reshape((n, c, h * w))?.transpose(1, 2)?;
        let out = attend(&self.qkv, &self.proj, &tokens, self.heads)?;
        Ok((x + out.transpose(1, 2)?.reshape((n, c, h, w))?)?)
    }
}

struct TemporalAttention {
    norm: LayerNorm,
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl TemporalAttention {
    fn new(s: &Scope, ch: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&s.pp("norm"), ch)?,
            qkv: Linear::new(&s.pp("qkv"), ch, 3 * ch)?,
            proj: Linear::with_std(&s.pp("proj"), ch, ch, 0.1 / (ch as f64).sqrt())?,
            heads,
        })
    }

    /// Attention over the `frames` axis independently at every pixel.
    fn forward(&self, x: &Tensor, frames: usize) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let b = n / frames;
        let tokens = x
            .reshape((b, frames, c, h * w))?
            .permute((0, 3, 1, 2))?
            .reshape((b * h * w, frames, c))?;
        let out = attend(&self.qkv, &self.proj, &self.norm.forward(&tokens)?, self.heads)?;
        let out = out.reshape((b, h * w, frames, c))?.permute((0, 2, 3, 1))?.reshape((n, c, h, w))?;
        Ok((x + out)?)
    }
}

fn attend(qkv: &Linear, proj: &Linear, tokens: &Tensor, heads: usize) -> Result<Tensor> {
    let c = tokens.dim(2)?;
    let qkv = qkv.forward(tokens)?;
    let q = qkv.narrow(2, 0, c)?;
    let k = qkv.narrow(2, c, c)?;
    let v = qkv.narrow(2, 2 * c, c)?;
    proj.forward(&self_attention(&q, &k, &v, heads)?)
}

enum Resample {
    None,
    /// 2×2 pixel unshuffle followed by a 1×1 projection.
    Down(Conv2d),
    /// Nearest-neighbour 2× upsampling followed by a 3×3 convolution.
    Up(Conv2d),
}

struct Block {
    res: ResBlock,
    spatial: Option<SpatialAttention>,
    temporal: TemporalAttention,
    resample: Resample,
}

impl Block {
    fn forward(&self, x: &Tensor, emb: &Tensor, frames: usize, temporal: bool) -> Result<(Tensor, Tensor)> {
        let mut h = self.res.forward(x, emb)?;
        if let Some(sa) = &self.spatial {
            h = sa.forward(&h)?;
        }
        if temporal {
            h = self.temporal.forward(&h, frames)?;
        }
        let out = match &self.resample {
            Resample::None => h.clone(),
            Resample::Down(conv) => conv.forward(&space_to_depth(&h, 2)?)?,
            Resample::Up(conv) => {
                let (_, _, hh, ww) = h.dims4()?;
                conv.forward(&h.upsample_nearest2d(hh * 2, ww * 2)?)?
            }
        };
        Ok((h, out))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub tap: Option<BlockId>,
    /// `false` replaces every temporal layer by the identity.
    pub temporal: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            tap: None,
            temporal: true,
        }
    }
}

pub struct ForwardOutput {
    pub denoised: Tensor,
    pub features: Option<Tensor>,
}

pub struct UNet {
    store: ParamStore,
    arch: UNetArch,
    conv_in: Conv2d,
    emb1: Linear,
    emb2: Linear,
    blocks: Vec<Block>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    pub precond: Preconditioner,
}

/// Contents of `unet.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UNetMeta {
    pub arch: UNetArch,
    pub sigma_data: f64,
    pub tap: Option<BlockId>,
    pub tags: std::collections::BTreeMap<String, Option<ParamTag>>,
}

impl UNet {
    pub fn new(arch: UNetArch, precond: Preconditioner, seed: u64) -> Result<Self> {
        Self::build(ParamStore::new(seed), arch, precond)
    }

    /// Parameters stored as `dtype`; pair with `store().copy_from` to mirror a model.
    pub fn with_dtype(arch: UNetArch, precond: Preconditioner, seed: u64, dtype: DType) -> Result<Self> {
        Self::build(ParamStore::with_dtype(seed, dtype), arch, precond)
    }

    fn build(store: ParamStore, arch: UNetArch, precond: Preconditioner) -> Result<Self> {
        let c = arch.base_channels;
        if c == 0 || arch.latent_channels == 0 || arch.head_dim == 0 {
            return Err(Error::Config("U-Net widths must be positive".into()));
        }
        let root = store.root().tagged(ParamTag::Spatial);
        let emb_dim = arch.emb_dim();
        let heads = |ch: usize| (ch / arch.head_dim).max(1);
        let mut blocks = Vec::with_capacity(9);
        let mut ch = c;
        let mut skips = Vec::new();
        for id in BlockId::ALL {
            let s = root.pp(&id.to_string().to_lowercase());
            let cout = arch.block_channels(id);
            let cin = match id {
                BlockId::Up0 | BlockId::Up1 | BlockId::Up2 | BlockId::Up3 => ch + skips.pop().expect("skip per up block"),
                _ => ch,
            };
            let spatial = (id.inner_reduction() > 1)
                .then(|| SpatialAttention::new(&s.pp("spatial_attn"), cout, heads(cout)))
                .transpose()?;
            let resample = match id {
                BlockId::Down0 | BlockId::Down1 => Resample::Down(Conv2d::new(&s.pp("down"), 4 * cout, cout, 1, 1)?),
                BlockId::Up1 | BlockId::Up2 => Resample::Up(Conv2d::new(&s.pp("up"), cout, cout, 3, 1)?),
                _ => Resample::None,
            };
            blocks.push(Block {
                res: ResBlock::new(&s.pp("res"), cin, cout, emb_dim)?,
                spatial,
                temporal: TemporalAttention::new(&s.pp("temporal_attn").tagged(ParamTag::Temporal), cout, heads(cout))?,
                resample,
            });
            if matches!(id, BlockId::Down0 | BlockId::Down1 | BlockId::Down2 | BlockId::Down3) {
                skips.push(cout);
            }
            ch = cout;
        }
        Ok(Self {
            conv_in: Conv2d::new(&root.pp("conv_in"), 2 * arch.latent_channels, c, 3, 1)?,
            emb1: Linear::new(&root.pp("noise_emb.0"), c, emb_dim)?,
            emb2: Linear::new(&root.pp("noise_emb.1"), emb_dim, emb_dim)?,
            blocks,
            norm_out: GroupNorm::new(&root.pp("norm_out"), c, 8)?,
            conv_out: Conv2d::with_std(&root.pp("conv_out"), c, arch.latent_channels, 3, 1, 0.01 / (9.0 * c as f64).sqrt())?,
            store,
            arch,
            precond,
        })
    }

    pub fn arch(&self) -> UNetArch {
        self.arch
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Sinusoidal embedding of each row's `c_noise`, `(N, base_channels)`.
    fn noise_embedding(&self, c_noise: &[f64]) -> Result<Tensor> {
        let dim = self.arch.base_channels;
        let half = dim / 2;
        let mut values = Vec::with_capacity(c_noise.len() * dim);
        for &cn in c_noise {
            for i in 0..dim {
                let freq = (-(1000f64.ln()) * (i % half.max(1)) as f64 / half.max(1) as f64).exp();
                let arg = cn * 100.0 * freq;
                values.push(if i < half { arg.cos() } else { arg.sin() } as f32);
            }
        }
        let t = Tensor::from_vec(values, (c_noise.len(), dim), &Device::Cpu)?.to_dtype(self.store.dtype())?;
        let h = self.emb1.forward(&t)?.silu()?;
        Ok(self.emb2.forward(&h)?.silu()?)
    }

    /// The raw network on `(N, 2C, h, w)` inputs with one `c_noise` per row.
    pub fn net(&self, x: &Tensor, c_noise: &[f64], frames: usize, opts: ForwardOptions) -> Result<(Tensor, Option<Tensor>)> {
        let emb = self.noise_embedding(c_noise)?;
        let mut h = self.conv_in.forward(x)?;
        let mut skips = Vec::with_capacity(4);
        let mut tapped = None;
        for (id, block) in BlockId::ALL.into_iter().zip(&self.blocks) {
            if matches!(id, BlockId::Up0 | BlockId::Up1 | BlockId::Up2 | BlockId::Up3) {
                let skip: Tensor = skips.pop().expect("skip per up block");
                h = Tensor::cat(&[&h, &skip], 1)?;
            }
            let (inner, out) = block.forward(&h, &emb, frames, opts.temporal)?;
            if matches!(id, BlockId::Down0 | BlockId::Down1 | BlockId::Down2 | BlockId::Down3) {
                skips.push(inner);
            }
            if opts.tap == Some(id) {
                tapped = Some(out.clone());
            }
            h = out;
        }
        let out = self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?;
        Ok((out, tapped))
    }

    /// Preconditioned denoiser over `B` clips of `frames` frames each, laid
    /// out as `(B·frames, C, h, w)`, with one noise level per clip.
    pub fn forward(&self, z_t: &Tensor, sigma: &[f64], z_c: &Tensor, frames: usize, opts: ForwardOptions) -> Result<ForwardOutput> {
        if z_t.dims() != z_c.dims() {
            return Err(Error::Shape(format!("z_t {:?} and z_c {:?} differ", z_t.dims(), z_c.dims())));
        }
        let (n, c, h, w) = z_t.dims4()?;
        if c != self.arch.latent_channels {
            return Err(Error::Shape(format!("expected {} latent channels, got {c}", self.arch.latent_channels)));
        }
        if frames == 0 || n % frames != 0 || n / frames != sigma.len() {
            return Err(Error::Shape(format!("{n} rows do not split into {} clips of {frames}", sigma.len())));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!("latent grid {h}x{w} must be divisible by 4")));
        }
        if let Some(s) = sigma.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::Domain(format!("noise level must be positive, got {s}")));
        }
        let dtype = self.store.dtype();
        let (z_t, z_c) = (z_t.to_dtype(dtype)?, z_c.to_dtype(dtype)?);
        let per_row = |f: &dyn Fn(f64) -> f64| -> Result<Tensor> {
            let v: Vec<f32> = sigma.iter().flat_map(|&s| std::iter::repeat_n(f(s) as f32, frames)).collect();
            Ok(Tensor::from_vec(v, (n, 1, 1, 1), &Device::Cpu)?.to_dtype(dtype)?)
        };
        let p = self.precond;
        let c_in = per_row(&|s| p.c_in(s))?;
        let c_skip = per_row(&|s| p.c_skip(s))?;
        let c_out = per_row(&|s| p.c_out(s))?;
        let c_noise: Vec<f64> = sigma.iter().flat_map(|&s| std::iter::repeat_n(p.c_noise(s), frames)).collect();
        let x = Tensor::cat(&[&z_t.broadcast_mul(&c_in)?, &z_c], 1)?;
        let (raw, features) = self.net(&x, &c_noise, frames, opts)?;
        let denoised = (z_t.broadcast_mul(&c_skip)? + raw.broadcast_mul(&c_out)?)?;
        Ok(ForwardOutput { denoised, features })
    }

    /// Single-clip convenience wrapper implementing [`Denoise`].
    pub fn denoiser(&self, opts: ForwardOptions) -> UNetDenoiser<'_> {
        UNetDenoiser { net: self, opts }
    }

    pub fn meta(&self, tap: Option<BlockId>) -> UNetMeta {
        UNetMeta {
            arch: self.arch,
            sigma_data: self.precond.sigma_data,
            tap,
            tags: self.store.tag_table(),
        }
    }

    pub fn save(&self, dir: &Path, tap: Option<BlockId>) -> Result<()> {
        self.store.save(dir)?;
        ntf::write_atomic(&dir.join("unet.json"), &serde_json::to_vec_pretty(&self.meta(tap))?)
    }

    pub fn load(dir: &Path) -> Result<(Self, UNetMeta)> {
        let path = dir.join("unet.json");
        let meta: UNetMeta = serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        let unet = Self::build(
            ParamStore::new(0),
            meta.arch,
            Preconditioner {
                sigma_data: meta.sigma_data,
            },
        )?;
        unet.store.load(dir)?;
        if unet.store.tag_table() != meta.tags {
            return Err(Error::Integrity(format!("tag table in {} does not match the architecture", path.display())));
        }
        Ok((unet, meta))
    }
}

pub struct UNetDenoiser<'a> {
    net: &'a UNet,
    opts: ForwardOptions,
}

impl Denoise for UNetDenoiser<'_> {
    fn denoise(&self, z_t: &Tensor, sigma: f64, z_c: &Tensor) -> Result<Tensor> {
        let frames = z_t.dim(0)?;
        Ok(self.net.forward(z_t, &[sigma], z_c, frames, self.opts)?.denoised)
    }
}

pub type NamedVars = Vec<(String, Var)>;

/// Partitions the store into (spatial, temporal) parameters.
pub fn split_params(store: &ParamStore) -> Result<(NamedVars, NamedVars)> {
    let tags = store.tag_table();
    let mut spatial = Vec::new();
    let mut temporal = Vec::new();
    for (name, var) in store.named_vars() {
        match tags.get(&name).copied().flatten() {
            Some(ParamTag::Spatial) => spatial.push((name, var)),
            Some(ParamTag::Temporal) => temporal.push((name, var)),
            None => return Err(Error::Integrity(format!("parameter {name} has no spatial/temporal tag"))),
        }
    }
    Ok((spatial, temporal))
}

/// Zero latents of the given `(N, C, h, w)` shape, a common test input.
pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Result<Tensor> {
    Ok(Tensor::zeros((n, c, h, w), DType::F32, &Device::Cpu)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn;
    use crate::trainer::{AdamConfig, Trainable};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> UNetArch {
        UNetArch {
            base_channels: 8,
            latent_channels: 4,
            head_dim: 8,
        }
    }

    fn latents(n: usize, h: usize, seed: u64) -> Tensor {
        randn(&mut ChaCha8Rng::seed_from_u64(seed), &[n, 4, h, h], DType::F32).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f32 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap()
    }

    #[test]
    fn shapes_and_taps() {
        let net = UNet::new(UNetArch::default(), Preconditioner::default(), 0).unwrap();
        let (zt, zc) = (latents(8, 8, 1), latents(8, 8, 2));
        let out = net.forward(&zt, &[1.0], &zc, 8, ForwardOptions::default()).unwrap();
        assert_eq!(out.denoised.dims(), &[8, 4, 8, 8]);
        assert!(out.features.is_none());
        let first = net.store().get("down0.res.conv1.weight").unwrap();
        assert_eq!(net.store().get("conv_in.weight").unwrap().dims(), &[64, 8, 3, 3]);
        assert_eq!(first.dims()[1], 64);

        let net = UNet::new(small(), Preconditioner::default(), 0).unwrap();
        for id in BlockId::ALL {
            let opts = ForwardOptions {
                tap: Some(id),
                temporal: true,
            };
            let f = net.forward(&zt, &[0.7, 3.0], &zc, 4, opts).unwrap().features.unwrap();
            let side = 8 / id.reduction();
            assert_eq!(f.dims(), &[8, small().block_channels(id), side, side], "{id}");
        }
        assert!("Up1".parse::<BlockId>().is_ok());
        assert!(matches!("Up9".parse::<BlockId>(), Err(Error::Config(_))));
        assert!(matches!(net.forward(&zt, &[1.0], &latents(8, 4, 0), 8, ForwardOptions::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn single_frame_and_determinism() {
        let net = UNet::new(small(), Preconditioner::default(), 4).unwrap();
        let (zt, zc) = (latents(1, 4, 1), latents(1, 4, 2));
        let a = net.forward(&zt, &[2.0], &zc, 1, ForwardOptions::default()).unwrap().denoised;
        let b = net.forward(&zt, &[2.0], &zc, 1, ForwardOptions::default()).unwrap().denoised;
        assert_eq!(a.dims(), &[1, 4, 4, 4]);
        assert_eq!(max_diff(&a, &b), 0.0);
    }

    #[test]
    fn frame_permutation_equivariance_without_temporal_layers() {
        let net = UNet::new(small(), Preconditioner::default(), 5).unwrap();
        let (zt, zc) = (latents(5, 4, 3), latents(5, 4, 4));
        let opts = ForwardOptions {
            tap: None,
            temporal: false,
        };
        let base = net.forward(&zt, &[1.5], &zc, 5, opts).unwrap().denoised;
        let perm = Tensor::new(&[3u32, 0, 4, 1, 2], &Device::Cpu).unwrap();
        let permuted = net
            .forward(&zt.index_select(&perm, 0).unwrap(), &[1.5], &zc.index_select(&perm, 0).unwrap(), 5, opts)
            .unwrap()
            .denoised;
        let d = max_diff(&permuted, &base.index_select(&perm, 0).unwrap());
        assert!(d < 1e-5, "{d}");
        // With temporal attention the frames interact.
        let mixed = net.forward(&zt, &[1.5], &zc, 5, ForwardOptions::default()).unwrap().denoised;
        let solo = net
            .forward(&zt.narrow(0, 0, 1).unwrap(), &[1.5], &zc.narrow(0, 0, 1).unwrap(), 1, ForwardOptions::default())
            .unwrap()
            .denoised;
        assert!(max_diff(&mixed.narrow(0, 0, 1).unwrap(), &solo) > 0.0);
    }

    #[test]
    fn parameter_partition() {
        let net = UNet::new(small(), Preconditioner::default(), 6).unwrap();
        let (spatial, temporal) = split_params(net.store()).unwrap();
        assert_eq!(spatial.len() + temporal.len(), net.store().len());
        assert!(temporal.iter().all(|(n, _)| n.contains("temporal_attn")));
        assert!(spatial.iter().all(|(n, _)| !n.contains("temporal_attn")));
        assert!(!temporal.is_empty());

        let temporal_sum = crate::nn::checksum_vars(&temporal).unwrap();
        let spatial_sum = crate::nn::checksum_vars(&spatial).unwrap();
        let mut opt = Trainable::new(spatial.iter().map(|(_, v)| v.clone()).collect(), &AdamConfig::default()).unwrap();
        let (zt, zc) = (latents(2, 4, 7), latents(2, 4, 8));
        let out = net.forward(&zt, &[1.0], &zc, 2, ForwardOptions::default()).unwrap().denoised;
        opt.step(&out.sqr().unwrap().mean_all().unwrap(), 1e-3).unwrap();
        assert_eq!(crate::nn::checksum_vars(&temporal).unwrap(), temporal_sum);
        assert_ne!(crate::nn::checksum_vars(&spatial).unwrap(), spatial_sum);

        let store = ParamStore::new(0);
        store.root().param("loose", &[1], crate::nn::Init::Const(0.0)).unwrap();
        assert!(matches!(split_params(&store), Err(Error::Integrity(_))));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let net = UNet::new(small(), Preconditioner::default(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        net.save(dir.path(), Some(BlockId::Up1)).unwrap();
        let (back, meta) = UNet::load(dir.path()).unwrap();
        assert_eq!(meta.tap, Some(BlockId::Up1));
        assert_eq!(back.store().checksum().unwrap(), net.store().checksum().unwrap());
    }
}
