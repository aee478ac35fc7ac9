//! Parameter storage and the handful of differentiable layers the models are
//! built from.
//!
//! Every trainable tensor lives in a [`ParamStore`] under a dotted name. The
//! store optionally records a [`ParamTag`] per parameter so the denoiser can be
//! partitioned into spatial and temporal sets.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ntf::{self, NtfTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamTag {
    Spatial,
    Temporal,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    Const(f64),
}

#[derive(Clone)]
struct Entry {
    var: Var,
    tag: Option<ParamTag>,
}

/// Named, optionally tagged collection of trainable variables.
#[derive(Clone)]
pub struct ParamStore {
    entries: Arc<Mutex<BTreeMap<String, Entry>>>,
    rng: Arc<Mutex<ChaCha8Rng>>,
    dtype: DType,
    frozen: bool,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self::with_dtype(seed, DType::F32)
    }

    pub fn with_dtype(seed: u64, dtype: DType) -> Self {
        Self {
            entries: Arc::new(Mutex::new(BTreeMap::new())),
            rng: Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed))),
            dtype,
            frozen: false,
        }
    }

    /// Layers built from a frozen store see detached weights: gradients still
    /// flow through them to their inputs but never reach the parameters.
    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &'static Device {
        &Device::Cpu
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
            tag: None,
        }
    }

    fn create(&self, name: String, shape: &[usize], init: Init, tag: Option<ParamTag>) -> Result<Tensor> {
        let mut entries = self.entries.lock().expect("param store poisoned");
        if entries.contains_key(&name) {
            return Err(Error::Config(format!("parameter {name} declared twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Const(v) => vec![v; n],
            Init::Normal(std) => {
                let mut rng = self.rng.lock().expect("param rng poisoned");
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut *rng);
                        z * std
                    })
                    .collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = if self.frozen {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        };
        entries.insert(name, Entry { var, tag });
        Ok(out)
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.lock().expect("param store poisoned").keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("param store poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_elements(&self) -> usize {
        self.vars().iter().map(|v| v.elem_count()).sum()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.entries
            .lock()
            .expect("param store poisoned")
            .get(name)
            .map(|e| e.var.clone())
    }

    pub fn tag(&self, name: &str) -> Option<ParamTag> {
        self.entries
            .lock()
            .expect("param store poisoned")
            .get(name)
            .and_then(|e| e.tag)
    }

    /// All variables in name order.
    pub fn vars(&self) -> Vec<Var> {
        self.entries
            .lock()
            .expect("param store poisoned")
            .values()
            .map(|e| e.var.clone())
            .collect()
    }

    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.entries
            .lock()
            .expect("param store poisoned")
            .iter()
            .map(|(k, e)| (k.clone(), e.var.clone()))
            .collect()
    }

    /// Variables whose name starts with `prefix`, in name order.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.named_vars().into_iter().filter(|(n, _)| n.starts_with(prefix)).collect()
    }

    pub fn tag_table(&self) -> BTreeMap<String, Option<ParamTag>> {
        self.entries
            .lock()
            .expect("param store poisoned")
            .iter()
            .map(|(k, e)| (k.clone(), e.tag))
            .collect()
    }

    /// Overwrites a parameter's value in place. Layers holding the parameter see
    /// the new value on their next forward pass.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if var.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name} has shape {:?}, got {:?}",
                var.shape().dims(),
                value.shape().dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// SHA-256 over every parameter's name and little-endian f32 bytes.
    pub fn checksum(&self) -> Result<String> {
        checksum_vars(&self.named_vars())
    }

    pub fn param_checksums(&self) -> Result<BTreeMap<String, String>> {
        self.named_vars()
            .into_iter()
            .map(|(name, var)| {
                let sum = checksum_vars(&[(name.clone(), var)])?;
                Ok((name, sum))
            })
            .collect()
    }

    /// Writes one `<name>.ntf` per parameter into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, var) in self.named_vars() {
            let t = var.as_tensor();
            let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            ntf::write(dir.join(format!("{name}.ntf")), &NtfTensor::f32(t.dims().to_vec(), values)?)?;
        }
        Ok(())
    }

    /// Loads every declared parameter from `dir`. Missing files or shape
    /// mismatches are errors; extra files are ignored.
    pub fn load(&self, dir: &Path) -> Result<()> {
        for (name, var) in self.named_vars() {
            let path = dir.join(format!("{name}.ntf"));
            let t = ntf::read(&path)?;
            if t.dims != var.dims() {
                return Err(Error::Shape(format!(
                    "{}: stored shape {:?} does not match model shape {:?}",
                    path.display(),
                    t.dims,
                    var.dims()
                )));
            }
            let dims = t.dims.clone();
            let values = t.into_f32()?;
            var.set(&Tensor::from_vec(values, dims, &Device::Cpu)?.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Copies values from another store with identical names and shapes.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        for (name, var) in self.named_vars() {
            let src = other
                .get(&name)
                .ok_or_else(|| Error::Config(format!("source store lacks parameter {name}")))?;
            var.set(&src.as_tensor().to_dtype(self.dtype)?.copy()?)?;
        }
        Ok(())
    }
}

pub fn checksum_vars(vars: &[(String, Var)]) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, var) in vars {
        hasher.update(name.as_bytes());
        let values = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        for v in values {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// A naming prefix into a [`ParamStore`], carrying the tag assigned to new
/// parameters.
#[derive(Clone)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
    tag: Option<ParamTag>,
}

impl Scope {
    pub fn pp(&self, name: &str) -> Scope {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store.clone(),
            prefix,
            tag: self.tag,
        }
    }

    pub fn tagged(&self, tag: ParamTag) -> Scope {
        Scope {
            tag: Some(tag),
            ..self.clone()
        }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.create(full, shape, init, self.tag)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(scope: &Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_std(scope, in_dim, out_dim, (1.0 / in_dim as f64).sqrt())
    }

    pub fn with_std(scope: &Scope, in_dim: usize, out_dim: usize, std: f64) -> Result<Self> {
        Ok(Self {
            weight: scope.param("weight", &[out_dim, in_dim], Init::Normal(std))?,
            bias: scope.param("bias", &[out_dim], Init::Const(0.0))?,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Applies `x W^T + b` over the last dimension of an input of any rank.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (out_dim, in_dim) = self.weight.dims2()?;
        let dims = x.dims().to_vec();
        let lead: usize = dims[..dims.len() - 1].iter().product();
        let flat = x.reshape((lead, in_dim))?;
        let y = flat.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().expect("rank >= 1") = out_dim;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
    stride: usize,
}

impl Conv2d {
    /// Square kernel with "same" padding (`kernel / 2`).
    pub fn new(scope: &Scope, cin: usize, cout: usize, kernel: usize, stride: usize) -> Result<Self> {
        let std = (1.0 / (cin * kernel * kernel) as f64).sqrt();
        Self::with_std(scope, cin, cout, kernel, stride, std)
    }

    pub fn with_std(scope: &Scope, cin: usize, cout: usize, kernel: usize, stride: usize, std: f64) -> Result<Self> {
        Ok(Self {
            weight: scope.param("weight", &[cout, cin, kernel, kernel], Init::Normal(std))?,
            bias: scope.param("bias", &[cout], Init::Const(0.0))?,
            kernel,
            stride,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let pad = self.kernel / 2;
        // The im2col route has a much cheaper backward pass on small maps.
        let y = if self.stride == 1 && self.kernel > 1 && h * w <= 256 {
            conv_im2col(x, &self.weight, pad)?
        } else if self.kernel == 1 && self.stride == 1 {
            let (n, c, h, w) = x.dims4()?;
            let cout = self.weight.dim(0)?;
            let wm = self.weight.reshape((cout, c))?;
            let flat = x.permute((0, 2, 3, 1))?.reshape((n * h * w, c))?;
            flat.matmul(&wm.t()?)?.reshape((n, h, w, cout))?.permute((0, 3, 1, 2))?
        } else {
            x.conv2d(&self.weight, pad, self.stride, 1, 1)?
        };
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

fn conv_im2col(x: &Tensor, weight: &Tensor, pad: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (cout, _, k, _) = weight.dims4()?;
    let xp = x.pad_with_zeros(2, pad, pad)?.pad_with_zeros(3, pad, pad)?;
    let mut cols = Vec::with_capacity(k * k);
    for dy in 0..k {
        for dx in 0..k {
            cols.push(xp.narrow(2, dy, h)?.narrow(3, dx, w)?);
        }
    }
    // (n, c, k*k, h, w) -> (n*h*w, c*k*k)
    let col = Tensor::stack(&cols, 2)?
        .reshape((n, c * k * k, h * w))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((n * h * w, c * k * k))?;
    let wm = weight.reshape((cout, c * k * k))?;
    let y = col.matmul(&wm.t()?)?;
    Ok(y.reshape((n, h * w, cout))?.transpose(1, 2)?.reshape((n, cout, h, w))?)
}

/// Group normalization over `(N, C, ...)` inputs.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(scope: &Scope, channels: usize, max_groups: usize) -> Result<Self> {
        let mut groups = max_groups.min(channels).max(1);
        while channels % groups != 0 {
            groups -= 1;
        }
        Ok(Self {
            weight: scope.param("weight", &[channels], Init::Const(1.0))?,
            bias: scope.param("bias", &[channels], Init::Const(0.0))?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let (n, c) = (dims[0], dims[1]);
        let grouped = x.reshape((n, self.groups, ()))?;
        let mean = grouped.mean_keepdim(D::Minus1)?;
        let centered = grouped.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?.reshape(dims.as_slice())?;
        let mut bshape = vec![1usize; dims.len()];
        bshape[1] = c;
        Ok(normed
            .broadcast_mul(&self.weight.reshape(bshape.as_slice())?)?
            .broadcast_add(&self.bias.reshape(bshape.as_slice())?)?)
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(scope: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.param("weight", &[dim], Init::Const(1.0))?,
            bias: scope.param("bias", &[dim], Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        Ok(centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)?)
    }
}

/// Standard-normal tensor drawn from a seeded generator.
pub fn randn<R: rand::Rng + ?Sized>(rng: &mut R, dims: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let values: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect();
    Ok(Tensor::from_vec(values, dims, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Softmax along the last dimension built from differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Single- or multi-head scaled dot-product self-attention over `(B, T, C)`.
pub fn self_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, t, c) = q.dims3()?;
    let hd = c / heads;
    let split = |x: &Tensor| -> Result<Tensor> {
        Ok(x.reshape((b, t, heads, hd))?.transpose(1, 2)?.contiguous()?.reshape((b * heads, t, hd))?)
    };
    let (q, k, v) = (split(q)?, split(k)?, split(v)?);
    let scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
    let attn = softmax_last(&scores)?;
    let out = attn.matmul(&v)?;
    Ok(out.reshape((b, heads, t, hd))?.transpose(1, 2)?.contiguous()?.reshape((b, t, c))?)
}

struct Acos;

impl CustomOp1 for Acos {
    fn name(&self) -> &'static str {
        "acos"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("acos expects a contiguous input".into()))?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(v[start..end].iter().map(|x| x.acos()).collect()),
            CpuStorage::F64(v) => CpuStorage::F64(v[start..end].iter().map(|x| x.acos()).collect()),
            _ => return Err(candle_core::Error::Msg("acos supports f32/f64 only".into())),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        // d/dx acos(x) = -1 / sqrt(1 - x^2)
        let denom = (1.0 - arg.sqr()?)?.sqrt()?;
        Ok(Some(grad_res.neg()?.div(&denom)?))
    }
}

/// Differentiable elementwise arccosine. Inputs must lie strictly inside
/// `(-1, 1)` for a finite gradient.
pub fn acos(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Acos)?)
}

/// Rearranges `(N, C, H, W)` into `(N, C*f*f, H/f, W/f)`.
pub fn space_to_depth(x: &Tensor, f: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % f != 0 || w % f != 0 {
        return Err(Error::Shape(format!("{h}x{w} not divisible by {f}")));
    }
    let y = x
        .reshape((n * c, h / f, f, w / f, f))?
        .permute((0, 2, 4, 1, 3))?
        .contiguous()?;
    Ok(y.reshape((n, c * f * f, h / f, w / f))?)
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space(x: &Tensor, f: usize) -> Result<Tensor> {
    let (n, cff, h, w) = x.dims4()?;
    if cff % (f * f) != 0 {
        return Err(Error::Shape(format!("{cff} channels not divisible by {}", f * f)));
    }
    let c = cff / (f * f);
    let y = x
        .reshape((n * c, f, f, h, w))?
        .permute((0, 3, 1, 4, 2))?
        .contiguous()?;
    Ok(y.reshape((n, c, h * f, w * f))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acos_forward_and_gradient() {
        let x = Var::new(&[0.3f64, -0.5, 0.9], &Device::Cpu).unwrap();
        let y = acos(x.as_tensor()).unwrap();
        let vals = y.to_vec1::<f64>().unwrap();
        assert!((vals[0] - 0.3f64.acos()).abs() < 1e-12);
        let g = y.sum_all().unwrap().backward().unwrap();
        let gx = g.get(x.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        for (gi, xi) in gx.iter().zip([0.3f64, -0.5, 0.9]) {
            assert!((gi + 1.0 / (1.0 - xi * xi).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_matches_native_convolution() {
        let store = ParamStore::new(3);
        let conv = Conv2d::new(&store.root().pp("c"), 5, 7, 3, 1).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 5, 6, 6), &Device::Cpu).unwrap();
        let a = conv.forward(&x).unwrap();
        let b = x
            .conv2d(&conv.weight, 1, 1, 1, 1)
            .unwrap()
            .broadcast_add(&conv.bias.reshape((1, (), 1, 1)).unwrap())
            .unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-4, "{diff}");
    }

    #[test]
    fn pixel_shuffle_roundtrip() {
        let x = Tensor::arange(0f32, 2.0 * 3.0 * 4.0 * 4.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 3, 4, 4))
            .unwrap();
        let y = space_to_depth(&x, 2).unwrap();
        assert_eq!(y.dims(), &[2, 12, 2, 2]);
        let back = depth_to_space(&y, 2).unwrap();
        assert_eq!(back.flatten_all().unwrap().to_vec1::<f32>().unwrap(), x.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }

    #[test]
    fn store_save_load_and_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let a = ParamStore::new(1);
        Linear::new(&a.root().pp("lin"), 3, 2).unwrap();
        a.save(dir.path()).unwrap();
        let b = ParamStore::new(2);
        Linear::new(&b.root().pp("lin"), 3, 2).unwrap();
        assert_ne!(a.checksum().unwrap(), b.checksum().unwrap());
        b.load(dir.path()).unwrap();
        assert_eq!(a.checksum().unwrap(), b.checksum().unwrap());
    }

    #[test]
    fn duplicate_names_rejected() {
        let s = ParamStore::new(0);
        s.root().param("w", &[1], Init::Const(0.0)).unwrap();
        assert!(s.root().param("w", &[1], Init::Const(0.0)).is_err());
    }
}
