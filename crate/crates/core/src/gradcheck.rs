//! Central finite-difference checks of autograd gradients.

use candle_core::{DType, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub samples: usize,
    /// Perturbation, relative to `max(1, |w|)`.
    pub step: f64,
    /// Entries whose gradient is below this fraction of the largest gradient
    /// magnitude are not sampled; their finite differences are pure rounding.
    pub min_relative_grad: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            samples: 16,
            step: 1e-3,
            min_relative_grad: 1e-2,
            seed: 0,
        }
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn flat(v: &Var) -> Result<Vec<f64>> {
    Ok(v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

fn write(v: &Var, values: &[f64]) -> Result<()> {
    let t = Tensor::from_vec(values.to_vec(), v.as_tensor().dims(), v.device())?.to_dtype(v.dtype())?;
    v.set(&t)?;
    Ok(())
}

/// Compares the backprop gradient of `loss` with `(L(w+h) - L(w-h)) / 2h` on a
/// random subset of entries of `params`. `loss` must be deterministic.
pub fn grad_check<F>(params: &[(String, Var)], cfg: &GradCheckConfig, loss: F) -> Result<Vec<GradSample>>
where
    F: Fn() -> Result<Tensor>,
{
    grad_check_against(params, &loss, params, &loss, cfg)
}

/// Like [`grad_check`], but the finite differences are taken on `reference`,
/// a mirror of `params` (same names and values, usually in f64) evaluated by
/// `reference_loss`. This separates errors of the analytic gradient from the
/// rounding noise of a low-precision difference quotient.
pub fn grad_check_against<F, G>(
    params: &[(String, Var)],
    loss: F,
    reference: &[(String, Var)],
    reference_loss: G,
    cfg: &GradCheckConfig,
) -> Result<Vec<GradSample>>
where
    F: Fn() -> Result<Tensor>,
    G: Fn() -> Result<Tensor>,
{
    if params.len() != reference.len() || params.iter().zip(reference).any(|((a, _), (b, _))| a != b) {
        return Err(Error::Config("reference parameters do not mirror the checked ones".into()));
    }
    let grads = loss()?.backward()?;
    let mut analytic = Vec::with_capacity(params.len());
    for (_, v) in params {
        analytic.push(match grads.get(v.as_tensor()) {
            Some(g) => g.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?,
            None => vec![0.0; v.as_tensor().elem_count()],
        });
    }
    let largest = analytic.iter().flatten().fold(0f64, |m, g| m.max(g.abs()));
    if largest == 0.0 {
        return Err(Error::Domain("all sampled gradients are zero".into()));
    }
    let mut candidates = Vec::new();
    for (p, g) in analytic.iter().enumerate() {
        for (i, x) in g.iter().enumerate() {
            if x.abs() >= cfg.min_relative_grad * largest {
                candidates.push((p, i));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    candidates.shuffle(&mut rng);
    candidates.truncate(cfg.samples);

    let mut out = Vec::with_capacity(candidates.len());
    for (p, i) in candidates {
        let var = &reference[p].1;
        let mut w = flat(var)?;
        let orig = w[i];
        let h = cfg.step * orig.abs().max(1.0);
        w[i] = orig + h;
        write(var, &w)?;
        let up = scalar(&reference_loss()?)?;
        w[i] = orig - h;
        write(var, &w)?;
        let down = scalar(&reference_loss()?)?;
        w[i] = orig;
        write(var, &w)?;
        // the step actually applied after rounding to the parameter dtype
        let applied = match var.dtype() {
            DType::F64 => 2.0 * h,
            _ => ((orig + h) as f32 - (orig - h) as f32) as f64,
        };
        out.push(GradSample {
            param: params[p].0.clone(),
            index: i,
            analytic: analytic[p][i],
            numeric: (up - down) / applied,
        });
    }
    Ok(out)
}

pub fn max_rel_error(samples: &[GradSample]) -> f64 {
    samples.iter().map(GradSample::rel_error).fold(0.0, f64::max)
}
