//! Forward noising, the weighted denoising objective, noise-level sampling,
//! preconditioning and the latent samplers.
//!
//! Latent tensors use the `(F, C, h, w)` layout throughout.

use candle_core::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::randn;

pub const SIGMA_MIN: f64 = 0.002;
pub const RHO: f64 = 7.0;

/// Input/output scalings around the raw network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preconditioner {
    pub sigma_data: f64,
}

impl Default for Preconditioner {
    fn default() -> Self {
        Self { sigma_data: 0.5 }
    }
}

impl Preconditioner {
    pub fn c_skip(&self, sigma: f64) -> f64 {
        let sd2 = self.sigma_data * self.sigma_data;
        sd2 / (sigma * sigma + sd2)
    }

    pub fn c_out(&self, sigma: f64) -> f64 {
        sigma * self.sigma_data / (sigma * sigma + self.sigma_data * self.sigma_data).sqrt()
    }

    pub fn c_in(&self, sigma: f64) -> f64 {
        1.0 / (sigma * sigma + self.sigma_data * self.sigma_data).sqrt()
    }

    pub fn c_noise(&self, sigma: f64) -> f64 {
        sigma.ln() / 4.0
    }
}

/// Mixture of a point mass at `fixed` and a log-normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSampler {
    pub fixed: f64,
    pub fixed_prob: f64,
    pub loc: f64,
    pub scale: f64,
}

impl Default for NoiseSampler {
    fn default() -> Self {
        Self {
            fixed: 700.0,
            fixed_prob: 0.5,
            loc: 0.7,
            scale: 1.6,
        }
    }
}

impl NoiseSampler {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fixed_prob) {
            return Err(Error::Config(format!("sigma_fixed_prob {} outside [0,1]", self.fixed_prob)));
        }
        if self.fixed <= 0.0 || self.scale < 0.0 {
            return Err(Error::Config("sigma_fixed must be positive and the log-normal scale non-negative".into()));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if rng.random::<f64>() < self.fixed_prob {
            return self.fixed;
        }
        let normal = Normal::new(self.loc, self.scale).expect("validated scale");
        normal.sample(rng).exp()
    }
}

/// `z0 + σ·ε`.
pub fn add_noise(z0: &Tensor, sigma: f64, eps: &Tensor) -> Result<Tensor> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::Domain(format!("noise level must be positive, got {sigma}")));
    }
    Ok((z0 + (eps * sigma)?)?)
}

/// `(1 + σ²) / σ²`.
pub fn lambda_weight(sigma: f64) -> f64 {
    (1.0 + sigma * sigma) / (sigma * sigma)
}

/// A preconditioned denoiser `D(z_t; σ, z_c)` on `(F, C, h, w)` latents.
pub trait Denoise {
    fn denoise(&self, z_t: &Tensor, sigma: f64, z_c: &Tensor) -> Result<Tensor>;
}

impl<F> Denoise for F
where
    F: Fn(&Tensor, f64, &Tensor) -> Result<Tensor>,
{
    fn denoise(&self, z_t: &Tensor, sigma: f64, z_c: &Tensor) -> Result<Tensor> {
        self(z_t, sigma, z_c)
    }
}

/// `λ(σ)·mean((denoised − z0)²)` as a scalar tensor.
pub fn weighted_mse(denoised: &Tensor, z0: &Tensor, sigma: f64) -> Result<Tensor> {
    Ok(((denoised - z0)?.sqr()?.mean_all()? * lambda_weight(sigma))?)
}

pub fn dsm_loss(den: &impl Denoise, z0: &Tensor, z_c: &Tensor, sigma: f64, eps: &Tensor) -> Result<Tensor> {
    let z_t = add_noise(z0, sigma, eps)?;
    weighted_mse(&den.denoise(&z_t, sigma, z_c)?, z0, sigma)
}

/// Decreasing noise levels for `steps` Euler steps: `steps + 1` values from
/// `sigma_max` down to 0, spaced uniformly in `σ^(1/ρ)`.
pub fn sigma_ladder(steps: usize, sigma_max: f64) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Domain("sampler needs at least one step".into()));
    }
    let mut ladder: Vec<f64> = if steps == 1 {
        vec![sigma_max]
    } else {
        let (hi, lo) = (sigma_max.powf(1.0 / RHO), SIGMA_MIN.powf(1.0 / RHO));
        (0..steps)
            .map(|i| (hi + i as f64 / (steps - 1) as f64 * (lo - hi)).powf(RHO))
            .collect()
    };
    ladder.push(0.0);
    Ok(ladder)
}

/// Deterministic Euler integration of the probability-flow ODE starting from
/// `sigma_max · eps`.
pub fn euler_sample_from(den: &impl Denoise, z_c: &Tensor, steps: usize, sigma_max: f64, eps: &Tensor) -> Result<Tensor> {
    let ladder = sigma_ladder(steps, sigma_max)?;
    let mut x = (eps * sigma_max)?;
    for pair in ladder.windows(2) {
        let (s, next) = (pair[0], pair[1]);
        let denoised = den.denoise(&x, s, z_c)?;
        x = if next == 0.0 {
            denoised
        } else {
            let d = ((&x - &denoised)? / s)?;
            (&x + (d * (next - s))?)?
        };
    }
    Ok(x)
}

pub fn euler_sample<R: Rng + ?Sized>(den: &impl Denoise, z_c: &Tensor, steps: usize, sigma_max: f64, rng: &mut R) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::Domain("sampler needs at least one step".into()));
    }
    let eps = randn(rng, z_c.dims(), z_c.dtype())?;
    euler_sample_from(den, z_c, steps, sigma_max, &eps)
}

/// `D(σ*·ε; σ*, z_c)`, with `ε = 0` when `eps` is `None`.
pub fn one_step_predict(den: &impl Denoise, z_c: &Tensor, sigma_star: f64, eps: Option<&Tensor>) -> Result<Tensor> {
    let start = match eps {
        Some(e) => (e * sigma_star)?,
        None => z_c.zeros_like()?,
    };
    den.denoise(&start, sigma_star, z_c)
}
