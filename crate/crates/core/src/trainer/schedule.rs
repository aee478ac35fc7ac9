use candle_core::{backprop::GradStore, Tensor, Var};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warm-up followed by exponential decay with a fixed half-life.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub half_life: f64,
}

impl OptimizerSchedule {
    pub fn new(base_lr: f64) -> Self {
        Self {
            base_lr,
            warmup_steps: 100,
            half_life: 10_000.0,
        }
    }
}

pub fn lr_at(schedule: &OptimizerSchedule, step: usize) -> f64 {
    let s = schedule;
    if step < s.warmup_steps {
        return s.base_lr * step as f64 / s.warmup_steps as f64;
    }
    s.base_lr * 0.5f64.powf((step - s.warmup_steps) as f64 / s.half_life)
}

/// Uniform integer in `[lo, hi]`.
pub fn clip_length_sampler<R: Rng + ?Sized>(range: (usize, usize), rng: &mut R) -> Result<usize> {
    let (lo, hi) = range;
    if lo == 0 || lo > hi {
        return Err(Error::Config(format!("invalid clip-length range [{lo}, {hi}]")));
    }
    Ok(rng.random_range(lo..=hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            grad_clip: Some(1.0),
        }
    }
}

/// AdamW over an explicit variable set with global-norm clipping.
pub struct Trainable {
    opt: AdamW,
    vars: Vec<Var>,
    clip: Option<f64>,
}

impl Trainable {
    pub fn new(vars: Vec<Var>, cfg: &AdamConfig) -> Result<Self> {
        let params = ParamsAdamW {
            lr: 0.0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        };
        Ok(Self {
            opt: AdamW::new(vars.clone(), params)?,
            vars,
            clip: cfg.grad_clip,
        })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Backpropagates `loss`, clips, and applies one update at `lr`.
    /// Returns the pre-clipping global gradient norm.
    pub fn step(&mut self, loss: &Tensor, lr: f64) -> Result<f64> {
        let mut grads = loss.backward()?;
        let norm = grad_norm(&grads, &self.vars)?;
        if !norm.is_finite() {
            return Err(Error::Domain(format!("non-finite gradient norm {norm}")));
        }
        if let Some(max) = self.clip {
            if norm > max {
                let scale = max / norm;
                for v in &self.vars {
                    if let Some(g) = grads.get(v.as_tensor()) {
                        let scaled = (g * scale)?;
                        grads.insert(v.as_tensor(), scaled);
                    }
                }
            }
        }
        self.opt.set_learning_rate(lr);
        self.opt.step(&grads)?;
        Ok(norm)
    }
}

pub fn grad_norm(grads: &GradStore, vars: &[Var]) -> Result<f64> {
    let mut total = 0f64;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            total += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(total.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_points() {
        let s = OptimizerSchedule::new(3e-4);
        assert_eq!(lr_at(&s, 0), 0.0);
        assert!((lr_at(&s, 50) - 1.5e-4).abs() < 1e-15);
        assert!((lr_at(&s, 100) - 3e-4).abs() < 1e-15);
        assert!((lr_at(&s, 10_100) - 1.5e-4).abs() < 1e-15);
        assert!(lr_at(&s, 5000) < lr_at(&s, 4000));
    }

    #[test]
    fn clip_lengths_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut counts = [0usize; 15];
        for _ in 0..14_000 {
            counts[clip_length_sampler((1, 14), &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[0], 0);
        for c in &counts[1..] {
            assert!((*c as f64 / 14_000.0 - 1.0 / 14.0).abs() < 0.01);
        }
        assert!((0..100).all(|_| clip_length_sampler((1, 1), &mut rng).unwrap() == 1));
        let max = (0..10_000).map(|_| clip_length_sampler((1, 4), &mut rng).unwrap()).max();
        assert_eq!(max, Some(4));
        assert!(clip_length_sampler((3, 2), &mut rng).is_err());
    }

    #[test]
    fn clipping_bounds_the_update() {
        let v = Var::new(&[0.0f32, 0.0], &candle_core::Device::Cpu).unwrap();
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut t = Trainable::new(vec![v.clone()], &cfg).unwrap();
        let loss = (v.as_tensor() * 1000.0).unwrap().sum_all().unwrap();
        let norm = t.step(&loss, 0.1).unwrap();
        assert!((norm - 1000.0 * 2f64.sqrt()).abs() < 1e-2);
        // Adam's first step moves each coordinate by about lr regardless of scale.
        let after = v.as_tensor().to_vec1::<f32>().unwrap();
        assert!(after.iter().all(|x| (x + 0.1).abs() < 1e-4));
    }
}
