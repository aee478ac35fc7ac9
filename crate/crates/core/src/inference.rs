//! Video normal estimation over arbitrary lengths with overlapping windows
//! blended in latent space.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ForwardOptions, UNet};
use crate::diffusion::{euler_sample_from, one_step_predict, Denoise};
use crate::error::{Error, Result};
use crate::nn::randn;
use crate::synthdata::{NormalSequence, VideoClip};
use crate::tensors::{rgb_tensor, tensor_to_normals};
use crate::vae::{Vae, FACTOR};

/// Longest clip seen in stage-1 training.
pub const TRAINED_MAX_LEN: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    pub window: usize,
    pub overlap: usize,
    pub steps: usize,
    pub sigma_star: f64,
    /// Seed for the starting noise; `None` starts from zero (deterministic).
    #[serde(default)]
    pub noise_seed: Option<u64>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            window: 14,
            overlap: 4,
            steps: 1,
            sigma_star: 700.0,
            noise_seed: None,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.overlap == 0 || self.overlap >= self.window {
            return Err(Error::Config(format!(
                "need 1 <= overlap < window, got overlap {} and window {}",
                self.overlap, self.window
            )));
        }
        if self.window > TRAINED_MAX_LEN {
            return Err(Error::Config(format!("window {} exceeds the trained length {TRAINED_MAX_LEN}", self.window)));
        }
        if self.steps == 0 || !(self.sigma_star > 0.0) {
            return Err(Error::Config("steps must be positive and sigma_star > 0".into()));
        }
        Ok(())
    }

    /// Per-frame processing: every frame is its own window.
    pub fn per_frame(self) -> Self {
        Self {
            window: 1,
            overlap: 0,
            ..self
        }
    }
}

/// Half-open frame ranges of the windows covering `frames` frames. Windows
/// advance by `window - overlap`; the last one is aligned to the end.
pub fn window_schedule(frames: usize, window: usize, overlap: usize) -> Result<Vec<(usize, usize)>> {
    if window == 0 || (overlap >= window && window > 1) || (overlap == 0 && window > 1) {
        return Err(Error::Config(format!("invalid window {window} / overlap {overlap}")));
    }
    if frames <= window {
        return Ok(vec![(0, frames)]);
    }
    let stride = (window - overlap).max(1);
    let mut out = Vec::new();
    let mut start = 0;
    while start + window < frames {
        out.push((start, start + window));
        start += stride;
    }
    out.push((frames - window, frames));
    Ok(out)
}

/// Combines per-window latents `(len_k, C, h, w)` into one `(F, C, h, w)`
/// sequence. Where a window overlaps frames already covered, the newer
/// window's weight ramps linearly as `(j + 1) / (m + 1)` over the `m`
/// shared frames.
pub fn blend_windows(windows: &[Tensor], schedule: &[(usize, usize)]) -> Result<Tensor> {
    if windows.len() != schedule.len() || windows.is_empty() {
        return Err(Error::Config(format!("{} windows for {} schedule entries", windows.len(), schedule.len())));
    }
    let mut frames: Vec<Tensor> = Vec::new();
    for (k, (lat, &(start, end))) in windows.iter().zip(schedule).enumerate() {
        if lat.dim(0)? != end - start {
            return Err(Error::Shape(format!("window {k} has {} frames, schedule says {}", lat.dim(0)?, end - start)));
        }
        let covered = frames.len();
        if k == 0 && start != 0 {
            return Err(Error::Config("first window must start at frame 0".into()));
        }
        if k > 0 && start >= covered {
            return Err(Error::Config(format!("window {k} ({start}..{end}) does not overlap its predecessor")));
        }
        let shared = covered.min(end) - start;
        for j in 0..end - start {
            let f = start + j;
            let new = lat.get(j)?;
            if f < covered {
                let w = (j + 1) as f64 / (shared + 1) as f64;
                frames[f] = ((&frames[f] * (1.0 - w))? + (new * w)?)?;
            } else {
                frames.push(new);
            }
        }
    }
    Ok(Tensor::stack(&frames, 0)?)
}

fn predict_window(den: &impl Denoise, z_c: &Tensor, cfg: &InferenceConfig, window_index: usize) -> Result<Tensor> {
    let eps = match cfg.noise_seed {
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ window_index as u64);
            Some(randn(&mut rng, z_c.dims(), z_c.dtype())?)
        }
        None => None,
    };
    if cfg.steps == 1 {
        return one_step_predict(den, z_c, cfg.sigma_star, eps.as_ref());
    }
    let eps = match eps {
        Some(e) => e,
        None => z_c.zeros_like()?,
    };
    euler_sample_from(den, z_c, cfg.steps, cfg.sigma_star, &eps)
}

/// Normal latents for a `(F, C, h, w)` RGB latent sequence of any length.
pub fn predict_latents(den: &impl Denoise, z_c: &Tensor, cfg: &InferenceConfig) -> Result<Tensor> {
    let frames = z_c.dim(0)?;
    if frames == 0 {
        return Err(Error::Domain("cannot run inference on zero frames".into()));
    }
    let schedule = window_schedule(frames, cfg.window, cfg.overlap)?;
    let windows = schedule
        .iter()
        .enumerate()
        .map(|(k, &(s, e))| predict_window(den, &z_c.narrow(0, s, e - s)?, cfg, k))
        .collect::<Result<Vec<_>>>()?;
    if windows.len() == 1 {
        return Ok(windows.into_iter().next().expect("one window"));
    }
    if cfg.overlap == 0 {
        // Disjoint windows tile the sequence exactly.
        return Ok(Tensor::cat(&windows, 0)?);
    }
    blend_windows(&windows, &schedule)
}

/// Full pipeline with any denoiser: encode, predict, decode, renormalise.
pub fn estimate_normals_with(vae: &Vae, den: &impl Denoise, video: &VideoClip, cfg: &InferenceConfig) -> Result<NormalSequence> {
    let d = video.dims;
    if d.frames == 0 {
        return Err(Error::Domain("cannot run inference on zero frames".into()));
    }
    let multiple = FACTOR * 4;
    if d.height % multiple != 0 || d.width % multiple != 0 {
        return Err(Error::Shape(format!("{}x{} is not divisible by {multiple}", d.height, d.width)));
    }
    let z_c = vae.encode(&rgb_tensor(video)?)?.detach();
    let z = predict_latents(den, &z_c, cfg)?;
    tensor_to_normals(&vae.decode(&z)?.to_dtype(DType::F32)?)
}

pub fn estimate_normals(vae: &Vae, unet: &UNet, video: &VideoClip, cfg: &InferenceConfig) -> Result<NormalSequence> {
    if cfg.window > 1 || cfg.overlap > 0 {
        cfg.validate()?;
    }
    estimate_normals_with(vae, &unet.denoiser(ForwardOptions::default()), video, cfg)
}
