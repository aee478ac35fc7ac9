//! Fixtures and checks shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use candle_core::{DType, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vidnormal::denoiser::{split_params, ForwardOptions, UNet, UNetArch};
use vidnormal::diffusion::{dsm_loss, Preconditioner};
use vidnormal::gradcheck::{grad_check, grad_check_against, GradCheckConfig, GradSample};
use vidnormal::nn::randn;
use vidnormal::sfr::{reg_loss, Projector};
use vidnormal::synthdata::{generate_corpus, ClipData, SynthSpec};
use vidnormal::tensors::rgb_tensor;
use vidnormal::trainer::{stage_loss, StageConfig, StageInputs};
use vidnormal::vae::{vae_loss, Vae, VaeArch};
use vidnormal::Result;

pub fn tiny_clips(scenes: usize, frames: usize, size: usize, seed: u64) -> Vec<ClipData> {
    generate_corpus(&SynthSpec {
        scenes,
        frames,
        height: size,
        width: size,
        seed,
    })
    .unwrap()
}

pub fn tiny_vae(seed: u64) -> Vae {
    Vae::new(
        VaeArch {
            channels: 8,
            latent_channels: 4,
        },
        seed,
    )
    .unwrap()
}

pub fn tiny_unet(seed: u64) -> UNet {
    UNet::new(
        UNetArch {
            base_channels: 8,
            latent_channels: 4,
            head_dim: 8,
        },
        Preconditioner::default(),
        seed,
    )
    .unwrap()
}

pub fn tiny_stage(stage: u8, steps: usize) -> StageConfig {
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

fn check_cfg(samples: usize) -> GradCheckConfig {
    GradCheckConfig {
        samples,
        seed: 7,
        ..Default::default()
    }
}

/// Finite differences on an f64 mirror take a much smaller step and stay
/// accurate for small gradients too.
fn mirror_cfg(samples: usize) -> GradCheckConfig {
    GradCheckConfig {
        step: 1e-6,
        min_relative_grad: 1e-4,
        ..check_cfg(samples)
    }
}

fn mirror_vae(vae: &Vae) -> Vae {
    let m = Vae::with_dtype(vae.arch(), 0, DType::F64).unwrap();
    m.store().copy_from(vae.store()).unwrap();
    m
}

fn mirror_unet(unet: &UNet) -> UNet {
    let m = UNet::with_dtype(unet.arch(), unet.precond, 0, DType::F64).unwrap();
    m.store().copy_from(unet.store()).unwrap();
    m
}

/// f32 analytic gradient of the VAE objective against f64 finite differences.
pub fn vae_grad_samples() -> Result<Vec<GradSample>> {
    let clips = tiny_clips(1, 2, 32, 5);
    let vae = tiny_vae(3);
    let reference = mirror_vae(&vae);
    let x = rgb_tensor(&clips[0].rgb)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let eps = randn(&mut rng, &[2, 4, 4, 4], DType::F32)?;
    grad_check_against(
        &vae.store().named_vars(),
        || vae_loss(&vae, &x, &eps, 1e-6),
        &reference.store().named_vars(),
        || vae_loss(&reference, &x, &eps, 1e-6),
        &mirror_cfg(16),
    )
}

pub fn dsm_grad_samples() -> Result<Vec<GradSample>> {
    let unet = tiny_unet(4);
    let reference = mirror_unet(&unet);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let z0 = (randn(&mut rng, &[3, 4, 4, 4], DType::F32)? * 0.5)?;
    let zc = (randn(&mut rng, &[3, 4, 4, 4], DType::F32)? * 0.5)?;
    let eps = randn(&mut rng, &[3, 4, 4, 4], DType::F32)?;
    let wide = |t: &Tensor| t.to_dtype(DType::F64).unwrap();
    let (z0w, zcw, epsw) = (wide(&z0), wide(&zc), wide(&eps));
    let den = unet.denoiser(ForwardOptions::default());
    let den_ref = reference.denoiser(ForwardOptions::default());
    grad_check_against(
        &unet.store().named_vars(),
        || dsm_loss(&den, &z0, &zc, 1.0, &eps),
        &reference.store().named_vars(),
        || dsm_loss(&den_ref, &z0w, &zcw, 1.0, &epsw),
        &mirror_cfg(16),
    )
}

/// Projector parameters and the tapped features both take part. The network
/// is shallow enough for a plain f32 difference quotient.
pub fn reg_grad_samples() -> Result<Vec<GradSample>> {
    let proj = Projector::new(8, 32, 16, 9)?;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let tapped = Var::from_tensor(&randn(&mut rng, &[2, 8, 4, 4], DType::F32)?)?;
    let semantic = randn(&mut rng, &[2, 16, 16], DType::F32)?;
    let loss = || -> Result<Tensor> { Ok(reg_loss(&semantic, &proj.project(tapped.as_tensor())?)?.loss) };
    let mut out = grad_check(&proj.store().named_vars(), &check_cfg(8), loss)?;
    out.extend(grad_check(&[("tapped".into(), tapped.clone())], &check_cfg(8), loss)?);
    Ok(out)
}

/// Angular loss of the decoded one-step prediction, against spatial weights.
pub fn stage2_grad_samples() -> Result<Vec<GradSample>> {
    let clips = tiny_clips(2, 6, 32, 3);
    let (vae, unet) = (tiny_vae(1), tiny_unet(2));
    let (vae_ref, unet_ref) = (mirror_vae(&vae), mirror_unet(&unet));
    let cfg = tiny_stage(2, 1);
    let inputs = |vae, unet| StageInputs {
        clips: &clips,
        vae,
        unet,
        sfr: None,
        seed: 5,
        out_dir: None,
        start_step: 0,
    };
    let (a, b) = (inputs(&vae, &unet), inputs(&vae_ref, &unet_ref));
    let (spatial, _) = split_params(unet.store())?;
    let (spatial_ref, _) = split_params(unet_ref.store())?;
    grad_check_against(
        &spatial,
        || stage_loss(&a, &cfg, 0),
        &spatial_ref,
        || stage_loss(&b, &cfg, 0),
        &mirror_cfg(8),
    )
}
