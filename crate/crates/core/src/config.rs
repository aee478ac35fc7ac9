//! Pipeline configuration: one JSON document with a section per module.
//! Unknown keys are rejected everywhere.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::{BlockId, UNetArch};
use crate::diffusion::{NoiseSampler, Preconditioner};
use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::ntf;
use crate::sfr::{SemanticArch, SemanticPretrainConfig};
use crate::synthdata::AugmentationConfig;
use crate::trainer::{AdamConfig, StageConfig};
use crate::vae::{DecoderFinetuneConfig, VaeArch, VaeTrainConfig};

pub const SEED_ENV: &str = "NC_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Corpus root holding one directory per clip.
    pub root: PathBuf,
    pub scenes: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// The last `holdout_scenes` scenes (by sorted id) are kept for evaluation.
    pub holdout_scenes: usize,
    pub augmentation: AugmentationConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeSection {
    pub arch: VaeArch,
    pub train: VaeTrainConfig,
    pub finetune: DecoderFinetuneConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSection {
    pub sigma_fixed: f64,
    pub sigma_fixed_prob: f64,
    pub sigma_lognormal_loc: f64,
    pub sigma_lognormal_scale: f64,
    pub sigma_data: f64,
    pub inference_steps: usize,
    pub inference_sigma: f64,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        let n = NoiseSampler::default();
        Self {
            sigma_fixed: n.fixed,
            sigma_fixed_prob: n.fixed_prob,
            sigma_lognormal_loc: n.loc,
            sigma_lognormal_scale: n.scale,
            sigma_data: Preconditioner::default().sigma_data,
            inference_steps: 1,
            inference_sigma: 700.0,
        }
    }
}

impl DiffusionSection {
    pub fn sampler(&self) -> NoiseSampler {
        NoiseSampler {
            fixed: self.sigma_fixed,
            fixed_prob: self.sigma_fixed_prob,
            loc: self.sigma_lognormal_loc,
            scale: self.sigma_lognormal_scale,
        }
    }

    pub fn preconditioner(&self) -> Preconditioner {
        Preconditioner {
            sigma_data: self.sigma_data,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SfrSection {
    pub enabled: bool,
    pub tap_block: BlockId,
    pub reg_weight: f64,
    pub projector_hidden: usize,
    pub encoder: SemanticArch,
    pub pretrain: SemanticPretrainConfig,
    /// Directory of precomputed `<clip_id>.ntf` features replacing the encoder.
    #[serde(default)]
    pub semantic_features: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub clip_range: (usize, usize),
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    pub stage1: StageSection,
    pub stage2: StageSection,
    pub warmup_steps: usize,
    pub half_life: f64,
    pub short_edge: usize,
    pub adam: AdamConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceSection {
    pub window: usize,
    pub overlap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub method: String,
    /// Column for y-t profiles; `None` picks the middle column.
    #[serde(default)]
    pub profile_x0: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_root: PathBuf,
    pub data: DataConfig,
    pub vae: VaeSection,
    pub unet: UNetArch,
    pub diffusion: DiffusionSection,
    pub sfr: SfrSection,
    pub trainer: TrainerSection,
    pub inference: InferenceSection,
    pub eval: EvalSection,
}

fn stage_section(s: &StageConfig) -> StageSection {
    StageSection {
        steps: s.steps,
        batch_size: s.batch_size,
        base_lr: s.base_lr,
        clip_range: s.clip_range,
        checkpoint_every: s.checkpoint_every,
    }
}

impl PipelineConfig {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        let (s1, s2) = (StageConfig::stage1(), StageConfig::stage2());
        Self {
            seed: 0,
            output_root: PathBuf::from("runs/desk"),
            data: DataConfig {
                root: PathBuf::from("data/desk"),
                scenes: 24,
                frames: 84,
                height: 64,
                width: 64,
                holdout_scenes: 4,
                augmentation: AugmentationConfig::default(),
            },
            vae: VaeSection {
                arch: VaeArch::default(),
                train: VaeTrainConfig::default(),
                finetune: DecoderFinetuneConfig::default(),
            },
            unet: UNetArch::default(),
            diffusion: DiffusionSection::default(),
            sfr: SfrSection {
                enabled: true,
                tap_block: BlockId::Up1,
                reg_weight: s1.reg_weight,
                projector_hidden: 128,
                encoder: SemanticArch::default(),
                pretrain: SemanticPretrainConfig::default(),
                semantic_features: None,
            },
            trainer: TrainerSection {
                stage1: stage_section(&s1),
                stage2: stage_section(&s2),
                warmup_steps: s1.warmup_steps,
                half_life: s1.half_life,
                short_edge: s1.short_edge,
                adam: AdamConfig::default(),
            },
            inference: InferenceSection { window: 14, overlap: 4 },
            eval: EvalSection {
                method: "vidnormal".into(),
                profile_x0: None,
            },
        }
    }

    /// The published recipe's magnitudes on top of the desk layout.
    pub fn full_scale() -> Self {
        let mut c = Self::desk();
        c.output_root = PathBuf::from("runs/full");
        c.trainer.stage1 = stage_section(&StageConfig::full_scale(1));
        c.trainer.stage2 = stage_section(&StageConfig::full_scale(2));
        c.trainer.short_edge = 576;
        c.vae.finetune.steps = 20_000;
        c.vae.finetune.lr = 1e-5;
        c
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Honours the seed override from the environment.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.holdout_scenes >= self.data.scenes {
            return Err(Error::Config("holdout_scenes must leave at least one training scene".into()));
        }
        self.data.augmentation.validate()?;
        self.stage(1).validate()?;
        self.stage(2).validate()?;
        self.inference_config().validate()?;
        if self.sfr.projector_hidden < self.sfr.encoder.dim {
            return Err(Error::Config("projector_hidden must be at least the semantic feature dim".into()));
        }
        Ok(())
    }

    pub fn stage(&self, stage: u8) -> StageConfig {
        let t = &self.trainer;
        let s = if stage == 2 { &t.stage2 } else { &t.stage1 };
        StageConfig {
            stage,
            steps: s.steps,
            batch_size: s.batch_size,
            base_lr: s.base_lr,
            warmup_steps: t.warmup_steps,
            half_life: t.half_life,
            clip_range: s.clip_range,
            short_edge: t.short_edge,
            reg_weight: self.sfr.reg_weight,
            noise: self.diffusion.sampler(),
            sigma_star: self.diffusion.inference_sigma,
            augmentation: self.data.augmentation,
            adam: t.adam,
            checkpoint_every: s.checkpoint_every,
        }
    }

    pub fn inference_config(&self) -> InferenceConfig {
        InferenceConfig {
            window: self.inference.window,
            overlap: self.inference.overlap,
            steps: self.diffusion.inference_steps,
            sigma_star: self.diffusion.inference_sigma,
            noise_seed: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `resolved_config.json` into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("resolved_config.json");
        ntf::write_atomic(&path, self.to_json()?.as_bytes())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        for cfg in [PipelineConfig::desk(), PipelineConfig::full_scale()] {
            cfg.validate().unwrap();
            let back: PipelineConfig = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
        let s = PipelineConfig::desk().stage(2);
        assert_eq!(s.clip_range, (1, 4));
        assert_eq!(PipelineConfig::desk().stage(1).clip_range, (1, 14));
        assert_eq!(PipelineConfig::full_scale().stage(1).short_edge, 576);
        assert_eq!(PipelineConfig::full_scale().vae.finetune.steps, 20_000);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&PipelineConfig::desk().to_json().unwrap()).unwrap();
        v["sfr"]["tap_blokc"] = serde_json::json!("Up1");
        assert!(serde_json::from_value::<PipelineConfig>(v.clone()).is_err());
        let mut w: serde_json::Value = serde_json::from_str(&PipelineConfig::desk().to_json().unwrap()).unwrap();
        w["extra"] = serde_json::json!(1);
        assert!(serde_json::from_value::<PipelineConfig>(w).is_err());
    }

    #[test]
    fn file_load_reports_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, "{\"seed\": 1}").unwrap();
        assert!(matches!(PipelineConfig::load(&p), Err(Error::Config(_))));
        let mut bad = PipelineConfig::desk();
        bad.inference.overlap = 20;
        fs::write(&p, bad.to_json().unwrap()).unwrap();
        assert!(matches!(PipelineConfig::load(&p), Err(Error::Config(_))));
    }
}
