//! Engine configuration file.
//!
//! Every section has defaults and rejects unknown keys. Command-line flags
//! are applied on top of the loaded file.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use genmatte_core::codec::LatentCodec;
use genmatte_core::denoiser::{
    luminance_band, luminance_threshold, Denoiser, GaussianOracle, MlpDenoiser, ProceduralOracle, TextEmbedder,
};
use genmatte_core::hires::{HiresConfig, Pipeline};
use genmatte_core::sampler::{GuidanceMode, SamplerConfig};
use genmatte_core::schedule::{DiffusionSchedule, ScheduleKind};
use genmatte_core::{Dims, Tensor3};
use serde::{Deserialize, Serialize};

use crate::error::AppError;

/// Environment variable naming a default configuration file.
pub const CONFIG_ENV: &str = "GENMATTE_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    pub factor: usize,
    pub image_mix_seed: u64,
    pub matte_mix_seed: u64,
}

impl Default for CodecSection {
    fn default() -> Self {
        Self {
            factor: 8,
            image_mix_seed: genmatte_core::hires::IMAGE_MIX_SEED,
            matte_mix_seed: genmatte_core::hires::MATTE_MIX_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    /// Sampling steps for both passes.
    pub steps: usize,
    /// Stochasticity of the low-resolution ensemble.
    pub eta: f64,
    /// Stochasticity of the patch pass.
    pub hr_eta: f64,
    pub guidance_mode: GuidanceMode,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            steps: 10,
            eta: 1.0,
            hr_eta: 0.0,
            guidance_mode: GuidanceMode::Normalized,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextSection {
    pub dim: usize,
    pub seed: u64,
}

impl Default for TextSection {
    fn default() -> Self {
        Self {
            dim: genmatte_core::hires::TEXT_DIM,
            seed: genmatte_core::hires::TEXT_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DenoiserSection {
    /// Luminance threshold with a seed-dependent band around it.
    Procedural {
        #[serde(default = "default_threshold")]
        threshold: f64,
        #[serde(default = "default_band")]
        ambiguity_band: f64,
    },
    /// Gaussian prior over mattes with a constant mean.
    Gaussian {
        #[serde(default = "default_mean")]
        mean: f64,
        #[serde(default = "default_variance")]
        variance: f64,
    },
    /// Trained weights file.
    Mlp { weights: PathBuf },
}

fn default_threshold() -> f64 {
    0.5
}

fn default_band() -> f64 {
    0.3
}

fn default_mean() -> f64 {
    0.5
}

fn default_variance() -> f64 {
    0.04
}

impl Default for DenoiserSection {
    fn default() -> Self {
        DenoiserSection::Procedural {
            threshold: default_threshold(),
            ambiguity_band: default_band(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub max_body_bytes: usize,
}

impl Default for ServiceSection {
    fn default() -> Self {
        Self {
            max_body_bytes: 32 * 1024 * 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub schedule: ScheduleSection,
    pub codec: CodecSection,
    pub sampler: SamplerSection,
    pub hires: HiresConfig,
    pub text: TextSection,
    pub denoiser: DenoiserSection,
    pub service: ServiceSection,
}

impl EngineConfig {
    pub fn from_json(text: &str) -> Result<Self, AppError> {
        serde_json::from_str(text).map_err(|e| AppError::Invalid(format!("invalid configuration: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, AppError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::Input(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// `path`, else the file named by [`CONFIG_ENV`], else defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self, AppError> {
        match path {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
                _ => Ok(Self::default()),
            },
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule, AppError> {
        let s = &self.schedule;
        Ok(DiffusionSchedule::new(s.steps, s.beta_start, s.beta_end, s.kind)?)
    }

    pub fn pipeline(&self) -> Result<Pipeline, AppError> {
        let schedule = self.schedule()?;
        let s = &self.sampler;
        let lr_sampler = SamplerConfig::strided(s.steps, &schedule, s.eta, s.guidance_mode)?;
        let hr_sampler = lr_sampler.clone().with_eta(s.hr_eta)?;
        let c = &self.codec;
        let pipeline = Pipeline {
            image_codec: LatentCodec::new(3, c.factor, c.image_mix_seed)?,
            matte_codec: LatentCodec::new(1, c.factor, c.matte_mix_seed)?,
            schedule,
            lr_sampler,
            hr_sampler,
            hires: self.hires.clone(),
            text: TextEmbedder::new(self.text.dim, self.text.seed),
        };
        pipeline.validate()?;
        Ok(pipeline)
    }

    pub fn denoiser(&self, pipeline: &Pipeline) -> Result<Arc<dyn Denoiser>, AppError> {
        match &self.denoiser {
            DenoiserSection::Procedural {
                threshold,
                ambiguity_band,
            } => {
                let mut oracle = ProceduralOracle::new(
                    luminance_threshold(*threshold),
                    pipeline.image_codec.clone(),
                    pipeline.matte_codec.clone(),
                )?;
                if *ambiguity_band > 0.0 {
                    oracle = oracle.with_ambiguity(luminance_band(*threshold, *ambiguity_band));
                }
                Ok(Arc::new(oracle))
            }
            DenoiserSection::Gaussian { mean, variance } => {
                let codec = &pipeline.matte_codec;
                let f = codec.factor();
                let flat = Tensor3::filled(Dims::new(1, f, f), *mean);
                Ok(Arc::new(GaussianOracle::new(codec.encode(&flat)?, *variance)?))
            }
            DenoiserSection::Mlp { weights } => {
                let bytes = std::fs::read(weights)
                    .map_err(|e| AppError::Input(format!("cannot read weights {}: {e}", weights.display())))?;
                let model = MlpDenoiser::from_bytes(&bytes)?;
                let layout = model.layout();
                let (latent, cond) = (
                    pipeline.matte_codec.latent_channels(),
                    pipeline.image_codec.latent_channels(),
                );
                if layout.latent != latent || layout.cond != cond || (layout.text != 0 && layout.text != self.text.dim)
                {
                    return Err(AppError::Invalid(format!(
                        "weights expect latent {}/cond {}/text {}, the pipeline provides {latent}/{cond}/{}",
                        layout.latent, layout.cond, layout.text, self.text.dim
                    )));
                }
                Ok(Arc::new(model))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = EngineConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(EngineConfig::from_json(&text).unwrap(), cfg);
        cfg.pipeline().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            EngineConfig::from_json(r#"{"sampler":{"stepz":3}}"#),
            Err(AppError::Invalid(_))
        ));
        assert!(matches!(
            EngineConfig::from_json(r#"{"extra":1}"#),
            Err(AppError::Invalid(_))
        ));
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg =
            EngineConfig::from_json(r#"{"codec":{"factor":4},"hires":{"ensemble":3,"tau":{"fixed":0.1}}}"#).unwrap();
        assert_eq!(cfg.codec.factor, 4);
        assert_eq!(cfg.hires.ensemble, 3);
        assert_eq!(cfg.sampler.steps, 10);
        assert_eq!(cfg.pipeline().unwrap().factor(), 4);
    }

    #[test]
    fn invalid_values_fail_validation() {
        let cfg = EngineConfig::from_json(r#"{"hires":{"overlap":64}}"#).unwrap();
        assert!(matches!(cfg.pipeline(), Err(AppError::Invalid(_))));
        let cfg = EngineConfig::from_json(r#"{"sampler":{"eta":-1}}"#).unwrap();
        assert!(matches!(cfg.pipeline(), Err(AppError::Invalid(_))));
    }

    #[test]
    fn denoiser_kinds_parse() {
        let cfg = EngineConfig::from_json(r#"{"denoiser":{"kind":"gaussian","variance":0.01}}"#).unwrap();
        assert_eq!(
            cfg.denoiser,
            DenoiserSection::Gaussian {
                mean: 0.5,
                variance: 0.01
            }
        );
        let p = cfg.pipeline().unwrap();
        cfg.denoiser(&p).unwrap();
        let cfg = EngineConfig::from_json(r#"{"denoiser":{"kind":"mlp","weights":"/nonexistent"}}"#).unwrap();
        assert!(matches!(cfg.denoiser(&p), Err(AppError::Input(_))));
    }
}
