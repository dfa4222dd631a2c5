//! One configured pipeline plus denoiser, shared by the CLI and the service.

use std::sync::Arc;
use std::time::Instant;

use genmatte_core::denoiser::Denoiser;
use genmatte_core::guidance::{ScribbleDoc, SpatialGuide};
use genmatte_core::hires::{matte_hr, MatteOutput, MatteRequest, Pipeline};
use genmatte_core::{AlphaMatte, ImageBuffer, PatchBox, Tensor3};
use serde::{Deserialize, Serialize};

use crate::config::EngineConfig;
use crate::error::AppError;
use crate::io::{encode_gray16, encode_matte};

#[derive(Debug, Clone, PartialEq)]
pub enum GuideInput {
    Trimap(Tensor3),
    Mask(Tensor3),
    Scribbles(ScribbleDoc),
}

#[derive(Debug, Clone)]
pub struct Job {
    pub image: ImageBuffer,
    pub guide: Option<GuideInput>,
    pub prompt: Option<String>,
    pub seed: u64,
    /// Overrides the configured refinement switch.
    pub hr: Option<bool>,
}

/// Exported patch plan: boxes in latent coordinates of the padded image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanExport {
    pub f: usize,
    pub tau: Option<f64>,
    pub boxes: Vec<PatchBox>,
}

#[derive(Debug, Clone)]
pub struct JobResult {
    pub matte: AlphaMatte,
    /// 16-bit gray PNG of the matte.
    pub alpha_png: Vec<u8>,
    /// 16-bit gray PNG of the low-resolution uncertainty map.
    pub uncertainty_png: Option<Vec<u8>>,
    pub plan: PlanExport,
    pub output: MatteOutput,
    pub elapsed_ms: u64,
}

pub struct Engine {
    config: EngineConfig,
    pipeline: Pipeline,
    denoiser: Arc<dyn Denoiser>,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self, AppError> {
        let pipeline = config.pipeline()?;
        let denoiser = config.denoiser(&pipeline)?;
        Ok(Self {
            config,
            pipeline,
            denoiser,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    fn spatial_guide(&self, guide: &GuideInput, image: &ImageBuffer) -> Result<SpatialGuide, AppError> {
        let g = match guide {
            GuideInput::Trimap(t) => SpatialGuide::trimap(t)?,
            GuideInput::Mask(t) => SpatialGuide::mask(t)?,
            GuideInput::Scribbles(doc) => SpatialGuide::scribbles(doc, image.height(), image.width())?,
        };
        let d = g.dims();
        if (d.height, d.width) != (image.height(), image.width()) {
            return Err(AppError::Invalid(format!(
                "guide is {}x{} but the image is {}x{}",
                d.width,
                d.height,
                image.width(),
                image.height()
            )));
        }
        Ok(g)
    }

    pub fn run(&self, job: &Job) -> Result<JobResult, AppError> {
        let start = Instant::now();
        let guide = job
            .guide
            .as_ref()
            .map(|g| self.spatial_guide(g, &job.image))
            .transpose()?;
        let mut pipeline;
        let pipeline_ref = match job.hr {
            Some(hr) if hr != self.pipeline.hires.refine => {
                pipeline = self.pipeline.clone();
                pipeline.hires.refine = hr;
                pipeline.validate()?;
                &pipeline
            }
            _ => &self.pipeline,
        };
        let output = matte_hr(
            self.denoiser.as_ref(),
            pipeline_ref,
            &MatteRequest {
                image: &job.image,
                guide: guide.as_ref(),
                prompt: job.prompt.as_deref(),
                seed: job.seed,
            },
        )?;
        let alpha_png = encode_matte(&output.matte)?;
        let uncertainty_png = output.uncertainty.as_ref().map(encode_gray16).transpose()?;
        let plan = PlanExport {
            f: output.plan.factor(),
            tau: output.plan.tau(),
            boxes: output.boxes().to_vec(),
        };
        Ok(JobResult {
            matte: output.matte.clone(),
            alpha_png,
            uncertainty_png,
            plan,
            output,
            elapsed_ms: start.elapsed().as_millis() as u64,
        })
    }
}
