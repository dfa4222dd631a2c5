use rayon::prelude::*;
use serde::Serialize;

use super::merge::{merge_collage, MergeWeights};
use super::plan::PatchPlan;
use crate::denoiser::{Denoiser, DenoiserInput};
use crate::error::{Error, Result};
use crate::sampler::{ancestral_step_with_noise, init_state, step_variance, GuidanceLatent, NoiseField, SamplerConfig};
use crate::schedule::DiffusionSchedule;
use crate::tensor::{PatchBox, Tensor3};

/// Inputs of [`hr_refine`], all on the full high-resolution latent canvas.
#[derive(Debug, Clone, Copy)]
pub struct RefineInputs<'a> {
    /// Encoded high-resolution image.
    pub cond: &'a Tensor3,
    /// Upsampled low-resolution matte latent used as the init guide.
    pub guide_up: &'a Tensor3,
    pub text: Option<&'a [f64]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct RefineStats {
    /// Latent sites passed through the denoiser, summed over steps. Sites in
    /// box overlaps count once per box.
    pub site_evaluations: usize,
    /// Distinct covered sites, summed over steps.
    pub covered_evaluations: usize,
    /// What full-frame sampling would have cost.
    pub full_frame_evaluations: usize,
    pub steps: usize,
    pub boxes: usize,
}

/// Split-denoise-collage loop over the plan's boxes. Every patch crops the
/// same per-step noise fields; after each step the patches are merged and
/// re-cropped. Returns the merged `z̄0` (uncovered sites hold `guide_up`).
pub fn hr_refine(
    denoiser: &dyn Denoiser,
    inputs: &RefineInputs<'_>,
    plan: &PatchPlan,
    cfg: &SamplerConfig,
    schedule: &DiffusionSchedule,
    merge: MergeWeights,
    seed: u64,
) -> Result<(Tensor3, RefineStats)> {
    if plan.is_empty() {
        return Err(Error::config("refinement needs a non-empty patch plan"));
    }
    let dims = inputs.guide_up.dims();
    if !inputs.cond.dims().spatial_eq(&dims) || !plan.canvas().spatial_eq(&dims) {
        return Err(Error::shape(format!(
            "condition {}, guide {} and plan canvas {} must share a grid",
            inputs.cond.dims(),
            dims,
            plan.canvas()
        )));
    }
    let boxes: &[PatchBox] = plan.boxes();
    let ramp = plan.overlap() / 2;
    let noise = NoiseField::new(seed, dims);
    let init_noise = noise.field(0)?;
    let conds: Vec<Tensor3> = boxes.iter().map(|b| inputs.cond.crop(b)).collect::<Result<_>>()?;
    let mut states: Vec<Tensor3> = boxes
        .par_iter()
        .map(|b| {
            let guide = GuidanceLatent::known(inputs.guide_up.crop(b)?);
            init_state(cfg, schedule, Some(&guide), &init_noise.crop(b)?)
        })
        .collect::<Result<_>>()?;
    let mut merged = inputs.guide_up.clone();
    for (k, (t_cur, t_prev)) in cfg.transitions().enumerate() {
        let fresh = if step_variance(schedule, t_cur, t_prev, cfg.eta()) > 0.0 {
            Some(noise.field(k + 1)?)
        } else {
            None
        };
        let stepped: Vec<Tensor3> = boxes
            .par_iter()
            .zip(states.par_iter())
            .zip(conds.par_iter())
            .map(|((b, z), cond)| {
                let eps_hat = denoiser.predict_eps(
                    &DenoiserInput {
                        z_t: z,
                        cond,
                        t: t_cur,
                        text: inputs.text,
                    },
                    schedule,
                )?;
                let n = match &fresh {
                    Some(field) => field.crop(b)?,
                    None => Tensor3::zeros(z.dims()),
                };
                ancestral_step_with_noise(z, t_cur, t_prev, &eps_hat, schedule, cfg.eta(), &n)
            })
            .collect::<Result<_>>()?;
        let patches: Vec<(Tensor3, PatchBox)> = stepped.into_iter().zip(boxes.iter().copied()).collect();
        merged = merge_collage(&patches, inputs.guide_up, merge, ramp)?;
        states = boxes.iter().map(|b| merged.crop(b)).collect::<Result<_>>()?;
    }
    let stats = RefineStats {
        site_evaluations: cfg.steps() * plan.box_sites(),
        covered_evaluations: cfg.steps() * plan.coverage().data().iter().filter(|c| **c > 0.0).count(),
        full_frame_evaluations: cfg.steps() * dims.plane(),
        steps: cfg.steps(),
        boxes: boxes.len(),
    };
    Ok((merged, stats))
}
