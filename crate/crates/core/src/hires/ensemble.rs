use rayon::prelude::*;

use crate::codec::LatentCodec;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::image::AlphaMatte;
use crate::rng::child_seed;
use crate::sampler::{sample, SampleInputs, SamplerConfig};
use crate::schedule::DiffusionSchedule;
use crate::tensor::Tensor3;

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleResult {
    pub mattes: Vec<AlphaMatte>,
    pub latents: Vec<Tensor3>,
    pub seeds: Vec<u64>,
}

/// `members` independent samples with seeds `child_seed(base_seed, i)`.
/// Mattes are decoded and then clamped to `[0, 1]`.
pub fn lr_ensemble(
    denoiser: &dyn Denoiser,
    inputs: &SampleInputs<'_>,
    matte_codec: &LatentCodec,
    cfg: &SamplerConfig,
    schedule: &DiffusionSchedule,
    members: usize,
    base_seed: u64,
) -> Result<EnsembleResult> {
    if members == 0 {
        return Err(Error::config("ensemble size must be at least 1"));
    }
    let seeds: Vec<u64> = (0..members as u64).map(|i| child_seed(base_seed, i)).collect();
    let runs: Vec<(Tensor3, AlphaMatte)> = seeds
        .par_iter()
        .map(|&seed| {
            let z0 = sample(denoiser, inputs, cfg, schedule, seed)?;
            let matte = AlphaMatte::new(matte_codec.decode(&z0)?)?;
            Ok((z0, matte))
        })
        .collect::<Result<_>>()?;
    let (latents, mattes) = runs.into_iter().unzip();
    Ok(EnsembleResult { mattes, latents, seeds })
}

fn check_ensemble(e: &EnsembleResult) -> Result<()> {
    if e.mattes.is_empty() {
        return Err(Error::Ensemble("empty ensemble".into()));
    }
    let dims = e.mattes[0].dims();
    if e.mattes.iter().any(|m| m.dims() != dims) {
        return Err(Error::Ensemble("ensemble mattes differ in size".into()));
    }
    Ok(())
}

fn mean_matte(e: &EnsembleResult) -> Tensor3 {
    let n = e.mattes.len() as f64;
    let mut mean = Tensor3::zeros(e.mattes[0].dims());
    for m in &e.mattes {
        for (a, v) in mean.data_mut().iter_mut().zip(m.values()) {
            *a += v;
        }
    }
    mean.map(|v| v / n)
}

/// Per-pixel population standard deviation over the ensemble mattes.
pub fn uncertainty(e: &EnsembleResult) -> Result<Tensor3> {
    check_ensemble(e)?;
    if e.mattes.len() < 2 {
        return Err(Error::Ensemble(format!(
            "uncertainty needs at least 2 ensemble members, got {}",
            e.mattes.len()
        )));
    }
    let mean = mean_matte(e);
    let n = e.mattes.len() as f64;
    let first = e.mattes[0].values();
    let mut out = Tensor3::zeros(mean.dims());
    for (i, (o, mu)) in out.data_mut().iter_mut().zip(mean.data()).enumerate() {
        // exact agreement must give exactly zero, whatever the rounding of the mean
        if e.mattes.iter().all(|m| m.values()[i] == first[i]) {
            continue;
        }
        let ss: f64 = e.mattes.iter().map(|m| (m.values()[i] - mu).powi(2)).sum();
        *o = (ss / n).sqrt();
    }
    Ok(out)
}

/// Index of the member with the smallest mean absolute distance to the
/// ensemble mean (lowest index on ties).
pub fn guide_member(e: &EnsembleResult) -> Result<usize> {
    check_ensemble(e)?;
    let mean = mean_matte(e);
    let mut best = (0, f64::INFINITY);
    for (i, m) in e.mattes.iter().enumerate() {
        let d: f64 = m.values().iter().zip(mean.data()).map(|(a, b)| (a - b).abs()).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best.0)
}
