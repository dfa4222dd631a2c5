//! Matting error metrics and the seed-randomness analysis.
//!
//! | metric | definition |
//! |--------|------------|
//! | SAD    | `Σ|p − g|`, also reported ÷1000 |
//! | MSE    | `mean((p − g)²) × 10³` |
//! | MAD    | `mean(|p − g|) × 10³` |
//! | Conn   | connectivity error ÷1000 |

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::codec::LatentCodec;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::image::{AlphaMatte, ImageBuffer};
use crate::rng::child_seed;
use crate::sampler::{sample, GuidanceMode, SampleInputs, SamplerConfig};
use crate::schedule::DiffusionSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sad_raw: f64,
    /// `sad_raw / 1000`.
    pub sad: f64,
    pub mse: f64,
    pub mad: f64,
    pub conn: f64,
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8}{:>14}", "metric", "value")?;
        writeln!(f, "{:<8}{:>14.6}", "SAD", self.sad)?;
        writeln!(f, "{:<8}{:>14.6}", "SADraw", self.sad_raw)?;
        writeln!(f, "{:<8}{:>14.6}", "MSE", self.mse)?;
        writeln!(f, "{:<8}{:>14.6}", "MAD", self.mad)?;
        write!(f, "{:<8}{:>14.6}", "Conn", self.conn)
    }
}

fn check_pair(pred: &AlphaMatte, gt: &AlphaMatte) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!(
            "prediction {} and ground truth {} differ",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

pub fn evaluate(pred: &AlphaMatte, gt: &AlphaMatte) -> Result<MetricReport> {
    check_pair(pred, gt)?;
    let n = pred.values().len() as f64;
    let (mut sad, mut sq) = (0.0, 0.0);
    for (p, g) in pred.values().iter().zip(gt.values()) {
        let d = p - g;
        sad += d.abs();
        sq += d * d;
    }
    Ok(MetricReport {
        sad_raw: sad,
        sad: sad / 1000.0,
        mse: sq / n * 1000.0,
        mad: sad / n * 1000.0,
        conn: connectivity(pred, gt, 0.1, 0.15)?,
    })
}

/// Largest 4-connected component of `mask` (lowest-index component on ties).
pub fn largest_component(mask: &[bool], height: usize, width: usize) -> Vec<bool> {
    let mut label = vec![usize::MAX; mask.len()];
    let mut best: Option<(usize, usize)> = None;
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start] != usize::MAX {
            continue;
        }
        let id = next;
        next += 1;
        label[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (y, x) = (i / width, i % width);
            let mut visit = |j: usize| {
                if mask[j] && label[j] == usize::MAX {
                    label[j] = id;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                visit(i - width);
            }
            if y + 1 < height {
                visit(i + width);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < width {
                visit(i + 1);
            }
        }
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((id, size));
        }
    }
    match best {
        Some((id, _)) => label.iter().map(|&l| l == id).collect(),
        None => vec![false; mask.len()],
    }
}

/// Connectivity error ÷1000.
///
/// For θ = step, 2·step, …, 1: `Ω_θ` is the largest 4-connected component of
/// `pred ≥ θ ∧ gt ≥ θ`. Each pixel's level `l` is the largest θ whose `Ω_θ`
/// contains it (0 if none). With `d = value − l`, `φ = 1 − d` when
/// `d ≥ phi_threshold`, otherwise 1.
pub fn connectivity(pred: &AlphaMatte, gt: &AlphaMatte, theta_step: f64, phi_threshold: f64) -> Result<f64> {
    check_pair(pred, gt)?;
    if !(theta_step > 0.0 && theta_step < 1.0) {
        return Err(Error::config(format!("theta step must be in (0, 1), got {theta_step}")));
    }
    let (h, w) = (pred.height(), pred.width());
    let (p, g) = (pred.values(), gt.values());
    let mut level = vec![0.0; p.len()];
    let count = (1.0 / theta_step).round() as usize;
    for k in 1..=count {
        let theta = (k as f64 * theta_step).min(1.0);
        let both: Vec<bool> = p.iter().zip(g).map(|(a, b)| *a >= theta && *b >= theta).collect();
        let omega = largest_component(&both, h, w);
        for (l, inside) in level.iter_mut().zip(omega) {
            if inside {
                *l = theta;
            }
        }
    }
    let phi = |v: f64, l: f64| {
        let d = v - l;
        if d >= phi_threshold {
            1.0 - d
        } else {
            1.0
        }
    };
    let total: f64 = p
        .iter()
        .zip(g)
        .zip(&level)
        .map(|((a, b), l)| (phi(*a, *l) - phi(*b, *l)).abs())
        .sum();
    Ok(total / 1000.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomnessRow {
    pub steps: usize,
    pub mean_sad: f64,
    pub std_sad: f64,
}

/// Low-resolution sampling context for [`randomness_curve`].
#[derive(Debug, Clone, Copy)]
pub struct CurveSetup<'a> {
    pub schedule: &'a DiffusionSchedule,
    pub image_codec: &'a LatentCodec,
    pub matte_codec: &'a LatentCodec,
    pub eta: f64,
    pub text: Option<&'a [f64]>,
    pub base_seed: u64,
}

/// Mean and population standard deviation of SAD (÷1000) over `n_seeds`
/// samples for every step count.
pub fn randomness_curve(
    image: &ImageBuffer,
    gt: &AlphaMatte,
    denoiser: &dyn Denoiser,
    step_list: &[usize],
    n_seeds: usize,
    setup: &CurveSetup<'_>,
) -> Result<Vec<RandomnessRow>> {
    if step_list.is_empty() {
        return Err(Error::config("step list is empty"));
    }
    if n_seeds < 2 {
        return Err(Error::config(format!("need at least 2 seeds, got {n_seeds}")));
    }
    let cond = setup.image_codec.encode(image.to_rgb().tensor())?;
    let inputs = SampleInputs {
        cond: &cond,
        latent_channels: setup.matte_codec.latent_channels(),
        guide: None,
        text: setup.text,
    };
    step_list
        .iter()
        .map(|&steps| {
            let cfg = SamplerConfig::strided(steps, setup.schedule, setup.eta, GuidanceMode::Normalized)?;
            let sads: Vec<f64> = (0..n_seeds as u64)
                .map(|i| {
                    let z0 = sample(denoiser, &inputs, &cfg, setup.schedule, child_seed(setup.base_seed, i))?;
                    let matte = AlphaMatte::new(setup.matte_codec.decode(&z0)?)?;
                    Ok(evaluate(&matte, gt)?.sad)
                })
                .collect::<Result<_>>()?;
            let n = sads.len() as f64;
            let mean = sads.iter().sum::<f64>() / n;
            let var = sads.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
            Ok(RandomnessRow {
                steps,
                mean_sad: mean,
                std_sad: var.sqrt(),
            })
        })
        .collect()
}
