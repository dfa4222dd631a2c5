//! Procedural `(C, α, F, B)` scenes with exact ground truth.
//!
//! Every scene is built by compositing, so the composition residual of a
//! generated sample is zero by construction.

use serde::{Deserialize, Serialize};

use crate::compositing::composite;
use crate::error::{Error, Result};
use crate::image::{AlphaMatte, ImageBuffer};
use crate::rng::SeededRng;
use crate::tensor::{Dims, Tensor3};

/// Gray level of the foreground in [`SceneKind::ThresholdDiscs`] scenes.
pub const BRIGHT: f64 = 0.9;
/// Gray level of the background in [`SceneKind::ThresholdDiscs`] scenes.
pub const DARK: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    /// Hard-edged bright discs on a dark background: the matte is the
    /// luminance threshold of the image.
    ThresholdDiscs,
    /// Coloured discs with a linear alpha falloff.
    SoftDiscs,
    /// Thin polylines with a Gaussian alpha profile.
    Hair,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: ImageBuffer,
    pub alpha: AlphaMatte,
    pub fg: ImageBuffer,
    pub bg: ImageBuffer,
}

fn gray(dims: Dims, v: f64) -> ImageBuffer {
    ImageBuffer::new(Tensor3::filled(dims, v)).expect("3-channel buffer")
}

fn colour(dims: Dims, rgb: [f64; 3]) -> ImageBuffer {
    ImageBuffer::new(Tensor3::from_fn(dims, |c, _, _| rgb[c])).expect("3-channel buffer")
}

struct Disc {
    cy: f64,
    cx: f64,
    r: f64,
}

fn random_discs(rng: &mut SeededRng, height: usize, width: usize) -> Vec<Disc> {
    let n = rng.range_inclusive(1, 3);
    let short = height.min(width) as f64;
    (0..n)
        .map(|_| Disc {
            cy: rng.uniform() * height as f64,
            cx: rng.uniform() * width as f64,
            r: short * (0.12 + 0.25 * rng.uniform()),
        })
        .collect()
}

fn distance_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// One scene of `kind`, `height × width`, fully determined by `seed`.
pub fn scene(kind: SceneKind, height: usize, width: usize, seed: u64) -> Result<Scene> {
    if height == 0 || width == 0 {
        return Err(Error::shape("scene must be at least 1x1"));
    }
    let mut rng = SeededRng::new(seed);
    let dims = Dims::new(3, height, width);
    let (alpha, fg, bg) = match kind {
        SceneKind::ThresholdDiscs => {
            let discs = random_discs(&mut rng, height, width);
            let a = Tensor3::from_fn(dims.with_channels(1), |_, y, x| {
                let inside = discs
                    .iter()
                    .any(|d| (y as f64 + 0.5 - d.cy).powi(2) + (x as f64 + 0.5 - d.cx).powi(2) <= d.r * d.r);
                if inside {
                    1.0
                } else {
                    0.0
                }
            });
            (a, gray(dims, BRIGHT), gray(dims, DARK))
        }
        SceneKind::SoftDiscs => {
            let discs = random_discs(&mut rng, height, width);
            let soft = 1.0 + rng.uniform() * height.min(width) as f64 * 0.08;
            let a = Tensor3::from_fn(dims.with_channels(1), |_, y, x| {
                discs
                    .iter()
                    .map(|d| {
                        let dist = ((y as f64 + 0.5 - d.cy).powi(2) + (x as f64 + 0.5 - d.cx).powi(2)).sqrt();
                        ((d.r - dist) / soft + 0.5).clamp(0.0, 1.0)
                    })
                    .fold(0.0, f64::max)
            });
            let f = [rng.uniform(), rng.uniform(), rng.uniform()];
            let b = [rng.uniform(), rng.uniform(), rng.uniform()];
            (a, colour(dims, f), colour(dims, b))
        }
        SceneKind::Hair => {
            let strands = rng.range_inclusive(3, 8);
            let mut segments = Vec::new();
            for _ in 0..strands {
                let mut p = (rng.uniform() * width as f64, rng.uniform() * height as f64);
                let mut heading = rng.uniform() * std::f64::consts::TAU;
                let step = height.max(width) as f64 / 8.0;
                for _ in 0..6 {
                    heading += (rng.uniform() - 0.5) * 0.8;
                    let q = (p.0 + step * heading.cos(), p.1 + step * heading.sin());
                    segments.push((p, q));
                    p = q;
                }
            }
            let sigma = 0.6 + rng.uniform();
            let a = Tensor3::from_fn(dims.with_channels(1), |_, y, x| {
                let pt = (x as f64 + 0.5, y as f64 + 0.5);
                let d = segments
                    .iter()
                    .map(|(a, b)| distance_to_segment(pt, *a, *b))
                    .fold(f64::INFINITY, f64::min);
                (-d * d / (2.0 * sigma * sigma)).exp()
            });
            let f = [
                0.6 + 0.4 * rng.uniform(),
                0.5 + 0.4 * rng.uniform(),
                0.3 * rng.uniform(),
            ];
            let b = [0.3 * rng.uniform(), 0.3 * rng.uniform(), 0.2 + 0.5 * rng.uniform()];
            (a, colour(dims, f), colour(dims, b))
        }
    };
    let alpha = AlphaMatte::new(alpha)?;
    let image = composite(&alpha, &fg, &bg)?;
    Ok(Scene { image, alpha, fg, bg })
}

/// `count` scenes with seeds `child_seed(seed, i)`, cycling through `kinds`.
pub fn dataset(kinds: &[SceneKind], count: usize, height: usize, width: usize, seed: u64) -> Result<Vec<Scene>> {
    if kinds.is_empty() {
        return Err(Error::config("at least one scene kind is required"));
    }
    (0..count)
        .map(|i| {
            scene(
                kinds[i % kinds.len()],
                height,
                width,
                crate::rng::child_seed(seed, i as u64),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compositing::residual;
    use crate::denoiser::luminance_threshold;

    #[test]
    fn scenes_close_the_composition_equation() {
        for kind in [SceneKind::ThresholdDiscs, SceneKind::SoftDiscs, SceneKind::Hair] {
            let s = scene(kind, 24, 32, 5).unwrap();
            assert_eq!(residual(&s.image, &s.alpha, &s.fg, &s.bg).unwrap(), 0.0);
        }
    }

    #[test]
    fn threshold_scene_matte_is_luminance_threshold() {
        for seed in 0..5 {
            let s = scene(SceneKind::ThresholdDiscs, 32, 32, seed).unwrap();
            assert_eq!(luminance_threshold(0.5)(&s.image), s.alpha);
        }
    }

    #[test]
    fn scenes_are_seeded() {
        let a = scene(SceneKind::Hair, 16, 16, 1).unwrap();
        assert_eq!(a, scene(SceneKind::Hair, 16, 16, 1).unwrap());
        assert_ne!(a, scene(SceneKind::Hair, 16, 16, 2).unwrap());
        assert!(a.alpha.values().iter().any(|v| *v > 0.5));
    }
}
