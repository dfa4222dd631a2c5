use serde::{Deserialize, Serialize};

use super::plan::PatchPlan;
use crate::error::{Error, Result};
use crate::tensor::{Dims, PatchBox, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeWeights {
    Uniform,
    /// Linear ramp over `ramp` sites from every box edge that is not on the
    /// canvas border. Weights stay strictly positive.
    #[default]
    Feathered,
}

fn edge_factor(d: usize, ramp: usize) -> f64 {
    ((d + 1) as f64 / (ramp + 1) as f64).min(1.0)
}

/// Per-site weight of a box, `1 × h × w`.
pub fn patch_weights(b: &PatchBox, canvas: Dims, mode: MergeWeights, ramp: usize) -> Tensor3 {
    let dims = Dims::new(1, b.h, b.w);
    match mode {
        MergeWeights::Uniform => Tensor3::filled(dims, 1.0),
        MergeWeights::Feathered => {
            let left = b.x > 0;
            let right = b.x + b.w < canvas.width;
            let top = b.y > 0;
            let bottom = b.y + b.h < canvas.height;
            Tensor3::from_fn(dims, |_, y, x| {
                let mut wgt = 1.0;
                if left {
                    wgt *= edge_factor(x, ramp);
                }
                if right {
                    wgt *= edge_factor(b.w - 1 - x, ramp);
                }
                if top {
                    wgt *= edge_factor(y, ramp);
                }
                if bottom {
                    wgt *= edge_factor(b.h - 1 - y, ramp);
                }
                wgt
            })
        }
    }
}

/// Coverage-normalised weighted average of patches on the canvas of
/// `background`; sites outside every box keep the background value.
/// Accumulation follows patch order.
pub fn merge_collage(
    patches: &[(Tensor3, PatchBox)],
    background: &Tensor3,
    mode: MergeWeights,
    ramp: usize,
) -> Result<Tensor3> {
    let dims = background.dims();
    let mut num = Tensor3::zeros(dims);
    let mut den = vec![0.0; dims.plane()];
    for (p, b) in patches {
        if p.dims() != Dims::new(dims.channels, b.h, b.w) {
            return Err(Error::shape(format!(
                "patch {} does not match box {}x{} with {} channels",
                p.dims(),
                b.w,
                b.h,
                dims.channels
            )));
        }
        if !b.fits(dims) {
            return Err(Error::Bounds(format!("box {b:?} leaves the {dims} canvas")));
        }
        let w = patch_weights(b, dims, mode, ramp);
        for y in 0..b.h {
            for x in 0..b.w {
                let wv = w.get(0, y, x);
                den[(b.y + y) * dims.width + b.x + x] += wv;
                for c in 0..dims.channels {
                    let i = num.index(c, b.y + y, b.x + x);
                    num.data_mut()[i] += wv * p.get(c, y, x);
                }
            }
        }
    }
    let mut out = background.clone();
    let mut covered = vec![false; dims.plane()];
    for (_, b) in patches {
        for y in b.y..b.y + b.h {
            for x in b.x..b.x + b.w {
                covered[y * dims.width + x] = true;
            }
        }
    }
    for (s, &d) in den.iter().enumerate() {
        if !covered[s] {
            continue;
        }
        if d <= 0.0 {
            return Err(Error::Internal(format!("zero merge weight at covered site {s}")));
        }
        for c in 0..dims.channels {
            let i = c * dims.plane() + s;
            out.data_mut()[i] = num.data()[i] / d;
        }
    }
    Ok(out)
}

/// Chebyshev distance from every site to the nearest site where `inside` is
/// false (`usize::MAX` when there is none).
fn distance_to_outside(inside: &[bool], h: usize, w: usize) -> Vec<usize> {
    const FAR: usize = usize::MAX / 2;
    let mut d: Vec<usize> = inside.iter().map(|&i| if i { FAR } else { 0 }).collect();
    for y in 0..h {
        for x in 0..w {
            let mut best = d[y * w + x];
            if y > 0 {
                best = best.min(d[(y - 1) * w + x] + 1);
                if x > 0 {
                    best = best.min(d[(y - 1) * w + x - 1] + 1);
                }
                if x + 1 < w {
                    best = best.min(d[(y - 1) * w + x + 1] + 1);
                }
            }
            if x > 0 {
                best = best.min(d[y * w + x - 1] + 1);
            }
            d[y * w + x] = best;
        }
    }
    for y in (0..h).rev() {
        for x in (0..w).rev() {
            let mut best = d[y * w + x];
            if y + 1 < h {
                best = best.min(d[(y + 1) * w + x] + 1);
                if x > 0 {
                    best = best.min(d[(y + 1) * w + x - 1] + 1);
                }
                if x + 1 < w {
                    best = best.min(d[(y + 1) * w + x + 1] + 1);
                }
            }
            if x + 1 < w {
                best = best.min(d[y * w + x + 1] + 1);
            }
            d[y * w + x] = best;
        }
    }
    d.into_iter().map(|v| if v >= FAR { usize::MAX } else { v }).collect()
}

/// Blend mask for [`fuse_final`]: 1 deep inside covered regions, ramping to
/// `1/feather` on the sites next to an uncovered one, 0 outside.
pub fn fusion_mask(plan: &PatchPlan, feather: usize) -> Tensor3 {
    let canvas = plan.canvas();
    let (h, w) = (canvas.height, canvas.width);
    let inside: Vec<bool> = plan.coverage().data().iter().map(|v| *v > 0.0).collect();
    if feather == 0 {
        return Tensor3::from_fn(canvas, |_, y, x| if inside[y * w + x] { 1.0 } else { 0.0 });
    }
    let d = distance_to_outside(&inside, h, w);
    Tensor3::from_fn(canvas, |_, y, x| {
        let v = d[y * w + x];
        if v == usize::MAX {
            1.0
        } else {
            (v as f64 / feather as f64).min(1.0)
        }
    })
}

/// `m·z_hr + (1 − m)·lr_up` with the feathered coverage mask `m`.
pub fn fuse_final(z_hr: &Tensor3, lr_up: &Tensor3, plan: &PatchPlan, feather: usize) -> Result<Tensor3> {
    if z_hr.dims() != lr_up.dims() {
        return Err(Error::shape(format!(
            "refined latent {} and upsampled latent {} differ",
            z_hr.dims(),
            lr_up.dims()
        )));
    }
    if !plan.canvas().spatial_eq(&z_hr.dims()) {
        return Err(Error::shape(format!(
            "plan canvas {} does not match latent {}",
            plan.canvas(),
            z_hr.dims()
        )));
    }
    let m = fusion_mask(plan, feather);
    Ok(Tensor3::from_fn(z_hr.dims(), |c, y, x| {
        let k = m.get(0, y, x);
        k * z_hr.get(c, y, x) + (1.0 - k) * lr_up.get(c, y, x)
    }))
}
