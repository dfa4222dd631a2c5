use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Dims, PatchBox, Tensor3};

/// Threshold applied to the uncertainty map.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TauPolicy {
    /// `max(0.05, 90th percentile of the nonzero values)`.
    #[default]
    Auto,
    Fixed(f64),
}

impl TauPolicy {
    /// `None` when nothing can exceed the threshold.
    pub fn resolve(&self, u: &Tensor3) -> Result<Option<f64>> {
        match *self {
            TauPolicy::Fixed(tau) if tau > 0.0 && tau.is_finite() => Ok(Some(tau)),
            TauPolicy::Fixed(tau) => Err(Error::config(format!("tau must be positive, got {tau}"))),
            TauPolicy::Auto => {
                let mut nz: Vec<f64> = u.data().iter().copied().filter(|v| *v > 0.0).collect();
                if nz.is_empty() {
                    return Ok(None);
                }
                nz.sort_by(f64::total_cmp);
                let rank = ((0.9 * nz.len() as f64).ceil() as usize).max(1) - 1;
                Ok(Some(nz[rank].max(0.05)))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanParams {
    pub tau: TauPolicy,
    /// Box side in latent sites.
    pub patch: usize,
    /// Overlap between neighbouring boxes in latent sites.
    pub overlap: usize,
    /// Chebyshev dilation radius in uncertainty-map pixels.
    pub dilation: usize,
}

impl Default for PlanParams {
    fn default() -> Self {
        Self {
            tau: TauPolicy::Auto,
            patch: 64,
            overlap: 16,
            dilation: 3,
        }
    }
}

impl PlanParams {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.patch <= self.overlap {
            return Err(Error::config(format!(
                "patch size {} must exceed overlap {}",
                self.patch, self.overlap
            )));
        }
        Ok(())
    }
}

/// Latent boxes selected for refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPlan {
    boxes: Vec<PatchBox>,
    canvas: Dims,
    factor: usize,
    patch: usize,
    overlap: usize,
    tau: Option<f64>,
    coverage: Tensor3,
}

impl PatchPlan {
    pub fn empty(canvas: Dims, factor: usize, patch: usize, overlap: usize) -> Self {
        let canvas = canvas.with_channels(1);
        Self {
            boxes: Vec::new(),
            canvas,
            factor,
            patch,
            overlap,
            tau: None,
            coverage: Tensor3::zeros(canvas),
        }
    }

    /// Plan from explicit boxes (all must fit on the canvas).
    pub fn from_boxes(boxes: Vec<PatchBox>, canvas: Dims, factor: usize) -> Result<Self> {
        let canvas = canvas.with_channels(1);
        let mut coverage = Tensor3::zeros(canvas);
        for b in &boxes {
            if !b.fits(canvas) {
                return Err(Error::Bounds(format!("box {b:?} leaves the {canvas} canvas")));
            }
            for y in b.y..b.y + b.h {
                for x in b.x..b.x + b.w {
                    let v = coverage.get(0, y, x);
                    coverage.set(0, y, x, v + 1.0);
                }
            }
        }
        let patch = boxes.iter().map(|b| b.w.max(b.h)).max().unwrap_or(0);
        Ok(Self {
            boxes,
            canvas,
            factor,
            patch,
            overlap: 0,
            tau: None,
            coverage,
        })
    }

    pub fn boxes(&self) -> &[PatchBox] {
        &self.boxes
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Single-channel latent canvas.
    pub fn canvas(&self) -> Dims {
        self.canvas
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn overlap(&self) -> usize {
        self.overlap
    }

    pub fn tau(&self) -> Option<f64> {
        self.tau
    }

    /// Number of boxes containing each latent site.
    pub fn coverage(&self) -> &Tensor3 {
        &self.coverage
    }

    pub fn covers(&self, y: usize, x: usize) -> bool {
        self.coverage.get(0, y, x) > 0.0
    }

    /// Σ box areas: the latent sites evaluated per denoising step.
    pub fn box_sites(&self) -> usize {
        self.boxes.iter().map(PatchBox::area).sum()
    }
}

/// Origins and extents along one axis: stride `patch − overlap`, last box
/// shifted back inside the canvas.
fn axis_windows(len: usize, patch: usize, stride: usize) -> Vec<(usize, usize)> {
    if patch >= len {
        return vec![(0, len)];
    }
    let mut out = Vec::new();
    let mut o = 0;
    loop {
        if o + patch >= len {
            let last = len - patch;
            if out.last() != Some(&(last, patch)) {
                out.push((last, patch));
            }
            return out;
        }
        out.push((o, patch));
        o += stride;
    }
}

/// Latent rows covered by pixel row `i` of a map with `n` rows laid over a
/// canvas of `latent` rows of `f` pixels each (rounded outwards).
fn latent_span(i: usize, n: usize, latent: usize, f: usize) -> (usize, usize) {
    let pixels = latent * f;
    let lo = (i * pixels) / (n * f);
    let hi = ((i + 1) * pixels).div_ceil(n * f).max(lo + 1) - 1;
    (lo.min(latent - 1), hi.min(latent - 1))
}

/// Latent sites flagged by thresholding and dilating `u`.
pub fn flagged_sites(u: &Tensor3, tau: f64, dilation: usize, latent: Dims, factor: usize) -> Result<Tensor3> {
    if u.channels() != 1 {
        return Err(Error::shape("uncertainty map must have one channel"));
    }
    let (hu, wu) = (u.height(), u.width());
    let r = dilation;
    // separable Chebyshev dilation of the binary map
    let hot: Vec<bool> = u.data().iter().map(|v| *v >= tau).collect();
    let mut rows = vec![false; hu * wu];
    for y in 0..hu {
        for x in 0..wu {
            if hot[y * wu + x] {
                for xx in x.saturating_sub(r)..=(x + r).min(wu - 1) {
                    rows[y * wu + xx] = true;
                }
            }
        }
    }
    let mut dil = vec![false; hu * wu];
    for x in 0..wu {
        for y in 0..hu {
            if rows[y * wu + x] {
                for yy in y.saturating_sub(r)..=(y + r).min(hu - 1) {
                    dil[yy * wu + x] = true;
                }
            }
        }
    }
    let mut flags = Tensor3::zeros(latent.with_channels(1));
    for y in 0..hu {
        let (ly0, ly1) = latent_span(y, hu, latent.height, factor);
        for x in 0..wu {
            if !dil[y * wu + x] {
                continue;
            }
            let (lx0, lx1) = latent_span(x, wu, latent.width, factor);
            for ly in ly0..=ly1 {
                for lx in lx0..=lx1 {
                    flags.set(0, ly, lx, 1.0);
                }
            }
        }
    }
    Ok(flags)
}

/// Threshold, dilate, map onto the latent canvas and cover the flagged sites
/// with stride-grid boxes.
///
/// `u` may have any resolution; its pixels are mapped proportionally onto
/// the `latent.height·f × latent.width·f` pixel canvas.
pub fn select_patches(u: &Tensor3, latent: Dims, factor: usize, params: &PlanParams) -> Result<PatchPlan> {
    params.validate()?;
    if latent.height == 0 || latent.width == 0 || factor == 0 {
        return Err(Error::shape(format!("empty latent canvas {latent}")));
    }
    let mut plan = PatchPlan::empty(latent, factor, params.patch, params.overlap);
    let Some(tau) = params.tau.resolve(u)? else {
        return Ok(plan);
    };
    let flags = flagged_sites(u, tau, params.dilation, latent, factor)?;
    let (h, w) = (latent.height, latent.width);
    // summed-area table of flags
    let mut sat = vec![0usize; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            sat[(y + 1) * (w + 1) + x + 1] =
                (flags.get(0, y, x) > 0.0) as usize + sat[y * (w + 1) + x + 1] + sat[(y + 1) * (w + 1) + x]
                    - sat[y * (w + 1) + x];
        }
    }
    let count = |b: &PatchBox| {
        sat[(b.y + b.h) * (w + 1) + b.x + b.w] + sat[b.y * (w + 1) + b.x]
            - sat[b.y * (w + 1) + b.x + b.w]
            - sat[(b.y + b.h) * (w + 1) + b.x]
    };
    let stride = params.patch - params.overlap;
    let mut boxes = Vec::new();
    for &(y, bh) in &axis_windows(h, params.patch, stride) {
        for &(x, bw) in &axis_windows(w, params.patch, stride) {
            let b = PatchBox { x, y, w: bw, h: bh };
            if count(&b) > 0 {
                boxes.push(b);
            }
        }
    }
    let built = PatchPlan::from_boxes(boxes, latent, factor)?;
    plan.boxes = built.boxes;
    plan.coverage = built.coverage;
    plan.tau = Some(tau);
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(tau: f64, patch: usize, overlap: usize) -> PlanParams {
        PlanParams {
            tau: TauPolicy::Fixed(tau),
            patch,
            overlap,
            dilation: 0,
        }
    }

    #[test]
    fn zero_map_gives_empty_plan() {
        let u = Tensor3::zeros(Dims::new(1, 32, 32));
        let plan = select_patches(&u, Dims::new(4, 8, 8), 4, &PlanParams::default()).unwrap();
        assert!(plan.is_empty());
        let plan = select_patches(&u, Dims::new(4, 8, 8), 4, &params(0.1, 4, 1)).unwrap();
        assert!(plan.is_empty());
    }

    #[test]
    fn single_pixel_single_box() {
        // windows along each axis: [0,6) [4,10) [8,14) [10,16)
        let mut u = Tensor3::zeros(Dims::new(1, 64, 64));
        u.set(0, 26, 10, 0.5);
        let plan = select_patches(&u, Dims::new(1, 16, 16), 4, &params(0.1, 6, 2)).unwrap();
        assert_eq!(plan.boxes().len(), 1);
        assert!(plan.boxes()[0].contains(10 / 4, 26 / 4));
    }

    #[test]
    fn pixel_in_an_overlap_selects_every_box_holding_it() {
        let mut u = Tensor3::zeros(Dims::new(1, 64, 64));
        u.set(0, 37, 21, 0.5);
        let plan = select_patches(&u, Dims::new(1, 16, 16), 4, &params(0.1, 6, 2)).unwrap();
        assert_eq!(plan.boxes().len(), 4);
        assert!(plan.boxes().iter().all(|b| b.contains(21 / 4, 37 / 4)));
    }

    #[test]
    fn overlap_must_be_smaller() {
        let u = Tensor3::zeros(Dims::new(1, 8, 8));
        assert!(matches!(
            select_patches(&u, Dims::new(1, 2, 2), 4, &params(0.1, 4, 4)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn auto_tau_percentile() {
        let data: Vec<f64> = (0..20).map(|i| if i < 10 { 0.0 } else { i as f64 / 100.0 }).collect();
        let u = Tensor3::from_vec(Dims::new(1, 4, 5), data).unwrap();
        // nonzero 0.10..0.19, nearest-rank 90th percentile = 0.18
        assert_eq!(TauPolicy::Auto.resolve(&u).unwrap(), Some(0.18));
        let small = u.scale(0.1);
        assert_eq!(TauPolicy::Auto.resolve(&small).unwrap(), Some(0.05));
    }

    #[test]
    fn windows_cover_axis() {
        for len in 1..40 {
            for (patch, stride) in [(4, 3), (8, 6), (5, 1), (64, 48)] {
                let w = axis_windows(len, patch, stride);
                for i in 0..len {
                    assert!(w.iter().any(|&(o, s)| o <= i && i < o + s), "len {len}");
                }
                for pair in w.windows(2) {
                    let overlap = (pair[0].0 + pair[0].1).saturating_sub(pair[1].0);
                    assert!(overlap >= patch - stride);
                }
            }
        }
    }

    #[test]
    fn dilation_reaches_chebyshev_neighbours() {
        let mut u = Tensor3::zeros(Dims::new(1, 20, 20));
        u.set(0, 10, 10, 1.0);
        let flags = flagged_sites(&u, 0.5, 3, Dims::new(1, 20, 20), 1).unwrap();
        for y in 0..20 {
            for x in 0..20 {
                let inside = (y as i32 - 10).abs() <= 3 && (x as i32 - 10).abs() <= 3;
                assert_eq!(flags.get(0, y, x) > 0.0, inside);
            }
        }
    }

    #[test]
    fn coarse_map_rounds_outward() {
        // a 2x2 map over a 3x3 latent canvas: each map pixel spans 1.5 sites
        let mut u = Tensor3::zeros(Dims::new(1, 2, 2));
        u.set(0, 0, 0, 1.0);
        let flags = flagged_sites(&u, 0.5, 0, Dims::new(1, 3, 3), 4).unwrap();
        let on: Vec<f64> = flags.data().to_vec();
        assert_eq!(on, vec![1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
