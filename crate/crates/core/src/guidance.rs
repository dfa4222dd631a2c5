//! Spatial guidance: trimaps, coarse masks and scribbles.
//!
//! A [`SpatialGuide`] is a matte-domain guide image plus an unknown-region
//! mask at pixel resolution. [`guide_latent`] turns it into the latent
//! [`GuidanceLatent`] consumed by the sampler.

use serde::{Deserialize, Serialize};

use crate::codec::LatentCodec;
use crate::error::{Error, Result};
use crate::sampler::GuidanceLatent;
use crate::tensor::{Dims, Tensor3};

const TRIMAP_TOLERANCE: f64 = 1e-3;
const UNKNOWN_TOLERANCE: f64 = 1.0 / 255.0 + 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuideKind {
    Trimap,
    /// Coarse mask with every pixel unknown.
    Mask,
    /// Coarse mask with an unknown band around its boundary.
    CoarseMask,
    Scribble,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGuide {
    kind: GuideKind,
    image: Tensor3,
    m_unknown: Tensor3,
}

fn check_single(t: &Tensor3, what: &str) -> Result<()> {
    if t.channels() != 1 {
        return Err(Error::shape(format!(
            "{what} must have one channel, got {}",
            t.channels()
        )));
    }
    Ok(())
}

fn binary(mask: &Tensor3) -> Result<Tensor3> {
    check_single(mask, "mask")?;
    if let Some(v) = mask
        .data()
        .iter()
        .find(|v| v.abs() > TRIMAP_TOLERANCE && (*v - 1.0).abs() > TRIMAP_TOLERANCE)
    {
        return Err(Error::Validation(format!("mask value {v} is not 0 or 1")));
    }
    Ok(mask.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

impl SpatialGuide {
    /// Values must lie within 1e-3 of 0 or 1, or within one 8-bit level of
    /// 0.5 (so both 127 and 128 mean unknown); they are snapped.
    pub fn trimap(trimap: &Tensor3) -> Result<Self> {
        check_single(trimap, "trimap")?;
        let mut image = trimap.clone();
        let mut unknown = Tensor3::zeros(trimap.dims());
        for (i, v) in image.data_mut().iter_mut().enumerate() {
            let level = [0.0, 0.5, 1.0]
                .into_iter()
                .find(|l| {
                    let tol = if *l == 0.5 { UNKNOWN_TOLERANCE } else { TRIMAP_TOLERANCE };
                    (*v - l).abs() <= tol
                })
                .ok_or_else(|| Error::Validation(format!("trimap value {v} is not 0, 0.5 or 1")))?;
            *v = level;
            if level == 0.5 {
                unknown.data_mut()[i] = 1.0;
            }
        }
        Ok(Self {
            kind: GuideKind::Trimap,
            image,
            m_unknown: unknown,
        })
    }

    /// Coarse mask with every pixel unknown; the mask does not enter the init.
    pub fn mask(mask: &Tensor3) -> Result<Self> {
        let image = binary(mask)?;
        Ok(Self {
            kind: GuideKind::Mask,
            m_unknown: Tensor3::filled(image.dims(), 1.0),
            image,
        })
    }

    /// Coarse mask as a pseudo-matte: pixels within `band / 2` (Euclidean)
    /// of the opposite label are unknown, the rest is known.
    pub fn coarse_mask(mask: &Tensor3, band: f64) -> Result<Self> {
        if !(band >= 0.0 && band.is_finite()) {
            return Err(Error::config(format!("band width must be >= 0, got {band}")));
        }
        let image = binary(mask)?;
        let (h, w) = (image.height(), image.width());
        let fg: Vec<bool> = image.data().iter().map(|v| *v == 1.0).collect();
        let bg: Vec<bool> = fg.iter().map(|v| !v).collect();
        let to_fg = squared_distance_transform(&fg, h, w);
        let to_bg = squared_distance_transform(&bg, h, w);
        let limit = (band / 2.0).powi(2);
        let unknown = Tensor3::from_fn(image.dims(), |_, y, x| {
            let i = y * w + x;
            let d = if fg[i] { to_bg[i] } else { to_fg[i] };
            if d <= limit {
                1.0
            } else {
                0.0
            }
        });
        Ok(Self {
            kind: GuideKind::CoarseMask,
            image,
            m_unknown: unknown,
        })
    }

    /// Rasterises strokes onto an `height × width` canvas. Later strokes
    /// overwrite earlier ones.
    pub fn scribbles(doc: &ScribbleDoc, height: usize, width: usize) -> Result<Self> {
        doc.validate()?;
        let dims = Dims::new(1, height, width);
        let mut image = Tensor3::zeros(dims);
        let mut unknown = Tensor3::filled(dims, 1.0);
        for stroke in &doc.strokes {
            let value = stroke.label as f64;
            stroke.rasterize(height, width, |y, x| {
                image.set(0, y, x, value);
                unknown.set(0, y, x, 0.0);
            });
        }
        Ok(Self {
            kind: GuideKind::Scribble,
            image,
            m_unknown: unknown,
        })
    }

    pub fn kind(&self) -> GuideKind {
        self.kind
    }

    pub fn image(&self) -> &Tensor3 {
        &self.image
    }

    pub fn m_unknown(&self) -> &Tensor3 {
        &self.m_unknown
    }

    pub fn dims(&self) -> Dims {
        self.image.dims()
    }

    /// Whether known pixels carry exact matte values that the output must
    /// reproduce.
    pub fn pins_known_pixels(&self) -> bool {
        matches!(self.kind, GuideKind::Trimap | GuideKind::Scribble)
    }

    /// Edge-replicating pad to `height × width`.
    pub fn pad_edge(&self, height: usize, width: usize) -> Result<Self> {
        Ok(Self {
            kind: self.kind,
            image: self.image.pad_edge(height, width)?,
            m_unknown: self.m_unknown.pad_edge(height, width)?,
        })
    }

    /// Area-resampled guide; a resampled pixel is unknown if any source pixel
    /// under it is.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        Ok(Self {
            kind: self.kind,
            image: self.image.resize_area(height, width)?,
            m_unknown: self
                .m_unknown
                .resize_area(height, width)?
                .map(|v| if v > 1e-12 { 1.0 } else { 0.0 }),
        })
    }

    /// Replaces known pixels of `matte` with the guide value.
    pub fn pin(&self, matte: &Tensor3) -> Result<Tensor3> {
        self.image.expect_dims(matte.dims())?;
        let mut out = matte.clone();
        for ((v, &g), &m) in out
            .data_mut()
            .iter_mut()
            .zip(self.image.data())
            .zip(self.m_unknown.data())
        {
            if m == 0.0 {
                *v = g;
            }
        }
        Ok(out)
    }
}

/// `{ "strokes": [ { "label": 0|1, "radius": px, "points": [[x, y], …] } ] }`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScribbleDoc {
    pub strokes: Vec<Stroke>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stroke {
    pub label: u8,
    pub radius: f64,
    pub points: Vec<[f64; 2]>,
}

impl ScribbleDoc {
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.strokes.iter().enumerate() {
            if s.label > 1 {
                return Err(Error::Validation(format!("stroke {i}: label must be 0 or 1")));
            }
            if !(s.radius > 0.0 && s.radius.is_finite()) {
                return Err(Error::Validation(format!("stroke {i}: radius must be positive")));
            }
            if s.points.is_empty() {
                return Err(Error::Validation(format!("stroke {i}: no points")));
            }
            if s.points.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("stroke {i}: non-finite point")));
            }
        }
        Ok(())
    }
}

impl Stroke {
    /// Calls `hit(y, x)` for every pixel centre within `radius` of the
    /// polyline, i.e. the union of discs stamped along it.
    pub fn rasterize(&self, height: usize, width: usize, mut hit: impl FnMut(usize, usize)) {
        let r = self.radius;
        let segments: Vec<([f64; 2], [f64; 2])> = if self.points.len() == 1 {
            vec![(self.points[0], self.points[0])]
        } else {
            self.points.windows(2).map(|p| (p[0], p[1])).collect()
        };
        let xs = self.points.iter().map(|p| p[0]);
        let ys = self.points.iter().map(|p| p[1]);
        let clampi = |v: f64, hi: usize| v.max(0.0).min(hi as f64 - 1.0) as usize;
        let x0 = clampi(xs.clone().fold(f64::INFINITY, f64::min) - r, width);
        let x1 = clampi(xs.fold(f64::NEG_INFINITY, f64::max) + r + 1.0, width);
        let y0 = clampi(ys.clone().fold(f64::INFINITY, f64::min) - r, height);
        let y1 = clampi(ys.fold(f64::NEG_INFINITY, f64::max) + r + 1.0, height);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let p = [x as f64, y as f64];
                if segments.iter().any(|(a, b)| segment_distance_sq(p, *a, *b) <= r * r) {
                    hit(y, x);
                }
            }
        }
    }
}

fn segment_distance_sq(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a[0] + t * dx, a[1] + t * dy);
    (p[0] - cx).powi(2) + (p[1] - cy).powi(2)
}

/// Squared Euclidean distance from every pixel to the nearest `true` pixel
/// (infinite when there is none), by separable lower envelopes of parabolas.
pub fn squared_distance_transform(feature: &[bool], height: usize, width: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = feature.iter().map(|&f| if f { 0.0 } else { f64::INFINITY }).collect();
    let mut col = vec![0.0; height];
    for x in 0..width {
        for y in 0..height {
            col[y] = grid[y * width + x];
        }
        let d = edt_1d(&col);
        for y in 0..height {
            grid[y * width + x] = d[y];
        }
    }
    for y in 0..height {
        let d = edt_1d(&grid[y * width..(y + 1) * width]);
        grid[y * width..(y + 1) * width].copy_from_slice(&d);
    }
    grid
}

fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut out = vec![f64::INFINITY; n];
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        return out;
    }
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    let intersect = |q: usize, p: usize| {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf)
    };
    for &q in &sites {
        while let Some(&p) = v.last() {
            let s = intersect(q, p);
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        let s = match v.last() {
            Some(&p) => intersect(q, p),
            None => f64::NEG_INFINITY,
        };
        v.push(q);
        z.push(s);
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
    out
}

/// Latent guide: the known part of the guide image encoded with the matte
/// codec, and the unknown mask max-pooled onto the latent grid.
pub fn guide_latent(guide: &SpatialGuide, codec: &LatentCodec) -> Result<GuidanceLatent> {
    let known = guide.image.zip_map(&guide.m_unknown, |v, m| v * (1.0 - m))?;
    let g = codec.encode(&known)?;
    let f = codec.factor();
    let m = Tensor3::from_fn(g.dims().with_channels(1), |_, ly, lx| {
        let mut any = 0.0f64;
        for dy in 0..f {
            for dx in 0..f {
                any = any.max(guide.m_unknown.get(0, ly * f + dy, lx * f + dx));
            }
        }
        any
    });
    GuidanceLatent::new(g, m)
}

/// [`SpatialGuide::coarse_mask`] followed by [`guide_latent`].
pub fn coarse_mask_guide(mask: &Tensor3, band: f64, codec: &LatentCodec) -> Result<GuidanceLatent> {
    guide_latent(&SpatialGuide::coarse_mask(mask, band)?, codec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(h: usize, w: usize, v: &[f64]) -> Tensor3 {
        Tensor3::from_vec(Dims::new(1, h, w), v.to_vec()).unwrap()
    }

    #[test]
    fn trimap_levels_and_validation() {
        let g = SpatialGuide::trimap(&t(1, 4, &[0.0, 0.5004, 1.0, 0.5])).unwrap();
        assert_eq!(g.image().data(), &[0.0, 0.5, 1.0, 0.5]);
        assert_eq!(g.m_unknown().data(), &[0.0, 1.0, 0.0, 1.0]);
        let err = SpatialGuide::trimap(&t(1, 2, &[0.0, 0.3])).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        let g = SpatialGuide::trimap(&t(1, 2, &[127.0 / 255.0, 128.0 / 255.0])).unwrap();
        assert_eq!(g.m_unknown().data(), &[1.0, 1.0]);
        assert!(SpatialGuide::trimap(&t(1, 1, &[126.0 / 255.0])).is_err());
        assert!(SpatialGuide::trimap(&t(1, 1, &[0.003])).is_err());
    }

    #[test]
    fn mask_kind_is_fully_unknown() {
        let codec = LatentCodec::new(1, 2, 3).unwrap();
        let g = SpatialGuide::mask(&t(2, 4, &[1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0])).unwrap();
        let lat = guide_latent(&g, &codec).unwrap();
        assert!(lat.g().data().iter().all(|v| *v == 0.0));
        assert!(lat.m_unknown().data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn known_trimap_encodes_directly() {
        let codec = LatentCodec::new(1, 2, 3).unwrap();
        let tri = t(2, 4, &[1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let lat = guide_latent(&SpatialGuide::trimap(&tri).unwrap(), &codec).unwrap();
        assert!(lat.m_unknown().data().iter().all(|v| *v == 0.0));
        assert!(lat.g().max_abs_diff(&codec.encode(&tri).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn trimap_known_blocks_round_trip() {
        let codec = LatentCodec::new(1, 2, 8).unwrap();
        // left block known, right block has one unknown pixel
        let tri = t(2, 4, &[1.0, 0.0, 0.5, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let lat = guide_latent(&SpatialGuide::trimap(&tri).unwrap(), &codec).unwrap();
        assert_eq!(lat.m_unknown().data(), &[0.0, 1.0]);
        let back = codec.decode(lat.g()).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                assert!((back.get(0, y, x) - tri.get(0, y, x)).abs() < 1e-9);
            }
            for x in 2..4 {
                assert_eq!(back.get(0, y, x), 0.0);
            }
        }
    }

    #[test]
    fn scribble_unknown_is_pooled_exactly() {
        let codec = LatentCodec::new(1, 4, 1).unwrap();
        let doc: ScribbleDoc =
            serde_json::from_str(r#"{"strokes":[{"label":1,"radius":1.5,"points":[[3,3],[12,5]]}]}"#).unwrap();
        let g = SpatialGuide::scribbles(&doc, 16, 16).unwrap();
        let lat = guide_latent(&g, &codec).unwrap();
        for ly in 0..4 {
            for lx in 0..4 {
                let mut all_stroked = true;
                for y in ly * 4..ly * 4 + 4 {
                    for x in lx * 4..lx * 4 + 4 {
                        let d = segment_distance_sq([x as f64, y as f64], [3.0, 3.0], [12.0, 5.0]);
                        all_stroked &= d <= 2.25;
                    }
                }
                let expected = if all_stroked { 0.0 } else { 1.0 };
                assert_eq!(lat.m_unknown().get(0, ly, lx), expected);
            }
        }
        assert!(g.m_unknown().data().contains(&0.0));
        for (v, m) in g.image().data().iter().zip(g.m_unknown().data()) {
            assert_eq!(*v, 1.0 - *m);
        }
    }

    #[test]
    fn scribble_validation() {
        let bad: ScribbleDoc =
            serde_json::from_str(r#"{"strokes":[{"label":2,"radius":1,"points":[[0,0]]}]}"#).unwrap();
        assert!(matches!(SpatialGuide::scribbles(&bad, 4, 4), Err(Error::Validation(_))));
        let empty: ScribbleDoc = serde_json::from_str(r#"{"strokes":[{"label":0,"radius":1,"points":[]}]}"#).unwrap();
        assert!(SpatialGuide::scribbles(&empty, 4, 4).is_err());
        assert!(serde_json::from_str::<ScribbleDoc>(r#"{"strokes":[],"extra":1}"#).is_err());
    }

    #[test]
    fn full_mask_has_no_band() {
        let codec = LatentCodec::new(1, 2, 3).unwrap();
        let ones = Tensor3::filled(Dims::new(1, 4, 4), 1.0);
        let lat = coarse_mask_guide(&ones, 16.0, &codec).unwrap();
        assert!(lat.m_unknown().data().iter().all(|v| *v == 0.0));
        assert!(lat.g().max_abs_diff(&codec.encode(&ones).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn circular_mask_band_matches_brute_force() {
        let (h, w) = (40, 48);
        let mask = Tensor3::from_fn(Dims::new(1, h, w), |_, y, x| {
            let d = ((y as f64 - 19.0).powi(2) + (x as f64 - 25.0).powi(2)).sqrt();
            if d <= 12.0 {
                1.0
            } else {
                0.0
            }
        });
        let band = 6.0;
        let g = SpatialGuide::coarse_mask(&mask, band).unwrap();
        for y in 0..h {
            for x in 0..w {
                let inside = mask.get(0, y, x);
                let mut best = f64::INFINITY;
                for yy in 0..h {
                    for xx in 0..w {
                        if mask.get(0, yy, xx) != inside {
                            let d = ((y as f64 - yy as f64).powi(2) + (x as f64 - xx as f64).powi(2)).sqrt();
                            best = best.min(d);
                        }
                    }
                }
                let expected = if best <= band / 2.0 { 1.0 } else { 0.0 };
                assert_eq!(g.m_unknown().get(0, y, x), expected, "({y},{x})");
            }
        }
    }

    #[test]
    fn thresholded_trimap_is_a_valid_coarse_mask() {
        let tri = t(1, 4, &[0.0, 0.5, 1.0, 0.5]);
        let mask = tri.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        assert_eq!(mask.data(), &[0.0, 1.0, 1.0, 1.0]);
        assert!(SpatialGuide::coarse_mask(&mask, 2.0).is_ok());
        assert!(matches!(
            SpatialGuide::coarse_mask(&tri, 2.0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mut rng = crate::rng::SeededRng::new(4);
        let (h, w) = (13, 17);
        let f: Vec<bool> = (0..h * w).map(|_| rng.uniform() < 0.08).collect();
        let d = squared_distance_transform(&f, h, w);
        for y in 0..h {
            for x in 0..w {
                let mut best = f64::INFINITY;
                for yy in 0..h {
                    for xx in 0..w {
                        if f[yy * w + xx] {
                            best = best.min(((y as f64 - yy as f64).powi(2)) + (x as f64 - xx as f64).powi(2));
                        }
                    }
                }
                assert_eq!(d[y * w + x], best);
            }
        }
    }

    #[test]
    fn pin_replaces_known_pixels() {
        let g = SpatialGuide::trimap(&t(1, 3, &[0.0, 0.5, 1.0])).unwrap();
        let out = g.pin(&t(1, 3, &[0.3, 0.3, 0.3])).unwrap();
        assert_eq!(out.data(), &[0.0, 0.3, 1.0]);
    }
}
