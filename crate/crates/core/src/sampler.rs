//! Few-step ancestral sampling with optional guided initialisation.
//!
//! The reverse update is the η-family: with `ẑ0 = (z_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`,
//!
//! ```text
//! v      = η²·(1−ᾱ_s)/(1−ᾱ_t)·(1−ᾱ_t/ᾱ_s)
//! z_s    = √ᾱ_s·ẑ0 + √(1−ᾱ_s−v)·ε̂ + √v·n
//! ```
//!
//! for the next step `s < t`, and the final transition to `s = 0` returns
//! `ẑ0`. `η = 1` is ancestral DDPM sampling, `η = 0` is deterministic.
//!
//! All noise comes from a [`NoiseField`]: field 0 initialises the state and
//! field `k` feeds the `k`-th transition. Patch samplers crop the same
//! fields, which is what keeps overlapping patches consistent.

use serde::{Deserialize, Serialize};

use crate::denoiser::{predicted_z0, Denoiser, DenoiserInput};
use crate::error::{Error, Result};
use crate::rng::{child_seed, SeededRng};
use crate::schedule::DiffusionSchedule;
use crate::tensor::{Dims, PatchBox, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    /// `√((1−ᾱ)/ᾱ)·ε + g`
    Literal,
    /// `√(1−ᾱ)·ε + √ᾱ·g`
    #[default]
    Normalized,
}

impl std::str::FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(GuidanceMode::Literal),
            "normalized" => Ok(GuidanceMode::Normalized),
            other => Err(Error::config(format!(
                "unknown guidance mode '{other}' (expected literal or normalized)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    step_indices: Vec<usize>,
    eta: f64,
    guidance_mode: GuidanceMode,
}

impl SamplerConfig {
    /// `steps` evenly strided indices from `T` down to 1.
    pub fn strided(steps: usize, schedule: &DiffusionSchedule, eta: f64, guidance_mode: GuidanceMode) -> Result<Self> {
        let total = schedule.steps();
        if steps == 0 || steps > total {
            return Err(Error::config(format!("steps must be in 1..={total}, got {steps}")));
        }
        if steps == 1 && total != 1 {
            return Err(Error::config("a single step would start at t=1; use at least 2 steps"));
        }
        let indices = if steps == 1 {
            vec![1]
        } else {
            let span = (total - 1) as f64 / (steps - 1) as f64;
            (0..steps)
                .map(|i| (total as f64 - i as f64 * span).round() as usize)
                .collect()
        };
        Self::with_indices(indices, schedule, eta, guidance_mode)
    }

    pub fn with_indices(
        step_indices: Vec<usize>,
        schedule: &DiffusionSchedule,
        eta: f64,
        guidance_mode: GuidanceMode,
    ) -> Result<Self> {
        if step_indices.is_empty() {
            return Err(Error::config("step indices are empty"));
        }
        if step_indices.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::config(format!(
                "step indices must strictly decrease: {step_indices:?}"
            )));
        }
        if *step_indices.last().unwrap() != 1 {
            return Err(Error::config("the last step index must be 1"));
        }
        if step_indices[0] > schedule.steps() {
            return Err(Error::config(format!(
                "step index {} exceeds schedule length {}",
                step_indices[0],
                schedule.steps()
            )));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::config(format!("eta must be in [0, 1], got {eta}")));
        }
        Ok(Self {
            step_indices,
            eta,
            guidance_mode,
        })
    }

    pub fn steps(&self) -> usize {
        self.step_indices.len()
    }

    pub fn step_indices(&self) -> &[usize] {
        &self.step_indices
    }

    pub fn start_step(&self) -> usize {
        self.step_indices[0]
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn guidance_mode(&self) -> GuidanceMode {
        self.guidance_mode
    }

    pub fn with_eta(mut self, eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::config(format!("eta must be in [0, 1], got {eta}")));
        }
        self.eta = eta;
        Ok(self)
    }

    pub fn with_guidance_mode(mut self, mode: GuidanceMode) -> Self {
        self.guidance_mode = mode;
        self
    }

    /// `(t_cur, t_prev)` for every transition; the last one ends at 0.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.step_indices
            .iter()
            .enumerate()
            .map(|(k, &t)| (t, self.step_indices.get(k + 1).copied().unwrap_or(0)))
    }
}

/// Latent-space guide `g` with its unknown-region mask (1 = unknown).
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceLatent {
    g: Tensor3,
    m_unknown: Tensor3,
}

impl GuidanceLatent {
    /// Zeroes `g` wherever the mask is exactly 1.
    pub fn new(g: Tensor3, m_unknown: Tensor3) -> Result<Self> {
        if m_unknown.channels() != 1 || !g.dims().spatial_eq(&m_unknown.dims()) {
            return Err(Error::shape(format!(
                "guide {} needs a 1-channel mask of the same size, got {}",
                g.dims(),
                m_unknown.dims()
            )));
        }
        if m_unknown.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("unknown mask must lie in [0, 1]".into()));
        }
        let mut g = g;
        for c in 0..g.channels() {
            for (v, &m) in g.channel_mut(c).iter_mut().zip(m_unknown.data()) {
                if m == 1.0 {
                    *v = 0.0;
                }
            }
        }
        Ok(Self { g, m_unknown })
    }

    /// Everything known.
    pub fn known(g: Tensor3) -> Self {
        let m = Tensor3::zeros(g.dims().with_channels(1));
        Self { g, m_unknown: m }
    }

    pub fn g(&self) -> &Tensor3 {
        &self.g
    }

    pub fn m_unknown(&self) -> &Tensor3 {
        &self.m_unknown
    }

    pub fn dims(&self) -> Dims {
        self.g.dims()
    }

    pub fn crop(&self, b: &PatchBox) -> Result<GuidanceLatent> {
        Ok(Self {
            g: self.g.crop(b)?,
            m_unknown: self.m_unknown.crop(b)?,
        })
    }

    /// `(1 − m_unknown)·g`, the part of the guide that enters the init.
    pub fn masked(&self) -> Tensor3 {
        Tensor3::from_fn(self.g.dims(), |c, y, x| {
            (1.0 - self.m_unknown.get(0, y, x)) * self.g.get(c, y, x)
        })
    }
}

/// Initial state at `t = cfg.start_step()` from the standard-normal field `eps`.
pub fn init_state(
    cfg: &SamplerConfig,
    schedule: &DiffusionSchedule,
    guide: Option<&GuidanceLatent>,
    eps: &Tensor3,
) -> Result<Tensor3> {
    let Some(guide) = guide else {
        return Ok(eps.clone());
    };
    if guide.dims() != eps.dims() {
        return Err(Error::shape(format!(
            "guide {} does not match latent {}",
            guide.dims(),
            eps.dims()
        )));
    }
    let a = schedule.alpha_bar(cfg.start_step());
    let g = guide.masked();
    match cfg.guidance_mode {
        GuidanceMode::Literal => eps.lincomb(((1.0 - a) / a).sqrt(), &g, 1.0),
        GuidanceMode::Normalized => eps.lincomb((1.0 - a).sqrt(), &g, a.sqrt()),
    }
}

/// Variance of the fresh-noise term for the step `t_cur → t_prev`.
pub fn step_variance(schedule: &DiffusionSchedule, t_cur: usize, t_prev: usize, eta: f64) -> f64 {
    if t_prev == 0 {
        return 0.0;
    }
    let ac = schedule.alpha_bar(t_cur);
    let ap = schedule.alpha_bar(t_prev);
    eta * eta * (1.0 - ap) / (1.0 - ac) * (1.0 - ac / ap)
}

fn check_transition(schedule: &DiffusionSchedule, t_cur: usize, t_prev: usize) -> Result<()> {
    schedule.check_step(t_cur)?;
    if t_prev >= t_cur {
        return Err(Error::Step(format!(
            "reverse step must go backwards, got {t_cur} -> {t_prev}"
        )));
    }
    Ok(())
}

/// One reverse update with an explicit fresh-noise tensor (ignored when the
/// step variance is zero).
pub fn ancestral_step_with_noise(
    z_t: &Tensor3,
    t_cur: usize,
    t_prev: usize,
    eps_hat: &Tensor3,
    schedule: &DiffusionSchedule,
    eta: f64,
    noise: &Tensor3,
) -> Result<Tensor3> {
    check_transition(schedule, t_cur, t_prev)?;
    let z0 = predicted_z0(z_t, eps_hat, schedule.alpha_bar(t_cur))?;
    if t_prev == 0 {
        return Ok(z0);
    }
    let ap = schedule.alpha_bar(t_prev);
    let v = step_variance(schedule, t_cur, t_prev, eta);
    let dir = (1.0 - ap - v).max(0.0).sqrt();
    let mut out = z0.lincomb(ap.sqrt(), eps_hat, dir)?;
    if v > 0.0 {
        out = out.lincomb(1.0, noise, v.sqrt())?;
    }
    Ok(out)
}

/// One reverse update drawing fresh noise from `rng` only when needed.
pub fn ancestral_step(
    z_t: &Tensor3,
    t_cur: usize,
    t_prev: usize,
    eps_hat: &Tensor3,
    schedule: &DiffusionSchedule,
    eta: f64,
    rng: &mut SeededRng,
) -> Result<Tensor3> {
    check_transition(schedule, t_cur, t_prev)?;
    let noise = if step_variance(schedule, t_cur, t_prev, eta) > 0.0 {
        rng.randn(z_t.dims())?
    } else {
        Tensor3::zeros(z_t.dims())
    };
    ancestral_step_with_noise(z_t, t_cur, t_prev, eps_hat, schedule, eta, &noise)
}

/// Full-canvas standard-normal fields derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseField {
    seed: u64,
    dims: Dims,
}

impl NoiseField {
    pub fn new(seed: u64, dims: Dims) -> Self {
        Self { seed, dims }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Field 0 initialises the state; field `k ≥ 1` feeds transition `k`.
    pub fn field(&self, index: usize) -> Result<Tensor3> {
        SeededRng::new(child_seed(self.seed, index as u64)).randn(self.dims)
    }
}

/// Conditioning for one [`sample`] call.
#[derive(Debug, Clone, Copy)]
pub struct SampleInputs<'a> {
    /// Image latent.
    pub cond: &'a Tensor3,
    /// Channel count of the matte latent being sampled.
    pub latent_channels: usize,
    pub guide: Option<&'a GuidanceLatent>,
    pub text: Option<&'a [f64]>,
}

/// Runs the reverse chain and returns the final `ẑ0`.
pub fn sample(
    denoiser: &dyn Denoiser,
    inputs: &SampleInputs<'_>,
    cfg: &SamplerConfig,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<Tensor3> {
    let dims = inputs.cond.dims().with_channels(inputs.latent_channels);
    let noise = NoiseField::new(seed, dims);
    sample_with_noise(denoiser, inputs, cfg, schedule, &noise)
}

pub fn sample_with_noise(
    denoiser: &dyn Denoiser,
    inputs: &SampleInputs<'_>,
    cfg: &SamplerConfig,
    schedule: &DiffusionSchedule,
    noise: &NoiseField,
) -> Result<Tensor3> {
    let dims = inputs.cond.dims().with_channels(inputs.latent_channels);
    if noise.dims() != dims {
        return Err(Error::shape(format!(
            "noise field {} does not match latent {dims}",
            noise.dims()
        )));
    }
    let mut z = init_state(cfg, schedule, inputs.guide, &noise.field(0)?)?;
    for (k, (t_cur, t_prev)) in cfg.transitions().enumerate() {
        let eps_hat = denoiser.predict_eps(
            &DenoiserInput {
                z_t: &z,
                cond: inputs.cond,
                t: t_cur,
                text: inputs.text,
            },
            schedule,
        )?;
        let fresh = if step_variance(schedule, t_cur, t_prev, cfg.eta) > 0.0 {
            noise.field(k + 1)?
        } else {
            Tensor3::zeros(dims)
        };
        z = ancestral_step_with_noise(&z, t_cur, t_prev, &eps_hat, schedule, cfg.eta, &fresh)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::GaussianOracle;

    fn schedule() -> DiffusionSchedule {
        DiffusionSchedule::default()
    }

    fn scalar(v: f64) -> Tensor3 {
        Tensor3::filled(Dims::new(1, 1, 1), v)
    }

    #[test]
    fn strided_indices() {
        let s = schedule();
        let cfg = SamplerConfig::strided(10, &s, 1.0, GuidanceMode::Normalized).unwrap();
        assert_eq!(cfg.step_indices(), &[1000, 889, 778, 667, 556, 445, 334, 223, 112, 1]);
        let two = SamplerConfig::strided(2, &s, 1.0, GuidanceMode::Normalized).unwrap();
        assert_eq!(two.step_indices(), &[1000, 1]);
        let all = SamplerConfig::strided(1000, &s, 1.0, GuidanceMode::Normalized).unwrap();
        assert!(all.step_indices().windows(2).all(|w| w[0] == w[1] + 1));
        assert!(SamplerConfig::strided(1, &s, 1.0, GuidanceMode::Normalized).is_err());
        assert!(SamplerConfig::strided(0, &s, 1.0, GuidanceMode::Normalized).is_err());
        let t1 = DiffusionSchedule::from_betas(vec![0.5]).unwrap();
        assert_eq!(
            SamplerConfig::strided(1, &t1, 0.0, GuidanceMode::Literal)
                .unwrap()
                .step_indices(),
            &[1]
        );
    }

    #[test]
    fn index_validation() {
        let s = schedule();
        let m = GuidanceMode::Normalized;
        assert!(SamplerConfig::with_indices(vec![], &s, 0.0, m).is_err());
        assert!(SamplerConfig::with_indices(vec![5, 5, 1], &s, 0.0, m).is_err());
        assert!(SamplerConfig::with_indices(vec![5, 2], &s, 0.0, m).is_err());
        assert!(SamplerConfig::with_indices(vec![1001, 1], &s, 0.0, m).is_err());
        assert!(SamplerConfig::with_indices(vec![5, 1], &s, 1.5, m).is_err());
        assert!(SamplerConfig::with_indices(vec![5, 1], &s, 0.5, m).is_ok());
    }

    #[test]
    fn unguided_init_is_the_noise() {
        let s = schedule();
        let cfg = SamplerConfig::strided(10, &s, 1.0, GuidanceMode::Normalized).unwrap();
        let eps = SeededRng::new(1).randn(Dims::new(4, 3, 3)).unwrap();
        assert_eq!(init_state(&cfg, &s, None, &eps).unwrap(), eps);
    }

    #[test]
    fn init_modes_quarter_alpha() {
        // ᾱ = 0.25 at the single step
        let s = DiffusionSchedule::from_betas(vec![0.75]).unwrap();
        let eps = scalar(0.8);
        let g = GuidanceLatent::known(scalar(-0.4));
        let lit = SamplerConfig::strided(1, &s, 0.0, GuidanceMode::Literal).unwrap();
        let norm = lit.clone().with_guidance_mode(GuidanceMode::Normalized);
        let a = init_state(&lit, &s, Some(&g), &eps).unwrap().data()[0];
        let b = init_state(&norm, &s, Some(&g), &eps).unwrap().data()[0];
        assert!((a - (3f64.sqrt() * 0.8 - 0.4)).abs() < 1e-12);
        assert!((b - (0.75f64.sqrt() * 0.8 - 0.5 * 0.4)).abs() < 1e-12);
        assert!((b - 0.5 * a).abs() < 1e-12);
    }

    #[test]
    fn fully_unknown_guide_vanishes() {
        let s = schedule();
        let cfg = SamplerConfig::strided(10, &s, 1.0, GuidanceMode::Literal).unwrap();
        let dims = Dims::new(4, 2, 2);
        let eps = SeededRng::new(2).randn(dims).unwrap();
        let g = GuidanceLatent::new(Tensor3::filled(dims, 3.0), Tensor3::filled(dims.with_channels(1), 1.0)).unwrap();
        assert!(g.g().data().iter().all(|v| *v == 0.0));
        let a = s.alpha_bar(1000);
        let z = init_state(&cfg, &s, Some(&g), &eps).unwrap();
        assert!(z.max_abs_diff(&eps.scale(((1.0 - a) / a).sqrt())).unwrap() < 1e-9);
    }

    #[test]
    fn guide_shape_mismatch() {
        let s = schedule();
        let cfg = SamplerConfig::strided(10, &s, 1.0, GuidanceMode::Literal).unwrap();
        let g = GuidanceLatent::known(Tensor3::zeros(Dims::new(4, 2, 2)));
        let eps = Tensor3::zeros(Dims::new(4, 3, 2));
        assert!(matches!(init_state(&cfg, &s, Some(&g), &eps), Err(Error::Shape(_))));
        assert!(GuidanceLatent::new(Tensor3::zeros(Dims::new(4, 2, 2)), Tensor3::zeros(Dims::new(1, 2, 3))).is_err());
    }

    #[test]
    fn exact_noise_recovers_z0() {
        let s = schedule();
        let mut rng = SeededRng::new(5);
        let z0 = rng.randn(Dims::new(2, 3, 3)).unwrap();
        let eps = rng.randn(z0.dims()).unwrap();
        let zt = s.q_sample(&z0, 640, &eps).unwrap();
        let out = ancestral_step(&zt, 640, 0, &eps, &s, 0.0, &mut rng).unwrap();
        assert!(out.max_abs_diff(&z0).unwrap() < 1e-6);
    }

    #[test]
    fn deterministic_step_is_repeatable() {
        let s = schedule();
        let mut rng = SeededRng::new(5);
        let zt = rng.randn(Dims::new(1, 4, 4)).unwrap();
        let e = rng.randn(zt.dims()).unwrap();
        let a = ancestral_step(&zt, 500, 300, &e, &s, 0.0, &mut SeededRng::new(1)).unwrap();
        let b = ancestral_step(&zt, 500, 300, &e, &s, 0.0, &mut SeededRng::new(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn step_ordering_is_checked() {
        let s = schedule();
        let z = scalar(0.0);
        let mut rng = SeededRng::new(0);
        assert!(matches!(
            ancestral_step(&z, 300, 300, &z, &s, 1.0, &mut rng),
            Err(Error::Step(_))
        ));
        assert!(matches!(
            ancestral_step(&z, 1001, 3, &z, &s, 1.0, &mut rng),
            Err(Error::Step(_))
        ));
    }

    #[test]
    fn full_variance_step_matches_posterior_variance() {
        // η = 1 adjacent steps: v is the DDPM posterior variance β̃_t
        let s = schedule();
        let t = 400;
        let beta_tilde = (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t)) * s.beta(t);
        assert!((step_variance(&s, t, t - 1, 1.0) - beta_tilde).abs() < 1e-15);
        assert_eq!(step_variance(&s, t, t - 1, 0.0), 0.0);
    }

    fn gaussian_moments(steps: usize, n: usize) -> (f64, f64) {
        let s = schedule();
        let cfg = SamplerConfig::strided(steps, &s, 1.0, GuidanceMode::Normalized).unwrap();
        let oracle = GaussianOracle::new(scalar(0.7), 0.04).unwrap();
        let cond = scalar(0.0);
        let inputs = SampleInputs {
            cond: &cond,
            latent_channels: 1,
            guide: None,
            text: None,
        };
        let xs: Vec<f64> = (0..n)
            .map(|i| {
                sample(&oracle, &inputs, &cfg, &s, child_seed(99, i as u64))
                    .unwrap()
                    .data()[0]
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        (mean, var)
    }

    #[test]
    fn ten_step_sampling_centres_on_the_prior_mean() {
        let (mean, _) = gaussian_moments(10, 10_000);
        assert!((mean - 0.7).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn many_step_sampling_matches_prior_variance() {
        let (mean, var) = gaussian_moments(1000, 2_000);
        assert!((mean - 0.7).abs() < 0.02, "mean {mean}");
        assert!((var - 0.04).abs() < 0.2 * 0.04, "variance {var}");
    }

    #[test]
    fn seeds_matter_for_stochastic_oracles() {
        let s = schedule();
        let cfg = SamplerConfig::strided(10, &s, 1.0, GuidanceMode::Normalized).unwrap();
        let oracle = GaussianOracle::new(Tensor3::zeros(Dims::new(4, 1, 1)), 1.0).unwrap();
        let cond = Tensor3::zeros(Dims::new(12, 3, 3));
        let inputs = SampleInputs {
            cond: &cond,
            latent_channels: 4,
            guide: None,
            text: None,
        };
        let a = sample(&oracle, &inputs, &cfg, &s, 1).unwrap();
        let b = sample(&oracle, &inputs, &cfg, &s, 1).unwrap();
        let c = sample(&oracle, &inputs, &cfg, &s, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    fn dft_band_energy(t: &Tensor3) -> (f64, f64) {
        // (low, high) energy of channel 0; high = any frequency index beyond N/4
        let (h, w) = (t.height(), t.width());
        let mut low = 0.0;
        let mut high = 0.0;
        for ky in 0..h {
            for kx in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let ph = -std::f64::consts::TAU
                            * (ky as f64 * y as f64 / h as f64 + kx as f64 * x as f64 / w as f64);
                        let v = t.get(0, y, x);
                        re += v * ph.cos();
                        im += v * ph.sin();
                    }
                }
                let fy = ky.min(h - ky);
                let fx = kx.min(w - kx);
                let e = re * re + im * im;
                if fy > h / 4 || fx > w / 4 {
                    high += e;
                } else {
                    low += e;
                }
            }
        }
        (low, high)
    }

    #[test]
    fn noise_floods_guide_high_frequencies() {
        let s = schedule();
        let dims = Dims::new(1, 24, 24);
        // checkerboard guide: all energy at the highest frequency
        let g = Tensor3::from_fn(dims, |_, y, x| if (x + y) % 2 == 0 { 1.0 } else { -1.0 });
        let eps = SeededRng::new(8).randn(dims).unwrap();
        let cfg = SamplerConfig::strided(10, &s, 1.0, GuidanceMode::Normalized).unwrap();
        let guide = GuidanceLatent::known(g.clone());
        let zt = init_state(&cfg, &s, Some(&guide), &eps).unwrap();
        let a = s.alpha_bar(cfg.start_step());
        let (_, guide_high) = dft_band_energy(&g.scale(a.sqrt()));
        let (_, total_high) = dft_band_energy(&zt);
        assert!(guide_high / total_high < 0.05, "{}", guide_high / total_high);
    }

    #[test]
    fn noise_fields_are_seeded_per_index() {
        let f = NoiseField::new(4, Dims::new(1, 3, 3));
        assert_eq!(f.field(2).unwrap(), f.field(2).unwrap());
        assert_ne!(f.field(1).unwrap(), f.field(2).unwrap());
    }
}
