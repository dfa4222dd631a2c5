//! Variance schedules and the forward noising process.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Per-step variances `β_1..β_T` and cumulative signal coefficients
/// `ᾱ_t = ∏_{s≤t} (1 − β_s)`. Steps are 1-based; `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear if steps == 1 => vec![beta_start],
            ScheduleKind::Linear => (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect(),
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::config("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::config(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::Step(format!("step {t} outside 1..={}", self.steps())))
        } else {
            Ok(())
        }
    }

    /// Closed-form forward sample `√ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
    pub fn q_sample(&self, z0: &Tensor3, t: usize, eps: &Tensor3) -> Result<Tensor3> {
        self.check_step(t)?;
        let a = self.alpha_bar(t);
        z0.lincomb(a.sqrt(), eps, (1.0 - a).sqrt())
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::new(1000, 1e-4, 0.02, ScheduleKind::Linear).expect("default schedule is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tensor::Dims;

    /// ᾱ_1000 of the linear [1e-4, 0.02] schedule, from an independent
    /// running-product evaluation.
    const DEFAULT_ALPHA_BAR_T: f64 = 4.035829765375676e-05;

    #[test]
    fn single_step() {
        let s = DiffusionSchedule::new(1, 0.5, 0.5, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn two_steps_running_product() {
        let s = DiffusionSchedule::new(2, 0.5, 0.5, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5, 0.25]);
    }

    #[test]
    fn default_schedule_fixture() {
        let s = DiffusionSchedule::default();
        assert_eq!(s.betas()[0], 1e-4);
        assert!((s.betas()[999] - 0.02).abs() < 1e-15);
        let last = s.alpha_bar(1000);
        assert!(last > 0.0 && last < 0.01);
        assert!((last - DEFAULT_ALPHA_BAR_T).abs() < 1e-12);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bars().iter().all(|a| *a > 0.0 && *a < 1.0));
    }

    #[test]
    fn config_errors() {
        assert!(DiffusionSchedule::new(0, 0.1, 0.2, ScheduleKind::Linear).is_err());
        assert!(DiffusionSchedule::new(10, 0.0, 0.2, ScheduleKind::Linear).is_err());
        assert!(DiffusionSchedule::new(10, 0.3, 0.2, ScheduleKind::Linear).is_err());
        assert!(DiffusionSchedule::new(10, 0.1, 1.0, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn q_sample_zero_noise() {
        let s = DiffusionSchedule::default();
        let z0 = Tensor3::filled(Dims::new(1, 2, 2), 3.0);
        let eps = Tensor3::zeros(z0.dims());
        let zt = s.q_sample(&z0, 500, &eps).unwrap();
        assert!(zt
            .data()
            .iter()
            .all(|v| (v - 3.0 * s.alpha_bar(500).sqrt()).abs() < 1e-15));
    }

    #[test]
    fn q_sample_scalar_value() {
        let s = DiffusionSchedule::from_betas(vec![0.5, 0.5]).unwrap();
        let z0 = Tensor3::filled(Dims::new(1, 1, 1), 2.0);
        let eps = Tensor3::filled(Dims::new(1, 1, 1), 1.0);
        let zt = s.q_sample(&z0, 2, &eps).unwrap();
        assert!((zt.data()[0] - 1.8660254).abs() < 1e-6);
    }

    #[test]
    fn q_sample_errors() {
        let s = DiffusionSchedule::default();
        let z0 = Tensor3::zeros(Dims::new(1, 2, 2));
        assert!(matches!(s.q_sample(&z0, 0, &z0), Err(Error::Step(_))));
        assert!(matches!(s.q_sample(&z0, 1001, &z0), Err(Error::Step(_))));
        let other = Tensor3::zeros(Dims::new(1, 2, 3));
        assert!(matches!(s.q_sample(&z0, 1, &other), Err(Error::Shape(_))));
    }

    // Monte-Carlo: chaining √(1−β)z + √β ε from z0 matches the closed form
    // in variance, and both match 1 − ᾱ_t (plus signal) per element.
    #[test]
    fn recursive_chain_matches_closed_form_variance() {
        let s = DiffusionSchedule::new(50, 1e-3, 0.05, ScheduleKind::Linear).unwrap();
        let trials = 100_000;
        let z0 = 0.6;
        let mut rng = SeededRng::new(11);
        let mut chain = Vec::with_capacity(trials);
        let mut closed = Vec::with_capacity(trials);
        for _ in 0..trials {
            let mut z = z0;
            for t in 1..=s.steps() {
                z = (1.0 - s.beta(t)).sqrt() * z + s.beta(t).sqrt() * rng.normal();
            }
            chain.push(z);
            let a = s.alpha_bar(s.steps());
            closed.push(a.sqrt() * z0 + (1.0 - a).sqrt() * rng.normal());
        }
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
        };
        let (vc, vq) = (var(&chain), var(&closed));
        let expected = 1.0 - s.alpha_bar(s.steps());
        assert!((vc / vq - 1.0).abs() < 0.02, "{vc} vs {vq}");
        assert!((vq / expected - 1.0).abs() < 0.02, "{vq} vs {expected}");
    }

    #[test]
    fn q_sample_variance_matches_one_minus_alpha_bar() {
        let s = DiffusionSchedule::default();
        let z0 = Tensor3::zeros(Dims::new(1, 320, 320));
        let eps = SeededRng::new(3).randn(z0.dims()).unwrap();
        for t in [10, 300, 900] {
            let zt = s.q_sample(&z0, t, &eps).unwrap();
            let var = zt.data().iter().map(|v| v * v).sum::<f64>() / zt.data().len() as f64;
            assert!((var / (1.0 - s.alpha_bar(t)) - 1.0).abs() < 0.02, "t={t} var={var}");
        }
    }
}
