//! Human stature model and the distance error it implies.
//!
//! A monocular estimator that assumes every person has the reference height
//! `h_mean` misplaces a person of true height `h` at distance `d` by
//! `d·|1 − h_mean/h|`. Averaging over the population height distribution
//! gives the expected task error `ê(d)`, which is linear in `d`.
//!
//! Heights are in centimeters, distances in meters.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::GaussLegendre;

/// Components are integrated over `mean ± TRUNCATION_SIGMAS·std`.
pub const TRUNCATION_SIGMAS: f64 = 8.0;

/// Extra relative height variation when people down to 14 years old are
/// included.
pub const TEEN_VARIATION_MALE: f64 = 0.079;
pub const TEEN_VARIATION_FEMALE: f64 = 0.056;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Male,
    Female,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeightComponent {
    pub group: Group,
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

/// Gaussian mixture over adult stature plus the reference height used for
/// distance estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeightMixture {
    components: Vec<HeightComponent>,
    h_mean: f64,
}

impl Default for HeightMixture {
    /// Adults: males 178 ± 7 cm, females 165 ± 7 cm, equal weights,
    /// reference height at the mixture mean (171.5 cm).
    fn default() -> Self {
        HeightMixture::with_mixture_mean(vec![
            HeightComponent {
                group: Group::Male,
                weight: 0.5,
                mean: 178.0,
                std: 7.0,
            },
            HeightComponent {
                group: Group::Female,
                weight: 0.5,
                mean: 165.0,
                std: 7.0,
            },
        ])
        .expect("default mixture is valid")
    }
}

impl HeightMixture {
    pub fn new(components: Vec<HeightComponent>, h_mean: f64) -> Result<Self> {
        let mix = HeightMixture { components, h_mean };
        mix.validate()?;
        Ok(mix)
    }

    /// Mixture whose reference height is its own mean.
    pub fn with_mixture_mean(components: Vec<HeightComponent>) -> Result<Self> {
        let mean = components.iter().map(|c| c.weight * c.mean).sum();
        Self::new(components, mean)
    }

    pub fn single(mean: f64, std: f64) -> Result<Self> {
        Self::with_mixture_mean(vec![HeightComponent {
            group: Group::Other,
            weight: 1.0,
            mean,
            std,
        }])
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::InvalidMixture("no components".into()));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidMixture(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        for (i, c) in self.components.iter().enumerate() {
            if !(c.weight >= 0.0) {
                return Err(Error::InvalidMixture(format!("component {i} has negative weight")));
            }
            if !(c.std > 0.0) || !c.std.is_finite() {
                return Err(Error::InvalidMixture(format!("component {i} has std {}", c.std)));
            }
            if !(c.mean > 0.0) || !c.mean.is_finite() {
                return Err(Error::InvalidMixture(format!("component {i} has mean {}", c.mean)));
            }
        }
        if !(self.h_mean > 0.0) || !self.h_mean.is_finite() {
            return Err(Error::InvalidMixture(format!("h_mean = {}", self.h_mean)));
        }
        Ok(())
    }

    pub fn components(&self) -> &[HeightComponent] {
        &self.components
    }

    pub fn h_mean(&self) -> f64 {
        self.h_mean
    }

    pub fn with_h_mean(mut self, h_mean: f64) -> Result<Self> {
        self.h_mean = h_mean;
        self.validate()?;
        Ok(self)
    }

    /// Expected height of the mixture.
    pub fn mean(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.mean).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.components
            .iter()
            .map(|c| c.weight * (c.std * c.std + (c.mean - m).powi(2)))
            .sum()
    }

    /// Every component's std multiplied by `factor`.
    pub fn widened(&self, factor: f64) -> Result<Self> {
        let components = self
            .components
            .iter()
            .map(|c| HeightComponent {
                std: c.std * factor,
                ..*c
            })
            .collect();
        Self::new(components, self.h_mean)
    }

    /// Draws a component index and a height from it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, f64) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                idx = i;
                break;
            }
        }
        let c = &self.components[idx];
        let h = Normal::new(c.mean, c.std)
            .expect("validated std")
            .sample(rng);
        (idx, h)
    }

    /// `E_{h∼P(H)}[|1 − h_mean/h|]`, the slope of `ê(d)`.
    pub fn task_error_slope(&self) -> f64 {
        let rule = GaussLegendre::standard();
        let hm = self.h_mean;
        self.components
            .iter()
            .filter(|c| c.weight > 0.0)
            .map(|c| {
                let density = |h: f64| {
                    let z = (h - c.mean) / c.std;
                    (-0.5 * z * z).exp() / (c.std * (2.0 * std::f64::consts::PI).sqrt())
                };
                let integrand = |h: f64| density(h) * (1.0 - hm / h).abs();
                let lo = (c.mean - TRUNCATION_SIGMAS * c.std).max(f64::MIN_POSITIVE.sqrt());
                let hi = c.mean + TRUNCATION_SIGMAS * c.std;
                // split at the kink of |1 - hm/h|
                let value = if lo < hm && hm < hi {
                    rule.integrate(lo, hm, integrand) + rule.integrate(hm, hi, integrand)
                } else {
                    rule.integrate(lo, hi, integrand)
                };
                c.weight * value
            })
            .sum()
    }
}

/// Task error for one person: `d_gt·|1 − h_mean/h_gt|`.
pub fn task_error_instance(d_gt: f64, h_gt: f64, h_mean: f64) -> Result<f64> {
    if !(h_gt > 0.0) {
        return Err(Error::InvalidHeight(h_gt));
    }
    if !(h_mean > 0.0) {
        return Err(Error::InvalidHeight(h_mean));
    }
    if !(d_gt >= 0.0) {
        return Err(Error::InvalidDistance(d_gt));
    }
    Ok(d_gt * (1.0 - h_mean / h_gt).abs())
}

/// Expected task error `ê` at ground-truth distance `d_gt` (meters).
pub fn expected_task_error(mix: &HeightMixture, d_gt: f64) -> f64 {
    d_gt * mix.task_error_slope()
}

/// Same mixture with each gendered std inflated by the extra variation that
/// comes from including teenagers: `std' = sqrt(std² + (mean·r)²)`.
pub fn teen_extended_mixture(base: &HeightMixture) -> HeightMixture {
    let components = base
        .components
        .iter()
        .map(|c| {
            let r = match c.group {
                Group::Male => TEEN_VARIATION_MALE,
                Group::Female => TEEN_VARIATION_FEMALE,
                Group::Other => 0.0,
            };
            HeightComponent {
                std: (c.std * c.std + (c.mean * r).powi(2)).sqrt(),
                ..*c
            }
        })
        .collect();
    HeightMixture {
        components,
        h_mean: base.h_mean,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskErrorCurve {
    pub distances: Vec<f64>,
    pub e_hat: Vec<f64>,
}

/// `ê` on `n_points` evenly spaced distances in `[0, d_max]`.
pub fn task_error_curve(mix: &HeightMixture, d_max: f64, n_points: usize) -> Result<TaskErrorCurve> {
    if !(d_max > 0.0) {
        return Err(Error::InvalidDistance(d_max));
    }
    if n_points < 2 {
        return Err(Error::InvalidConfig(format!(
            "task error curve needs at least 2 points, got {n_points}"
        )));
    }
    let slope = mix.task_error_slope();
    let step = d_max / (n_points - 1) as f64;
    let distances: Vec<f64> = (0..n_points).map(|i| i as f64 * step).collect();
    let e_hat = distances.iter().map(|d| d * slope).collect();
    Ok(TaskErrorCurve { distances, e_hat })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn instance_error_examples() {
        assert_eq!(task_error_instance(20.0, 171.5, 171.5).unwrap(), 0.0);
        let e = task_error_instance(10.0, 180.0, 171.5).unwrap();
        assert_relative_eq!(e, 10.0 * (1.0 - 171.5 / 180.0), max_relative = 1e-15);
        assert_relative_eq!(e, 0.472_222_222_222_222, max_relative = 1e-12);
        let e2 = task_error_instance(20.0, 180.0, 171.5).unwrap();
        assert_relative_eq!(e2, 2.0 * e, max_relative = 1e-15);
    }

    #[test]
    fn non_positive_heights_rejected() {
        assert!(matches!(
            task_error_instance(5.0, 0.0, 171.5),
            Err(Error::InvalidHeight(_))
        ));
        assert!(task_error_instance(5.0, 170.0, -1.0).is_err());
    }

    #[test]
    fn default_mixture() {
        let mix = HeightMixture::default();
        assert_eq!(mix.h_mean(), 171.5);
        assert_eq!(mix.components().len(), 2);
        let total: f64 = mix.components().iter().map(|c| c.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_mixtures_rejected() {
        let c = |w: f64, s: f64| HeightComponent {
            group: Group::Other,
            weight: w,
            mean: 170.0,
            std: s,
        };
        assert!(HeightMixture::new(vec![c(0.6, 7.0), c(0.3, 7.0)], 170.0).is_err());
        assert!(HeightMixture::new(vec![c(1.0, 0.0)], 170.0).is_err());
        assert!(HeightMixture::new(vec![c(1.0, 7.0)], 0.0).is_err());
        assert!(HeightMixture::new(vec![], 170.0).is_err());
    }

    #[test]
    fn zero_distance_has_zero_error() {
        assert_eq!(expected_task_error(&HeightMixture::default(), 0.0), 0.0);
    }

    #[test]
    fn degenerate_mixture_has_no_error() {
        let mix = HeightMixture::single(171.5, 1e-9).unwrap();
        assert!(expected_task_error(&mix, 30.0) < 1e-9);
    }

    #[test]
    fn default_slope_regression() {
        // frozen from a 10^7-sample Monte Carlo run (see tests/height_oracle.rs)
        let c = HeightMixture::default().task_error_slope();
        assert!((c - 0.045_94).abs() < 1e-4, "{c}");
        let e10 = expected_task_error(&HeightMixture::default(), 10.0);
        assert!((0.4..0.5).contains(&e10));
    }

    #[test]
    fn teen_extension_inflates_stds_only() {
        let base = HeightMixture::default();
        let ext = teen_extended_mixture(&base);
        for (b, e) in base.components().iter().zip(ext.components()) {
            assert!(e.std > b.std);
            assert_eq!(e.weight, b.weight);
            assert_eq!(e.mean, b.mean);
        }
        assert_relative_eq!(
            ext.components()[0].std,
            (49.0f64 + (178.0f64 * 0.079).powi(2)).sqrt(),
            max_relative = 1e-15
        );
        assert_eq!(ext.h_mean(), base.h_mean());
    }

    #[test]
    fn teen_curve_lies_above_adult_curve() {
        let base = HeightMixture::default();
        let ext = teen_extended_mixture(&base);
        let a = task_error_curve(&base, 50.0, 11).unwrap();
        let b = task_error_curve(&ext, 50.0, 11).unwrap();
        for i in 1..11 {
            assert!(b.e_hat[i] > a.e_hat[i]);
        }
    }

    #[test]
    fn curve_is_linear_through_origin() {
        let curve = task_error_curve(&HeightMixture::default(), 60.0, 25).unwrap();
        assert_eq!(curve.e_hat[0], 0.0);
        let slope = curve.e_hat[1] / curve.distances[1];
        for (d, e) in curve.distances.iter().zip(&curve.e_hat).skip(1) {
            assert!((e / d - slope).abs() < 1e-12 * slope);
        }
        assert!(curve.e_hat.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn wider_mixture_has_larger_error() {
        let base = HeightMixture::default();
        let wide = base.widened(2.0).unwrap();
        let a = task_error_curve(&base, 40.0, 9).unwrap();
        let b = task_error_curve(&wide, 40.0, 9).unwrap();
        for i in 1..9 {
            assert!(b.e_hat[i] > a.e_hat[i]);
        }
    }

    #[test]
    fn curve_rejects_bad_grid() {
        let mix = HeightMixture::default();
        assert!(task_error_curve(&mix, 0.0, 10).is_err());
        assert!(task_error_curve(&mix, 10.0, 1).is_err());
    }
}
