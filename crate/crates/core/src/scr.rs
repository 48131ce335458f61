//! Self-adaptive class-balanced re-weighting.
//!
//! The mean teacher relabels the noisy subset with its arg-max class. Each
//! corrected sample is weighted by the CDF, at its teacher confidence, of a
//! normal distribution truncated to `[0, 1]` whose mean and variance are
//! tracked per corrected class with an EMA. Confident corrections in a class
//! whose corrections are usually unsure get weights near one; typical ones
//! get about one half.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::argmax;

pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-3;

/// Prior used for a class until its first correction is observed: the mean
/// and variance of a uniform distribution on `[0, 1]`.
const PRIOR_MU: f64 = 0.5;
const PRIOR_VAR: f64 = 1.0 / 12.0;

/// Standard normal CDF.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal upper tail `1 - Phi(z)`, accurate for large positive `z`.
fn std_normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

/// `Phi(b) - Phi(a)` for `a <= b`, taken from whichever tail keeps precision.
fn normal_mass(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        std_normal_sf(a) - std_normal_sf(b)
    } else {
        std_normal_cdf(b) - std_normal_cdf(a)
    }
}

/// CDF at `x` of N(mu, sigma²) truncated to `[0, 1]`.
pub fn tn_cdf(x: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::param(format!("sigma must be positive, got {sigma}")));
    }
    if !mu.is_finite() || x.is_nan() {
        return Err(Error::param("tn_cdf needs finite mu and x"));
    }
    let x = x.clamp(0.0, 1.0);
    let lo = (0.0 - mu) / sigma;
    let hi = (1.0 - mu) / sigma;
    let z = (x - mu) / sigma;
    let total = normal_mass(lo, hi);
    if total <= 0.0 {
        // The whole interval lies beyond double precision in one tail.
        return Ok(if x <= 0.0 {
            0.0
        } else if x >= 1.0 || mu <= 0.0 {
            1.0
        } else {
            0.0
        });
    }
    Ok((normal_mass(lo, z) / total).clamp(0.0, 1.0))
}

/// Teacher arg-max labels (ties to the lowest class) and their probabilities.
pub fn correct(teacher_probs: ArrayView2<f64>) -> (Vec<usize>, Vec<f64>) {
    teacher_probs
        .rows()
        .into_iter()
        .map(|row| {
            let c = argmax(row);
            (c, row[c])
        })
        .unzip()
}

/// Per-class mean and variance of correction confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
    pub m: f64,
    pub sigma_floor: f64,
    /// Whether each class has been observed at least once.
    pub seen: Vec<bool>,
}

impl ClassStats {
    pub fn new(num_classes: usize, m: f64, sigma_floor: f64) -> Result<Self> {
        check_factor(m)?;
        if !(sigma_floor > 0.0 && sigma_floor.is_finite()) {
            return Err(Error::param("sigma_floor must be positive"));
        }
        Ok(ClassStats {
            mu: vec![PRIOR_MU; num_classes],
            var: vec![PRIOR_VAR.max(sigma_floor * sigma_floor); num_classes],
            m,
            sigma_floor,
            seen: vec![false; num_classes],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.mu.len()
    }

    pub fn initialized(&self) -> bool {
        self.seen.iter().any(|s| *s)
    }

    pub fn sigma(&self, class: usize) -> f64 {
        self.var[class].sqrt()
    }

    /// Truncated-normal CDF weight of each (confidence, class) pair.
    pub fn weights(&self, confidence: &[f64], labels: &[usize]) -> Result<Vec<f64>> {
        confidence
            .iter()
            .zip(labels)
            .map(|(&x, &c)| {
                if c >= self.num_classes() {
                    return Err(Error::param(format!("class {c} outside stats")));
                }
                tn_cdf(x, self.mu[c], self.sigma(c))
            })
            .collect()
    }
}

fn check_factor(m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::param(format!("EMA factor m must lie in [0,1], got {m}")));
    }
    Ok(())
}

/// EMA-merges per-class batch mean and (population) variance of the
/// confidences. A class seen for the first time adopts its batch statistics;
/// classes absent from this epoch keep their previous values.
pub fn update_class_stats(
    stats: &ClassStats,
    confidence: &[f64],
    labels: &[usize],
    m: f64,
) -> Result<ClassStats> {
    check_factor(m)?;
    if confidence.len() != labels.len() {
        return Err(Error::param("confidence and labels differ in length"));
    }
    let k = stats.num_classes();
    let mut count = vec![0usize; k];
    let mut sum = vec![0.0; k];
    for (&x, &c) in confidence.iter().zip(labels) {
        if c >= k {
            return Err(Error::param(format!("class {c} outside stats")));
        }
        count[c] += 1;
        sum[c] += x;
    }
    let mut sq = vec![0.0; k];
    for (&x, &c) in confidence.iter().zip(labels) {
        let d = x - sum[c] / count[c] as f64;
        sq[c] += d * d;
    }

    let floor = stats.sigma_floor * stats.sigma_floor;
    let mut out = stats.clone();
    out.m = m;
    for c in 0..k {
        if count[c] == 0 {
            continue;
        }
        let n = count[c] as f64;
        let (mean, var) = (sum[c] / n, sq[c] / n);
        if stats.seen[c] {
            out.mu[c] = m * stats.mu[c] + (1.0 - m) * mean;
            out.var[c] = m * stats.var[c] + (1.0 - m) * var;
        } else {
            out.mu[c] = mean;
            out.var[c] = var;
            out.seen[c] = true;
        }
        out.mu[c] = out.mu[c].clamp(0.0, 1.0);
        out.var[c] = out.var[c].max(floor);
    }
    Ok(out)
}

/// Corrected labels for a noisy subset with their weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Correction {
    pub corrected_labels: Vec<usize>,
    pub confidence: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Correction {
    pub fn len(&self) -> usize {
        self.corrected_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corrected_labels.is_empty()
    }
}

/// Relabels with [`correct`] and weights with the given stats, or with
/// unit weights when `reweight` is false.
pub fn weigh_corrections(
    teacher_probs: ArrayView2<f64>,
    stats: &ClassStats,
    reweight: bool,
) -> Result<Correction> {
    let (corrected_labels, confidence) = correct(teacher_probs);
    let weights = if reweight {
        stats.weights(&confidence, &corrected_labels)?
    } else {
        vec![1.0; corrected_labels.len()]
    };
    Ok(Correction {
        corrected_labels,
        confidence,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    /// Simpson integral of the truncated density from 0 to x, normalized by
    /// the integral over [0, 1]. Independent of erf.
    fn simpson_tn_cdf(x: f64, mu: f64, sigma: f64) -> f64 {
        let density = |t: f64| (-(t - mu).powi(2) / (2.0 * sigma * sigma)).exp();
        let integrate = |b: f64| {
            let steps = ((b / 1e-5).round() as usize).max(2) & !1;
            if b <= 0.0 {
                return 0.0;
            }
            let h = b / steps as f64;
            let mut s = density(0.0) + density(b);
            for i in 1..steps {
                s += density(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * h / 3.0
        };
        integrate(x) / integrate(1.0)
    }

    #[test]
    fn normal_cdf_reference_points() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        assert!((std_normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((std_normal_cdf(-2.5) - 0.006_209_665_325_776_132).abs() < 1e-15);
    }

    #[test]
    fn tn_cdf_cases() {
        assert_eq!(tn_cdf(0.0, 0.3, 0.1).unwrap(), 0.0);
        assert_eq!(tn_cdf(1.0, 0.3, 0.1).unwrap(), 1.0);
        for sigma in [0.01, 0.2, 1.0, 5.0] {
            assert!((tn_cdf(0.5, 0.5, sigma).unwrap() - 0.5).abs() < 1e-12);
        }
        let v = tn_cdf(0.7, 0.5, 0.2).unwrap();
        assert!((v - simpson_tn_cdf(0.7, 0.5, 0.2)).abs() < 1e-6);
        assert!((v - 0.8456).abs() < 1e-4, "{v}");
        assert!(tn_cdf(0.5, 0.5, 0.0).is_err());
        assert!(tn_cdf(0.5, 0.5, -1.0).is_err());
    }

    #[test]
    fn correct_cases() {
        let probs = array![[0.0, 0.0, 0.0, 1.0], [0.25, 0.25, 0.25, 0.25]];
        let (labels, conf) = correct(probs.view());
        assert_eq!(labels, vec![3, 0]);
        assert_eq!(conf, vec![1.0, 0.25]);
        let (labels, conf) = correct(array![[0.1, 0.7, 0.2]].view());
        assert_eq!((labels[0], conf[0]), (1, 0.7));
        let (labels, _) = correct(Array2::from_elem((1, 5), 0.2).view());
        assert_eq!(labels, vec![0]);
    }

    #[test]
    fn class_stats_update_cases() {
        let mut stats = ClassStats::new(2, 0.9, DEFAULT_SIGMA_FLOOR).unwrap();
        stats.seen = vec![true, true];
        stats.mu = vec![0.5, 0.4];
        let next = update_class_stats(&stats, &[0.8, 0.6], &[0, 0], 0.9).unwrap();
        assert!((next.mu[0] - 0.52).abs() < 1e-12);
        assert_eq!(next.mu[1], 0.4);
        assert_eq!(next.var[1], stats.var[1]);

        let untouched = update_class_stats(&stats, &[], &[], 0.9).unwrap();
        assert_eq!(untouched.mu, stats.mu);
        assert_eq!(untouched.var, stats.var);

        let fresh = ClassStats::new(3, 0.9, DEFAULT_SIGMA_FLOOR).unwrap();
        let first = update_class_stats(&fresh, &[0.9, 0.7], &[2, 2], 0.9).unwrap();
        assert!((first.mu[2] - 0.8).abs() < 1e-12);
        assert!((first.var[2] - 0.01).abs() < 1e-12);
        assert!(!first.seen[0]);
        assert_eq!(first.mu[0], PRIOR_MU);

        assert!(update_class_stats(&fresh, &[0.5], &[7], 0.9).is_err());
        assert!(update_class_stats(&fresh, &[0.5], &[0], 1.1).is_err());
    }

    #[test]
    fn constant_confidence_converges() {
        let m: f64 = 0.9;
        let mut stats = ClassStats::new(1, m, DEFAULT_SIGMA_FLOOR).unwrap();
        stats.seen = vec![true];
        stats.mu = vec![0.2];
        let epochs = (1e-3f64.ln() / m.ln()).ceil() as usize;
        // |0.2 - 0.7| * m^k <= 0.5e-3 < 1e-3
        for _ in 0..epochs {
            stats = update_class_stats(&stats, &[0.7, 0.7, 0.7], &[0, 0, 0], m).unwrap();
        }
        assert!((stats.mu[0] - 0.7).abs() < 1e-3);
        let floor = DEFAULT_SIGMA_FLOOR * DEFAULT_SIGMA_FLOOR;
        for _ in 0..400 {
            stats = update_class_stats(&stats, &[0.7, 0.7, 0.7], &[0, 0, 0], m).unwrap();
        }
        assert_eq!(stats.var[0], floor);
    }

    #[test]
    fn weight_cases() {
        let mut stats = ClassStats::new(2, 0.9, DEFAULT_SIGMA_FLOOR).unwrap();
        stats.mu = vec![0.5, 0.9];
        stats.var = vec![0.04, 0.01];
        let w = stats.weights(&[1.0, 1.0], &[0, 1]).unwrap();
        assert_eq!(w, vec![1.0, 1.0]);
        let w = stats.weights(&[0.6, 0.8], &[0, 0]).unwrap();
        assert!(w[0] < w[1]);
        let w = stats.weights(&[0.5, 0.7], &[0, 0]).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-12);
        assert!((w[1] - simpson_tn_cdf(0.7, 0.5, 0.2)).abs() < 1e-6);
        // equal confidence, different class stats -> different weights
        let w = stats.weights(&[0.7, 0.7], &[0, 1]).unwrap();
        assert!(w[0] != w[1]);
        stats.mu[1] = 0.5;
        stats.var[1] = 0.04;
        let w = stats.weights(&[0.7, 0.7], &[0, 1]).unwrap();
        assert_eq!(w[0], w[1]);
    }

    #[test]
    fn unit_weights_without_reweighting() {
        let stats = ClassStats::new(3, 0.9, DEFAULT_SIGMA_FLOOR).unwrap();
        let probs = array![[0.2, 0.5, 0.3], [0.6, 0.3, 0.1]];
        let c = weigh_corrections(probs.view(), &stats, false).unwrap();
        assert_eq!(c.weights, vec![1.0, 1.0]);
        assert_eq!(c.corrected_labels, vec![1, 0]);
    }

    proptest! {
        #[test]
        fn tn_cdf_monotone_with_exact_endpoints(mu in 0.05f64..=0.95, sigma in 0.01f64..=1.0, x in 0.01f64..0.99) {
            prop_assert!((tn_cdf(0.0, mu, sigma).unwrap()).abs() <= 1e-9);
            prop_assert!((tn_cdf(1.0, mu, sigma).unwrap() - 1.0).abs() <= 1e-9);
            let eps = 1e-6;
            let slope = (tn_cdf(x + eps, mu, sigma).unwrap() - tn_cdf(x - eps, mu, sigma).unwrap()) / (2.0 * eps);
            // past ~6 sigma the remaining tail mass is below the resolution of values near 1
            let z = ((x - mu) / sigma).abs();
            prop_assume!(z < 6.0);
            prop_assert!(slope > 0.0);
        }

        #[test]
        fn class_stats_ignore_order(conf in proptest::collection::vec(0.0f64..=1.0, 1..40), seed in 0u64..100) {
            use rand::seq::SliceRandom;
            let labels: Vec<usize> = (0..conf.len()).map(|i| i % 3).collect();
            let mut order: Vec<usize> = (0..conf.len()).collect();
            order.shuffle(&mut crate::rng::seeded(seed, 0));
            let conf2: Vec<f64> = order.iter().map(|&i| conf[i]).collect();
            let labels2: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
            let base = ClassStats::new(3, 0.8, DEFAULT_SIGMA_FLOOR).unwrap();
            let a = update_class_stats(&base, &conf, &labels, 0.8).unwrap();
            let b = update_class_stats(&base, &conf2, &labels2, 0.8).unwrap();
            for c in 0..3 {
                prop_assert!((a.mu[c] - b.mu[c]).abs() < 1e-12);
                prop_assert!((a.var[c] - b.var[c]).abs() < 1e-12);
            }
        }

        #[test]
        fn class_stats_closed_form(m in 0.0f64..=1.0, mu0 in 0.0f64..=1.0, x in 0.0f64..=1.0, k in 1usize..=100) {
            let mut stats = ClassStats::new(1, m, DEFAULT_SIGMA_FLOOR).unwrap();
            stats.seen = vec![true];
            stats.mu = vec![mu0];
            for _ in 0..k {
                stats = update_class_stats(&stats, &[x], &[0], m).unwrap();
            }
            let mk = m.powi(k as i32);
            prop_assert!((stats.mu[0] - (mk * mu0 + (1.0 - mk) * x)).abs() <= 1e-12);
        }
    }
}
