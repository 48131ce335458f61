//! Self-adaptive class-balanced selection.
//!
//! Once per epoch the robust network scores every training sample. The mean
//! top-1 probability becomes the global threshold and the mean probability
//! assigned to each class sets that class's share of it, both smoothed with
//! an EMA. A sample is kept as clean when the probability of its given label
//! clears the threshold of that label's class; below-threshold samples whose
//! predicted class agrees with the given label are mined back in.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::argmax;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub mean_max_prob: f64,
    pub class_mean_prob: Vec<f64>,
}

/// Means of the per-sample max probability and of each class column.
pub fn epoch_stats(probs: ArrayView2<f64>) -> Result<EpochStats> {
    let (n, k) = probs.dim();
    if n == 0 || k == 0 {
        return Err(Error::param("epoch_stats needs at least one sample and class"));
    }
    let mut max_sum = 0.0;
    let mut class_sum = vec![0.0; k];
    for row in probs.rows() {
        max_sum += row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        for (acc, &p) in class_sum.iter_mut().zip(row) {
            *acc += p;
        }
    }
    let n = n as f64;
    Ok(EpochStats {
        mean_max_prob: max_sum / n,
        class_mean_prob: class_sum.into_iter().map(|s| s / n).collect(),
    })
}

/// Which parts of the threshold are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdMode {
    /// `tau(c) = tau_g * p(c) / max p`
    GlobalAndLocal,
    /// `tau(c) = tau_g`
    GlobalOnly,
    /// `tau(c) = p(c)`
    LocalOnly,
}

impl ThresholdMode {
    pub fn from_switches(use_global: bool, use_local: bool) -> Result<Self> {
        match (use_global, use_local) {
            (true, true) => Ok(ThresholdMode::GlobalAndLocal),
            (true, false) => Ok(ThresholdMode::GlobalOnly),
            (false, true) => Ok(ThresholdMode::LocalOnly),
            (false, false) => Err(Error::param(
                "selection needs the global threshold, the local thresholds, or both",
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    pub tau_global: f64,
    /// EMA of the mean predicted probability per class.
    pub class_prob_ema: Vec<f64>,
    pub m: f64,
    pub initialized: bool,
}

impl ThresholdState {
    pub fn new(num_classes: usize, m: f64) -> Result<Self> {
        check_factor(m)?;
        Ok(ThresholdState {
            tau_global: 0.0,
            class_prob_ema: vec![0.0; num_classes],
            m,
            initialized: false,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_prob_ema.len()
    }

    /// Per-class thresholds under full global+local modulation.
    pub fn local_thresholds(&self) -> Vec<f64> {
        self.thresholds(ThresholdMode::GlobalAndLocal)
    }

    pub fn thresholds(&self, mode: ThresholdMode) -> Vec<f64> {
        match mode {
            ThresholdMode::GlobalOnly => vec![self.tau_global; self.num_classes()],
            ThresholdMode::LocalOnly => self.class_prob_ema.clone(),
            ThresholdMode::GlobalAndLocal => {
                let max = self.class_prob_ema.iter().cloned().fold(0.0, f64::max);
                if max <= 0.0 {
                    return vec![self.tau_global; self.num_classes()];
                }
                self.class_prob_ema
                    .iter()
                    .map(|p| self.tau_global * p / max)
                    .collect()
            }
        }
    }
}

fn check_factor(m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::param(format!("EMA factor m must lie in [0,1], got {m}")));
    }
    Ok(())
}

/// EMA-merges this epoch's statistics. The first update adopts them as is.
pub fn update_thresholds(state: &ThresholdState, stats: &EpochStats, m: f64) -> Result<ThresholdState> {
    check_factor(m)?;
    if stats.class_mean_prob.len() != state.num_classes() {
        return Err(Error::param(format!(
            "stats cover {} classes, state has {}",
            stats.class_mean_prob.len(),
            state.num_classes()
        )));
    }
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    if !state.initialized {
        return Ok(ThresholdState {
            tau_global: clamp(stats.mean_max_prob),
            class_prob_ema: stats.class_mean_prob.iter().map(|&p| clamp(p)).collect(),
            m,
            initialized: true,
        });
    }
    let ema = |old: f64, new: f64| clamp(m * old + (1.0 - m) * new);
    Ok(ThresholdState {
        tau_global: ema(state.tau_global, stats.mean_max_prob),
        class_prob_ema: state
            .class_prob_ema
            .iter()
            .zip(&stats.class_mean_prob)
            .map(|(&o, &n)| ema(o, n))
            .collect(),
        m,
        initialized: true,
    })
}

/// Split of an epoch's samples. All index lists are ascending.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Partition {
    pub clean_idx: Vec<usize>,
    pub noisy_idx: Vec<usize>,
    /// Members of `clean_idx` that were rescued by mining.
    pub mined_idx: Vec<usize>,
    /// Weight of each entry of `clean_idx`, same order.
    pub reliability: Vec<f64>,
}

impl Partition {
    /// Everything clean with unit reliability.
    pub fn all_clean(n: usize) -> Self {
        Partition {
            clean_idx: (0..n).collect(),
            noisy_idx: Vec::new(),
            mined_idx: Vec::new(),
            reliability: vec![1.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.clean_idx.len() + self.noisy_idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Clean iff `probs[i, y_i] >= thresholds[y_i]`.
pub fn select(probs: ArrayView2<f64>, given_labels: &[usize], thresholds: &[f64]) -> Partition {
    let mut part = Partition::default();
    for (i, &y) in given_labels.iter().enumerate() {
        if probs[[i, y]] >= thresholds[y] {
            part.clean_idx.push(i);
        } else {
            part.noisy_idx.push(i);
        }
    }
    part
}

/// Moves noisy samples whose arg-max prediction equals the given label into
/// the clean set. Reliability is left empty; call [`reliability`] afterwards.
pub fn mine(probs: ArrayView2<f64>, given_labels: &[usize], partition: &Partition) -> Partition {
    let (mined, still_noisy): (Vec<usize>, Vec<usize>) = partition
        .noisy_idx
        .iter()
        .partition(|&&i| argmax(probs.row(i)) == given_labels[i]);
    let mut clean = partition.clean_idx.clone();
    clean.extend_from_slice(&mined);
    clean.sort_unstable();
    let mut all_mined = partition.mined_idx.clone();
    all_mined.extend_from_slice(&mined);
    all_mined.sort_unstable();
    Partition {
        clean_idx: clean,
        noisy_idx: still_noisy,
        mined_idx: all_mined,
        reliability: Vec::new(),
    }
}

/// Probability of the given label for every clean sample.
pub fn reliability(probs: ArrayView2<f64>, given_labels: &[usize], clean_idx: &[usize]) -> Vec<f64> {
    clean_idx
        .iter()
        .map(|&i| probs[[i, given_labels[i]]].clamp(0.0, 1.0))
        .collect()
}

/// Threshold selection, mining and reliability in one call.
pub fn partition(probs: ArrayView2<f64>, given_labels: &[usize], thresholds: &[f64]) -> Partition {
    let mut part = mine(probs, given_labels, &select(probs, given_labels, thresholds));
    part.reliability = reliability(probs, given_labels, &part.clean_idx);
    part
}

/// Non-adaptive fallback: clean iff the prediction agrees with the given
/// label, unit reliability.
pub fn agreement_partition(probs: ArrayView2<f64>, given_labels: &[usize]) -> Partition {
    let mut part = Partition::default();
    for (i, &y) in given_labels.iter().enumerate() {
        if argmax(probs.row(i)) == y {
            part.clean_idx.push(i);
        } else {
            part.noisy_idx.push(i);
        }
    }
    part.reliability = vec![1.0; part.clean_idx.len()];
    part
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn four_sample_case() -> (Array2<f64>, Vec<usize>, Vec<f64>) {
        (
            array![[0.9, 0.1], [0.4, 0.6], [0.55, 0.45], [0.3, 0.7]],
            vec![0, 0, 0, 1],
            vec![0.6, 0.5],
        )
    }

    #[test]
    fn stats_cases() {
        let s = epoch_stats(Array2::from_elem((3, 4), 0.25).view()).unwrap();
        assert!((s.mean_max_prob - 0.25).abs() < 1e-15);
        assert!(s.class_mean_prob.iter().all(|p| (p - 0.25).abs() < 1e-15));

        let s = epoch_stats(array![[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]].view()).unwrap();
        assert_eq!(s.mean_max_prob, 1.0);
        assert_eq!(s.class_mean_prob, vec![1.0, 0.0, 0.0]);

        let s = epoch_stats(array![[0.7, 0.3], [0.4, 0.6]].view()).unwrap();
        assert!((s.mean_max_prob - 0.65).abs() < 1e-15);
        assert!((s.class_mean_prob[0] - 0.55).abs() < 1e-15);
        assert!((s.class_mean_prob[1] - 0.45).abs() < 1e-15);

        assert!(epoch_stats(Array2::<f64>::zeros((0, 3)).view()).is_err());
    }

    #[test]
    fn threshold_updates() {
        let stats = EpochStats {
            mean_max_prob: 0.7,
            class_mean_prob: vec![0.3, 0.7],
        };
        let fresh = ThresholdState::new(2, 0.99).unwrap();
        let first = update_thresholds(&fresh, &stats, 0.99).unwrap();
        assert_eq!(first.tau_global, 0.7);
        assert_eq!(first.class_prob_ema, vec![0.3, 0.7]);

        let mut warm = first.clone();
        warm.tau_global = 0.5;
        let next = update_thresholds(&warm, &stats, 0.99).unwrap();
        assert!((next.tau_global - 0.502).abs() < 1e-12);

        let adopt = update_thresholds(&warm, &stats, 0.0).unwrap();
        assert_eq!(adopt.tau_global, 0.7);
        assert_eq!(adopt.class_prob_ema, vec![0.3, 0.7]);

        assert!(update_thresholds(&warm, &stats, 1.2).is_err());
        assert!(ThresholdState::new(2, -0.1).is_err());
    }

    #[test]
    fn local_threshold_cases() {
        let mut s = ThresholdState::new(3, 0.9).unwrap();
        s.initialized = true;
        s.tau_global = 0.6;
        s.class_prob_ema = vec![0.4, 0.4, 0.4];
        assert!(s.local_thresholds().iter().all(|t| (t - 0.6).abs() < 1e-15));
        s.class_prob_ema = vec![0.2, 0.4, 0.8];
        let t = s.local_thresholds();
        for (got, want) in t.iter().zip([0.15, 0.30, 0.60]) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
        s.class_prob_ema = vec![0.0; 3];
        assert_eq!(s.local_thresholds(), vec![0.6; 3]);
        assert_eq!(s.thresholds(ThresholdMode::GlobalOnly), vec![0.6; 3]);
        assert!(ThresholdMode::from_switches(false, false).is_err());
    }

    #[test]
    fn four_sample_walkthrough() {
        let (probs, labels, tau) = four_sample_case();
        let selected = select(probs.view(), &labels, &tau);
        assert_eq!(selected.clean_idx, vec![0, 3]);
        assert_eq!(selected.noisy_idx, vec![1, 2]);

        let mined = mine(probs.view(), &labels, &selected);
        assert_eq!(mined.clean_idx, vec![0, 2, 3]);
        assert_eq!(mined.mined_idx, vec![2]);
        assert_eq!(mined.noisy_idx, vec![1]);

        let w = reliability(probs.view(), &labels, &mined.clean_idx);
        assert_eq!(w, vec![0.9, 0.55, 0.7]);
        assert_eq!(partition(probs.view(), &labels, &tau).reliability, w);
    }

    #[test]
    fn selection_edge_cases() {
        let probs = array![[1.0, 0.0], [0.0, 1.0]];
        let p = select(probs.view(), &[0, 1], &[0.99, 0.99]);
        assert_eq!(p.clean_idx, vec![0, 1]);

        let uniform = Array2::from_elem((5, 4), 0.25);
        let p = select(uniform.view(), &[0, 1, 2, 3, 0], &[0.3; 4]);
        assert!(p.clean_idx.is_empty());
        assert_eq!(p.noisy_idx.len(), 5);

        // nothing agrees: mining is a no-op
        let probs = array![[0.2, 0.8], [0.9, 0.1]];
        let p = select(probs.view(), &[0, 1], &[0.95, 0.95]);
        assert_eq!(mine(probs.view(), &[0, 1], &p).clean_idx, Vec::<usize>::new());
        // everything agrees: noisy empties
        let p = select(probs.view(), &[1, 0], &[0.95, 0.95]);
        assert!(mine(probs.view(), &[1, 0], &p).noisy_idx.is_empty());
    }

    /// Two classes, class 1 predicted with uniformly lower confidence. The
    /// global-only threshold drops most of class 1; local thresholds keep it.
    #[test]
    fn local_thresholds_favour_the_harder_class() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let easy = 0.80 + 0.01 * i as f64;
            rows.extend([easy, 1.0 - easy]);
            labels.push(0);
        }
        for i in 0..20 {
            let hard = 0.5 * (0.80 + 0.01 * i as f64) + 0.05;
            rows.extend([1.0 - hard, hard]);
            labels.push(1);
        }
        let probs = Array2::from_shape_vec((40, 2), rows).unwrap();
        let stats = epoch_stats(probs.view()).unwrap();
        let state = update_thresholds(&ThresholdState::new(2, 0.9).unwrap(), &stats, 0.9).unwrap();

        let kept = |tau: &[f64]| {
            select(probs.view(), &labels, tau)
                .clean_idx
                .iter()
                .filter(|&&i| labels[i] == 1)
                .count()
        };
        let local = kept(&state.thresholds(ThresholdMode::GlobalAndLocal));
        let global = kept(&state.thresholds(ThresholdMode::GlobalOnly));
        // enumerate directly: class-1 probabilities span 0.45..0.545
        let tau_g = stats.mean_max_prob;
        let oracle_global = (0..20).filter(|&i| 0.5 * (0.80 + 0.01 * i as f64) + 0.05 >= tau_g).count();
        assert_eq!(global, oracle_global);
        assert!(local > global, "local {local} vs global {global}");
    }

    fn instance() -> impl Strategy<Value = (Array2<f64>, Vec<usize>, Vec<f64>)> {
        (1usize..=16, 2usize..=5).prop_flat_map(|(n, k)| {
            (
                proptest::collection::vec(0.01f64..1.0, n * k),
                proptest::collection::vec(0..k, n),
                proptest::collection::vec(0.0f64..=1.0, k),
            )
                .prop_map(move |(raw, labels, tau)| {
                    let mut probs = Array2::from_shape_vec((n, k), raw).unwrap();
                    for mut row in probs.rows_mut() {
                        let s = row.sum();
                        row.mapv_inplace(|v| v / s);
                    }
                    (probs, labels, tau)
                })
        })
    }

    proptest! {
        #[test]
        fn partition_is_disjoint_cover((probs, labels, tau) in instance()) {
            let n = labels.len();
            let check = |p: &Partition| {
                let mut all: Vec<usize> = p.clean_idx.iter().chain(&p.noisy_idx).copied().collect();
                all.sort_unstable();
                all == (0..n).collect::<Vec<_>>()
            };
            let selected = select(probs.view(), &labels, &tau);
            prop_assert!(check(&selected));
            let full = partition(probs.view(), &labels, &tau);
            prop_assert!(check(&full));
            prop_assert!(full.mined_idx.iter().all(|i| full.clean_idx.contains(i)));
            prop_assert_eq!(full.reliability.len(), full.clean_idx.len());
            prop_assert!(full.reliability.iter().all(|w| (0.0..=1.0).contains(w)));
        }

        #[test]
        fn raising_thresholds_never_adds_clean((probs, labels, tau) in instance(), bump in 0.0f64..0.5, class in 0usize..5) {
            let mut raised = tau.clone();
            let c = class % tau.len();
            raised[c] = (raised[c] + bump).min(1.0);
            let before = select(probs.view(), &labels, &tau);
            let after = select(probs.view(), &labels, &raised);
            prop_assert!(after.clean_idx.iter().all(|i| before.clean_idx.contains(i)));
        }

        #[test]
        fn stats_ignore_row_order((probs, _labels, _tau) in instance(), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let mut order: Vec<usize> = (0..probs.nrows()).collect();
            order.shuffle(&mut crate::rng::seeded(seed, 0));
            let shuffled = probs.select(ndarray::Axis(0), &order);
            let a = epoch_stats(probs.view()).unwrap();
            let b = epoch_stats(shuffled.view()).unwrap();
            prop_assert!((a.mean_max_prob - b.mean_max_prob).abs() < 1e-12);
            for (x, y) in a.class_mean_prob.iter().zip(&b.class_mean_prob) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn local_thresholds_scale_with_class_means(tau_g in 0.0f64..=1.0, ema in proptest::collection::vec(0.001f64..1.0, 2..8)) {
            let state = ThresholdState { tau_global: tau_g, class_prob_ema: ema.clone(), m: 0.9, initialized: true };
            let t = state.local_thresholds();
            let max = ema.iter().cloned().fold(0.0, f64::max);
            let top = t.iter().cloned().fold(0.0, f64::max);
            prop_assert!((top - tau_g).abs() < 1e-12);
            for (ti, ei) in t.iter().zip(&ema) {
                prop_assert!(*ti <= tau_g + 1e-15);
                prop_assert!((ti - tau_g * ei / max).abs() < 1e-12);
            }
        }

        #[test]
        fn threshold_ema_closed_form(m in 0.0f64..=1.0, s0 in 0.0f64..=1.0, s in 0.0f64..=1.0, k in 1usize..=100) {
            let mut state = ThresholdState { tau_global: s0, class_prob_ema: vec![s0, s0], m, initialized: true };
            let stats = EpochStats { mean_max_prob: s, class_mean_prob: vec![s, s] };
            for _ in 0..k {
                state = update_thresholds(&state, &stats, m).unwrap();
            }
            let mk = m.powi(k as i32);
            let expect = mk * s0 + (1.0 - mk) * s;
            prop_assert!((state.tau_global - expect).abs() <= 1e-12);
            prop_assert!((state.class_prob_ema[1] - expect).abs() <= 1e-12);
        }
    }
}
