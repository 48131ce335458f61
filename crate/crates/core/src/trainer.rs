//! The training loop.
//!
//! Two networks train side by side from the same initialization and see the
//! same minibatches: the robust network and a plain cross-entropy baseline.
//! For the first `warmup_epochs` both minimize plain CE. Afterwards every
//! epoch
//!
//! 1. scores all training samples with the robust network, updates the
//!    thresholds and partitions the data into clean and noisy subsets;
//! 2. relabels the noisy subset with the mean teacher and weights the
//!    corrections by per-class truncated-normal CDFs;
//! 3. takes one pass of minibatch SGD on
//!    `L_clean + lambda_n * L_noisy + lambda_r * L_reg` for the robust
//!    network and plain CE for the baseline;
//! 4. moves the teacher towards the robust network.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{NoiseType, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::{class_balance, selection_precision, selection_recall};
use crate::net::{
    apply_gradient, ema_update_teacher, evaluate, forward, nll_and_grad, normalized_targets,
    save_checkpoint, sgd_step_targets, ModelParams, Target,
};
use crate::rng::{seeded, stream};
use crate::scr::{self, ClassStats, Correction};
use crate::scs::{self, Partition, ThresholdMode, ThresholdState};
use crate::synthdata::{self, ClusterLayout, Dataset, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Sed,
}

/// Mean per-batch values of the three loss terms over one epoch. A term
/// absent from every batch is 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub clean: f64,
    pub noisy: f64,
    pub reg: f64,
}

/// `L_clean + lambda_n * L_noisy + lambda_r * L_reg`
pub fn total_loss(components: &LossComponents, lambda_n: f64, lambda_r: f64) -> f64 {
    components.clean + lambda_n * components.noisy + lambda_r * components.reg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub phase: Phase,
    pub test_acc_a: f64,
    pub test_acc_b: f64,
    pub sel_precision: Option<f64>,
    pub sel_recall: Option<f64>,
    pub class_balance: Option<f64>,
    pub loss_dc: f64,
    pub loss_dn: f64,
    pub loss_dreg: f64,
    pub tau_global: Option<f64>,
    pub tau_local_mean: Option<f64>,
    pub mu_mean: Option<f64>,
    pub sigma_mean: Option<f64>,
    /// Precision over threshold-selected samples only, mined ones excluded.
    pub sel_precision_unmined: Option<f64>,
    /// Fraction of teacher corrections on the noisy subset that hit the true label.
    pub correction_accuracy: Option<f64>,
    pub num_clean: usize,
    pub num_noisy: usize,
    pub num_mined: usize,
    pub tau_local: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub warnings: Vec<String>,
}

impl EpochLog {
    fn new(epoch: usize, phase: Phase) -> Self {
        EpochLog {
            epoch,
            phase,
            test_acc_a: 0.0,
            test_acc_b: 0.0,
            sel_precision: None,
            sel_recall: None,
            class_balance: None,
            loss_dc: 0.0,
            loss_dn: 0.0,
            loss_dreg: 0.0,
            tau_global: None,
            tau_local_mean: None,
            mu_mean: None,
            sigma_mean: None,
            sel_precision_unmined: None,
            correction_accuracy: None,
            num_clean: 0,
            num_noisy: 0,
            num_mined: 0,
            tau_local: Vec::new(),
            mu: Vec::new(),
            sigma: Vec::new(),
            warnings: Vec::new(),
        }
    }
}

/// Final and best-epoch metrics derived from the epoch logs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs: usize,
    pub final_acc_a: Option<f64>,
    pub final_acc_b: Option<f64>,
    pub best_acc_a: Option<f64>,
    pub best_epoch_a: Option<usize>,
    pub best_acc_b: Option<f64>,
    pub best_epoch_b: Option<usize>,
    pub final_precision: Option<f64>,
    pub final_recall: Option<f64>,
}

/// The per-epoch values a summary is built from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryPoint {
    pub epoch: usize,
    pub acc_a: f64,
    pub acc_b: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

impl From<&EpochLog> for SummaryPoint {
    fn from(e: &EpochLog) -> Self {
        SummaryPoint {
            epoch: e.epoch,
            acc_a: e.test_acc_a,
            acc_b: e.test_acc_b,
            precision: e.sel_precision,
            recall: e.sel_recall,
        }
    }
}

impl RunSummary {
    pub fn from_epochs(epochs: &[EpochLog]) -> Self {
        let points: Vec<SummaryPoint> = epochs.iter().map(SummaryPoint::from).collect();
        Self::from_points(&points)
    }

    /// Ties for best go to the earliest epoch.
    pub fn from_points(points: &[SummaryPoint]) -> Self {
        let best = |acc: fn(&SummaryPoint) -> f64| {
            points.iter().fold(None, |best: Option<(f64, usize)>, p| match best {
                Some((b, _)) if acc(p) <= b => best,
                _ => Some((acc(p), p.epoch)),
            })
        };
        let best_a = best(|p| p.acc_a);
        let best_b = best(|p| p.acc_b);
        let last = points.last();
        RunSummary {
            epochs: points.len(),
            final_acc_a: last.map(|p| p.acc_a),
            final_acc_b: last.map(|p| p.acc_b),
            best_acc_a: best_a.map(|b| b.0),
            best_epoch_a: best_a.map(|b| b.1),
            best_acc_b: best_b.map(|b| b.0),
            best_epoch_b: best_b.map(|b| b.1),
            final_precision: last.and_then(|p| p.precision),
            final_recall: last.and_then(|p| p.recall),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub dataset_hash: String,
    pub summary: RunSummary,
    pub epochs: Vec<EpochLog>,
}

/// Everything the loop carries from one epoch to the next.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub robust: ModelParams,
    pub baseline: ModelParams,
    /// Created from the robust network when the first robust epoch starts.
    pub teacher: Option<ModelParams>,
    pub thresholds: ThresholdState,
    pub class_stats: ClassStats,
}

impl TrainState {
    pub fn new(config: &TrainConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        let robust = ModelParams::init(input_dim, config.hidden, num_classes, config.seed)?;
        Ok(TrainState {
            baseline: robust.clone(),
            robust,
            teacher: None,
            thresholds: ThresholdState::new(num_classes, config.m)?,
            class_stats: ClassStats::new(num_classes, config.m, config.sigma_floor)?,
        })
    }
}

/// Shuffled sample order for an epoch; depends only on seed and epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed, stream::SHUFFLE_BASE + epoch as u64));
    order
}

fn unit_targets(labels: impl Iterator<Item = usize>) -> Vec<Target> {
    normalized_targets(labels.enumerate().map(|(row, y)| (row, y, 1.0)))
}

/// One pass of plain CE over shuffled minibatches for both networks.
/// Returns the robust network's mean batch loss.
pub fn warmup_epoch(
    state: &mut TrainState,
    train: &Dataset,
    config: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let order = epoch_order(config.seed, epoch, train.len());
    let mut loss_sum = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(config.batch_size) {
        let features = train.features.select(Axis(0), chunk);
        let targets = unit_targets(chunk.iter().map(|&i| train.given_labels[i]));
        loss_sum += sgd_step_targets(&mut state.robust, features.view(), &targets, config.lr)?;
        sgd_step_targets(&mut state.baseline, features.view(), &targets, config.lr)?;
        batches += 1;
    }
    Ok(if batches == 0 { 0.0 } else { loss_sum / batches as f64 })
}

/// Everything a robust epoch decided, for logging and inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct SedOutcome {
    pub partition: Partition,
    pub thresholds: Option<Vec<f64>>,
    /// Teacher corrections of `partition.noisy_idx`, same order.
    pub correction: Correction,
    /// Teacher corrections of `partition.clean_idx`, same order.
    pub regularization: Correction,
    pub losses: LossComponents,
    pub warnings: Vec<String>,
}

fn teacher_corrections(teacher: &ModelParams, features: &Array2<f64>, idx: &[usize]) -> Result<(Vec<usize>, Vec<f64>)> {
    if idx.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let probs = forward(teacher, features.select(Axis(0), idx).view())?;
    Ok(scr::correct(probs.view()))
}

/// One minibatch's loss terms as `(row, label, weight)` triples. Each term
/// is normalized by its own weight sum.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchTerms {
    /// Given labels weighted by reliability.
    pub clean: Vec<(usize, usize, f64)>,
    /// Corrected labels weighted by the truncated-normal CDF.
    pub noisy: Vec<(usize, usize, f64)>,
    /// Teacher labels on clean rows, weighted like the noisy term.
    pub reg: Vec<(usize, usize, f64)>,
}

/// Loss terms of one minibatch and the gradient of their [`total_loss`].
/// `None` when every term is empty or carries zero weight.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    features: ArrayView2<f64>,
    terms: &BatchTerms,
    lambda_n: f64,
    lambda_r: f64,
) -> Result<Option<(LossComponents, ModelParams)>> {
    let groups = [
        (normalized_targets(terms.clean.iter().copied()), 1.0),
        (normalized_targets(terms.noisy.iter().copied()), lambda_n),
        (normalized_targets(terms.reg.iter().copied()), lambda_r),
    ];
    let targets: Vec<Target> = groups
        .iter()
        .flat_map(|(group, coef)| {
            group.iter().map(move |t| Target {
                weight: if *coef == 1.0 { t.weight } else { coef * t.weight },
                ..*t
            })
        })
        .collect();
    if targets.is_empty() {
        return Ok(None);
    }
    let (nll, grad) = nll_and_grad(params, features, &targets)?;
    let mut parts = [0.0; 3];
    let mut offset = 0;
    for (part, (group, _)) in parts.iter_mut().zip(&groups) {
        *part = group
            .iter()
            .zip(&nll[offset..offset + group.len()])
            .map(|(t, l)| t.weight * l)
            .sum();
        offset += group.len();
    }
    let losses = LossComponents {
        clean: parts[0],
        noisy: parts[1],
        reg: parts[2],
    };
    Ok(Some((losses, grad)))
}

/// Role of a sample within the current epoch's partition.
#[derive(Clone, Copy)]
enum Role {
    Clean(usize),
    Noisy(usize),
}

/// One robust epoch.
pub fn sed_epoch(
    state: &mut TrainState,
    train: &Dataset,
    config: &TrainConfig,
    epoch: usize,
) -> Result<SedOutcome> {
    let switches = config.ablation;
    let n = train.len();
    let m = if switches.use_ema { config.m } else { 0.0 };
    let mut warnings = Vec::new();

    // (1) partition
    let (partition, thresholds) = if switches.use_scs {
        let probs = forward(&state.robust, train.features.view())?;
        let stats = scs::epoch_stats(probs.view())?;
        state.thresholds = scs::update_thresholds(&state.thresholds, &stats, m)?;
        let mode = ThresholdMode::from_switches(
            switches.use_global_thresholds,
            switches.use_local_thresholds,
        )?;
        let tau = state.thresholds.thresholds(mode);
        (scs::partition(probs.view(), &train.given_labels, &tau), Some(tau))
    } else if switches.use_scr {
        let probs = forward(&state.robust, train.features.view())?;
        (scs::agreement_partition(probs.view(), &train.given_labels), None)
    } else {
        (Partition::all_clean(n), None)
    };
    if partition.clean_idx.is_empty() {
        warnings.push("empty clean subset: clean and regularization losses skipped".to_string());
    }

    // (2) corrections from the teacher
    let teacher = state.teacher.get_or_insert_with(|| state.robust.clone()).clone();
    let mut correction = Correction::default();
    if switches.use_scr {
        let (labels, conf) = teacher_corrections(&teacher, &train.features, &partition.noisy_idx)?;
        if !labels.is_empty() {
            state.class_stats = scr::update_class_stats(&state.class_stats, &conf, &labels, m)?;
        }
        correction = Correction {
            corrected_labels: labels,
            confidence: conf,
            weights: Vec::new(),
        };
    }
    let mut regularization = Correction::default();
    if switches.use_cr {
        let (labels, conf) = teacher_corrections(&teacher, &train.features, &partition.clean_idx)?;
        if !switches.use_scr && !labels.is_empty() {
            state.class_stats = scr::update_class_stats(&state.class_stats, &conf, &labels, m)?;
        }
        regularization = Correction {
            corrected_labels: labels,
            confidence: conf,
            weights: Vec::new(),
        };
    }
    for c in [&mut correction, &mut regularization] {
        c.weights = if switches.use_reweighting {
            state.class_stats.weights(&c.confidence, &c.corrected_labels)?
        } else {
            vec![1.0; c.len()]
        };
    }

    // (3) minibatch updates
    let mut role = vec![Role::Clean(0); n];
    for (pos, &i) in partition.clean_idx.iter().enumerate() {
        role[i] = Role::Clean(pos);
    }
    for (pos, &i) in partition.noisy_idx.iter().enumerate() {
        role[i] = Role::Noisy(pos);
    }

    let order = epoch_order(config.seed, epoch, n);
    let mut sums = LossComponents::default();
    let mut counts = [0usize; 3];
    for chunk in order.chunks(config.batch_size) {
        let features = train.features.select(Axis(0), chunk);
        let mut clean_items = Vec::new();
        let mut noisy_items = Vec::new();
        let mut reg_items = Vec::new();
        for (row, &i) in chunk.iter().enumerate() {
            match role[i] {
                Role::Clean(pos) => {
                    clean_items.push((row, train.given_labels[i], partition.reliability[pos]));
                    if switches.use_cr {
                        reg_items.push((
                            row,
                            regularization.corrected_labels[pos],
                            regularization.weights[pos],
                        ));
                    }
                }
                Role::Noisy(pos) => {
                    if switches.use_scr {
                        noisy_items.push((row, correction.corrected_labels[pos], correction.weights[pos]));
                    }
                }
            }
        }
        let terms = BatchTerms {
            clean: clean_items,
            noisy: noisy_items,
            reg: reg_items,
        };
        if let Some((losses, grad)) =
            batch_loss_and_grad(&state.robust, features.view(), &terms, config.lambda_n, config.lambda_r)?
        {
            apply_gradient(&mut state.robust, &grad, config.lr)?;
            let weighted = |t: &[(usize, usize, f64)]| t.iter().map(|x| x.2).sum::<f64>() > 0.0;
            for (g, term) in [&terms.clean, &terms.noisy, &terms.reg].into_iter().enumerate() {
                if weighted(term) {
                    counts[g] += 1;
                }
            }
            sums.clean += losses.clean;
            sums.noisy += losses.noisy;
            sums.reg += losses.reg;
        }
        let plain = unit_targets(chunk.iter().map(|&i| train.given_labels[i]));
        sgd_step_targets(&mut state.baseline, features.view(), &plain, config.lr)?;
    }
    let mean = |s: f64, c: usize| if c == 0 { 0.0 } else { s / c as f64 };
    let losses = LossComponents {
        clean: mean(sums.clean, counts[0]),
        noisy: mean(sums.noisy, counts[1]),
        reg: mean(sums.reg, counts[2]),
    };

    // (4) teacher
    state.teacher = Some(ema_update_teacher(&teacher, &state.robust, config.alpha)?);

    Ok(SedOutcome {
        partition,
        thresholds,
        correction,
        regularization,
        losses,
        warnings,
    })
}

/// Builds the training and test sets described by the config. The result
/// depends only on the dataset block, the noise block and the seed.
pub fn build_datasets(config: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let d = &config.dataset;
    let spec = config.noise.spec();
    let (train, mut test) = match (&d.train_csv, &d.test_csv) {
        (Some(train), Some(test)) => (
            synthdata::load_csv(train, d.num_classes, Split::Train)?,
            synthdata::load_csv(test, d.num_classes, Split::Test)?,
        ),
        _ => {
            let mut layout =
                ClusterLayout::random(d.num_classes, d.dim, d.mean_scale, d.spread, config.seed)?;
            if let Some(c) = d.hard_class {
                layout = layout.with_class_spread(c, d.spread * d.hard_class_spread_factor)?;
            }
            (
                layout.sample(d.train_per_class, config.seed, Split::Train)?,
                layout.sample(d.test_per_class, config.seed, Split::Test)?,
            )
        }
    };
    let train = match &spec {
        Some(spec) => synthdata::inject(&train, spec, config.seed)?,
        None => train,
    };
    if config.noise.kind == NoiseType::Openset {
        test = synthdata::restrict_to_closed(&test, &config.noise.open_classes)?;
    }
    if train.dim() != test.dim() {
        return Err(Error::param("train and test feature widths differ"));
    }
    Ok((train, test))
}

/// Hash of both splits, used to confirm that ablation variants share data.
pub fn datasets_hash(train: &Dataset, test: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update(train.content_hash().as_bytes());
    h.update(test.content_hash().as_bytes());
    hex::encode(h.finalize())
}

/// Final networks of a run next to its report.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: RunReport,
    pub state: TrainState,
}

pub fn run(config: &TrainConfig) -> Result<RunReport> {
    Ok(train(config, None)?.report)
}

/// Runs every epoch. When `checkpoint_dir` is given and `checkpoint_every`
/// is set, parameters are written there every that many epochs.
pub fn train(config: &TrainConfig, checkpoint_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let (train, test) = build_datasets(config)?;
    train_on(config, &train, &test, checkpoint_dir)
}

pub fn train_on(
    config: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    train.validate()?;
    if train.num_classes != test.num_classes {
        return Err(Error::param("train and test label spaces differ"));
    }
    let mut state = TrainState::new(config, train.dim(), train.num_classes)?;
    let mut epochs = Vec::with_capacity(config.total_epochs);
    for epoch in 1..=config.total_epochs {
        let mut log = if epoch <= config.warmup_epochs {
            let mut log = EpochLog::new(epoch, Phase::Warmup);
            log.loss_dc = warmup_epoch(&mut state, train, config, epoch)?;
            log.num_clean = train.len();
            log
        } else {
            let outcome = sed_epoch(&mut state, train, config, epoch)?;
            sed_log(epoch, &outcome, &state, train)
        };
        log.test_acc_a = evaluate(&state.robust, test)?;
        log.test_acc_b = evaluate(&state.baseline, test)?;
        epochs.push(log);

        if let (Some(dir), Some(every)) = (checkpoint_dir, config.checkpoint_every) {
            if epoch % every == 0 {
                write_checkpoints(dir, epoch, &state)?;
            }
        }
    }
    let report = RunReport {
        config: config.clone(),
        dataset_hash: datasets_hash(train, test),
        summary: RunSummary::from_epochs(&epochs),
        epochs,
    };
    Ok(TrainOutcome { report, state })
}

fn write_checkpoints(dir: &Path, epoch: usize, state: &TrainState) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_checkpoint(&state.robust, dir.join(format!("epoch{epoch:03}_robust.json")))?;
    save_checkpoint(&state.baseline, dir.join(format!("epoch{epoch:03}_baseline.json")))?;
    if let Some(t) = &state.teacher {
        save_checkpoint(t, dir.join(format!("epoch{epoch:03}_teacher.json")))?;
    }
    Ok(())
}

fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn sed_log(epoch: usize, outcome: &SedOutcome, state: &TrainState, train: &Dataset) -> EpochLog {
    let part = &outcome.partition;
    let mut log = EpochLog::new(epoch, Phase::Sed);
    log.loss_dc = outcome.losses.clean;
    log.loss_dn = outcome.losses.noisy;
    log.loss_dreg = outcome.losses.reg;
    log.num_clean = part.clean_idx.len();
    log.num_noisy = part.noisy_idx.len();
    log.num_mined = part.mined_idx.len();
    log.class_balance = Some(class_balance(&part.clean_idx, &train.given_labels, train.num_classes));
    if train.has_oracle {
        log.sel_precision = Some(selection_precision(&part.clean_idx, &train.clean_mask));
        log.sel_recall = Some(selection_recall(&part.clean_idx, &train.clean_mask));
        let unmined: Vec<usize> = part
            .clean_idx
            .iter()
            .copied()
            .filter(|i| part.mined_idx.binary_search(i).is_err())
            .collect();
        log.sel_precision_unmined = Some(selection_precision(&unmined, &train.clean_mask));
        if !outcome.correction.is_empty() {
            let hits = part
                .noisy_idx
                .iter()
                .zip(&outcome.correction.corrected_labels)
                .filter(|(&i, &c)| train.true_labels[i] == c)
                .count();
            log.correction_accuracy = Some(hits as f64 / outcome.correction.len() as f64);
        }
    }
    if let Some(tau) = &outcome.thresholds {
        log.tau_global = Some(state.thresholds.tau_global);
        log.tau_local_mean = mean(tau);
        log.tau_local = tau.clone();
    }
    if state.class_stats.initialized() {
        let sigma: Vec<f64> = (0..state.class_stats.num_classes())
            .map(|c| state.class_stats.sigma(c))
            .collect();
        log.mu_mean = mean(&state.class_stats.mu);
        log.sigma_mean = mean(&sigma);
        log.mu = state.class_stats.mu.clone();
        log.sigma = sigma;
    }
    log.warnings = outcome.warnings.clone();
    if part.clean_idx.is_empty() {
        log.class_balance = Some(0.0);
    }
    log
}
