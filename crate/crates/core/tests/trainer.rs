use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

use sedlab::config::{DatasetConfig, NoiseType, TrainConfig};
use sedlab::net::{self, forward, loss_and_grad, Batch, ModelParams};
use sedlab::rng::{seeded, stream};
use sedlab::scr::{self, ClassStats};
use sedlab::scs::{self, ThresholdMode, ThresholdState};
use sedlab::trainer::{self, sed_epoch, TrainState};
use sedlab::Dataset;

fn micro_config() -> TrainConfig {
    let mut c = TrainConfig::with_dataset(DatasetConfig {
        num_classes: 4,
        dim: 3,
        train_per_class: 16,
        test_per_class: 8,
        spread: 0.5,
        ..DatasetConfig::default()
    });
    c.hidden = 6;
    c.batch_size = 10;
    c.lr = 0.1;
    c.warmup_epochs = 1;
    c.total_epochs = 2;
    c.m = 0.9;
    c.alpha = 0.8;
    c.lambda_n = 0.7;
    c.lambda_r = 1.3;
    c.noise.rate = 0.3;
    c.seed = 11;
    c
}

fn shuffled(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed, stream::SHUFFLE_BASE + epoch as u64));
    order
}

fn rows(ds: &Dataset, idx: &[usize]) -> Array2<f64> {
    ds.features.select(Axis(0), idx)
}

fn plain_step(params: &ModelParams, ds: &Dataset, chunk: &[usize], lr: f64) -> ModelParams {
    let labels = chunk.iter().map(|&i| ds.given_labels[i]).collect();
    let batch = Batch::unweighted(rows(ds, chunk), labels).unwrap();
    net::sgd_step(params, &batch, lr).unwrap().0
}

/// Gradient of one loss term on a sub-batch, scaled by its coefficient.
fn term_grad(params: &ModelParams, ds: &Dataset, items: &[(usize, usize, f64)], coef: f64) -> Option<Vec<f64>> {
    let idx: Vec<usize> = items.iter().map(|t| t.0).collect();
    let labels = items.iter().map(|t| t.1).collect();
    let weights: Vec<f64> = items.iter().map(|t| t.2).collect();
    if items.is_empty() || weights.iter().sum::<f64>() <= 0.0 {
        return None;
    }
    let batch = Batch::new(rows(ds, &idx), labels, weights).unwrap();
    let (_, g) = loss_and_grad(params, batch.features.view(), &batch.targets()).unwrap();
    Some(g.to_flat().into_iter().map(|v| coef * v).collect())
}

/// Applies each module operation in sequence, outside the trainer, with the
/// three loss terms differentiated separately and their gradients summed.
fn hand_stepped(c: &TrainConfig, train: &Dataset) -> (ModelParams, ModelParams, ModelParams) {
    let (d, k) = (train.dim(), train.num_classes);
    let mut robust = ModelParams::init(d, c.hidden, k, c.seed).unwrap();
    let mut baseline = robust.clone();
    let mut teacher: Option<ModelParams> = None;
    let mut thresholds = ThresholdState::new(k, c.m).unwrap();
    let mut stats = ClassStats::new(k, c.m, c.sigma_floor).unwrap();
    for epoch in 1..=c.total_epochs {
        let order = shuffled(c.seed, epoch, train.len());
        if epoch <= c.warmup_epochs {
            for chunk in order.chunks(c.batch_size) {
                robust = plain_step(&robust, train, chunk, c.lr);
                baseline = plain_step(&baseline, train, chunk, c.lr);
            }
            continue;
        }
        let probs = forward(&robust, train.features.view()).unwrap();
        thresholds = scs::update_thresholds(&thresholds, &scs::epoch_stats(probs.view()).unwrap(), c.m).unwrap();
        let tau = thresholds.thresholds(ThresholdMode::GlobalAndLocal);
        let selected = scs::select(probs.view(), &train.given_labels, &tau);
        let part = scs::mine(probs.view(), &train.given_labels, &selected);
        let reliability = scs::reliability(probs.view(), &train.given_labels, &part.clean_idx);

        let t = teacher.clone().unwrap_or_else(|| robust.clone());
        let noisy_probs = forward(&t, rows(train, &part.noisy_idx).view()).unwrap();
        let (noisy_labels, noisy_conf) = scr::correct(noisy_probs.view());
        stats = scr::update_class_stats(&stats, &noisy_conf, &noisy_labels, c.m).unwrap();
        let noisy_w = stats.weights(&noisy_conf, &noisy_labels).unwrap();
        let clean_probs = forward(&t, rows(train, &part.clean_idx).view()).unwrap();
        let (reg_labels, reg_conf) = scr::correct(clean_probs.view());
        let reg_w = stats.weights(&reg_conf, &reg_labels).unwrap();

        for chunk in order.chunks(c.batch_size) {
            let mut clean = Vec::new();
            let mut noisy = Vec::new();
            let mut reg = Vec::new();
            for &i in chunk {
                if let Ok(p) = part.clean_idx.binary_search(&i) {
                    clean.push((i, train.given_labels[i], reliability[p]));
                    reg.push((i, reg_labels[p], reg_w[p]));
                } else {
                    let p = part.noisy_idx.binary_search(&i).unwrap();
                    noisy.push((i, noisy_labels[p], noisy_w[p]));
                }
            }
            let mut total = vec![0.0; robust.num_params()];
            for g in [
                term_grad(&robust, train, &clean, 1.0),
                term_grad(&robust, train, &noisy, c.lambda_n),
                term_grad(&robust, train, &reg, c.lambda_r),
            ]
            .into_iter()
            .flatten()
            {
                for (acc, v) in total.iter_mut().zip(g) {
                    *acc += v;
                }
            }
            let flat: Vec<f64> = robust.to_flat().iter().zip(&total).map(|(p, g)| p - c.lr * g).collect();
            robust = ModelParams::from_flat(d, c.hidden, k, &flat).unwrap();
            baseline = plain_step(&baseline, train, chunk, c.lr);
        }
        teacher = Some(net::ema_update_teacher(&t, &robust, c.alpha).unwrap());
    }
    (robust, baseline, teacher.unwrap())
}

fn max_abs_diff(a: &ModelParams, b: &ModelParams) -> f64 {
    a.to_flat()
        .iter()
        .zip(b.to_flat())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn micro_run_matches_hand_stepped_oracle() {
    let c = micro_config();
    let (train, test) = trainer::build_datasets(&c).unwrap();
    assert_eq!(train.len(), 64);
    let out = trainer::train_on(&c, &train, &test, None).unwrap();
    let (robust, baseline, teacher) = hand_stepped(&c, &train);
    assert!(max_abs_diff(&out.state.robust, &robust) < 1e-12);
    assert_eq!(out.state.baseline, baseline);
    assert!(max_abs_diff(out.state.teacher.as_ref().unwrap(), &teacher) < 1e-12);
    let sed = &out.report.epochs[1];
    assert_eq!(sed.num_clean + sed.num_noisy, 64);
}

#[test]
fn warmup_only_run_matches_plain_loop_per_epoch() {
    let mut c = micro_config();
    c.warmup_epochs = 4;
    c.total_epochs = 4;
    c.checkpoint_every = Some(1);
    let dir = tempfile::tempdir().unwrap();
    let out = trainer::train(&c, Some(dir.path())).unwrap();
    let (train, _) = trainer::build_datasets(&c).unwrap();
    let mut params = ModelParams::init(train.dim(), c.hidden, train.num_classes, c.seed).unwrap();
    for epoch in 1..=4 {
        for chunk in shuffled(c.seed, epoch, train.len()).chunks(c.batch_size) {
            params = plain_step(&params, &train, chunk, c.lr);
        }
        let saved = net::load_checkpoint(dir.path().join(format!("epoch{epoch:03}_robust.json"))).unwrap();
        assert_eq!(saved, params, "epoch {epoch}");
        let baseline = net::load_checkpoint(dir.path().join(format!("epoch{epoch:03}_baseline.json"))).unwrap();
        assert_eq!(baseline, params, "epoch {epoch}");
    }
    assert_eq!(out.state.robust, params);
}

#[test]
fn clean_data_with_zero_thresholds_leaves_noisy_subset_empty() {
    let mut c = micro_config();
    c.noise.kind = NoiseType::None;
    c.m = 1.0;
    c.ablation.use_cr = false;
    let (train, _) = trainer::build_datasets(&c).unwrap();
    assert_eq!(train.num_corrupted(), 0);
    let mut state = TrainState::new(&c, train.dim(), train.num_classes).unwrap();
    // initialized at zero with m = 1, so thresholds stay at zero
    state.thresholds.initialized = true;
    let outcome = sed_epoch(&mut state, &train, &c, 1).unwrap();
    assert!(outcome.partition.noisy_idx.is_empty());
    assert_eq!(outcome.partition.clean_idx.len(), 64);
    assert_eq!(outcome.losses.noisy, 0.0);
    assert_eq!(outcome.losses.reg, 0.0);
    assert!(outcome.losses.clean > 0.0);
}

#[test]
fn runs_are_deterministic() {
    let c = micro_config();
    let a = trainer::run(&c).unwrap();
    let b = trainer::run(&c).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let mut other = c.clone();
    other.seed += 1;
    assert_ne!(trainer::run(&other).unwrap().dataset_hash, a.dataset_hash);
}

#[test]
fn report_has_one_log_per_epoch_with_ratios_in_range() {
    let mut c = micro_config();
    c.total_epochs = 6;
    let report = trainer::run(&c).unwrap();
    assert_eq!(report.epochs.len(), 6);
    for (i, e) in report.epochs.iter().enumerate() {
        assert_eq!(e.epoch, i + 1);
        for v in [Some(e.test_acc_a), Some(e.test_acc_b), e.sel_precision, e.sel_recall, e.class_balance]
            .into_iter()
            .flatten()
        {
            assert!((0.0..=1.0).contains(&v), "{v}");
        }
    }
    let s = &report.summary;
    assert!(s.best_acc_a.unwrap() >= s.final_acc_a.unwrap());
}
