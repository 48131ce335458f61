//! One-hidden-layer ReLU classifier with softmax output and hand-derived
//! gradients.
//!
//! Losses are expressed as a list of [`Target`]s: each target says "row `r`
//! of the batch should predict `label`, with weight `w`". The objective is
//! `sum_t w_t * -log softmax(logits[r_t])[label_t]`, so several weighted
//! cross-entropy terms over overlapping rows (given labels, corrected labels)
//! compose into a single backward pass.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, stream};
use crate::synthdata::Dataset;

/// Weights of `x -> softmax(relu(x W1 + b1) W2 + b2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// A minibatch with per-sample weights in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
}

/// One weighted cross-entropy term on a batch row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub row: usize,
    pub label: usize,
    pub weight: f64,
}

impl Batch {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        let b = features.nrows();
        if b == 0 {
            return Err(Error::param("batch must hold at least one sample"));
        }
        if labels.len() != b || weights.len() != b {
            return Err(Error::param(format!(
                "batch of {b} rows has {} labels and {} weights",
                labels.len(),
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::param(format!("batch weight {w} outside [0,1]")));
        }
        Ok(Batch {
            features,
            labels,
            weights,
        })
    }

    pub fn unweighted(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        let n = labels.len();
        Self::new(features, labels, vec![1.0; n])
    }

    /// Targets reproducing [`weighted_ce`]: each weight divided by the weight sum.
    pub fn targets(&self) -> Vec<Target> {
        normalized_targets(
            self.labels
                .iter()
                .zip(&self.weights)
                .enumerate()
                .map(|(row, (&label, &weight))| (row, label, weight)),
        )
    }
}

/// Turns `(row, label, weight)` triples into targets whose weights sum to one.
/// A zero total yields no targets.
pub fn normalized_targets(items: impl IntoIterator<Item = (usize, usize, f64)>) -> Vec<Target> {
    let items: Vec<_> = items.into_iter().collect();
    let total: f64 = items.iter().map(|t| t.2).sum();
    if total <= 0.0 {
        return Vec::new();
    }
    items
        .into_iter()
        .map(|(row, label, weight)| Target {
            row,
            label,
            weight: weight / total,
        })
        .collect()
}

impl ModelParams {
    /// Weights ~ N(0, 1/fan_in), biases zero.
    pub fn init(input: usize, hidden: usize, classes: usize, seed: u64) -> Result<Self> {
        check_dims(input, hidden, classes)?;
        let mut rng = seeded(seed, stream::INIT);
        let mut draw = |rows: usize, cols: usize| {
            let scale = 1.0 / (rows as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
        };
        let w1 = draw(input, hidden);
        let w2 = draw(hidden, classes);
        Ok(ModelParams {
            w1,
            b1: Array1::zeros(hidden),
            w2,
            b2: Array1::zeros(classes),
        })
    }

    pub fn zeros(input: usize, hidden: usize, classes: usize) -> Self {
        ModelParams {
            w1: Array2::zeros((input, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, classes)),
            b2: Array1::zeros(classes),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.w2.ncols()
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.w1.dim() == other.w1.dim() && self.w2.dim() == other.w2.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Named parameter tensors, flattened row-major.
    pub fn tensors(&self) -> [(&'static str, Vec<f64>); 4] {
        [
            ("W1", self.w1.iter().copied().collect()),
            ("b1", self.b1.to_vec()),
            ("W2", self.w2.iter().copied().collect()),
            ("b2", self.b2.to_vec()),
        ]
    }

    /// All parameters in `W1, b1, W2, b2` order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|(_, t)| t).collect()
    }

    pub fn from_flat(input: usize, hidden: usize, classes: usize, flat: &[f64]) -> Result<Self> {
        check_dims(input, hidden, classes)?;
        let sizes = [input * hidden, hidden, hidden * classes, classes];
        if flat.len() != sizes.iter().sum::<usize>() {
            return Err(Error::param(format!(
                "expected {} parameters, got {}",
                sizes.iter().sum::<usize>(),
                flat.len()
            )));
        }
        let (w1, rest) = flat.split_at(sizes[0]);
        let (b1, rest) = rest.split_at(sizes[1]);
        let (w2, b2) = rest.split_at(sizes[2]);
        let shape_err = |e: ndarray::ShapeError| Error::param(e.to_string());
        Ok(ModelParams {
            w1: Array2::from_shape_vec((input, hidden), w1.to_vec()).map_err(shape_err)?,
            b1: Array1::from(b1.to_vec()),
            w2: Array2::from_shape_vec((hidden, classes), w2.to_vec()).map_err(shape_err)?,
            b2: Array1::from(b2.to_vec()),
        })
    }

    /// `self += scale * other`
    fn add_scaled(&mut self, scale: f64, other: &ModelParams) {
        self.w1.scaled_add(scale, &other.w1);
        self.b1.scaled_add(scale, &other.b1);
        self.w2.scaled_add(scale, &other.w2);
        self.b2.scaled_add(scale, &other.b2);
    }

    fn check_input(&self, features: &ArrayView2<f64>) -> Result<()> {
        if features.ncols() != self.input_dim() {
            return Err(Error::param(format!(
                "feature width {} does not match model input {}",
                features.ncols(),
                self.input_dim()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite input features".into()));
        }
        Ok(())
    }

    fn hidden_pre(&self, features: &ArrayView2<f64>) -> Array2<f64> {
        features.dot(&self.w1) + &self.b1
    }

    pub fn logits(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&features)?;
        let hidden = self.hidden_pre(&features).mapv_into(relu);
        Ok(hidden.dot(&self.w2) + &self.b2)
    }
}

fn check_dims(input: usize, hidden: usize, classes: usize) -> Result<()> {
    if input == 0 || hidden == 0 || classes == 0 {
        return Err(Error::param(format!(
            "model dimensions must be positive, got {input}x{hidden}x{classes}"
        )));
    }
    Ok(())
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Row-wise softmax, stabilized by subtracting the row max.
pub fn softmax_rows(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|z| (z - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|e| e / sum);
    }
    logits
}

fn log_softmax_at(row: ArrayView1<f64>, label: usize) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    row[label] - max - lse
}

/// Class probabilities, one row per sample.
pub fn forward(params: &ModelParams, features: ArrayView2<f64>) -> Result<Array2<f64>> {
    Ok(softmax_rows(params.logits(features)?))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = c;
        }
    }
    best
}

/// `sum_i w_i * -ln p[i, y_i] / sum_i w_i`, or 0 when every weight is 0.
pub fn weighted_ce(probs: ArrayView2<f64>, labels: &[usize], weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
        if w > 0.0 {
            acc += w * -probs[[i, y]].max(f64::MIN_POSITIVE).ln();
        }
    }
    acc / total
}

/// Objective value for `targets` on `features`, without gradients.
pub fn objective(params: &ModelParams, features: ArrayView2<f64>, targets: &[Target]) -> Result<f64> {
    let logits = params.logits(features)?;
    check_targets(targets, logits.nrows(), logits.ncols())?;
    Ok(targets
        .iter()
        .map(|t| -t.weight * log_softmax_at(logits.row(t.row), t.label))
        .sum())
}

fn check_targets(targets: &[Target], rows: usize, classes: usize) -> Result<()> {
    for t in targets {
        if t.row >= rows || t.label >= classes {
            return Err(Error::param(format!(
                "target (row {}, label {}) outside batch of {rows} rows and {classes} classes",
                t.row, t.label
            )));
        }
    }
    Ok(())
}

/// Objective value and its gradient with respect to every parameter.
pub fn loss_and_grad(
    params: &ModelParams,
    features: ArrayView2<f64>,
    targets: &[Target],
) -> Result<(f64, ModelParams)> {
    let (nll, grad) = nll_and_grad(params, features, targets)?;
    let loss = targets.iter().zip(&nll).map(|(t, l)| t.weight * l).sum();
    Ok((loss, grad))
}

/// Unweighted negative log-likelihood of every target, plus the gradient of
/// their weighted sum.
pub fn nll_and_grad(
    params: &ModelParams,
    features: ArrayView2<f64>,
    targets: &[Target],
) -> Result<(Vec<f64>, ModelParams)> {
    params.check_input(&features)?;
    let pre = params.hidden_pre(&features);
    let hidden = pre.mapv(relu);
    let logits = hidden.dot(&params.w2) + &params.b2;
    check_targets(targets, logits.nrows(), logits.ncols())?;

    let nll: Vec<f64> = targets
        .iter()
        .map(|t| -log_softmax_at(logits.row(t.row), t.label))
        .collect();

    // dL/dlogits = sum over targets on a row of w * (p - onehot(label))
    let probs = softmax_rows(logits);
    let mut d_logits = Array2::<f64>::zeros(probs.dim());
    for t in targets {
        let mut row = d_logits.row_mut(t.row);
        row.scaled_add(t.weight, &probs.row(t.row));
        row[t.label] -= t.weight;
    }

    let d_w2 = hidden.t().dot(&d_logits);
    let d_b2 = d_logits.sum_axis(Axis(0));
    let mut d_pre = d_logits.dot(&params.w2.t());
    Zip::from(&mut d_pre).and(&pre).for_each(|g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
    let d_w1 = features.t().dot(&d_pre);
    let d_b1 = d_pre.sum_axis(Axis(0));
    let grad = ModelParams {
        w1: d_w1,
        b1: d_b1,
        w2: d_w2,
        b2: d_b2,
    };
    if nll.iter().any(|l| !l.is_finite()) || !grad.is_finite() {
        return Err(Error::Numeric("non-finite loss or gradient".into()));
    }
    Ok((nll, grad))
}

/// `params -= lr * grad`
pub fn apply_gradient(params: &mut ModelParams, grad: &ModelParams, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::param(format!("learning rate must be non-negative, got {lr}")));
    }
    if !params.same_shape(grad) {
        return Err(Error::param("gradient shape differs from parameters"));
    }
    params.add_scaled(-lr, grad);
    Ok(())
}

/// One in-place SGD step on an arbitrary target list. Returns the pre-step loss.
pub fn sgd_step_targets(
    params: &mut ModelParams,
    features: ArrayView2<f64>,
    targets: &[Target],
    lr: f64,
) -> Result<f64> {
    let (loss, grad) = loss_and_grad(params, features, targets)?;
    apply_gradient(params, &grad, lr)?;
    Ok(loss)
}

/// One SGD step on the batch's weighted cross-entropy.
pub fn sgd_step(params: &ModelParams, batch: &Batch, lr: f64) -> Result<(ModelParams, f64)> {
    let mut next = params.clone();
    let loss = sgd_step_targets(&mut next, batch.features.view(), &batch.targets(), lr)?;
    Ok((next, loss))
}

/// Mean-teacher update: `teacher' = alpha * teacher + (1 - alpha) * student`.
pub fn ema_update_teacher(
    teacher: &ModelParams,
    student: &ModelParams,
    alpha: f64,
) -> Result<ModelParams> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::param(format!("alpha must lie in [0,1], got {alpha}")));
    }
    if !teacher.same_shape(student) {
        return Err(Error::param("teacher and student shapes differ"));
    }
    let mix = |t: f64, s: f64| alpha * t + (1.0 - alpha) * s;
    let mut out = teacher.clone();
    Zip::from(&mut out.w1).and(&student.w1).for_each(|t, &s| *t = mix(*t, s));
    Zip::from(&mut out.b1).and(&student.b1).for_each(|t, &s| *t = mix(*t, s));
    Zip::from(&mut out.w2).and(&student.w2).for_each(|t, &s| *t = mix(*t, s));
    Zip::from(&mut out.b2).and(&student.b2).for_each(|t, &s| *t = mix(*t, s));
    Ok(out)
}

/// Fraction of rows whose arg-max probability matches the true label.
pub fn accuracy(probs: ArrayView2<f64>, true_labels: &[usize]) -> f64 {
    if true_labels.is_empty() {
        return 0.0;
    }
    let hits = probs
        .rows()
        .into_iter()
        .zip(true_labels)
        .filter(|(row, &y)| argmax(row.view()) == y)
        .count();
    hits as f64 / true_labels.len() as f64
}

/// Accuracy against the dataset's true labels.
pub fn evaluate(params: &ModelParams, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::param("cannot evaluate on an empty dataset"));
    }
    let probs = forward(params, dataset.features.view())?;
    Ok(accuracy(probs.view(), &dataset.true_labels))
}

const CHECKPOINT_FORMAT: &str = "sedlab-params";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDims {
    input: usize,
    hidden: usize,
    classes: usize,
}

/// On-disk parameter document. Matrices are flattened row-major.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    dims: CheckpointDims,
    #[serde(rename = "W1")]
    w1: Vec<f64>,
    b1: Vec<f64>,
    #[serde(rename = "W2")]
    w2: Vec<f64>,
    b2: Vec<f64>,
}

pub fn checkpoint_json(params: &ModelParams) -> String {
    let [(_, w1), (_, b1), (_, w2), (_, b2)] = params.tensors();
    let doc = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        dims: CheckpointDims {
            input: params.input_dim(),
            hidden: params.hidden_dim(),
            classes: params.num_classes(),
        },
        w1,
        b1,
        w2,
        b2,
    };
    serde_json::to_string(&doc).expect("checkpoint serializes")
}

pub fn parse_checkpoint(text: &str) -> Result<ModelParams> {
    let doc: Checkpoint = serde_json::from_str(text).map_err(|source| Error::Json {
        context: "checkpoint".into(),
        source,
    })?;
    if doc.format != CHECKPOINT_FORMAT || doc.version != CHECKPOINT_VERSION {
        return Err(Error::param(format!(
            "unsupported checkpoint {} v{}",
            doc.format, doc.version
        )));
    }
    let d = &doc.dims;
    let flat: Vec<f64> = [doc.w1, doc.b1, doc.w2, doc.b2].concat();
    let params = ModelParams::from_flat(d.input, d.hidden, d.classes, &flat)?;
    if !params.is_finite() {
        return Err(Error::Numeric("checkpoint holds non-finite parameters".into()));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_json(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text)
}
