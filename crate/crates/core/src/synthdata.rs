//! Gaussian-cluster datasets and label-noise injection.
//!
//! Every dataset keeps the labels it was generated with next to the labels a
//! learner sees, so the noise mask is known exactly.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{seeded, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Symmetric,
    Asymmetric,
    Openset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    /// Classes dropped from the label space; only meaningful for open-set noise.
    #[serde(default)]
    pub open_classes: Vec<usize>,
}

/// A labeled sample set.
///
/// `true_labels` holds the generating class. For open-set data a sample whose
/// generating class was removed from the label space carries a true label
/// `>= num_classes`; such a sample can never be clean.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub given_labels: Vec<usize>,
    pub true_labels: Vec<usize>,
    pub clean_mask: Vec<bool>,
    pub num_classes: usize,
    pub split: Split,
    /// False when true labels are unknown (CSV without `true_label`), in
    /// which case selection precision and recall are not reported.
    pub has_oracle: bool,
    /// Noise already applied to this dataset, if any.
    pub noise: Option<NoiseSpec>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.given_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.given_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_corrupted(&self) -> usize {
        self.clean_mask.iter().filter(|c| !**c).count()
    }

    pub fn corrupted_fraction(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.num_corrupted() as f64 / self.len() as f64
        }
    }

    /// Checks the structural invariants. Open-set true labels (>= K) are
    /// allowed only on samples marked not clean.
    pub fn validate(&self) -> Result<()> {
        let n = self.features.nrows();
        if self.given_labels.len() != n || self.true_labels.len() != n || self.clean_mask.len() != n
        {
            return Err(Error::param(format!(
                "dataset arrays disagree in length: features {n}, given {}, true {}, mask {}",
                self.given_labels.len(),
                self.true_labels.len(),
                self.clean_mask.len()
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::param("dataset needs at least 2 classes"));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("dataset features contain non-finite values"));
        }
        for i in 0..n {
            let (given, truth) = (self.given_labels[i], self.true_labels[i]);
            if given >= self.num_classes {
                return Err(Error::param(format!(
                    "sample {i}: label {given} outside [0, {})",
                    self.num_classes
                )));
            }
            if self.clean_mask[i] != (given == truth) {
                return Err(Error::param(format!(
                    "sample {i}: clean mask disagrees with labels"
                )));
            }
        }
        Ok(())
    }

    /// Rows selected by `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), idx),
            given_labels: idx.iter().map(|&i| self.given_labels[i]).collect(),
            true_labels: idx.iter().map(|&i| self.true_labels[i]).collect(),
            clean_mask: idx.iter().map(|&i| self.clean_mask[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
            has_oracle: self.has_oracle,
            noise: self.noise.clone(),
        }
    }

    /// SHA-256 over shape, feature bits and both label vectors.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.num_classes as u64).to_le_bytes());
        h.update((self.features.nrows() as u64).to_le_bytes());
        h.update((self.features.ncols() as u64).to_le_bytes());
        for v in self.features.iter() {
            h.update(v.to_bits().to_le_bytes());
        }
        for l in self.given_labels.iter().chain(&self.true_labels) {
            h.update((*l as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn ensure_pristine(&self) -> Result<()> {
        if self.noise.is_some() || self.clean_mask.iter().any(|c| !c) {
            return Err(Error::param(
                "label noise can only be injected into a dataset with no prior noise",
            ));
        }
        Ok(())
    }
}

/// Class means and per-class isotropic spreads.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterLayout {
    means: Array2<f64>,
    spreads: Vec<f64>,
}

impl ClusterLayout {
    /// Means drawn i.i.d. from N(0, mean_scale²) per coordinate.
    pub fn random(
        num_classes: usize,
        dim: usize,
        mean_scale: f64,
        spread: f64,
        seed: u64,
    ) -> Result<Self> {
        check_dims(num_classes, dim)?;
        if !(mean_scale > 0.0 && mean_scale.is_finite()) {
            return Err(Error::param("mean_scale must be positive"));
        }
        let mut rng = seeded(seed, stream::CLUSTER_MEANS);
        let means = Array2::from_shape_simple_fn((num_classes, dim), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            mean_scale * z
        });
        Self::from_means(means, spread)
    }

    pub fn from_means(means: Array2<f64>, spread: f64) -> Result<Self> {
        check_dims(means.nrows(), means.ncols())?;
        check_spread(spread)?;
        if means.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("cluster means must be finite"));
        }
        let layout = ClusterLayout {
            spreads: vec![spread; means.nrows()],
            means,
        };
        if layout.min_separation() <= 0.0 {
            return Err(Error::param("cluster means must be distinct"));
        }
        Ok(layout)
    }

    pub fn with_class_spread(mut self, class: usize, spread: f64) -> Result<Self> {
        check_spread(spread)?;
        let k = self.num_classes();
        let slot = self
            .spreads
            .get_mut(class)
            .ok_or_else(|| Error::param(format!("class {class} outside [0, {k})")))?;
        *slot = spread;
        Ok(self)
    }

    pub fn num_classes(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn spreads(&self) -> &[f64] {
        &self.spreads
    }

    /// Smallest Euclidean distance between two class means.
    pub fn min_separation(&self) -> f64 {
        let k = self.num_classes();
        let mut best = f64::INFINITY;
        for a in 0..k {
            for b in a + 1..k {
                let d = (&self.means.row(a) - &self.means.row(b))
                    .mapv(|v| v * v)
                    .sum()
                    .sqrt();
                best = best.min(d);
            }
        }
        best
    }

    /// `per_class` samples from every cluster, grouped by class. Train and
    /// test draws use separate streams of the same seed.
    pub fn sample(&self, per_class: usize, seed: u64, split: Split) -> Result<Dataset> {
        if per_class == 0 {
            return Err(Error::param("per_class must be at least 1"));
        }
        let (k, d) = (self.num_classes(), self.dim());
        let id = match split {
            Split::Train => stream::TRAIN_SAMPLES,
            Split::Test => stream::TEST_SAMPLES,
        };
        let mut rng = seeded(seed, id);
        let n = k * per_class;
        let mut features = Array2::zeros((n, d));
        let mut labels = Vec::with_capacity(n);
        for c in 0..k {
            for j in 0..per_class {
                let row = c * per_class + j;
                for f in 0..d {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    features[[row, f]] = self.means[[c, f]] + self.spreads[c] * z;
                }
                labels.push(c);
            }
        }
        Ok(Dataset {
            features,
            given_labels: labels.clone(),
            true_labels: labels,
            clean_mask: vec![true; n],
            num_classes: k,
            split,
            has_oracle: true,
            noise: None,
        })
    }
}

fn check_dims(num_classes: usize, dim: usize) -> Result<()> {
    if num_classes < 2 {
        return Err(Error::param("num_classes must be at least 2"));
    }
    if dim == 0 {
        return Err(Error::param("dim must be at least 1"));
    }
    Ok(())
}

fn check_spread(spread: f64) -> Result<()> {
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::param(format!("spread must be positive, got {spread}")));
    }
    Ok(())
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::param(format!("noise rate must lie in [0,1], got {rate}")));
    }
    Ok(())
}

/// Training set of `num_classes * per_class` samples around random unit-scale means.
pub fn generate_clusters(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    ClusterLayout::random(num_classes, dim, 1.0, spread, seed)?.sample(per_class, seed, Split::Train)
}

/// Uniform flip to a different class with probability `rate`.
pub fn inject_symmetric(dataset: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    check_rate(rate)?;
    dataset.ensure_pristine()?;
    let k = dataset.num_classes;
    let mut rng = seeded(seed, stream::NOISE);
    let mut out = dataset.clone();
    for i in 0..out.len() {
        if rng.random_bool(rate) {
            out.given_labels[i] = flip_to_other(&mut rng, out.true_labels[i], k);
        }
    }
    finish_noise(
        out,
        NoiseSpec {
            kind: NoiseKind::Symmetric,
            rate,
            open_classes: Vec::new(),
        },
    )
}

/// Pairwise flip `y -> (y + 1) mod K` with probability `rate`.
pub fn inject_asymmetric(dataset: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    check_rate(rate)?;
    dataset.ensure_pristine()?;
    let k = dataset.num_classes;
    let mut rng = seeded(seed, stream::NOISE);
    let mut out = dataset.clone();
    for i in 0..out.len() {
        if rng.random_bool(rate) {
            out.given_labels[i] = (out.true_labels[i] + 1) % k;
        }
    }
    finish_noise(
        out,
        NoiseSpec {
            kind: NoiseKind::Asymmetric,
            rate,
            open_classes: Vec::new(),
        },
    )
}

/// Removes `open_classes` from the label space. Their samples receive a
/// uniformly random closed label; closed-class samples get symmetric noise at
/// `rate` among the closed classes. Closed classes are renumbered to
/// `[0, K_closed)` in ascending order; open classes map to `K_closed..`.
pub fn inject_openset(
    dataset: &Dataset,
    open_classes: &[usize],
    rate: f64,
    seed: u64,
) -> Result<Dataset> {
    check_rate(rate)?;
    dataset.ensure_pristine()?;
    let remap = openset_remap(dataset.num_classes, open_classes)?;
    let closed = remap.iter().filter(|(_, open)| !open).count();
    let mut rng = seeded(seed, stream::NOISE);
    let mut out = dataset.clone();
    out.num_classes = closed;
    for i in 0..out.len() {
        let (mapped, is_open) = remap[dataset.true_labels[i]];
        out.true_labels[i] = mapped;
        out.given_labels[i] = if is_open {
            rng.random_range(0..closed)
        } else if rng.random_bool(rate) {
            flip_to_other(&mut rng, mapped, closed)
        } else {
            mapped
        };
    }
    let mut open: Vec<usize> = open_classes.to_vec();
    open.sort_unstable();
    finish_noise(
        out,
        NoiseSpec {
            kind: NoiseKind::Openset,
            rate,
            open_classes: open,
        },
    )
}

/// Drops samples of `open_classes` and renumbers the rest the same way
/// [`inject_openset`] does. Used to build the matching closed-set test split.
pub fn restrict_to_closed(dataset: &Dataset, open_classes: &[usize]) -> Result<Dataset> {
    let remap = openset_remap(dataset.num_classes, open_classes)?;
    let keep: Vec<usize> = (0..dataset.len())
        .filter(|&i| !remap[dataset.true_labels[i]].1)
        .collect();
    let mut out = dataset.subset(&keep);
    out.num_classes = remap.iter().filter(|(_, open)| !open).count();
    for i in 0..out.len() {
        out.true_labels[i] = remap[out.true_labels[i]].0;
        out.given_labels[i] = remap[out.given_labels[i]].0;
    }
    Ok(out)
}

/// For each original class: (new id, is open).
fn openset_remap(num_classes: usize, open_classes: &[usize]) -> Result<Vec<(usize, bool)>> {
    if open_classes.is_empty() {
        return Err(Error::param("open_classes must be non-empty"));
    }
    let mut is_open = vec![false; num_classes];
    for &c in open_classes {
        if c >= num_classes {
            return Err(Error::param(format!(
                "open class {c} outside [0, {num_classes})"
            )));
        }
        is_open[c] = true;
    }
    let closed = is_open.iter().filter(|o| !**o).count();
    if closed < 2 {
        return Err(Error::param(
            "open_classes must leave at least two closed classes",
        ));
    }
    let (mut next_closed, mut next_open) = (0, closed);
    Ok(is_open
        .into_iter()
        .map(|open| {
            let slot = if open { &mut next_open } else { &mut next_closed };
            let id = *slot;
            *slot += 1;
            (id, open)
        })
        .collect())
}

fn flip_to_other<R: Rng>(rng: &mut R, label: usize, k: usize) -> usize {
    let draw = rng.random_range(0..k - 1);
    if draw >= label {
        draw + 1
    } else {
        draw
    }
}

fn finish_noise(mut out: Dataset, spec: NoiseSpec) -> Result<Dataset> {
    for i in 0..out.len() {
        out.clean_mask[i] = out.given_labels[i] == out.true_labels[i];
    }
    out.has_oracle = true;
    out.noise = Some(spec);
    Ok(out)
}

/// Applies `spec` with the matching injector.
pub fn inject(dataset: &Dataset, spec: &NoiseSpec, seed: u64) -> Result<Dataset> {
    match spec.kind {
        NoiseKind::Symmetric => inject_symmetric(dataset, spec.rate, seed),
        NoiseKind::Asymmetric => inject_asymmetric(dataset, spec.rate, seed),
        NoiseKind::Openset => inject_openset(dataset, &spec.open_classes, spec.rate, seed),
    }
}

/// Reads `f0,...,f{d-1},label[,true_label]`. Any column other than `label`
/// and `true_label` is a feature, in header order.
pub fn load_csv(path: impl AsRef<Path>, num_classes: usize, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    if num_classes < 2 {
        return Err(Error::param("num_classes must be at least 2"));
    }
    let fmt_err = |line: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => fmt_err(1, format!("{other:?}")),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| fmt_err(1, e.to_string()))?
        .clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| fmt_err(1, "header has no `label` column".into()))?;
    let true_col = headers.iter().position(|h| h.trim() == "true_label");
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != label_col && Some(c) != true_col)
        .collect();
    if feature_cols.is_empty() {
        return Err(fmt_err(1, "header has no feature columns".into()));
    }

    let mut values = Vec::new();
    let mut given = Vec::new();
    let mut truth = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            fmt_err(line, csv_error_message(e))
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        for &c in &feature_cols {
            let raw = record[c].trim();
            let v: f64 = raw
                .parse()
                .map_err(|_| fmt_err(line, format!("non-numeric feature `{raw}` in column `{}`", &headers[c])))?;
            if !v.is_finite() {
                return Err(fmt_err(line, format!("non-finite feature in column `{}`", &headers[c])));
            }
            values.push(v);
        }
        let parse_label = |col: usize| -> Result<usize> {
            let raw = record[col].trim();
            let l: usize = raw
                .parse()
                .map_err(|_| fmt_err(line, format!("invalid label `{raw}`")))?;
            if l >= num_classes {
                return Err(fmt_err(
                    line,
                    format!("label {l} outside [0, {num_classes})"),
                ));
            }
            Ok(l)
        };
        let g = parse_label(label_col)?;
        given.push(g);
        truth.push(match true_col {
            Some(c) => parse_label(c)?,
            None => g,
        });
    }
    let n = given.len();
    let features = Array2::from_shape_vec((n, feature_cols.len()), values)
        .map_err(|e| Error::param(e.to_string()))?;
    let clean_mask = given.iter().zip(&truth).map(|(g, t)| g == t).collect();
    Ok(Dataset {
        features,
        given_labels: given,
        true_labels: truth,
        clean_mask,
        num_classes,
        split,
        has_oracle: true_col.is_some(),
        noise: None,
    })
}

fn csv_error_message(e: csv::Error) -> String {
    match e.kind() {
        csv::ErrorKind::UnequalLengths {
            expected_len, len, ..
        } => format!("ragged row: expected {expected_len} fields, found {len}"),
        _ => e.to_string(),
    }
}

/// Writes the CSV format read by [`load_csv`], always including `true_label`.
/// Features use the shortest round-tripping decimal form.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for f in 0..dataset.dim() {
        let _ = write!(out, "f{f},");
    }
    out.push_str("label,true_label\n");
    for (i, row) in dataset.features.rows().into_iter().enumerate() {
        for v in row {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{},{}", dataset.given_labels[i], dataset.true_labels[i]);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
