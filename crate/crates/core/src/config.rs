//! Run configuration. JSON only; unknown keys are rejected so a misspelled
//! ablation switch fails loudly instead of silently running the wrong variant.
//!
//! Only the `dataset` block is required. Defaults:
//!
//! | key | default |
//! |---|---|
//! | `hidden` | 64 |
//! | `warmup_epochs` | 5 |
//! | `total_epochs` | 60 |
//! | `batch_size` | 64 |
//! | `lr` | 0.05 |
//! | `m` | 0.99 |
//! | `alpha` | 0.95 |
//! | `lambda_n`, `lambda_r` | 1.0 |
//! | `sigma_floor` | 0.001 |
//! | `seed` | 0 |
//! | `noise` | symmetric, rate 0.4 |
//! | `ablation.*` | all `true` |
//! | `checkpoint_every` | `null` (no checkpoints) |

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{NoiseKind, NoiseSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default = "defaults::hidden")]
    pub hidden: usize,
    #[serde(default = "defaults::warmup_epochs")]
    pub warmup_epochs: usize,
    #[serde(default = "defaults::total_epochs")]
    pub total_epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    /// EMA factor for thresholds and class statistics.
    #[serde(default = "defaults::m")]
    pub m: f64,
    /// EMA factor for the mean teacher.
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::lambda")]
    pub lambda_n: f64,
    #[serde(default = "defaults::lambda")]
    pub lambda_r: f64,
    #[serde(default = "defaults::sigma_floor")]
    pub sigma_floor: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub ablation: AblationSwitches,
    /// Save parameters every this many epochs when the caller provides a directory.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Per-coordinate standard deviation of every cluster.
    pub spread: f64,
    /// Per-coordinate standard deviation of the random cluster means.
    pub mean_scale: f64,
    /// Class whose spread is multiplied by `hard_class_spread_factor`.
    pub hard_class: Option<usize>,
    pub hard_class_spread_factor: f64,
    /// Load data from CSV instead of generating it. Both must be set together.
    pub train_csv: Option<String>,
    pub test_csv: Option<String>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_classes: 10,
            dim: 16,
            train_per_class: 500,
            test_per_class: 200,
            spread: 1.0,
            mean_scale: 1.0,
            hard_class: None,
            hard_class_spread_factor: 2.0,
            train_csv: None,
            test_csv: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseType {
    None,
    Symmetric,
    Asymmetric,
    Openset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub kind: NoiseType,
    pub rate: f64,
    pub open_classes: Vec<usize>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            kind: NoiseType::Symmetric,
            rate: 0.4,
            open_classes: Vec::new(),
        }
    }
}

impl NoiseConfig {
    pub fn spec(&self) -> Option<NoiseSpec> {
        let kind = match self.kind {
            NoiseType::None => return None,
            NoiseType::Symmetric => NoiseKind::Symmetric,
            NoiseType::Asymmetric => NoiseKind::Asymmetric,
            NoiseType::Openset => NoiseKind::Openset,
        };
        Some(NoiseSpec {
            kind,
            rate: self.rate,
            open_classes: self.open_classes.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSwitches {
    pub use_scs: bool,
    pub use_scr: bool,
    pub use_cr: bool,
    pub use_local_thresholds: bool,
    pub use_global_thresholds: bool,
    pub use_reweighting: bool,
    /// `false` sets the threshold and class-statistic EMA factor to 0.
    pub use_ema: bool,
}

impl Default for AblationSwitches {
    fn default() -> Self {
        AblationSwitches {
            use_scs: true,
            use_scr: true,
            use_cr: true,
            use_local_thresholds: true,
            use_global_thresholds: true,
            use_reweighting: true,
            use_ema: true,
        }
    }
}

impl AblationSwitches {
    /// Plain cross-entropy: every robust component off.
    pub fn standard() -> Self {
        AblationSwitches {
            use_scs: false,
            use_scr: false,
            use_cr: false,
            ..Self::default()
        }
    }

    pub fn is_standard(&self) -> bool {
        !self.use_scs && !self.use_scr && !self.use_cr
    }
}

mod defaults {
    pub fn hidden() -> usize {
        64
    }
    pub fn warmup_epochs() -> usize {
        5
    }
    pub fn total_epochs() -> usize {
        60
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn lr() -> f64 {
        0.05
    }
    pub fn m() -> f64 {
        0.99
    }
    pub fn alpha() -> f64 {
        0.95
    }
    pub fn lambda() -> f64 {
        1.0
    }
    pub fn sigma_floor() -> f64 {
        crate::scr::DEFAULT_SIGMA_FLOOR
    }
}

impl TrainConfig {
    /// Defaults everywhere, with the given dataset block.
    pub fn with_dataset(dataset: DatasetConfig) -> Self {
        TrainConfig {
            dataset,
            noise: NoiseConfig::default(),
            hidden: defaults::hidden(),
            warmup_epochs: defaults::warmup_epochs(),
            total_epochs: defaults::total_epochs(),
            batch_size: defaults::batch_size(),
            lr: defaults::lr(),
            m: defaults::m(),
            alpha: defaults::alpha(),
            lambda_n: defaults::lambda(),
            lambda_r: defaults::lambda(),
            sigma_floor: defaults::sigma_floor(),
            seed: 0,
            ablation: AblationSwitches::default(),
            checkpoint_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |key: &str, v: f64| -> Result<()> {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(key, format!("{key} must lie in [0,1], got {v}")))
            }
        };
        let positive = |key: &str, v: f64| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, format!("{key} must be positive, got {v}")))
            }
        };
        let at_least = |key: &str, v: usize, min: usize| -> Result<()> {
            if v >= min {
                Ok(())
            } else {
                Err(Error::config(key, format!("{key} must be at least {min}, got {v}")))
            }
        };

        let d = &self.dataset;
        at_least("dataset.num_classes", d.num_classes, 2)?;
        at_least("dataset.dim", d.dim, 1)?;
        at_least("dataset.train_per_class", d.train_per_class, 1)?;
        at_least("dataset.test_per_class", d.test_per_class, 1)?;
        positive("dataset.spread", d.spread)?;
        positive("dataset.mean_scale", d.mean_scale)?;
        positive("dataset.hard_class_spread_factor", d.hard_class_spread_factor)?;
        if let Some(c) = d.hard_class {
            if c >= d.num_classes {
                return Err(Error::config(
                    "dataset.hard_class",
                    format!("dataset.hard_class must be below num_classes ({}), got {c}", d.num_classes),
                ));
            }
        }
        if d.train_csv.is_some() != d.test_csv.is_some() {
            return Err(Error::config(
                "dataset.test_csv",
                "dataset.train_csv and dataset.test_csv must be given together",
            ));
        }

        unit("noise.rate", self.noise.rate)?;
        if self.noise.kind == NoiseType::Openset {
            let k = d.num_classes;
            let mut open = self.noise.open_classes.clone();
            open.sort_unstable();
            open.dedup();
            if open.is_empty() || open.iter().any(|&c| c >= k) || k - open.len() < 2 {
                return Err(Error::config(
                    "noise.open_classes",
                    format!("noise.open_classes must be a non-empty set of class ids below {k} leaving at least two closed classes"),
                ));
            }
        } else if !self.noise.open_classes.is_empty() {
            return Err(Error::config(
                "noise.open_classes",
                "noise.open_classes is only valid with kind \"openset\"",
            ));
        }

        at_least("hidden", self.hidden, 1)?;
        at_least("batch_size", self.batch_size, 1)?;
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::config(
                "warmup_epochs",
                format!(
                    "warmup_epochs must not exceed total_epochs ({}), got {}",
                    self.total_epochs, self.warmup_epochs
                ),
            ));
        }
        positive("lr", self.lr)?;
        unit("m", self.m)?;
        unit("alpha", self.alpha)?;
        for (key, v) in [("lambda_n", self.lambda_n), ("lambda_r", self.lambda_r)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("{key} must be non-negative, got {v}")));
            }
        }
        positive("sigma_floor", self.sigma_floor)?;
        let a = &self.ablation;
        if a.use_scs && !a.use_local_thresholds && !a.use_global_thresholds {
            return Err(Error::config(
                "ablation.use_global_thresholds",
                "selection needs use_global_thresholds, use_local_thresholds, or both",
            ));
        }
        if let Some(0) = self.checkpoint_every {
            return Err(Error::config("checkpoint_every", "checkpoint_every must be at least 1"));
        }
        Ok(())
    }

    /// Canonical JSON: every key present, fixed order.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

pub fn parse_config_str(text: &str) -> Result<TrainConfig> {
    let config: TrainConfig = serde_json::from_str(text).map_err(|source| Error::Json {
        context: "config".into(),
        source,
    })?;
    config.validate()?;
    Ok(config)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Json { source, .. } => Error::Json {
            context: path.display().to_string(),
            source,
        },
        other => other,
    })
}
