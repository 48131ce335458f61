//! Desk-scale laboratory for learning with noisy labels.
//!
//! The training procedure warms up a robust network and a plain
//! cross-entropy baseline side by side, then switches the robust network to
//! a three-part objective:
//!
//! - [`scs`]: EMA-smoothed global and per-class confidence thresholds split
//!   each epoch into a clean and a noisy subset, with an agreement-based
//!   mining pass and per-sample reliability weights for the clean part.
//! - [`scr`]: a mean-teacher network relabels the noisy subset, and each
//!   corrected sample is weighted by a per-class truncated-normal CDF of the
//!   teacher's confidence.
//! - consistency regularization: clean samples are additionally fit against
//!   the teacher's labels with the same re-weighting.
//!
//! Synthetic Gaussian-cluster data ([`synthdata`]) keeps the true noise mask,
//! so selection precision and recall are exact. [`ablation`] reproduces the
//! component and EMA-factor grids.

pub mod ablation;
pub mod config;
pub mod error;
pub mod metrics;
pub mod net;
pub mod report;
pub mod rng;
pub mod scr;
pub mod scs;
pub mod synthdata;
pub mod trainer;

pub use config::{AblationSwitches, DatasetConfig, NoiseConfig, TrainConfig};
pub use error::{Error, Result};
pub use net::{Batch, ModelParams};
pub use synthdata::{Dataset, NoiseKind, NoiseSpec, Split};
pub use trainer::{EpochLog, RunReport};
