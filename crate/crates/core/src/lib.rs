//! Abstaining multistage evaluation for count-based pest alerts.
//!
//! Object-detection outputs (per-box confidences) from a phone model and a
//! cloud model are turned into three-level alerts through a confidence
//! *window*: a pair of thresholds whose box counts must agree on the alert,
//! otherwise the stage abstains and the image moves down the chain
//! (phone, then cloud, then a human reviewer treated as ground truth).
//!
//! Modules, bottom-up:
//!
//! - [`dataset`]: detection records, ingest/validation and synthetic generation
//! - [`window`]: the windowing rule itself
//! - [`metrics`]: confusion matrices, MCC, abstention and false-alarm fractions
//! - [`sweep`]: threshold grids, per-stage candidates, heatmap export
//! - [`cascade`]: conditioned cloud evaluation, combined grid, comparison curves
//! - [`sim`]: discrete-event latency simulation of a deployed cascade
//! - [`cli`]: the `abstain` command-line front end

pub mod cascade;
pub mod cli;
pub mod dataset;
mod error;
pub mod metrics;
pub mod sim;
pub mod sweep;
pub mod window;

pub use dataset::{AlertLevel, Dataset, DetectionBox, ImageRecord};
pub use error::{Error, Result};
pub use metrics::{ConfusionMatrix, MetricReport};
pub use sweep::{Candidate, Grid};
pub use window::{Decision, Partition, Window};

/// Stage name of the on-device model.
pub const PHONE: &str = "phone";
/// Stage name of the server-side model.
pub const CLOUD: &str = "cloud";
