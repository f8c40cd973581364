//! CSV ingestion, vertical feature partitioning, sample alignment, shared
//! batch plans and synthetic data.

mod batch;
mod dataset;
mod partition;
mod synthetic;

pub use batch::{make_batch_plan, BatchPlan};
pub use dataset::{load_csv, Dataset, SampleId, MIN_STD};
pub use partition::{align_samples, vertical_partition, VerticalSplit};
pub use synthetic::{generate_synthetic, CLASS_SEPARATION, SIGNAL_DECAY};

/// Fraction of aligned samples used for training; the rest is the test split.
pub const TRAIN_FRACTION: f64 = 0.8;
