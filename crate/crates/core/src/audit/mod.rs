//! Auditing tools: membership inference against the active model and
//! feature-ablation importance.

mod ablation;
mod mia;

pub use ablation::{feature_ablation, AblationMetric, AblationScore};
pub use mia::{
    build_mia_training_set, mia_accuracy, train_mia, MiaAudit, MiaConfig, MiaDataset, MiaModel,
    MIA_EPOCHS, MIA_HIDDEN,
};
