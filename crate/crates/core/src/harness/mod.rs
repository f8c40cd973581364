//! Experiment driver: configuration, runs, artefacts and run comparison.

mod config;
mod run;

pub use config::{
    read_config_pairs, DatasetSource, ExperimentConfig, Mode, BENCHMARK_SEED_OFFSET,
    STUDENT_SEED_OFFSET,
};
pub use run::{
    aggregate_runs, build_request, compare_runs, load_dataset, run_experiment, run_single,
    samples_of_batches, AblationEntry, Comparison, MetricGap, MiaSummary, RunOutput, RunSummary, Scores,
    UnlearnSummary, MIA_TRAIN_FRACTION,
};
