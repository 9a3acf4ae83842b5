//! Experiment orchestration: file formats, Monte-Carlo evaluation, sweeps,
//! the expectation check and the fault-aware pruning search.

pub mod expectation;
pub mod experiment;
pub mod io;
pub mod search;
pub mod sweep;

pub use expectation::{verify_expectation, ExpectationRow};
pub use experiment::{
    evaluate_with_faults, summarize, trial_seed, InjectionConfig, MappedModel, PointStats,
};
pub use io::{load_dataset, load_model, save_model, DatasetFormat, DatasetSpec, Split};
pub use search::{run_search, FaultInjectionEvaluator, PruneSearchConfig};
pub use sweep::{
    prepare_model, prune_layerwise, sweep, sweep_with, ExperimentReport, ExperimentSpec, Finetune,
};
