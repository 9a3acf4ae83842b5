//! Fault-injection driven pruning search.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::nn::{train_sgd, Dataset, Model, TrainConfig};
use crate::pruning::{
    hierarchical_progressive_prune, partition_blocks, AccuracyEstimate, CandidateEvaluator,
    SearchParams, SearchTrace,
};
use crate::rng::derive_seed;

use super::experiment::{evaluate_with_faults, InjectionConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSearchConfig {
    pub params: SearchParams,
    pub trials: usize,
    pub injection: InjectionConfig,
    pub seed: u64,
    /// Explicit blocks (layer index groups); grouped by width when absent.
    #[serde(default)]
    pub size_classes: Option<Vec<Vec<usize>>>,
    /// Masked fine-tuning after each pruning step.
    #[serde(default)]
    pub finetune: Option<TrainConfig>,
}

/// Evaluates candidates with `trials` fault draws each. Round `k` draws its
/// masks from `derive_seed(seed, [k])`, or from `seed` itself on a fixed
/// device so every candidate sees the same defects.
pub struct FaultInjectionEvaluator<'a> {
    pub data: &'a Dataset,
    pub injection: InjectionConfig,
    pub trials: usize,
    pub seed: u64,
    pub exec: Execution,
    pub finetune: Option<(TrainConfig, &'a Dataset)>,
    round: u64,
}

impl<'a> FaultInjectionEvaluator<'a> {
    pub fn new(
        data: &'a Dataset,
        injection: InjectionConfig,
        trials: usize,
        seed: u64,
        exec: Execution,
    ) -> Self {
        FaultInjectionEvaluator {
            data,
            injection,
            trials,
            seed,
            exec,
            finetune: None,
            round: 0,
        }
    }
}

impl CandidateEvaluator for FaultInjectionEvaluator<'_> {
    fn evaluate(&mut self, model: &Model) -> Result<AccuracyEstimate> {
        let seed = if self.injection.fixed_device {
            self.seed
        } else {
            derive_seed(self.seed, &[self.round])
        };
        self.round += 1;
        let s = evaluate_with_faults(
            model,
            &self.injection,
            self.data,
            self.trials,
            seed,
            self.exec,
        )?;
        Ok(AccuracyEstimate {
            mean: s.acc_mean,
            std: s.acc_std,
            trials: s.trials,
        })
    }

    fn refine(&mut self, model: Model) -> Result<Model> {
        match &self.finetune {
            Some((cfg, data)) => train_sgd(
                &model,
                data,
                &TrainConfig {
                    respect_mask: true,
                    ..cfg.clone()
                },
            ),
            None => Ok(model),
        }
    }
}

/// Partitions `model` and runs the hierarchical progressive pruning search
/// with fault-injected evaluation on `data`.
pub fn run_search(
    model: &Model,
    data: &Dataset,
    train: Option<&Dataset>,
    cfg: &PruneSearchConfig,
    exec: Execution,
) -> Result<(Model, SearchTrace)> {
    let partition = partition_blocks(model, cfg.size_classes.as_deref())?;
    let mut evaluator =
        FaultInjectionEvaluator::new(data, cfg.injection, cfg.trials, cfg.seed, exec);
    match (&cfg.finetune, train) {
        (Some(ft), Some(train)) => evaluator.finetune = Some((ft.clone(), train)),
        (Some(_), None) => {
            return Err(Error::InvalidConfig(
                "fine-tuning needs a training dataset".into(),
            ))
        }
        _ => {}
    }
    hierarchical_progressive_prune(model, &partition, &cfg.params, &mut evaluator)
}
