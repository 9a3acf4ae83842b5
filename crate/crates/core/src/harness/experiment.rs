//! Monte-Carlo fault-injected evaluation of one model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::faults::{
    apply_faults, mismatch_rate, sample_fault_mask_with, CellSelection, FaultModel, Mismatch,
};
use crate::mapping::{
    map_layer, reconstruct_effective_weights, MappedLayer, MappingScheme, DEFAULT_TILE,
};
use crate::nn::{evaluate_accuracy, Dataset, Model};
use crate::pruning::{mismatch_expectation, prune_ratio};
use crate::rng::derive_seed;

/// How a model is placed on crossbars and which faults hit it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectionConfig {
    pub scheme: MappingScheme,
    pub faults: FaultModel,
    pub tile_rows: usize,
    pub tile_cols: usize,
    #[serde(default)]
    pub selection: CellSelection,
    /// Reuse trial 0's masks for every trial (one physical device).
    #[serde(default)]
    pub fixed_device: bool,
}

impl InjectionConfig {
    pub fn new(scheme: MappingScheme, faults: FaultModel) -> Self {
        InjectionConfig {
            scheme,
            faults,
            tile_rows: DEFAULT_TILE,
            tile_cols: DEFAULT_TILE,
            selection: CellSelection::Occupied,
            fixed_device: false,
        }
    }
}

/// Mask key for one layer in one trial.
pub fn trial_seed(seed: u64, trial: usize, layer: usize) -> u64 {
    derive_seed(seed, &[trial as u64, layer as u64])
}

/// A model's weight layers mapped once, ready for repeated fault injection.
#[derive(Debug, Clone)]
pub struct MappedModel {
    pub model: Model,
    pub config: InjectionConfig,
    /// `(layer index, mapped weights)` for every layer that carries weights.
    pub layers: Vec<(usize, MappedLayer)>,
}

impl MappedModel {
    pub fn new(model: &Model, config: InjectionConfig) -> Result<Self> {
        let layers = model
            .prunable_layers()
            .into_iter()
            .map(|li| {
                let w = model.layers[li].weight_matrix().expect("prunable layer")?;
                let mapped = map_layer(&w, config.scheme, config.tile_rows, config.tile_cols)
                    .map_err(|e| e.at_layer(li))?;
                Ok((li, mapped))
            })
            .collect::<Result<_>>()?;
        Ok(MappedModel {
            model: model.clone(),
            config,
            layers,
        })
    }

    /// The model as seen through faulty hardware in `trial`, plus the pooled
    /// mismatch over its layers.
    pub fn faulted(&self, seed: u64, trial: usize) -> Result<(Model, Mismatch)> {
        let trial = if self.config.fixed_device { 0 } else { trial };
        let mut model = self.model.clone();
        let mut total = Mismatch::default();
        for (li, mapped) in &self.layers {
            let mask = sample_fault_mask_with(
                &mapped.layout,
                &self.config.faults,
                trial_seed(seed, trial, *li),
                self.config.selection,
            );
            let faulted = apply_faults(mapped, &mask)?;
            total = total.merge(mismatch_rate(mapped, &faulted)?);
            let eff = reconstruct_effective_weights(&faulted)?;
            model.layers[*li] = model.layers[*li]
                .clone()
                .with_effective_weight_matrix(eff)
                .map_err(|e| e.at_layer(*li))?;
        }
        Ok((model, total))
    }
}

/// Aggregate statistics of one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointStats {
    pub trials: usize,
    pub seed: u64,
    /// Accuracy of the software model without hardware.
    pub clean_accuracy: f64,
    pub accuracies: Vec<f64>,
    pub acc_mean: f64,
    /// Sample standard deviation (n − 1 denominator; 0 for one trial).
    pub acc_std: f64,
    pub acc_min: f64,
    pub acc_max: f64,
    /// Mean fraction of occupied cells stuck, pooled over layers and trials.
    pub mismatch_cell: f64,
    /// Mean fraction of weights whose effective value changed.
    pub mismatch_weight: f64,
    /// Zero fraction of the evaluated model.
    pub prune_ratio: f64,
    /// `p_off·(1−R_p) + p_on` for this point.
    pub expectation_e_prime: f64,
}

impl PointStats {
    pub fn standard_error(&self) -> f64 {
        self.acc_std / (self.trials as f64).sqrt()
    }

    pub fn mean_drop(&self, reference: f64) -> f64 {
        reference - self.acc_mean
    }
}

/// Mean, sample standard deviation, min and max.
pub fn summarize(xs: &[f64]) -> (f64, f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, std, min, max)
}

/// Runs `trials` independent fault draws and evaluates each faulted model on
/// the whole dataset. Trial `t` of layer `l` uses mask key
/// [`trial_seed`]`(seed, t, l)`, so the result is independent of `exec`.
pub fn evaluate_with_faults(
    model: &Model,
    config: &InjectionConfig,
    data: &Dataset,
    trials: usize,
    seed: u64,
    exec: Execution,
) -> Result<PointStats> {
    if trials == 0 {
        return Err(Error::InvalidConfig("trials must be at least 1".into()));
    }
    let mapped = MappedModel::new(model, *config)?;
    let clean_accuracy = evaluate_accuracy(model, data)?;
    let runs = exec.try_map(trials, |t| {
        let (faulted, mismatch) = mapped.faulted(seed, t)?;
        Ok((evaluate_accuracy(&faulted, data)?, mismatch))
    })?;
    let accuracies: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let mismatch = runs
        .iter()
        .fold(Mismatch::default(), |acc, r| acc.merge(r.1));
    let (acc_mean, acc_std, acc_min, acc_max) = summarize(&accuracies);
    let rp = prune_ratio(model);
    Ok(PointStats {
        trials,
        seed,
        clean_accuracy,
        accuracies,
        acc_mean,
        acc_std,
        acc_min,
        acc_max,
        mismatch_cell: mismatch.per_cell(),
        mismatch_weight: mismatch.per_weight(),
        prune_ratio: rp,
        expectation_e_prime: mismatch_expectation(config.faults.p_off(), config.faults.p_on(), rp)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{arch, train_sgd, TrainConfig};
    use crate::numerics::Tensor;

    /// Two well separated blobs in 8 dimensions, two classes.
    fn toy() -> Dataset {
        let n = 200;
        let images = Tensor::from_fn(&[n, 8], |i| {
            let (s, f) = (i / 8, i % 8);
            let sign = if s % 2 == 0 { 1.0 } else { -1.0 };
            sign * (0.5 + 0.1 * ((s * 7 + f * 3) % 5) as f32) * if f < 4 { 1.0 } else { 0.2 }
        })
        .unwrap();
        let labels = (0..n).map(|s| (s % 2) as u8).collect();
        Dataset::new(images, labels, 2).unwrap()
    }

    fn trained() -> (Model, Dataset) {
        let data = toy();
        let m = arch::mlp(&[8, 16, 2], 3).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            lr: 0.05,
            batch_size: 16,
            ..TrainConfig::default()
        };
        (train_sgd(&m, &data, &cfg).unwrap(), data)
    }

    #[test]
    fn zero_rate_matches_clean_model() {
        let (m, data) = trained();
        for scheme in MappingScheme::ALL {
            let cfg = InjectionConfig::new(scheme, FaultModel::none());
            let s = evaluate_with_faults(&m, &cfg, &data, 5, 1, Execution::Sequential).unwrap();
            assert_eq!(s.acc_mean, s.clean_accuracy);
            assert_eq!(s.acc_std, 0.0);
            assert_eq!((s.mismatch_cell, s.mismatch_weight), (0.0, 0.0));
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let (m, data) = trained();
        let cfg = InjectionConfig::new(
            MappingScheme::TwoColumn,
            FaultModel::from_total_rate(0.2, 1.0).unwrap(),
        );
        let a = evaluate_with_faults(&m, &cfg, &data, 20, 5, Execution::Parallel).unwrap();
        let b = evaluate_with_faults(&m, &cfg, &data, 20, 5, Execution::Sequential).unwrap();
        let c = evaluate_with_faults(&m, &cfg, &data, 20, 6, Execution::Sequential).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.accuracies, c.accuracies);
        let (mean, std, min, max) = summarize(&a.accuracies);
        assert_eq!(
            (a.acc_mean, a.acc_std, a.acc_min, a.acc_max),
            (mean, std, min, max)
        );
    }

    #[test]
    fn fixed_device_repeats_one_mask() {
        let (m, data) = trained();
        let mut cfg =
            InjectionConfig::new(MappingScheme::Offset, FaultModel::new(0.1, 0.1).unwrap());
        cfg.fixed_device = true;
        let s = evaluate_with_faults(&m, &cfg, &data, 4, 5, Execution::Sequential).unwrap();
        assert!(s.accuracies.iter().all(|&a| a == s.accuracies[0]));
    }

    #[test]
    fn summary_statistics() {
        let (mean, std, min, max) = summarize(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!((mean, min, max), (2.5, 1.0, 4.0));
        assert!((std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(summarize(&[0.7]).1, 0.0);
    }
}
