//! Monte-Carlo check of the analytic mismatch expectation in the single-cell
//! setting.
//!
//! A non-negative layer is mapped with the two-column scheme and only the
//! positive column is exposed to faults, so every weight lives in exactly one
//! cell and pruned weights sit at conductance 0. Stuck-off faults then change
//! only non-zero weights while stuck-on faults change (almost) every weight,
//! giving a per-weight mismatch of `p_off·(1−R_p) + p_on`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::faults::{
    apply_faults, mismatch_rate, sample_fault_mask, CellState, FaultModel, Mismatch,
};
use crate::mapping::{map_layer, MappingScheme, DEFAULT_TILE};
use crate::numerics::Tensor;
use crate::pruning::{mismatch_expectation, pruned_count};
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectationRow {
    pub p_off: f64,
    pub p_on: f64,
    pub prune_ratio: f64,
    pub weights: usize,
    pub trials: usize,
    pub expected: f64,
    pub empirical: f64,
    pub std_error: f64,
    pub z: f64,
}

/// Widest row (≤ half a tile row) that divides `n` exactly.
fn row_width(n: usize) -> usize {
    (1..=DEFAULT_TILE / 2)
        .rev()
        .find(|w| n.is_multiple_of(*w))
        .unwrap_or(1)
}

/// Non-negative weights with exactly `⌊ratio·n⌋` zeros at random positions.
fn pruned_weights(n: usize, ratio: f64, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zeros = pruned_count(n, ratio);
    let mut w: Vec<f32> = (0..n)
        .map(|i| {
            if i < zeros {
                0.0
            } else {
                rng.gen_range(0.05f32..1.0)
            }
        })
        .collect();
    w.shuffle(&mut rng);
    let cols = row_width(n);
    Tensor::new(vec![n / cols, cols], w)
}

fn single_cell_trial(w: &Tensor, faults: &FaultModel, seed: u64) -> Result<Mismatch> {
    let mapped = map_layer(w, MappingScheme::TwoColumn, DEFAULT_TILE, DEFAULT_TILE)?;
    let l = &mapped.layout;
    let mut mask = sample_fault_mask(l, faults, seed);
    for r in 0..l.weight_rows {
        for c in 0..l.weight_cols {
            mask.set(l.locate(r, c, 1), CellState::Healthy);
        }
    }
    mismatch_rate(&mapped, &apply_faults(&mapped, &mask)?)
}

/// One row per `(fault model, R_p)` pair, fault models outermost.
pub fn verify_expectation(
    weights: usize,
    faults: &[FaultModel],
    ratios: &[f64],
    trials: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<ExpectationRow>> {
    if weights == 0 || trials == 0 {
        return Err(Error::InvalidConfig(
            "need at least one weight and one trial".into(),
        ));
    }
    let points: Vec<(usize, FaultModel, usize, f64)> = faults
        .iter()
        .enumerate()
        .flat_map(|(fi, f)| {
            ratios
                .iter()
                .enumerate()
                .map(move |(ri, &r)| (fi, *f, ri, r))
        })
        .collect();
    exec.try_map(points.len() * trials, |job| {
        let (fi, f, ri, r) = points[job / trials];
        let trial = job % trials;
        let w = pruned_weights(weights, r, derive_seed(seed, &[ri as u64, trial as u64]))?;
        single_cell_trial(
            &w,
            &f,
            derive_seed(seed, &[fi as u64, ri as u64, trial as u64]),
        )
    })?
    .chunks(trials)
    .zip(&points)
    .map(|(runs, &(_, f, _, r))| {
        let m = runs.iter().fold(Mismatch::default(), |a, b| a.merge(*b));
        let expected = mismatch_expectation(f.p_off(), f.p_on(), r)?;
        let n = (weights * trials) as f64;
        let empirical = m.per_weight();
        let std_error = (expected * (1.0 - expected) / n).sqrt();
        let z = if std_error > 0.0 {
            (empirical - expected) / std_error
        } else if empirical == expected {
            0.0
        } else {
            f64::INFINITY
        };
        Ok(ExpectationRow {
            p_off: f.p_off(),
            p_on: f.p_on(),
            prune_ratio: r,
            weights,
            trials,
            expected,
            empirical,
            std_error,
            z,
        })
    })
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_have_exact_zero_count() {
        let w = pruned_weights(10_000, 0.25, 1).unwrap();
        assert_eq!(w.count_zeros(), 2500);
        assert_eq!(w.shape(), &[10_000 / 50, 50]);
        assert!(w.data().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn degenerate_cases_are_exact() {
        let only_off = FaultModel::new(1.0, 0.0).unwrap();
        let rows = verify_expectation(
            4096,
            &[only_off],
            &[0.0, 0.5, 1.0],
            1,
            3,
            Execution::Sequential,
        )
        .unwrap();
        for row in rows {
            assert_eq!(row.empirical, row.expected);
            assert_eq!(row.z, 0.0);
        }
    }

    #[test]
    fn matches_expectation() {
        let f = FaultModel::from_total_rate(0.062, 5.2).unwrap();
        let rows = verify_expectation(100_000, &[f], &[0.0, 0.6, 1.0], 1, 11, Execution::Parallel)
            .unwrap();
        assert!((rows[1].expected - 0.056).abs() < 1e-12);
        for row in &rows {
            assert!(row.z.abs() < 4.0, "{row:?}");
        }
    }
}
