//! Magnitude pruning, block partitioning and the hierarchical progressive
//! pruning search.
//!
//! Accuracies are fractions in `[0, 1]` throughout; the search threshold `th`
//! uses the same unit (a drop of one percentage point is `0.01`).

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerKind, Model};
use crate::numerics::Tensor;

/// Fraction of exactly-zero weights over all layers that carry weights.
/// Returns 0 for a model without weights.
pub fn prune_ratio(model: &Model) -> f64 {
    let (zeros, total) = model
        .layers
        .iter()
        .filter_map(|l| l.weights())
        .fold((0usize, 0usize), |(z, n), w| {
            (z + w.count_zeros(), n + w.len())
        });
    if total == 0 {
        0.0
    } else {
        zeros as f64 / total as f64
    }
}

/// Number of weights removed from a population of `n` at `ratio`.
/// A tiny slack absorbs products such as `0.7 · 10 = 6.999…`.
pub fn pruned_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64 + 1e-9).floor() as usize).min(n)
}

/// Zeroes the `⌊ratio·N⌋` smallest-magnitude weights pooled across `block`
/// and clears their mask bits. Ties go to the lowest flat index, where flat
/// indices run through the block's layers in the given order.
pub fn magnitude_prune(model: &Model, block: &[usize], ratio: f64) -> Result<Model> {
    if block.is_empty() {
        return Err(Error::InvalidConfig("cannot prune an empty block".into()));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::OutOfRange {
            what: "pruning ratio",
            value: ratio,
        });
    }
    let mut pool: Vec<(f32, usize, usize)> = Vec::new();
    for &li in block {
        let w = model
            .layers
            .get(li)
            .and_then(|l| l.weights())
            .ok_or_else(|| Error::InvalidConfig(format!("layer {li} has no weights to prune")))?;
        pool.extend(w.data().iter().enumerate().map(|(i, v)| (v.abs(), li, i)));
    }
    let k = pruned_count(pool.len(), ratio);
    if k == 0 {
        return Ok(model.clone());
    }
    // stable sort keeps flat order among equal magnitudes
    pool.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut cleared: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(_, li, i) in &pool[..k] {
        cleared.entry(li).or_default().push(i);
    }
    let mut out = model.clone();
    for (li, idx) in cleared {
        let layer = &model.layers[li];
        let w = layer.weights().expect("checked above");
        let mut mask = match layer.mask() {
            Some(m) => m.data().to_vec(),
            None => vec![1.0; w.len()],
        };
        for i in idx {
            mask[i] = 0.0;
        }
        let mask = Tensor::new(w.shape().to_vec(), mask)?;
        out.layers[li] = layer.clone().with_mask(mask)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub layers: Vec<usize>,
    pub params: usize,
}

/// Disjoint groups of prunable layers, ascending by parameter count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPartition {
    pub blocks: Vec<Block>,
}

impl BlockPartition {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

fn output_width(kind: &LayerKind) -> usize {
    match *kind {
        LayerKind::Dense { out_features, .. } => out_features,
        LayerKind::Conv2d { out_channels, .. } => out_channels,
        _ => 0,
    }
}

/// Groups prunable layers by output width (features or channels), or by the
/// given explicit classes, and orders the blocks by parameter count. Equal
/// counts keep the order of their first layer.
pub fn partition_blocks(
    model: &Model,
    size_classes: Option<&[Vec<usize>]>,
) -> Result<BlockPartition> {
    let prunable = model.prunable_layers();
    if prunable.is_empty() {
        return Err(Error::InvalidConfig("model has no prunable layers".into()));
    }
    let groups: Vec<Vec<usize>> = match size_classes {
        Some(classes) => {
            let mut seen: Vec<usize> = classes.iter().flatten().copied().collect();
            seen.sort_unstable();
            if seen != prunable || classes.iter().any(Vec::is_empty) {
                return Err(Error::InvalidConfig(format!(
                    "size classes must partition the prunable layers {prunable:?}"
                )));
            }
            classes.to_vec()
        }
        None => {
            let mut by_width: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for &li in &prunable {
                by_width
                    .entry(output_width(&model.layers[li].kind))
                    .or_default()
                    .push(li);
            }
            by_width.into_values().collect()
        }
    };
    let mut blocks: Vec<Block> = groups
        .into_iter()
        .map(|mut layers| {
            layers.sort_unstable();
            let params = layers
                .iter()
                .map(|&l| model.layers[l].parameter_count())
                .sum();
            Block { layers, params }
        })
        .collect();
    blocks.sort_by_key(|b| (b.params, b.layers[0]));
    Ok(BlockPartition { blocks })
}

/// Mean (and spread) of fault-injected accuracy for one candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyEstimate {
    pub mean: f64,
    pub std: f64,
    pub trials: usize,
}

impl AccuracyEstimate {
    pub fn exact(mean: f64) -> Self {
        AccuracyEstimate {
            mean,
            std: 0.0,
            trials: 1,
        }
    }
}

/// What the search needs from the outside world.
pub trait CandidateEvaluator {
    /// Averaged faulted accuracy of `model`.
    fn evaluate(&mut self, model: &Model) -> Result<AccuracyEstimate>;

    /// Applied to each freshly pruned candidate before evaluation, e.g. masked
    /// fine-tuning. Identity by default.
    fn refine(&mut self, model: Model) -> Result<Model> {
        Ok(model)
    }
}

impl<F> CandidateEvaluator for F
where
    F: FnMut(&Model) -> Result<AccuracyEstimate>,
{
    fn evaluate(&mut self, model: &Model) -> Result<AccuracyEstimate> {
        self(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRound {
    pub round: usize,
    pub ratio: f64,
    /// Indices into the partition's block list.
    pub active_blocks: Vec<usize>,
    pub accuracy: AccuracyEstimate,
    /// Accuracy of the current model the candidate is compared against.
    pub reference_accuracy: f64,
    pub decision: Decision,
    /// Block dropped from the active list after a rejection.
    pub popped_block: Option<usize>,
    pub best_updated: bool,
    /// Zero fraction of the candidate model.
    pub model_prune_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub baseline: Option<AccuracyEstimate>,
    pub rounds: Vec<SearchRound>,
    /// Round whose candidate was returned; `None` means the input model.
    pub best_round: Option<usize>,
}

impl SearchTrace {
    /// One JSON object per evaluation round, baseline first.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let mut line = |v: serde_json::Value| -> Result<()> {
            serde_json::to_writer(&mut out, &v)?;
            out.write_all(b"\n").map_err(|e| Error::io("<trace>", e))
        };
        if let Some(b) = &self.baseline {
            line(serde_json::json!({ "event": "baseline", "accuracy": b }))?;
        }
        for r in &self.rounds {
            let mut v = serde_json::to_value(r)?;
            v["event"] = "round".into();
            line(v)?;
        }
        line(serde_json::json!({ "event": "result", "best_round": self.best_round }))
    }
}

/// Parameters of the search loop itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchParams {
    /// Largest tolerated accuracy drop against the current model (fraction).
    pub th: f64,
    /// Candidate ratios, strictly ascending in `[0, 1)`.
    pub ratios: Vec<f64>,
}

impl Default for SearchParams {
    fn default() -> Self {
        SearchParams {
            th: 0.005,
            ratios: (1..=9).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

impl SearchParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.th > 0.0 && self.th.is_finite()) {
            return Err(Error::OutOfRange {
                what: "threshold",
                value: self.th,
            });
        }
        for &r in &self.ratios {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::OutOfRange {
                    what: "pruning ratio",
                    value: r,
                });
            }
        }
        if self.ratios.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "pruning ratios must be strictly ascending".into(),
            ));
        }
        Ok(())
    }
}

/// Hierarchical progressive pruning.
///
/// Starting from all blocks active, each round prunes the active blocks of
/// the current model to the current ratio and evaluates the candidate. A
/// candidate whose drop against the current model stays below `th` is
/// accepted and the ratio advances; otherwise the smallest active block is
/// dropped and the same ratio is retried. The search ends when ratios or
/// blocks run out. Returns the highest-accuracy accepted candidate (the input
/// model if none was accepted).
pub fn hierarchical_progressive_prune<E: CandidateEvaluator + ?Sized>(
    model: &Model,
    partition: &BlockPartition,
    params: &SearchParams,
    evaluator: &mut E,
) -> Result<(Model, SearchTrace)> {
    params.validate()?;
    let mut trace = SearchTrace {
        baseline: None,
        rounds: Vec::new(),
        best_round: None,
    };
    if params.ratios.is_empty() || partition.is_empty() {
        return Ok((model.clone(), trace));
    }
    let baseline = evaluator.evaluate(model)?;
    trace.baseline = Some(baseline);

    let mut current = model.clone();
    let mut current_acc = baseline.mean;
    let mut best: Option<(Model, f64)> = None;
    let mut active: Vec<usize> = (0..partition.len()).collect();
    let mut ri = 0;

    while ri < params.ratios.len() && !active.is_empty() {
        let ratio = params.ratios[ri];
        let mut candidate = current.clone();
        for &b in &active {
            candidate = magnitude_prune(&candidate, &partition.blocks[b].layers, ratio)?;
        }
        let candidate = evaluator.refine(candidate)?;
        let acc = evaluator.evaluate(&candidate)?;
        let round = trace.rounds.len();
        let mut record = SearchRound {
            round,
            ratio,
            active_blocks: active.clone(),
            accuracy: acc,
            reference_accuracy: current_acc,
            decision: Decision::Rejected,
            popped_block: None,
            best_updated: false,
            model_prune_ratio: prune_ratio(&candidate),
        };
        if current_acc - acc.mean < params.th {
            record.decision = Decision::Accepted;
            if best.as_ref().is_none_or(|(_, b)| acc.mean > *b) {
                best = Some((candidate.clone(), acc.mean));
                trace.best_round = Some(round);
                record.best_updated = true;
            }
            current = candidate;
            current_acc = acc.mean;
            ri += 1;
        } else {
            record.popped_block = Some(active.remove(0));
        }
        trace.rounds.push(record);
    }
    let best = best.map_or_else(|| model.clone(), |(m, _)| m);
    Ok((best, trace))
}

/// Expected per-weight mismatch for single-cell weights where pruned (zero)
/// weights are immune to stuck-off faults: `p_off·(1−R_p) + p_on`.
pub fn mismatch_expectation(p_off: f64, p_on: f64, prune_ratio: f64) -> Result<f64> {
    for (what, v) in [
        ("p_off", p_off),
        ("p_on", p_on),
        ("pruning ratio", prune_ratio),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::OutOfRange { what, value: v });
        }
    }
    if p_off + p_on > 1.0 {
        return Err(Error::OutOfRange {
            what: "p_off + p_on",
            value: p_off + p_on,
        });
    }
    Ok(p_off * (1.0 - prune_ratio) + p_on)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{arch, Layer};
    use proptest::prelude::*;

    fn dense(w: Vec<f32>, rows: usize, cols: usize) -> Layer {
        Layer::with_parameters(
            LayerKind::Dense {
                in_features: rows,
                out_features: cols,
            },
            Tensor::new(vec![rows, cols], w).unwrap(),
            Tensor::zeros(&[cols]),
        )
        .unwrap()
    }

    fn one_layer(w: Vec<f32>) -> Model {
        let n = w.len();
        Model::new("t", vec![n], 1, vec![dense(w, n, 1)]).unwrap()
    }

    #[test]
    fn prune_ratio_counts_zeros() {
        assert_eq!(prune_ratio(&one_layer(vec![1.0, -3.0, 0.0, 0.0])), 0.5);
        assert_eq!(prune_ratio(&arch::mlp(&[20, 10, 3], 1).unwrap()), 0.0);
    }

    #[test]
    fn magnitude_prune_example() {
        let m = magnitude_prune(&one_layer(vec![1.0, -3.0, 2.0, 0.5]), &[0], 0.5).unwrap();
        assert_eq!(
            m.layers[0].weights().unwrap().data(),
            &[0.0, -3.0, 2.0, 0.0]
        );
        assert_eq!(m.layers[0].mask().unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn magnitude_prune_extremes() {
        let m = arch::mlp(&[30, 20, 5], 3).unwrap();
        assert_eq!(magnitude_prune(&m, &[0], 0.0).unwrap(), m);
        let all = magnitude_prune(&m, &[0], 1.0).unwrap();
        assert!(all.layers[0]
            .weights()
            .unwrap()
            .data()
            .iter()
            .all(|&w| w == 0.0));
        assert_eq!(all.layers[2], m.layers[2]);
        assert!(magnitude_prune(&m, &[], 0.5).is_err());
        assert!(magnitude_prune(&m, &[1], 0.5).is_err());
    }

    #[test]
    fn ties_prefer_lowest_index() {
        let m = magnitude_prune(&one_layer(vec![1.0, -1.0, 1.0, 5.0]), &[0], 0.5).unwrap();
        assert_eq!(m.layers[0].weights().unwrap().data(), &[0.0, 0.0, 1.0, 5.0]);
    }

    #[test]
    fn pooled_across_block() {
        let m = arch::mlp(&[6, 4, 3], 5).unwrap();
        let p = magnitude_prune(&m, &[0, 2], 0.7).unwrap();
        let n = m.weight_count();
        assert_eq!(
            p.layers
                .iter()
                .filter_map(|l| l.weights())
                .map(|w| w.count_zeros())
                .sum::<usize>(),
            pruned_count(n, 0.7)
        );
        // every surviving weight is at least as large as every pruned one
        let mut kept = f32::INFINITY;
        let mut pruned = 0f32;
        for li in [0, 2] {
            let before = m.layers[li].weights().unwrap().data();
            let after = p.layers[li].weights().unwrap().data();
            for (b, a) in before.iter().zip(after) {
                if *a == 0.0 {
                    pruned = pruned.max(b.abs());
                } else {
                    kept = kept.min(b.abs());
                }
            }
        }
        assert!(pruned <= kept);
    }

    #[test]
    fn partition_mlp() {
        let m = arch::mlp(&[784, 128, 10], 0).unwrap();
        let p = partition_blocks(&m, None).unwrap();
        assert_eq!(
            p.blocks,
            vec![
                Block {
                    layers: vec![2],
                    params: 1280
                },
                Block {
                    layers: vec![0],
                    params: 100_352
                },
            ]
        );
    }

    #[test]
    fn partition_equal_widths() {
        let m = arch::mlp(&[16, 16, 16, 16], 0).unwrap();
        let p = partition_blocks(&m, None).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.blocks[0].layers, m.prunable_layers());
    }

    #[test]
    fn partition_reference_cnn() {
        let m = arch::reference_cnn(0).unwrap();
        let p = partition_blocks(&m, None).unwrap();
        let counts: Vec<usize> = p.blocks.iter().map(|b| b.params).collect();
        assert_eq!(counts, vec![8 * 25, 256 * 10, 16 * 8 * 25]);
        assert_eq!(p.blocks[0].layers, vec![0]);
        assert_eq!(p.blocks[1].layers, vec![7]);
        assert_eq!(p.blocks[2].layers, vec![3]);
    }

    #[test]
    fn partition_size_classes() {
        let m = arch::mlp(&[8, 6, 4, 2], 0).unwrap();
        let layers = m.prunable_layers();
        let classes = vec![vec![layers[0], layers[2]], vec![layers[1]]];
        let p = partition_blocks(&m, Some(&classes)).unwrap();
        assert_eq!(p.blocks[0].layers, vec![layers[1]]);
        assert!(partition_blocks(&m, Some(&[vec![layers[0]]])).is_err());
    }

    #[test]
    fn expectation_values() {
        let e = |r| mismatch_expectation(0.01, 0.052, r).unwrap();
        assert!((e(0.0) - 0.062).abs() < 1e-12);
        assert!((e(1.0) - 0.052).abs() < 1e-12);
        assert!((e(0.6) - 0.056).abs() < 1e-12);
        assert!(mismatch_expectation(-0.1, 0.0, 0.0).is_err());
        assert!(mismatch_expectation(0.1, 0.0, 1.5).is_err());
    }

    fn layer_pruned(m: &Model, li: usize) -> bool {
        m.layers[li].weights().unwrap().count_zeros() > 0
    }

    #[test]
    fn search_empty_ratios() {
        let m = arch::mlp(&[4, 3, 2], 0).unwrap();
        let part = partition_blocks(&m, None).unwrap();
        let params = SearchParams {
            th: 0.05,
            ratios: vec![],
        };
        let mut calls = 0;
        let (best, trace) = hierarchical_progressive_prune(&m, &part, &params, &mut |_: &Model| {
            calls += 1;
            Ok(AccuracyEstimate::exact(0.5))
        })
        .unwrap();
        assert_eq!(best, m);
        assert!(trace.rounds.is_empty() && trace.baseline.is_none());
        assert_eq!(calls, 0);
    }

    #[test]
    fn search_accepts_within_threshold() {
        let m = one_layer(vec![0.3, -0.2, 0.9, 0.1]);
        let part = partition_blocks(&m, None).unwrap();
        let params = SearchParams {
            th: 0.05,
            ratios: vec![0.5],
        };
        let (best, trace) = hierarchical_progressive_prune(&m, &part, &params, &mut |c: &Model| {
            Ok(AccuracyEstimate::exact(if prune_ratio(c) == 0.0 {
                0.91
            } else {
                0.9
            }))
        })
        .unwrap();
        assert_eq!(trace.rounds.len(), 1);
        assert_eq!(trace.rounds[0].decision, Decision::Accepted);
        assert_eq!(trace.best_round, Some(0));
        assert_eq!(prune_ratio(&best), 0.5);
    }

    #[test]
    fn search_pops_then_retries_same_ratio() {
        let m = arch::mlp(&[4, 8, 2], 0).unwrap();
        let part = partition_blocks(&m, None).unwrap();
        assert_eq!(part.blocks[0].layers, vec![2]);
        let params = SearchParams {
            th: 0.05,
            ratios: vec![0.5],
        };
        let (best, trace) = hierarchical_progressive_prune(&m, &part, &params, &mut |c: &Model| {
            Ok(AccuracyEstimate::exact(if layer_pruned(c, 2) {
                0.5
            } else {
                0.91
            }))
        })
        .unwrap();
        let summary: Vec<_> = trace
            .rounds
            .iter()
            .map(|r| (r.ratio, r.active_blocks.clone(), r.decision, r.popped_block))
            .collect();
        assert_eq!(
            summary,
            vec![
                (0.5, vec![0, 1], Decision::Rejected, Some(0)),
                (0.5, vec![1], Decision::Accepted, None),
            ]
        );
        assert!(layer_pruned(&best, 0) && !layer_pruned(&best, 2));
    }

    #[test]
    fn search_exhausts_blocks() {
        let m = arch::mlp(&[4, 8, 2], 0).unwrap();
        let part = partition_blocks(&m, None).unwrap();
        let params = SearchParams {
            th: 0.05,
            ratios: vec![0.1, 0.2, 0.3],
        };
        let (best, trace) = hierarchical_progressive_prune(&m, &part, &params, &mut |c: &Model| {
            Ok(AccuracyEstimate::exact(if prune_ratio(c) == 0.0 {
                0.9
            } else {
                0.1
            }))
        })
        .unwrap();
        assert_eq!(trace.rounds.len(), 2);
        assert!(trace
            .rounds
            .iter()
            .all(|r| r.decision == Decision::Rejected && r.ratio == 0.1));
        assert_eq!(trace.best_round, None);
        assert_eq!(best, m);
    }

    #[test]
    fn search_returns_argmax_of_accepted() {
        let m = one_layer((1..=20).map(|i| i as f32 / 20.0).collect());
        let part = partition_blocks(&m, None).unwrap();
        let params = SearchParams {
            th: 0.05,
            ratios: vec![0.1, 0.2, 0.3],
        };
        let acc = |r: f64| match (r * 10.0).round() as i32 {
            0 => 0.90,
            1 => 0.92,
            2 => 0.95,
            _ => 0.93,
        };
        let (best, trace) = hierarchical_progressive_prune(&m, &part, &params, &mut |c: &Model| {
            Ok(AccuracyEstimate::exact(acc(prune_ratio(c))))
        })
        .unwrap();
        assert!(trace
            .rounds
            .iter()
            .all(|r| r.decision == Decision::Accepted));
        assert_eq!(trace.best_round, Some(1));
        assert!((prune_ratio(&best) - 0.2).abs() < 1e-12);
        let mut buf = Vec::new();
        trace.write_jsonl(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
    }

    proptest! {
        #[test]
        fn expectation_never_exceeds_unpruned(p_off in 0.0..0.5f64, p_on in 0.0..0.5f64, r in 0.0..=1.0f64) {
            let e = mismatch_expectation(p_off, p_on, 0.0).unwrap();
            let e2 = mismatch_expectation(p_off, p_on, r).unwrap();
            prop_assert!(e2 <= e);
            if r > 0.0 && p_off > 0.0 {
                prop_assert!(e2 < e);
            }
        }

        #[test]
        fn prune_hits_target(
            w in prop::collection::vec(-1.0f32..1.0, 1..200),
            ratio in 0.0..=1.0f64,
        ) {
            let m = one_layer(w.clone());
            let p = magnitude_prune(&m, &[0], ratio).unwrap();
            let after = p.layers[0].weights().unwrap().data();
            for (a, b) in after.iter().zip(&w) {
                prop_assert!(a.abs() <= b.abs());
            }
            let n = w.len() as f64;
            let achieved = prune_ratio(&p);
            let already = w.iter().filter(|&&x| x == 0.0).count() as f64 / n;
            prop_assert!(achieved >= ratio - 1.0 / n - 1e-12);
            prop_assert!(achieved <= ratio.max(already) + 1.0 / n);
        }
    }
}
