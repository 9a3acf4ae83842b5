//! Grid sweeps over (scheme × pruning ratio × fault model) with resumable,
//! incrementally written results.
//!
//! Completed points are appended to `<out stem>.points.jsonl` as they finish;
//! a rerun with the same spec skips them. When the grid is done the CSV report
//! and its JSON companion are rewritten from the points file in grid order.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::faults::{CellSelection, FaultModel};
use crate::mapping::{MappingScheme, DEFAULT_TILE};
use crate::nn::{train_sgd, Dataset, Model, TrainConfig};
use crate::pruning::magnitude_prune;
use crate::rng::derive_seed;

use super::experiment::{evaluate_with_faults, InjectionConfig, PointStats};
use super::io::{load_dataset, load_model, DatasetSpec};

pub const REPORT_FORMAT_VERSION: u32 = 1;

pub const CSV_COLUMNS: [&str; 13] = [
    "scheme",
    "p_off",
    "p_on",
    "prune_ratio",
    "trials",
    "acc_mean",
    "acc_std",
    "acc_min",
    "acc_max",
    "mismatch_cell",
    "mismatch_weight",
    "expectation_E_prime",
    "seed",
];

fn default_tile() -> usize {
    DEFAULT_TILE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub model: PathBuf,
    pub dataset: DatasetSpec,
    pub schemes: Vec<MappingScheme>,
    pub faults: Vec<FaultModel>,
    /// Each prunable layer is magnitude-pruned to this ratio on its own.
    pub ratios: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub out: PathBuf,
    #[serde(default = "default_tile")]
    pub tile_rows: usize,
    #[serde(default = "default_tile")]
    pub tile_cols: usize,
    #[serde(default)]
    pub selection: CellSelection,
    #[serde(default)]
    pub fixed_device: bool,
    /// Evaluate on the first `n` samples only.
    #[serde(default)]
    pub eval_subset: Option<usize>,
    /// Masked fine-tuning applied after pruning each ratio (ratio 0 included).
    #[serde(default)]
    pub finetune: Option<Finetune>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finetune {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.schemes.is_empty() || self.faults.is_empty() || self.ratios.is_empty() {
            return Err(Error::InvalidConfig("sweep grids must be non-empty".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be at least 1".into()));
        }
        for f in &self.faults {
            FaultModel::new(f.p_off(), f.p_on())?;
        }
        for &r in &self.ratios {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::OutOfRange {
                    what: "pruning ratio",
                    value: r,
                });
            }
        }
        if self.tile_rows == 0 || self.tile_cols < 2 {
            return Err(Error::InvalidConfig(
                "tiles need ≥1 row and ≥2 columns".into(),
            ));
        }
        Ok(())
    }

    /// Grid points in report order: scheme, then ratio, then fault model.
    pub fn grid(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &scheme in &self.schemes {
            for (ri, &prune_ratio) in self.ratios.iter().enumerate() {
                for &faults in &self.faults {
                    let id = out.len();
                    out.push(GridPoint {
                        id,
                        scheme,
                        faults,
                        ratio_index: ri,
                        prune_ratio,
                        seed: derive_seed(self.seed, &[id as u64]),
                    });
                }
            }
        }
        out
    }

    pub fn injection(&self, scheme: MappingScheme, faults: FaultModel) -> InjectionConfig {
        InjectionConfig {
            scheme,
            faults,
            tile_rows: self.tile_rows,
            tile_cols: self.tile_cols,
            selection: self.selection,
            fixed_device: self.fixed_device,
        }
    }

    pub fn points_path(&self) -> PathBuf {
        self.out.with_extension("points.jsonl")
    }

    pub fn json_path(&self) -> PathBuf {
        self.out.with_extension("json")
    }

    /// This `ExperimentSpec` with the output location blanked, for resume checks.
    fn fingerprint(&self) -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(self)?;
        v["out"] = serde_json::Value::Null;
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub id: usize,
    pub scheme: MappingScheme,
    pub faults: FaultModel,
    pub ratio_index: usize,
    pub prune_ratio: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok(PointStats),
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub point: GridPoint,
    pub outcome: Outcome,
}

impl PointRecord {
    pub fn stats(&self) -> Option<&PointStats> {
        match &self.outcome {
            Outcome::Ok(s) => Some(s),
            Outcome::Error(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub crate_version: String,
    pub wall_time_s: f64,
    pub computed_points: usize,
    pub resumed_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format_version: u32,
    /// Faults hit crossbar cells only; biases stay digital.
    pub notes: String,
    pub spec: ExperimentSpec,
    pub points: Vec<PointRecord>,
    pub environment: Environment,
}

impl ExperimentReport {
    pub fn ok_points(&self) -> impl Iterator<Item = (&GridPoint, &PointStats)> {
        self.points
            .iter()
            .filter_map(|r| r.stats().map(|s| (&r.point, s)))
    }

    /// The CSV payload: header plus one row per successful point.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::InvalidConfig(format!("csv: {e}"));
        w.write_record(CSV_COLUMNS).map_err(csv_err)?;
        for (p, s) in self.ok_points() {
            w.write_record([
                p.scheme.name().to_string(),
                p.faults.p_off().to_string(),
                p.faults.p_on().to_string(),
                p.prune_ratio.to_string(),
                s.trials.to_string(),
                s.acc_mean.to_string(),
                s.acc_std.to_string(),
                s.acc_min.to_string(),
                s.acc_max.to_string(),
                s.mismatch_cell.to_string(),
                s.mismatch_weight.to_string(),
                s.expectation_e_prime.to_string(),
                p.seed.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidConfig(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Layer-wise magnitude pruning: every prunable layer loses its own `ratio`.
pub fn prune_layerwise(model: &Model, ratio: f64) -> Result<Model> {
    model
        .prunable_layers()
        .into_iter()
        .try_fold(model.clone(), |m, li| magnitude_prune(&m, &[li], ratio))
}

/// Prunes `model` to `ratio` and optionally fine-tunes it with the mask held.
pub fn prepare_model(
    model: &Model,
    ratio: f64,
    finetune: Option<(&TrainConfig, &Dataset)>,
) -> Result<Model> {
    let pruned = prune_layerwise(model, ratio)?;
    match finetune {
        Some((cfg, data)) => {
            let cfg = TrainConfig {
                respect_mask: true,
                ..cfg.clone()
            };
            train_sgd(&pruned, data, &cfg)
        }
        None => Ok(pruned),
    }
}

#[derive(Serialize, Deserialize)]
struct PointsHeader {
    format_version: u32,
    spec: serde_json::Value,
}

/// Reads completed records from a points file, ignoring a torn final line.
fn read_points(path: &Path, spec: &ExperimentSpec) -> Result<Vec<PointRecord>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut lines = BufReader::new(file).lines();
    let Some(first) = lines.next() else {
        return Ok(Vec::new());
    };
    let first = first.map_err(|e| Error::io(path, e))?;
    let header: PointsHeader = match serde_json::from_str(&first) {
        Ok(h) => h,
        Err(_) => return Ok(Vec::new()),
    };
    if header.spec != spec.fingerprint()? {
        return Err(Error::InvalidConfig(format!(
            "{} was written by a different sweep spec; remove it or change --out",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        match serde_json::from_str::<PointRecord>(&line) {
            Ok(r) => out.push(r),
            Err(_) => break,
        }
    }
    Ok(out)
}

/// Rewrites the points file with a header and the given records.
fn rewrite_points(path: &Path, spec: &ExperimentSpec, records: &[PointRecord]) -> Result<File> {
    let mut buf = serde_json::to_string(&PointsHeader {
        format_version: REPORT_FORMAT_VERSION,
        spec: spec.fingerprint()?,
    })?;
    buf.push('\n');
    for r in records {
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))?;
    OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

/// Loads the model and datasets named in `spec` and runs the sweep.
pub fn sweep(spec: &ExperimentSpec, exec: Execution) -> Result<ExperimentReport> {
    spec.validate()?;
    let model = load_model(&spec.model)?;
    let data = load_dataset(&spec.dataset)?;
    let train = spec
        .finetune
        .as_ref()
        .map(|f| load_dataset(&f.dataset))
        .transpose()?;
    sweep_with(spec, &model, &data, train.as_ref(), exec)
}

/// Runs the sweep on an in-memory model and dataset; `spec.model` and
/// `spec.dataset` are only echoed.
pub fn sweep_with(
    spec: &ExperimentSpec,
    model: &Model,
    data: &Dataset,
    train: Option<&Dataset>,
    exec: Execution,
) -> Result<ExperimentReport> {
    spec.validate()?;
    let started = Instant::now();
    let data = match spec.eval_subset {
        Some(n) => data.head(n)?,
        None => data.clone(),
    };
    let finetune = match (&spec.finetune, train) {
        (Some(f), Some(d)) => Some((&f.train, d)),
        (Some(_), None) => {
            return Err(Error::InvalidConfig(
                "fine-tuning needs a training dataset".into(),
            ))
        }
        (None, _) => None,
    };
    if let Some(dir) = spec.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let grid = spec.grid();
    let points_path = spec.points_path();
    let mut done: Vec<Option<PointRecord>> = vec![None; grid.len()];
    for r in read_points(&points_path, spec)? {
        if r.point.id < grid.len() && grid[r.point.id] == r.point && r.stats().is_some() {
            let id = r.point.id;
            done[id] = Some(r);
        }
    }
    let resumed_points = done.iter().flatten().count();
    let kept: Vec<PointRecord> = done.iter().flatten().cloned().collect();
    let mut sink = rewrite_points(&points_path, spec, &kept)?;

    let mut computed_points = 0;
    for (ri, &ratio) in spec.ratios.iter().enumerate() {
        let pending: Vec<GridPoint> = grid
            .iter()
            .filter(|p| p.ratio_index == ri && done[p.id].is_none())
            .copied()
            .collect();
        if pending.is_empty() {
            continue;
        }
        let prepared = prepare_model(model, ratio, finetune);
        for p in pending {
            let outcome = match &prepared {
                Ok(m) => evaluate_with_faults(
                    m,
                    &spec.injection(p.scheme, p.faults),
                    &data,
                    spec.trials,
                    p.seed,
                    exec,
                )
                .map_or_else(|e| Outcome::Error(e.to_string()), Outcome::Ok),
                Err(e) => Outcome::Error(format!("preparing ratio {ratio}: {e}")),
            };
            let record = PointRecord { point: p, outcome };
            let mut line = serde_json::to_string(&record)?;
            line.push('\n');
            sink.write_all(line.as_bytes())
                .and_then(|_| sink.flush())
                .map_err(|e| Error::io(&points_path, e))?;
            done[p.id] = Some(record);
            computed_points += 1;
        }
    }

    let report = ExperimentReport {
        format_version: REPORT_FORMAT_VERSION,
        notes: "faults injected into crossbar cells only; biases are kept digital".into(),
        spec: spec.clone(),
        points: done
            .into_iter()
            .map(|r| r.expect("every point evaluated"))
            .collect(),
        environment: Environment {
            crate_version: env!("CARGO_PKG_VERSION").into(),
            wall_time_s: started.elapsed().as_secs_f64(),
            computed_points,
            resumed_points,
        },
    };
    fs::write(&spec.out, report.to_csv()?).map_err(|e| Error::io(&spec.out, e))?;
    let json_path = spec.json_path();
    fs::write(&json_path, serde_json::to_vec_pretty(&report)?)
        .map_err(|e| Error::io(&json_path, e))?;
    Ok(report)
}
