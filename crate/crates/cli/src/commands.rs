use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use rfsim::exec::Execution;
use rfsim::faults::{CellSelection, FaultModel};
use rfsim::harness::io::{load_dataset, load_model, save_model};
use rfsim::harness::{
    evaluate_with_faults, run_search, sweep, verify_expectation, DatasetFormat, DatasetSpec,
    ExperimentSpec, Finetune, InjectionConfig, PruneSearchConfig, Split,
};
use rfsim::nn::{arch, evaluate_accuracy, train_sgd, Dataset, Model, TrainConfig};
use rfsim::pruning::{magnitude_prune, prune_ratio, SearchParams};
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::*;
use crate::UsageError;

pub const PROVENANCE_VERSION: u32 = 1;

fn usage(e: impl std::fmt::Display) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

/// Provenance block shared by every artifact: tool, format and full config.
pub fn provenance(command: &str, config: &impl Serialize) -> Result<Value> {
    Ok(json!({
        "format_version": PROVENANCE_VERSION,
        "tool": format!("rfsim {}", env!("CARGO_PKG_VERSION")),
        "command": command,
        "config": serde_json::to_value(config)?,
    }))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_with_provenance(
    path: &Path,
    command: &str,
    config: &impl Serialize,
    extra: Value,
) -> Result<()> {
    let mut v = provenance(command, config)?;
    if let (Some(obj), Value::Object(extra)) = (v.as_object_mut(), extra) {
        obj.extend(extra);
    }
    write_json(path, &v)
}

fn dataset_spec(data: &DataArgs, split: Split) -> DatasetSpec {
    DatasetSpec {
        format: match data.dataset {
            DataKind::Mnist => DatasetFormat::Mnist,
            DataKind::Cifar10 => DatasetFormat::Cifar10,
        },
        dir: data.data_dir.clone(),
        split,
        limit: if split == Split::Test {
            data.eval_subset
        } else {
            None
        },
    }
}

fn load(data: &DataArgs, split: Split) -> Result<Dataset> {
    require_dir(&data.data_dir, "dataset directory")?;
    let spec = dataset_spec(data, split);
    load_dataset(&spec)
        .with_context(|| format!("loading {:?} split from {}", split, data.data_dir.display()))
}

fn fault_models(rates: &[f64], f: &FaultArgs) -> Result<Vec<FaultModel>> {
    if f.p_off.is_some() || f.p_on.is_some() {
        return Ok(vec![FaultModel::new(
            f.p_off.unwrap_or(0.0),
            f.p_on.unwrap_or(0.0),
        )
        .map_err(usage)?]);
    }
    rates
        .iter()
        .map(|&r| FaultModel::from_total_rate(r, f.on_off_ratio).map_err(usage))
        .collect()
}

fn injection(
    scheme: rfsim::mapping::MappingScheme,
    faults: FaultModel,
    hw: &HardwareArgs,
) -> Result<InjectionConfig> {
    if hw.tile_rows == 0 || hw.tile_cols < 2 {
        return Err(usage("tiles need at least 1 row and 2 columns"));
    }
    Ok(InjectionConfig {
        scheme,
        faults,
        tile_rows: hw.tile_rows,
        tile_cols: hw.tile_cols,
        selection: if hw.all_cells {
            CellSelection::All
        } else {
            CellSelection::Occupied
        },
        fixed_device: hw.fixed_device,
    })
}

fn finetune_config(ft: &FinetuneArgs, seed: u64) -> Option<TrainConfig> {
    (ft.finetune_epochs > 0).then_some(TrainConfig {
        epochs: ft.finetune_epochs,
        lr: ft.finetune_lr as f32,
        momentum: ft.finetune_momentum as f32,
        batch_size: ft.finetune_batch_size,
        seed,
        respect_mask: true,
    })
}

/// A flag that must come from the command line or the config file.
fn required<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| usage(format!("--{flag} is required")))
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(usage(format!("--{name} must be at least 1")))
    } else {
        Ok(())
    }
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let out = required(&a.out, "out")?;
    positive("batch-size", a.batch_size)?;
    let mut train = load(&a.data, Split::Train)?;
    if let Some(n) = a.train_limit {
        train = train.head(n)?;
    }
    let test = load(&a.data, Split::Test)?;
    let model = match a.arch {
        Arch::Mlp => {
            let input: usize = train.images.shape()[1..].iter().product();
            let mut widths = vec![input];
            widths.extend(&a.hidden);
            widths.push(train.classes);
            arch::mlp(&widths, a.common.seed)?
        }
        Arch::Cnn => {
            if train.images.shape()[1..] != [1, 28, 28] {
                return Err(usage("the reference CNN expects 1×28×28 inputs"));
            }
            arch::reference_cnn(a.common.seed)?
        }
    };
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr as f32,
        momentum: a.momentum as f32,
        batch_size: a.batch_size,
        seed: a.common.seed,
        respect_mask: false,
    };
    let trained = train_sgd(&model, &train, &cfg)?;
    let acc = evaluate_accuracy(&trained, &test)?;
    save_model(&trained, out)?;
    let prov = out.with_extension("json");
    write_with_provenance(
        &prov,
        "train",
        a,
        json!({ "test_accuracy": acc, "model": out }),
    )?;
    println!("test accuracy {acc:.4}");
    println!("wrote {} and {}", out.display(), prov.display());
    Ok(())
}

pub fn prune(a: &PruneArgs) -> Result<()> {
    let (model_path, ratio, out) = (
        required(&a.model, "model")?,
        *required(&a.ratio, "ratio")?,
        required(&a.out, "out")?,
    );
    require_file(model_path, "model")?;
    if !(0.0..=1.0).contains(&ratio) {
        return Err(usage(format!("--ratio {} is outside [0, 1]", ratio)));
    }
    let model = load_model(model_path)?;
    let pruned = match &a.layers {
        Some(block) => magnitude_prune(&model, block, ratio).map_err(usage)?,
        None => rfsim::harness::prune_layerwise(&model, ratio)?,
    };
    let pruned = match finetune_config(&a.finetune, a.common.seed) {
        Some(cfg) => train_sgd(&pruned, &load(&a.data, Split::Train)?, &cfg)?,
        None => pruned,
    };
    save_model(&pruned, out)?;
    let rp = prune_ratio(&pruned);
    let prov = out.with_extension("json");
    write_with_provenance(
        &prov,
        "prune",
        a,
        json!({ "prune_ratio": rp, "model": out }),
    )?;
    println!("prune ratio {rp:.4}");
    println!("wrote {} and {}", out.display(), prov.display());
    Ok(())
}

fn parse_blocks(s: &str) -> Result<Vec<Vec<usize>>> {
    s.split(';')
        .map(|g| {
            g.split(',')
                .map(|t| {
                    t.trim()
                        .parse::<usize>()
                        .map_err(|_| usage(format!("bad layer index `{t}` in --blocks")))
                })
                .collect()
        })
        .collect()
}

pub fn search(a: &SearchArgs, exec: Execution) -> Result<()> {
    let model_path = required(&a.model, "model")?;
    require_file(model_path, "model")?;
    positive("trials", a.trials)?;
    let params = SearchParams {
        th: a.th / 100.0,
        ratios: a.ratios.0.clone(),
    };
    params.validate().map_err(usage)?;
    let faults = fault_models(&[a.fault_rate], &a.faults)?[0];
    let cfg = PruneSearchConfig {
        params,
        trials: a.trials,
        injection: injection(a.scheme, faults, &a.hardware)?,
        seed: a.common.seed,
        size_classes: a.blocks.as_deref().map(parse_blocks).transpose()?,
        finetune: finetune_config(&a.finetune, a.common.seed),
    };
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| model_path.with_extension("best.rfsm"));
    let trace_path = a
        .trace
        .clone()
        .unwrap_or_else(|| out.with_extension("trace.jsonl"));

    let model = load_model(model_path)?;
    let data = load(&a.data, Split::Test)?;
    let train = match cfg.finetune {
        Some(_) => Some(load(&a.data, Split::Train)?),
        None => None,
    };
    let (best, trace) =
        run_search(&model, &data, train.as_ref(), &cfg, exec).map_err(|e| match e {
            rfsim::Error::InvalidConfig(_) => usage(e),
            e => e.into(),
        })?;
    save_model(&best, &out)?;

    let mut log =
        serde_json::to_vec(&json!({ "event": "config", "provenance": provenance("search", a)? }))?;
    log.push(b'\n');
    trace.write_jsonl(&mut log)?;
    fs::write(&trace_path, log).with_context(|| format!("writing {}", trace_path.display()))?;
    write_with_provenance(
        &out.with_extension("json"),
        "search",
        a,
        json!({ "best_round": trace.best_round, "prune_ratio": prune_ratio(&best), "trace": trace_path }),
    )?;

    if let Some(b) = trace.baseline {
        println!("baseline  acc {:.4} ± {:.4}", b.mean, b.std);
    }
    for r in &trace.rounds {
        println!(
            "round {:>2}  ratio {:.2}  blocks {:?}  acc {:.4} ± {:.4}  {:?}{}",
            r.round,
            r.ratio,
            r.active_blocks,
            r.accuracy.mean,
            r.accuracy.std,
            r.decision,
            r.popped_block
                .map_or(String::new(), |b| format!(" (drop block {b})")),
        );
    }
    println!(
        "best round {:?}, prune ratio {:.4}",
        trace.best_round,
        prune_ratio(&best)
    );
    println!("wrote {} and {}", out.display(), trace_path.display());
    Ok(())
}

pub fn inject(a: &InjectArgs, exec: Execution) -> Result<()> {
    let model_path = required(&a.model, "model")?;
    require_file(model_path, "model")?;
    positive("trials", a.trials)?;
    let faults = fault_models(&[a.fault_rate], &a.faults)?[0];
    let cfg = injection(a.scheme, faults, &a.hardware)?;
    let model = load_model(model_path)?;
    let data = load(&a.data, Split::Test)?;
    let s = evaluate_with_faults(&model, &cfg, &data, a.trials, a.common.seed, exec)?;
    println!(
        "{} p_off {} p_on {}: clean {:.4}  mean {:.4} ± {:.4} (se {:.4})  min {:.4}  max {:.4}  mismatch cell {:.5} weight {:.5}",
        a.scheme,
        faults.p_off(),
        faults.p_on(),
        s.clean_accuracy,
        s.acc_mean,
        s.acc_std,
        s.standard_error(),
        s.acc_min,
        s.acc_max,
        s.mismatch_cell,
        s.mismatch_weight
    );
    if let Some(out) = &a.out {
        write_with_provenance(out, "inject", a, json!({ "stats": s }))?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

pub fn sweep_cmd(a: &SweepArgs, exec: Execution) -> Result<()> {
    let model_path = required(&a.model, "model")?;
    require_file(model_path, "model")?;
    require_dir(&a.data.data_dir, "dataset directory")?;
    let finetune = finetune_config(&a.finetune, a.common.seed).map(|train| Finetune {
        dataset: dataset_spec(&a.data, Split::Train),
        train,
    });
    let spec = ExperimentSpec {
        model: model_path.clone(),
        dataset: dataset_spec(&a.data, Split::Test),
        schemes: a.scheme.clone(),
        faults: fault_models(&a.rates.0, &a.faults)?,
        ratios: a.ratios.0.clone(),
        trials: a.trials,
        seed: a.common.seed,
        out: a.out.clone(),
        tile_rows: a.hardware.tile_rows,
        tile_cols: a.hardware.tile_cols,
        selection: if a.hardware.all_cells {
            CellSelection::All
        } else {
            CellSelection::Occupied
        },
        fixed_device: a.hardware.fixed_device,
        eval_subset: None,
        finetune,
    };
    spec.validate().map_err(usage)?;
    let report = sweep(&spec, exec)?;

    // Fold the CLI config into the JSON companion written by the harness.
    let json_path = spec.json_path();
    let mut v = serde_json::to_value(&report)?;
    if let (Some(obj), Value::Object(p)) = (v.as_object_mut(), provenance("sweep", a)?) {
        obj.extend(p);
    }
    write_json(&json_path, &v)?;

    let mut failed = 0;
    for r in &report.points {
        match r.stats() {
            Some(s) => println!(
                "{:<12} p_off {:<8} p_on {:<8} ratio {:<5} acc {:.4} ± {:.4}",
                r.point.scheme.name(),
                r.point.faults.p_off(),
                r.point.faults.p_on(),
                r.point.prune_ratio,
                s.acc_mean,
                s.acc_std
            ),
            None => {
                failed += 1;
                eprintln!("grid point {} failed: {:?}", r.point.id, r.outcome);
            }
        }
    }
    println!(
        "{} points ({} resumed); wrote {} and {}",
        report.points.len(),
        report.environment.resumed_points,
        spec.out.display(),
        json_path.display()
    );
    if failed > 0 {
        anyhow::bail!("{failed} grid point(s) failed; rerun to retry them");
    }
    Ok(())
}

pub fn verify(a: &VerifyArgs, exec: Execution) -> Result<()> {
    positive("cells", a.cells)?;
    positive("trials", a.trials)?;
    for &r in &a.ratio.0 {
        if !(0.0..=1.0).contains(&r) {
            return Err(usage(format!("--ratio {r} is outside [0, 1]")));
        }
    }
    let faults = fault_models(&a.rate.0, &a.faults)?;
    let rows = verify_expectation(a.cells, &faults, &a.ratio.0, a.trials, a.common.seed, exec)?;
    println!(
        "{:>8} {:>8} {:>6} {:>10} {:>10} {:>7}",
        "p_off", "p_on", "R_p", "E'", "empirical", "z"
    );
    for r in &rows {
        println!(
            "{:>8.5} {:>8.5} {:>6.3} {:>10.6} {:>10.6} {:>7.2}",
            r.p_off, r.p_on, r.prune_ratio, r.expected, r.empirical, r.z
        );
    }
    if let Some(out) = &a.out {
        let mut csv =
            String::from("p_off,p_on,prune_ratio,weights,trials,expected,empirical,std_error,z\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.p_off,
                r.p_on,
                r.prune_ratio,
                r.weights,
                r.trials,
                r.expected,
                r.empirical,
                r.std_error,
                r.z
            ));
        }
        fs::write(out, csv).with_context(|| format!("writing {}", out.display()))?;
        write_with_provenance(
            &out.with_extension("json"),
            "verify-expectation",
            a,
            json!({ "rows": rows }),
        )?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn describe_model(model: &Model) -> Value {
    let layers: Vec<Value> = model
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let zeros = l.weights().map_or(0, |w| w.count_zeros());
            json!({
                "index": i,
                "kind": l.kind,
                "params": l.parameter_count(),
                "zeros": zeros,
                "masked": l.mask().is_some(),
            })
        })
        .collect();
    json!({
        "name": model.name,
        "input_shape": model.input_shape,
        "classes": model.classes,
        "weights": model.weight_count(),
        "prune_ratio": prune_ratio(model),
        "layers": layers,
    })
}

pub fn inspect(a: &InspectArgs) -> Result<()> {
    if a.model.is_none() && a.data_dir.is_none() {
        return Err(usage("inspect needs --model and/or --data-dir"));
    }
    let mut out = serde_json::Map::new();
    if let Some(path) = &a.model {
        require_file(path, "model")?;
        out.insert("model".into(), describe_model(&load_model(path)?));
    }
    if let Some(dir) = &a.data_dir {
        let data = DataArgs {
            data_dir: dir.clone(),
            dataset: a.dataset,
            eval_subset: None,
        };
        let mut sets = serde_json::Map::new();
        for split in [Split::Train, Split::Test] {
            let d = load(&data, split)?;
            let mut counts = vec![0usize; d.classes];
            for &l in &d.labels {
                counts[l as usize] += 1;
            }
            sets.insert(
                format!("{split:?}").to_lowercase(),
                json!({ "samples": d.len(), "shape": &d.images.shape()[1..], "class_counts": counts }),
            );
        }
        out.insert("dataset".into(), Value::Object(sets));
    }
    let text = serde_json::to_string_pretty(&Value::Object(out))?;
    // a closed pipe (`| head`) is not an error
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}
