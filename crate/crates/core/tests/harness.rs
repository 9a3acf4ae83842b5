mod common;

use std::fs;
use std::path::Path;

use rfsim::exec::Execution;
use rfsim::faults::{CellSelection, FaultModel};
use rfsim::harness::{
    evaluate_with_faults, sweep_with, DatasetSpec, ExperimentSpec, InjectionConfig, Split,
};
use rfsim::mapping::MappingScheme;
use rfsim::nn::evaluate_accuracy;

fn spec(
    out: &Path,
    schemes: Vec<MappingScheme>,
    faults: Vec<FaultModel>,
    ratios: Vec<f64>,
    trials: usize,
) -> ExperimentSpec {
    ExperimentSpec {
        model: "synthetic.rfsm".into(),
        dataset: DatasetSpec::mnist("synthetic", Split::Test),
        schemes,
        faults,
        ratios,
        trials,
        seed: 42,
        out: out.to_path_buf(),
        tile_rows: 16,
        tile_cols: 16,
        selection: CellSelection::Occupied,
        fixed_device: false,
        eval_subset: None,
        finetune: None,
    }
}

fn rate(r: f64) -> FaultModel {
    FaultModel::from_total_rate(r, 5.2).unwrap()
}

#[test]
fn single_point_sweep_equals_direct_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let model = common::trained_model();
    let data = common::test_set();
    let s = spec(
        &dir.path().join("one.csv"),
        vec![MappingScheme::Differential],
        vec![rate(0.05)],
        vec![0.0],
        7,
    );
    let report = sweep_with(&s, &model, &data, None, Execution::Parallel).unwrap();
    let (point, stats) = report.ok_points().next().unwrap();

    let direct = evaluate_with_faults(
        &model,
        &s.injection(MappingScheme::Differential, rate(0.05)),
        &data,
        7,
        point.seed,
        Execution::Sequential,
    )
    .unwrap();
    assert_eq!(stats, &direct);
}

#[test]
fn grid_seeds_follow_point_ids() {
    let s = spec(
        Path::new("x.csv"),
        vec![MappingScheme::TwoColumn, MappingScheme::Offset],
        vec![rate(0.01), rate(0.02)],
        vec![0.0, 0.5],
        1,
    );
    let grid = s.grid();
    assert_eq!(grid.len(), 8);
    for (i, p) in grid.iter().enumerate() {
        assert_eq!(p.id, i);
        assert_eq!(p.seed, rfsim::rng::derive_seed(42, &[i as u64]));
    }
    // scheme-major, then ratio, then fault model
    assert_eq!(grid[3].scheme, MappingScheme::TwoColumn);
    assert_eq!(grid[3].prune_ratio, 0.5);
    assert_eq!(grid[3].faults, rate(0.02));
    assert_eq!(grid[4].scheme, MappingScheme::Offset);
}

#[test]
fn resume_recomputes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let model = common::trained_model();
    let data = common::test_set();
    let out = dir.path().join("r.csv");
    let s = spec(
        &out,
        vec![MappingScheme::TwoColumn, MappingScheme::Differential],
        vec![rate(0.01), rate(0.05)],
        vec![0.0, 0.5],
        5,
    );

    let first = sweep_with(&s, &model, &data, None, Execution::Parallel).unwrap();
    assert_eq!(first.environment.computed_points, 8);
    let csv = fs::read(&out).unwrap();

    let second = sweep_with(&s, &model, &data, None, Execution::Parallel).unwrap();
    assert_eq!(second.environment.computed_points, 0);
    assert_eq!(second.environment.resumed_points, 8);
    assert_eq!(fs::read(&out).unwrap(), csv);

    // Interrupted run: keep the header and three records, tear the fourth.
    let points = fs::read_to_string(s.points_path()).unwrap();
    let lines: Vec<&str> = points.lines().collect();
    let torn = format!(
        "{}\n{}",
        lines[..4].join("\n"),
        &lines[4][..lines[4].len() / 2]
    );
    fs::write(s.points_path(), torn).unwrap();
    let third = sweep_with(&s, &model, &data, None, Execution::Sequential).unwrap();
    assert_eq!(third.environment.resumed_points, 3);
    assert_eq!(third.environment.computed_points, 5);
    assert_eq!(fs::read(&out).unwrap(), csv);
}

#[test]
fn resume_refuses_a_different_spec() {
    let dir = tempfile::tempdir().unwrap();
    let model = common::trained_model();
    let data = common::test_set();
    let out = dir.path().join("r.csv");
    let mut s = spec(
        &out,
        vec![MappingScheme::TwoColumn],
        vec![rate(0.01)],
        vec![0.0],
        2,
    );
    sweep_with(&s, &model, &data, None, Execution::Parallel).unwrap();
    s.trials = 3;
    assert!(sweep_with(&s, &model, &data, None, Execution::Parallel).is_err());
}

#[test]
fn execution_strategy_does_not_change_reports() {
    let model = common::trained_model();
    let data = common::test_set();
    let run = |exec: Execution| {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(
            &dir.path().join("r.csv"),
            vec![MappingScheme::Offset, MappingScheme::Differential],
            vec![rate(0.02)],
            vec![0.0, 0.3],
            6,
        );
        sweep_with(&s, &model, &data, None, exec).unwrap();
        fs::read(dir.path().join("r.csv")).unwrap()
    };
    assert_eq!(run(Execution::Sequential), run(Execution::Parallel));
}

#[test]
fn faults_never_help_on_average() {
    let model = common::trained_model();
    let data = common::test_set();
    let clean = evaluate_accuracy(&model, &data).unwrap();
    assert!(
        clean > 0.9,
        "synthetic task should be learnable, got {clean}"
    );
    for scheme in [
        MappingScheme::TwoColumn,
        MappingScheme::Offset,
        MappingScheme::Differential,
    ] {
        let cfg = InjectionConfig::new(scheme, rate(0.01));
        let zero = evaluate_with_faults(
            &model,
            &InjectionConfig::new(scheme, FaultModel::none()),
            &data,
            1,
            0,
            Execution::Parallel,
        )
        .unwrap();
        let faulty =
            evaluate_with_faults(&model, &cfg, &data, 100, 3, Execution::Parallel).unwrap();
        assert_eq!(zero.acc_mean, clean);
        assert!(
            zero.acc_mean >= faulty.acc_mean,
            "{scheme}: {} < {}",
            zero.acc_mean,
            faulty.acc_mean
        );
    }
}

#[test]
fn every_cell_stuck_on_destroys_two_column() {
    let model = common::trained_model();
    let data = common::test_set();
    let all_on = FaultModel::new(0.0, 1.0).unwrap();
    let s = evaluate_with_faults(
        &model,
        &InjectionConfig::new(MappingScheme::TwoColumn, all_on),
        &data,
        3,
        0,
        Execution::Parallel,
    )
    .unwrap();
    // Every effective weight is 1 − 1 = 0, so the network outputs its biases.
    assert!(s.acc_mean <= 0.2, "{}", s.acc_mean);
    assert!(s.acc_std < 1e-12);
    assert_eq!(s.mismatch_cell, 1.0);
}
