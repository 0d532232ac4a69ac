//! Worked examples for every operation, each checked against a hand value or
//! an independent oracle from `common`.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use rand::Rng;

use crate::common::*;
use crate::{dirichlet_recovery, scratch, temperature_recovery, Checks};
use trajcal::calibration::{
    apply_dirichlet, apply_temperature, cross_entropy, dirichlet_gradient, dirichlet_objective, fit_dirichlet,
    fit_temperature, mean_cross_entropy, softmax, BoundHit, CalibrationFile, CalibrationMap, DirichletMap,
    LabeledLogits, OptimizerConfig, RegularizerConfig, TemperatureParam,
};
use trajcal::data_model::{
    average_logits, load_trajectories, split_view, write_trajectories, EpochWindow, LogitRecord, Split,
    TrajectoryStore,
};
use trajcal::fusion::{fuse_all, fuse_study, write_study_map, StudyGroup};
use trajcal::metrics::{
    aurc, aurc_with_selector, balanced_accuracy, balanced_ece, balanced_mae, coverage, predicted_class,
    read_predictions, selective_balanced_accuracy, subgroup_confidence_report, write_predictions, Level,
    Prediction, PredictionSet, SelectiveConfig, ABSENT_TAG,
};
use trajcal::pipeline::{cmd_simulate, cmd_train_toy, PipelineConfig};
use trajcal::pseudo_label::{
    make_onehot, make_pseudo_d, make_pseudo_t, make_rt4u, read_pseudo_labels, write_pseudo_labels, Method,
    PseudoLabelSet,
};
use trajcal::simulator::{
    predict_toy, read_dataset, simulate_dataset, simulate_trajectories, train_toy, Manifest, SimConfig,
    SyntheticDataset, Targets, ToyModel, ToyTrainConfig, VideoRow,
};

pub fn run_all(ck: &mut Checks) {
    data_model(ck);
    calibration(ck);
    pseudo_label(ck);
    metrics(ck);
    fusion_examples(ck);
    fusion_sets(ck);
    simulator(ck);
    cli(ck);
}

const LN2: f64 = std::f64::consts::LN_2;

fn store(records: Vec<Vec<LogitRecord>>) -> TrajectoryStore {
    TrajectoryStore::from_records(records.into_iter().flatten().collect()).unwrap()
}

fn write_records(path: &Path, records: &[LogitRecord]) {
    let text: String = records
        .iter()
        .map(|r| serde_json::to_string(r).unwrap() + "\n")
        .collect();
    std::fs::write(path, text).unwrap();
}

fn err_text<T: std::fmt::Debug>(r: trajcal::Result<T>) -> String {
    match r {
        Ok(v) => format!("unexpected success: {v:?}"),
        Err(e) => e.to_string(),
    }
}

fn data_model(ck: &mut Checks) {
    let dir = scratch("examples-data-model");

    let mut grid = trajectory("a", Split::Train, 0, &[&[1.0, 0.0, 0.0], &[2.0, 0.0, 0.0], &[3.0, 0.0, 0.0]]);
    grid.extend(trajectory("b", Split::Val, 2, &[&[0.0, 0.0, 1.0], &[0.0, 0.5, 1.0], &[0.25, 0.0, 1.0]]));
    let path = dir.join("grid.jsonl");
    write_records(&path, &grid);
    let loaded = load_trajectories(&path).unwrap();
    ck.check("2x3 grid loads with T=3", loaded.num_epochs() == 3);
    ck.check("2x3 grid loads with C=3", loaded.num_classes() == 3);
    let again = dir.join("again.jsonl");
    write_trajectories(&loaded, &again).unwrap();
    ck.check("2x3 grid round-trips", load_trajectories(&again).unwrap() == loaded);

    let mut ragged = trajectory("a", Split::Train, 0, &[&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]]);
    ragged.extend(trajectory("b", Split::Train, 0, &[&[1.0, 0.0, 0.0][..]; 3]));
    write_records(&path, &ragged);
    let e = err_text(load_trajectories(&path));
    ck.check(&format!("ragged epochs rejected ({e})"), e.contains("missing epochs"));

    let mut short = grid.clone();
    short[4].logits = vec![1.0, 2.0];
    write_records(&path, &short);
    let e = err_text(load_trajectories(&path));
    ck.check(&format!("short logits rejected ({e})"), e.contains("inconsistent class count"));

    let s = store(vec![
        trajectory("sym", Split::Train, 0, &[&[1.0, 3.0], &[3.0, 1.0]]),
    ]);
    ck.close_vec("average of (1,3),(3,1)", &average_logits(&s, "sym", None).unwrap(), &[2.0, 2.0], 0.0);
    let s = store(vec![trajectory("one", Split::Train, 0, &[&[0.5, -0.5]])]);
    ck.close_vec("average of one epoch", &average_logits(&s, "one", None).unwrap(), &[0.5, -0.5], 0.0);
    let s = store(vec![trajectory(
        "three",
        Split::Train,
        0,
        &[&[0.0, 0.0, 6.0], &[0.0, 3.0, 3.0], &[3.0, 0.0, 0.0]],
    )]);
    ck.close_vec("average of three epochs", &average_logits(&s, "three", None).unwrap(), &[1.0, 1.0, 3.0], 1e-15);

    let z: &[&[f64]] = &[&[0.0, 1.0]];
    let mixed = store(vec![
        trajectory("t1", Split::Train, 0, z),
        trajectory("t2", Split::Train, 1, z),
        trajectory("t3", Split::Train, 0, z),
        trajectory("v1", Split::Val, 1, z),
        trajectory("v2", Split::Val, 0, z),
    ]);
    ck.check("val view has 2 samples", split_view(&mixed, Split::Val).len() == 2);
    let train_only = split_view(&mixed, Split::Train);
    ck.check("test view of train-only store is empty", split_view(&train_only, Split::Test).is_empty());
    ck.check("train view is idempotent", split_view(&train_only, Split::Train) == train_only);
}

fn calibration(ck: &mut Checks) {
    ck.close_vec("softmax(0,0,0)", &softmax(&[0.0, 0.0, 0.0]).unwrap(), &[1.0 / 3.0; 3], 1e-15);
    ck.close_vec("softmax(ln 2, 0)", &softmax(&[LN2, 0.0]).unwrap(), &[2.0 / 3.0, 1.0 / 3.0], 1e-15);
    let p = softmax(&[1000.0, 0.0]).unwrap();
    ck.check("softmax(1000, 0) finite", p.iter().all(|v| v.is_finite()));
    ck.close_vec("softmax(1000, 0)", &p, &[1.0, 0.0], 1e-15);

    ck.close("CE((0,0), 0)", cross_entropy(&[0.0, 0.0], 0).unwrap(), LN2, 1e-15);
    ck.close("CE((ln 3, 0), 0)", cross_entropy(&[3f64.ln(), 0.0], 0).unwrap(), (4.0f64 / 3.0).ln(), 1e-15);
    let batch = vec![
        LabeledLogits::new(vec![1.0, 0.0, -1.0], 0),
        LabeledLogits::new(vec![0.0, 2.0, 0.5], 2),
        LabeledLogits::new(vec![-0.3, 0.3, 0.0], 1),
        LabeledLogits::new(vec![4.0, -2.0, 1.0], 1),
        LabeledLogits::new(vec![0.0, 0.0, 0.0], 2),
    ];
    let hand = batch.iter().map(|s| oracle_ce(&s.logits, s.label)).sum::<f64>() / 5.0;
    ck.close("mean CE over 5 samples", mean_cross_entropy(&batch).unwrap(), hand, 1e-14);

    let t = |g: f64| TemperatureParam::new(g).unwrap();
    ck.close_vec("gamma=1 identity", &apply_temperature(t(1.0), &[2.0, 0.0, -1.0]), &[2.0, 0.0, -1.0], 0.0);
    let half = apply_temperature(t(0.5), &[2.0, 0.0]);
    ck.close_vec("gamma=0.5 scaling", &half, &[1.0, 0.0], 0.0);
    let e = std::f64::consts::E;
    ck.close_vec("gamma=0.5 softmax", &softmax(&half).unwrap(), &[e / (e + 1.0), 1.0 / (e + 1.0)], 1e-15);
    // Reported fitted temperature, used as a format example.
    ck.close_vec(
        "gamma=0.698",
        &apply_temperature(t(0.698), &[1.0, -1.0, 0.0]),
        &[0.698, -0.698, 0.0],
        1e-15,
    );

    let v = [1.0, 2.0, 3.0];
    ck.close_vec("identity Dirichlet map", &apply_dirichlet(&DirichletMap::identity(3), &v).unwrap(), &v, 0.0);
    ck.close_vec(
        "diag(2,2,2) map",
        &apply_dirichlet(&DirichletMap::scalar(3, 2.0), &[1.0, 0.0, -1.0]).unwrap(),
        &[2.0, 0.0, -2.0],
        0.0,
    );
    let reported = reported_map();
    ck.close_vec(
        "reported map on e0",
        &apply_dirichlet(&reported, &[1.0, 0.0, 0.0]).unwrap(),
        &[0.944 - 0.026, -0.083 + 0.003, 0.061 + 0.029],
        1e-15,
    );

    let reg = RegularizerConfig::default();
    let id = DirichletMap::identity(3);
    ck.check(
        "objective at identity equals mean CE exactly",
        dirichlet_objective(&id, &batch, &reg).unwrap() == mean_cross_entropy(&batch).unwrap(),
    );
    let shifted = DirichletMap::from_rows(id.rows(), vec![1.0, 0.0, 0.0]).unwrap();
    let one = [LabeledLogits::new(vec![0.0; 3], 0)];
    let reg1 = RegularizerConfig { lambda1: 1.0, lambda2: 0.0 };
    ck.close(
        "objective with b=e0, lambda1=1",
        dirichlet_objective(&shifted, &one, &reg1).unwrap(),
        oracle_ce(&[1.0, 0.0, 0.0], 0) + 1.0 / 3.0,
        1e-15,
    );
    let g = dirichlet_gradient(&id, &one, &reg).unwrap();
    ck.close_vec("bias gradient at v=0", &g.bias, &[1.0 / 3.0 - 1.0, 1.0 / 3.0, 1.0 / 3.0], 1e-15);
    ck.close_vec("matrix gradient at v=0", &g.matrix, &[0.0; 9], 0.0);

    let opt = OptimizerConfig::default();
    let mut r = rng(11);
    let calibrated = calibrated_batch(&mut r, 5000, 3, 2.0);
    let fit = fit_temperature(&calibrated, &opt).unwrap().gamma.gamma();
    let grid = grid_gamma(&calibrated, 0.05, 20.0, 0.001);
    ck.close("calibrated batch: fitted gamma", fit, 1.0, 0.05);
    ck.close("calibrated batch: grid gamma", grid, 1.0, 0.05);

    let opposite = [LabeledLogits::new(vec![2.0, 0.0], 0), LabeledLogits::new(vec![2.0, 0.0], 1)];
    let fit = fit_temperature(&opposite, &opt).unwrap();
    ck.check(
        &format!("opposite labels reach the lower bound (gamma {})", fit.gamma.gamma()),
        fit.bound_hit == Some(BoundHit::Lower) && fit.gamma.gamma() == 0.05,
    );

    let (fit, grid) = temperature_recovery(3.0);
    ck.check(
        &format!("logits x3: gamma {fit} within 10% of 1/3 (grid {grid})"),
        (fit - 1.0 / 3.0).abs() <= 0.1 / 3.0 && (grid - 1.0 / 3.0).abs() <= 0.1 / 3.0,
    );

    let map = dirichlet_recovery();
    for (i, want) in [0.5, 1.0, 2.0].into_iter().enumerate() {
        ck.close(&format!("recovered A[{i}][{i}]"), map.a(i, i), want, 0.15 * want);
    }
    let off = (0..9).filter(|k| k % 4 != 0).map(|k| map.matrix()[k].abs()).fold(0.0, f64::max);
    ck.check(&format!("recovered off-diagonal {off} < 0.1"), off < 0.1);

    let heavy = RegularizerConfig { lambda1: 1e6, lambda2: 1e6 };
    let mut r = rng(12);
    let data = calibrated_batch(&mut r, 300, 3, 2.0);
    let fit = fit_dirichlet(&data, &heavy, &opt).unwrap();
    let off = (0..9).filter(|k| k % 4 != 0).map(|k| fit.map.matrix()[k].abs()).fold(0.0, f64::max);
    let bias = fit.map.bias().iter().fold(0.0f64, |m, b| m.max(b.abs()));
    ck.check(&format!("huge penalties: |offdiag| {off:.2e} and |b| {bias:.2e} < 1e-2"), off < 1e-2 && bias < 1e-2);

    let mut r = rng(13);
    let single: Vec<LabeledLogits> = (0..50)
        .map(|_| {
            let noise: Vec<f64> = (0..3).map(|_| 0.3 * normal(&mut r)).collect();
            LabeledLogits::new(vec![1.0 + noise[0], noise[1], noise[2]], 0)
        })
        .collect();
    let fit = fit_dirichlet(&single, &reg, &opt).unwrap();
    ck.check("single-class validation reports non-convergence", !fit.converged);
}

/// The fitted matrix and bias reported for the three-class problem.
fn reported_map() -> DirichletMap {
    DirichletMap::from_rows(
        vec![
            vec![0.944, 0.070, -0.064],
            vec![-0.083, 0.621, 0.085],
            vec![0.061, -0.056, 0.591],
        ],
        vec![-0.026, 0.003, 0.029],
    )
    .unwrap()
}

fn pseudo_label(ck: &mut Checks) {
    let s = store(vec![trajectory("a", Split::Train, 0, &[&[2.0, 0.0], &[0.0, 2.0]])]);
    ck.close_vec("rt4u symmetric", make_rt4u(&s, None).unwrap().get("a").unwrap(), &[0.5, 0.5], 1e-15);
    let s = store(vec![trajectory("a", Split::Train, 1, &[&[0.0, 3f64.ln()]])]);
    ck.close_vec("rt4u single epoch", make_rt4u(&s, None).unwrap().get("a").unwrap(), &[0.25, 0.75], 1e-15);
    let epochs: [&[f64]; 3] = [&[1.0, 0.0, -1.0], &[0.2, 0.8, 0.1], &[-2.0, 0.5, 3.0]];
    let s = store(vec![trajectory("a", Split::Train, 2, &epochs)]);
    let hand: Vec<f64> = (0..3)
        .map(|k| epochs.iter().map(|z| oracle_softmax(z)[k]).sum::<f64>() / 3.0)
        .collect();
    ck.close_vec("rt4u over three epochs", make_rt4u(&s, None).unwrap().get("a").unwrap(), &hand, 1e-15);

    let t = |g: f64| TemperatureParam::new(g).unwrap();
    let avg = average_logits(&s, "a", None).unwrap();
    ck.check(
        "pseudo_t at gamma=1 equals softmax of averaged logits",
        make_pseudo_t(&s, t(1.0), None).unwrap().get("a").unwrap() == softmax(&avg).unwrap().as_slice(),
    );
    let cold = make_pseudo_t(&s, t(0.05), None).unwrap();
    let dist = cold.get("a").unwrap().iter().map(|p| (p - 1.0 / 3.0).abs()).fold(0.0, f64::max);
    ck.check(&format!("pseudo_t at gamma_min near uniform ({dist:.4})"), dist < 0.05);
    let s2 = store(vec![trajectory("a", Split::Train, 0, &[&[3.0, 0.0], &[1.0, 0.0]])]);
    ck.close_vec(
        "pseudo_t gamma=0.5 on mean (2,0)",
        make_pseudo_t(&s2, t(0.5), None).unwrap().get("a").unwrap(),
        &[0.7311, 0.2689],
        5e-5,
    );

    ck.check(
        "pseudo_d identity equals softmax of averaged logits",
        make_pseudo_d(&s, &DirichletMap::identity(3), None).unwrap().get("a").unwrap()
            == softmax(&avg).unwrap().as_slice(),
    );
    let pd = make_pseudo_d(&s, &DirichletMap::scalar(3, 0.7), None).unwrap();
    let pt = make_pseudo_t(&s, t(0.7), None).unwrap();
    ck.check("pseudo_d scalar map equals pseudo_t", pd.entries == pt.entries);
    let e0 = store(vec![trajectory("a", Split::Train, 0, &[&[1.0, 0.0, 0.0]])]);
    ck.close_vec(
        "pseudo_d reported map on e0",
        make_pseudo_d(&e0, &reported_map(), None).unwrap().get("a").unwrap(),
        &oracle_softmax(&[0.944 - 0.026, -0.083 + 0.003, 0.061 + 0.029]),
        1e-15,
    );

    let eps = 1e-6;
    let e = eps / (1.0 + 3.0 * eps);
    let s3 = store(vec![trajectory("a", Split::Train, 2, &[&[0.0, 0.0, 0.0]])]);
    ck.close_vec("onehot label 2", make_onehot(&s3).unwrap().get("a").unwrap(), &[e, e, 1.0 - 2.0 * e], 1e-15);
    let s4 = store(vec![trajectory("a", Split::Train, 0, &[&[0.0, 0.0]])]);
    ck.close_vec("onehot label 0, C=2", make_onehot(&s4).unwrap().get("a").unwrap(), &[1.0, 0.0], 2e-6);

    let dir = scratch("examples-pseudo");
    let three = store(vec![
        trajectory("a", Split::Train, 0, &[&[1.0, 0.0, -1.0], &[0.5, 0.1, 0.0]]),
        trajectory("b", Split::Train, 1, &[&[0.0, 2.0, 0.0], &[0.3, 0.3, 0.1]]),
        trajectory("c", Split::Train, 2, &[&[0.1, 0.2, 0.3], &[-1.0, -1.0, 4.0]]),
    ]);
    let set = make_rt4u(&three, None).unwrap();
    let path = dir.join("rt4u.jsonl");
    write_pseudo_labels(&set, &path).unwrap();
    ck.check("pseudo-label file round-trips", read_pseudo_labels(&path).unwrap() == set);

    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut row: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
    let p0 = row["probs"][0].as_f64().unwrap();
    row["probs"][0] = serde_json::json!(p0 + 1e-3);
    lines[1] = row.to_string();
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    let e = err_text(read_pseudo_labels(&path));
    ck.check(&format!("vector off by 1e-3 rejected ({e})"), e.starts_with("line 2") || e.contains("line 2"));

    std::fs::write(&path, text.replace("\"rt4u\"", "\"mystery\"")).unwrap();
    let e = err_text(read_pseudo_labels(&path));
    ck.check(&format!("unknown method rejected ({e})"), e.contains("mystery") || e.contains("unknown"));
}

fn preds_from(labels: &[usize], probs: &[Vec<f64>]) -> PredictionSet {
    let c = probs[0].len();
    video_set(
        c,
        labels
            .iter()
            .zip(probs)
            .enumerate()
            .map(|(i, (&y, p))| prediction(&format!("p{i}"), y, p))
            .collect(),
    )
}

fn onehot_probs(classes: &[usize], c: usize) -> Vec<Vec<f64>> {
    classes
        .iter()
        .map(|&k| (0..c).map(|j| if j == k { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Probabilities whose argmax is `k` with confidence `conf` (rest shared).
fn peaked(k: usize, c: usize, conf: f64) -> Vec<f64> {
    (0..c)
        .map(|j| if j == k { conf } else { (1.0 - conf) / (c - 1) as f64 })
        .collect()
}

fn metrics(ck: &mut Checks) {
    ck.check("argmax (0.2,0.5,0.3)", predicted_class(&[0.2, 0.5, 0.3]) == 1);
    ck.check("argmax tie (0.4,0.4,0.2)", predicted_class(&[0.4, 0.4, 0.2]) == 0);
    ck.check("argmax full tie", predicted_class(&[1.0 / 3.0; 3]) == 0);

    let perfect = preds_from(&[0, 1, 2, 1], &onehot_probs(&[0, 1, 2, 1], 3));
    ck.close("perfect balanced accuracy", balanced_accuracy(&perfect).unwrap(), 1.0, 0.0);
    let hand = preds_from(&[0, 0, 1], &onehot_probs(&[0, 1, 1], 2));
    ck.close("balanced accuracy hand count", balanced_accuracy(&hand).unwrap(), 0.75, 1e-15);
    let zeros = preds_from(&[0, 1, 2], &onehot_probs(&[0, 0, 0], 3));
    ck.close("constant predictor balanced accuracy", balanced_accuracy(&zeros).unwrap(), 1.0 / 3.0, 1e-15);

    ck.close("perfect MAE", balanced_mae(&perfect).unwrap(), 0.0, 0.0);
    let hand = preds_from(&[0, 1], &onehot_probs(&[0, 2], 3));
    ck.close("MAE hand count", balanced_mae(&hand).unwrap(), 0.5, 1e-15);
    let worst = preds_from(&[2], &onehot_probs(&[0], 3));
    ck.close("MAE worst case", balanced_mae(&worst).unwrap(), 2.0, 0.0);

    let one = preds_from(&[0], &onehot_probs(&[0], 3));
    ck.close("ECE of a confident correct sample", balanced_ece(&one, 15).unwrap(), 0.0, 0.0);
    let two = preds_from(&[0, 0], &[peaked(0, 3, 0.8), peaked(0, 3, 0.8)]);
    ck.close("ECE of two 0.8-confident hits", balanced_ece(&two, 15).unwrap(), 0.2, 1e-12);

    let mut r = rng(21);
    let (mut labels, mut probs) = (Vec::new(), Vec::new());
    for _ in 0..10_000 {
        let z: Vec<f64> = (0..3).map(|_| 3.0 * normal(&mut r)).collect();
        let p = oracle_softmax(&z);
        labels.push(sample_categorical(&mut r, &p));
        probs.push(p);
    }
    let calibrated = preds_from(&labels, &probs);
    let ece = balanced_ece(&calibrated, 15).unwrap();
    ck.close("ECE matches bin oracle", ece, oracle_balanced_ece(&probs, &labels, 3, 15), 1e-12);
    ck.check(&format!("calibrated predictor ECE {ece:.4} < 0.02"), ece < 0.02);

    let cov = preds_from(
        &[0, 0, 0, 0],
        &[peaked(0, 3, 0.9), peaked(0, 3, 0.8), peaked(0, 3, 0.6), peaked(0, 3, 0.4)],
    );
    ck.close("coverage at 0.7", coverage(&cov, 0.7).unwrap(), 0.5, 0.0);
    ck.close("coverage below all", coverage(&cov, f64::NEG_INFINITY).unwrap(), 1.0, 0.0);
    ck.close("coverage at 1.0", coverage(&cov, 1.0).unwrap(), 0.0, 0.0);

    ck.close(
        "selective accuracy below all equals balanced accuracy",
        selective_balanced_accuracy(&calibrated, -1.0).unwrap(),
        balanced_accuracy(&calibrated).unwrap(),
        0.0,
    );
    let sel = preds_from(
        &[0, 1, 1, 0],
        &[peaked(0, 2, 0.95), peaked(1, 2, 0.9), peaked(0, 2, 0.7), peaked(1, 2, 0.6)],
    );
    ck.close("errors only below the median", selective_balanced_accuracy(&sel, 0.8).unwrap(), 1.0, 0.0);

    let cfg = SelectiveConfig::default();
    let grid_mean = (0..=50).map(|i| 0.5 + i as f64 / 100.0).sum::<f64>() / 51.0;
    let sure: Vec<usize> = (0..100).map(|i| i % 3).collect();
    let report = aurc(&preds_from(&sure, &onehot_probs(&sure, 3)), &cfg).unwrap();
    ck.check(
        "perfect predictor rows: accuracy 1 and coverage at target",
        report
            .rows
            .iter()
            .zip(&cfg.coverage_grid)
            .all(|(r, t)| r.accuracy == 1.0 && (r.coverage - t).abs() < 1e-12),
    );
    ck.close("perfect predictor AURC", report.aurc, grid_mean, 1e-12);
    ck.close("default grid mean", grid_mean, 0.75, 1e-12);

    let mut r = rng(22);
    let n = 10_000;
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
    let probs: Vec<Vec<f64>> = labels
        .iter()
        .map(|&y| {
            let k = if r.random::<bool>() { y } else { 1 - y };
            peaked(k, 2, r.random_range(0.5..1.0))
        })
        .collect();
    let coin = preds_from(&labels, &probs);
    let random_sel: Vec<f64> = (0..n).map(|_| r.random()).collect();
    let a = aurc_with_selector(&coin, &random_sel, &cfg).unwrap().aurc;
    ck.close("50% errors, independent selector", a, 0.5 * grid_mean, 0.02);

    let labels: Vec<usize> = (0..1000).map(|_| r.random_range(0..3)).collect();
    let probs: Vec<Vec<f64>> = labels
        .iter()
        .map(|&y| {
            let k = if r.random::<f64>() < 0.8 { y } else { (y + 1) % 3 };
            peaked(k, 3, r.random_range(0.4..1.0))
        })
        .collect();
    let base = preds_from(&labels, &probs);
    let oracle_sel: Vec<f64> = base
        .entries()
        .iter()
        .map(|p| f64::from(u8::from(oracle_argmax(&p.probs) == p.label)))
        .collect();
    let random_sel: Vec<f64> = (0..1000).map(|_| r.random()).collect();
    let oracle = aurc_with_selector(&base, &oracle_sel, &cfg).unwrap().aurc;
    let random = aurc_with_selector(&base, &random_sel, &cfg).unwrap().aurc;
    ck.check(&format!("oracle selector {oracle:.4} beats random {random:.4}"), oracle > random);

    let tagged = |i: usize, tag: Option<&str>, y: usize, p: Vec<f64>| {
        let mut pr = prediction(&format!("p{i}"), y, &p);
        if let Some(t) = tag {
            pr.tags.insert("bicuspid".into(), t.into());
        }
        pr
    };
    let all = video_set(3, (0..4).map(|i| tagged(i, Some("true"), 0, peaked(0, 3, 0.9))).collect());
    let rep = subgroup_confidence_report(&all, "bicuspid").unwrap();
    ck.check(
        "uniform subgroup gives one row of mean 0.9",
        rep.rows.len() == 1 && (rep.rows[0].mean_confidence - 0.9).abs() < 1e-12 && rep.rows[0].count == 4,
    );
    let four = video_set(
        3,
        vec![
            tagged(0, Some("true"), 0, peaked(0, 3, 0.9)),
            tagged(1, Some("true"), 0, peaked(0, 3, 0.7)),
            tagged(2, Some("true"), 1, peaked(0, 3, 0.6)),
            tagged(3, Some("false"), 2, peaked(2, 3, 0.8)),
            tagged(4, Some("false"), 2, peaked(1, 3, 0.5)),
            tagged(5, Some("false"), 0, peaked(2, 3, 0.4)),
        ],
    );
    let rep = subgroup_confidence_report(&four, "bicuspid").unwrap();
    let row = |t: &str, c: bool| rep.row(t, c).map(|r| (r.count, r.mean_confidence));
    ck.check("hand subgroup table has 4 rows", rep.rows.len() == 4);
    let want = [
        (("true", true), (2, 0.8)),
        (("true", false), (1, 0.6)),
        (("false", true), (1, 0.8)),
        (("false", false), (2, 0.45)),
    ];
    for ((t, c), (n, m)) in want {
        let got = row(t, c);
        ck.check(
            &format!("subgroup row {t}/{c}: {got:?}"),
            got.is_some_and(|(gn, gm)| gn == n && (gm - m).abs() < 1e-12),
        );
    }
    let half = video_set(
        3,
        (0..6)
            .map(|i| tagged(i, (i % 2 == 0).then_some("true"), 0, peaked(i % 3, 3, 0.7)))
            .collect(),
    );
    let rep = subgroup_confidence_report(&half, "bicuspid").unwrap();
    ck.check(
        "absent tags get their own rows and counts add up",
        rep.rows.iter().any(|r| r.tag_value == ABSENT_TAG) && rep.rows.iter().map(|r| r.count).sum::<usize>() == 6,
    );

    let dir = scratch("examples-metrics");
    let path = dir.join("preds.jsonl");
    write_predictions(&calibrated, &path).unwrap();
    let back = read_predictions(&path).unwrap();
    let lossless = back.len() == calibrated.len()
        && back.entries().iter().zip(calibrated.entries()).all(|(a, b)| {
            a.id == b.id && a.label == b.label && a.probs.iter().zip(&b.probs).all(|(x, y)| (x - y).abs() < 1e-12)
        });
    ck.check("prediction file round-trips to 12 digits", lossless);
}

pub fn fusion_examples(ck: &mut Checks) {
    let group = |members: &[&[f64]]| StudyGroup {
        study_id: "s".into(),
        label: 0,
        members: members
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("v{i}"), v.to_vec()))
            .collect(),
    };
    let mean2 = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| (x + y) / 2.0).collect() };

    let (a, b) = ([0.7, 0.2, 0.1], [0.9, 0.05, 0.05]);
    let fused = fuse_study(&group(&[&a, &b]), 0).unwrap();
    ck.check("all-normal study averages every member", fused == mean2(&a, &b));
    ck.close_vec("all-normal study hand value", &fused, &[0.8, 0.125, 0.075], 1e-15);

    let (a, b) = ([0.7, 0.2, 0.1], [0.2, 0.6, 0.2]);
    let fused = fuse_study(&group(&[&a, &b]), 0).unwrap();
    ck.check("single abnormal member is returned as is", fused == b.to_vec());

    let (a, b) = ([0.1, 0.7, 0.2], [0.1, 0.2, 0.7]);
    let fused = fuse_study(&group(&[&a, &b]), 0).unwrap();
    ck.check("two abnormal members are averaged", fused == mean2(&a, &b));
    ck.close_vec("two abnormal members hand value", &fused, &[0.1, 0.45, 0.45], 1e-15);
    ck.check("tied study predicts class 1", predicted_class(&fused) == 1);
}

fn fusion_sets(ck: &mut Checks) {
    let videos = video_set(
        3,
        vec![
            prediction("a1", 0, &[0.7, 0.2, 0.1]),
            prediction("a2", 0, &[0.9, 0.05, 0.05]),
            prediction("b1", 1, &[0.7, 0.2, 0.1]),
            prediction("b2", 1, &[0.2, 0.6, 0.2]),
        ],
    );
    let map: BTreeMap<String, String> = [("a1", "A"), ("a2", "A"), ("b1", "B"), ("b2", "B")]
        .into_iter()
        .map(|(v, s)| (v.to_string(), s.to_string()))
        .collect();
    let studies = fuse_all(&videos, &map, 0).unwrap();
    let direct = |ids: [&str; 2], label| {
        let members = ids
            .iter()
            .map(|id| {
                let p = videos.entries().iter().find(|p| p.id == *id).unwrap();
                (p.id.clone(), p.probs.clone())
            })
            .collect();
        fuse_study(&StudyGroup { study_id: String::new(), label, members }, 0).unwrap()
    };
    let by_id: BTreeMap<&str, &Prediction> = studies.entries().iter().map(|p| (p.id.as_str(), p)).collect();
    ck.check(
        "fuse_all yields one study-level entry per study",
        studies.level() == Level::Study && studies.len() == 2,
    );
    ck.check(
        "fuse_all agrees with fuse_study",
        by_id.get("A").is_some_and(|p| p.probs == direct(["a1", "a2"], 0) && p.label == 0)
            && by_id.get("B").is_some_and(|p| p.probs == direct(["b1", "b2"], 1) && p.label == 1),
    );

    let mut partial = map.clone();
    partial.remove("b2");
    ck.check("video absent from map is an error", fuse_all(&videos, &partial, 0).is_err());
    let conflicting = video_set(
        3,
        vec![prediction("a1", 0, &[0.7, 0.2, 0.1]), prediction("a2", 2, &[0.9, 0.05, 0.05])],
    );
    ck.check("conflicting member labels are an error", fuse_all(&conflicting, &map, 0).is_err());
}

fn zero_difficulty_config(seed: u64) -> SimConfig {
    SimConfig {
        difficulty_override: Some(0.0),
        label_noise_rate: 0.0,
        seed,
        ..SimConfig::default()
    }
}

fn train_accuracy(model: &ToyModel, dataset: &SyntheticDataset) -> f64 {
    let preds = predict_toy(model, &dataset.rows_in(Split::Train)).unwrap();
    balanced_accuracy(&preds).unwrap()
}

fn simulator(ck: &mut Checks) {
    let cfg = SimConfig { seed: 5, ..SimConfig::default() };
    ck.check(
        "fixed seed gives identical datasets",
        simulate_dataset(&cfg).unwrap() == simulate_dataset(&cfg).unwrap(),
    );
    let clean = simulate_dataset(&SimConfig { label_noise_rate: 0.0, ..cfg.clone() }).unwrap();
    ck.check(
        "no label noise keeps every recorded label",
        clean.rows.iter().all(|r| r.label == r.latent_class),
    );

    // Features at the class means plus unit noise cap any classifier at the
    // Bayes rate, so the toy trainer is checked against that limit.
    let easy_cfg = SimConfig { num_studies: 400, ..zero_difficulty_config(6) };
    let easy = simulate_dataset(&easy_cfg).unwrap();
    let (model, _) = train_toy(&easy, Targets::Recorded, &ToyTrainConfig { epochs: Some(300), ..Default::default() })
        .unwrap();
    let acc = train_accuracy(&model, &easy);
    let bayes = bayes_accuracy(3, 2.0, 400_000, 6);
    ck.check(
        &format!("zero difficulty: train accuracy {acc:.4} within 0.03 of the Bayes rate {bayes:.4}"),
        (acc - bayes).abs() < 0.03,
    );

    let noiseless = SimConfig {
        noise_scale: 0.0,
        num_studies: 20,
        ..zero_difficulty_config(7)
    };
    let ds = simulate_dataset(&noiseless).unwrap();
    let st = simulate_trajectories(&noiseless, &ds).unwrap();
    let m = noiseless.margin_max;
    let t_total = noiseless.num_epochs as f64;
    let mut ramps = true;
    let mut argmax_ok = true;
    for row in ds.rows.iter().filter(|r| r.split != Split::Test) {
        let sample = st.sample(&row.video_id).unwrap();
        for (t, z) in sample.logits.iter().enumerate() {
            let want: Vec<f64> = (0..3)
                .map(|k| if k == row.latent_class { m * (t + 1) as f64 / t_total } else { 0.0 })
                .collect();
            ramps &= z.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12);
            argmax_ok &= oracle_argmax(z) == row.latent_class;
        }
    }
    ck.check("noiseless easy logits ramp linearly to M", ramps);
    ck.check("noiseless easy argmax is the latent class at every epoch", argmax_ok);
    let rt4u = make_rt4u(&st, None).unwrap();
    ck.check(
        "noiseless easy rt4u argmax is the latent class",
        ds.rows_in(Split::Train)
            .iter()
            .all(|r| oracle_argmax(rt4u.get(&r.video_id).unwrap()) == r.latent_class),
    );

    let hardest = SimConfig {
        difficulty_override: Some(1.0),
        confusion_kappa: 1.0,
        ..noiseless.clone()
    };
    let ds = simulate_dataset(&hardest).unwrap();
    let st = simulate_trajectories(&hardest, &ds).unwrap();
    let rt4u = make_rt4u(&st, None).unwrap();
    let mut ok = true;
    for row in ds.rows_in(Split::Train) {
        let conf = hardest.confusable_class(row.latent_class);
        let last = st.sample(&row.video_id).unwrap().logits.last().unwrap().clone();
        ok &= last[row.latent_class] == 0.0 && (last[conf] - m).abs() < 1e-12;
        let p = rt4u.get(&row.video_id).unwrap();
        ok &= oracle_argmax(p) == conf && p[conf] > 0.5;
    }
    ck.check("hardest samples concentrate on the confusable class", ok);

    // Entropy keeps rising across difficulty quartiles only while the
    // confusable logit stays below the fading target logit. With kappa 0.7
    // they cross near d = 0.59, so the top quartile sharpens again.
    let ent_cfg = SimConfig {
        num_studies: 760,
        confusion_kappa: 0.3,
        seed: 8,
        ..SimConfig::default()
    };
    let ds = simulate_dataset(&ent_cfg).unwrap();
    let st = simulate_trajectories(&ent_cfg, &ds).unwrap();
    let rt4u = make_rt4u(&st, None).unwrap();
    let mut rows: Vec<&VideoRow> = ds.rows_in(Split::Train);
    rows.sort_by(|a, b| a.difficulty.total_cmp(&b.difficulty));
    let q = rows.len() / 4;
    let quartile_entropy: Vec<f64> = (0..4)
        .map(|i| {
            let chunk = &rows[i * q..if i == 3 { rows.len() } else { (i + 1) * q }];
            chunk.iter().map(|r| entropy(rt4u.get(&r.video_id).unwrap())).sum::<f64>() / chunk.len() as f64
        })
        .collect();
    ck.check(
        &format!("rt4u entropy rises over difficulty quartiles ({} samples): {quartile_entropy:.3?}", rows.len()),
        rows.len() >= 2000 && quartile_entropy.windows(2).all(|w| w[1] > w[0]),
    );

    let separable = separable_dataset();
    let (model, _) = train_toy(&separable, Targets::Recorded, &ToyTrainConfig::default()).unwrap();
    let acc = train_accuracy(&model, &separable);
    ck.check(&format!("separable data: train accuracy {acc:.3} > 0.95"), acc > 0.95);

    let uniform = PseudoLabelSet {
        method: Method::Rt4u,
        num_classes: 3,
        epoch_window: EpochWindow::new(1, 40),
        entries: separable
            .rows_in(Split::Train)
            .iter()
            .map(|r| (r.video_id.clone(), vec![1.0 / 3.0; 3]))
            .collect(),
    };
    let (model, _) = train_toy(&separable, Targets::Soft(&uniform), &ToyTrainConfig::default()).unwrap();
    let max_w = model.weights.iter().flatten().chain(&model.bias).fold(0.0f64, |m, w| m.max(w.abs()));
    ck.check(&format!("uniform targets keep weights at zero ({max_w:.1e})"), max_w < 1e-12);

    let rows = separable.rows_in(Split::Train);
    let zero = predict_toy(&ToyModel::zeros(3, 8), &rows).unwrap();
    ck.check(
        "zero model predicts uniform",
        zero.entries().iter().all(|p| p.probs.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15)),
    );
    let mut sharp = ToyModel::zeros(3, 8);
    for k in 0..3 {
        sharp.weights[k][k] = 100.0;
    }
    let preds = predict_toy(&sharp, &rows).unwrap();
    ck.check(
        "large true-axis weights give near one-hot correct predictions",
        preds
            .entries()
            .iter()
            .all(|p| oracle_argmax(&p.probs) == p.label && p.probs[p.label] > 0.999),
    );
}

/// Three well-separated clusters with tiny noise, no label flips.
fn separable_dataset() -> SyntheticDataset {
    let cfg = SimConfig { num_studies: 60, ..zero_difficulty_config(9) };
    let mut r = rng(9);
    let rows = (0..cfg.num_studies)
        .map(|i| {
            let y = i % 3;
            VideoRow {
                video_id: format!("v{i:03}"),
                study_id: format!("s{i:03}"),
                view: "PLAX".into(),
                split: if i % 10 == 9 { Split::Val } else { Split::Train },
                latent_class: y,
                label: y,
                difficulty: 0.0,
                subgroup: false,
                features: (0..8)
                    .map(|f| if f == y { 2.0 } else { 0.0 } + 0.1 * normal(&mut r))
                    .collect(),
            }
        })
        .collect::<Vec<_>>();
    SyntheticDataset {
        manifest: Manifest {
            config: cfg,
            rng: "ChaCha8".into(),
            generation_order: "hand-built".into(),
            num_videos: rows.len(),
        },
        rows,
    }
}

fn trajcal_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_trajcal"))
}

fn run_bin(args: &[&str]) -> (i32, String, String) {
    let out = trajcal_bin().args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn cli(ck: &mut Checks) {
    let dir = scratch("examples-cli");
    let cfg = PipelineConfig::default().with_seed(3);
    let (a, b) = (dir.join("sim-a"), dir.join("sim-b"));
    cmd_simulate(&cfg, &a).unwrap();
    cmd_simulate(&cfg, &b).unwrap();
    let same = ["dataset.jsonl", "study_map.jsonl", "trajectories.jsonl"]
        .iter()
        .all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap());
    ck.check("simulate output is stable across runs", same);

    let (code, _, err) = run_bin(&["simulate", "--num-classes", "1", "--out-dir", p(&dir.join("c1"))]);
    ck.check(&format!("C=1 rejected with exit 1 ({code}: {})", err.trim()), code == 1);

    let mut single = cfg.clone();
    single.sim.views_per_study = (1, 1).into();
    let ds = simulate_dataset(&single.sim).unwrap();
    let map = ds.study_map();
    let mut studies = map.values().collect::<Vec<_>>();
    studies.sort();
    studies.dedup();
    ck.check("single-view studies", studies.len() == ds.rows.len());
    let mut r = rng(14);
    let videos = video_set(
        3,
        ds.rows
            .iter()
            .map(|row| {
                let z: Vec<f64> = (0..3).map(|_| normal(&mut r)).collect();
                prediction(&row.video_id, row.latent_class, &oracle_softmax(&z))
            })
            .collect(),
    );
    let fused = fuse_all(&videos, &map, 0).unwrap();
    let by_video: BTreeMap<&str, &Vec<f64>> = videos.entries().iter().map(|p| (p.id.as_str(), &p.probs)).collect();
    ck.check(
        "fusion of single-view studies is the identity",
        fused.len() == videos.len()
            && ds.rows.iter().all(|row| {
                fused.entries().iter().find(|s| s.id == row.study_id).map(|s| &s.probs)
                    == by_video.get(row.video_id.as_str()).copied()
            }),
    );

    // Toy-trained dynamics feed the calibration examples.
    let toy_dir = dir.join("toy");
    cmd_simulate(&cfg, &toy_dir).unwrap();
    cmd_train_toy(&cfg, &toy_dir.join("dataset.jsonl"), None, &toy_dir).unwrap();
    let traj = toy_dir.join("trajectories.jsonl");
    let cal = dir.join("temperature.json");
    let (code, out, _) = run_bin(&["calibrate", "--trajectory", p(&traj), "--output", p(&cal)]);
    let file = CalibrationFile::read(&cal).unwrap();
    let store = load_trajectories(&traj).unwrap();
    let val: Vec<LabeledLogits> = split_view(&store, Split::Val)
        .samples()
        .map(|s| LabeledLogits::new(average_logits(&store, &s.sample_id, None).unwrap(), s.label))
        .collect();
    let gamma = match file.map {
        CalibrationMap::Temperature(g) => g.gamma(),
        _ => f64::NAN,
    };
    let grid = grid_gamma(&val, 0.05, 20.0, 0.001);
    let gap = oracle_nll(&val, gamma) - oracle_nll(&val, grid);
    ck.check(
        &format!("calibrate temperature: exit {code}, gamma {gamma:.4} in (0,20), grid {grid:.3}, NLL gap {gap:.2e}"),
        (code == 0 || code == 3)
            && gamma > 0.0
            && gamma < 20.0
            && gap < 1e-3
            && oracle_nll(&val, gamma) < oracle_nll(&val, 1.0)
            && out.contains("validation NLL"),
    );

    let dcal = dir.join("dirichlet.json");
    let (code, _, _) = run_bin(&[
        "calibrate",
        "--trajectory",
        p(&traj),
        "--method",
        "dirichlet",
        "--lambda1",
        "1e6",
        "--lambda2",
        "1e6",
        "--output",
        p(&dcal),
    ]);
    let near_diag = match CalibrationFile::read(&dcal).map(|f| f.map) {
        Ok(CalibrationMap::Dirichlet(m)) => {
            let off = (0..9).filter(|k| k % 4 != 0).map(|k| m.matrix()[k].abs()).fold(0.0, f64::max);
            off < 1e-2 && m.bias().iter().all(|b| b.abs() < 1e-2)
        }
        _ => false,
    };
    ck.check(&format!("dirichlet with huge penalties is near diagonal (exit {code})"), near_diag);

    let train_only = dir.join("train_only.jsonl");
    write_trajectories(&split_view(&store, Split::Train), &train_only).unwrap();
    let (code, _, err) = run_bin(&["calibrate", "--trajectory", p(&train_only), "--output", p(&dir.join("x.json"))]);
    ck.check(&format!("missing val records exit 2 ({code}: {})", err.trim()), code == 2);

    let (code, _, err) = run_bin(&[
        "pseudo",
        "--trajectory",
        p(&traj),
        "--method",
        "rt4u",
        "--calibration",
        p(&cal),
        "--output",
        p(&dir.join("x.jsonl")),
    ]);
    ck.check(
        &format!("rt4u with calibration rejected ({code}: {})", err.trim()),
        code == 1 && err.contains("calibration not applicable"),
    );
    let (code, _, err) = run_bin(&[
        "pseudo",
        "--trajectory",
        p(&traj),
        "--method",
        "pseudo_d",
        "--calibration",
        p(&cal),
        "--output",
        p(&dir.join("x.jsonl")),
    ]);
    ck.check(
        &format!("pseudo_d with a temperature file rejected ({code}: {})", err.trim()),
        code == 1 && err.contains("map type mismatch"),
    );
    let unit = dir.join("unit.json");
    std::fs::write(&unit, r#"{"type":"temperature","gamma":1.0,"converged":true,"iters":0,"final_nll":0.0}"#).unwrap();
    let labels = dir.join("pt.jsonl");
    let (code, _, _) = run_bin(&[
        "pseudo",
        "--trajectory",
        p(&traj),
        "--method",
        "pseudo_t",
        "--calibration",
        p(&unit),
        "--output",
        p(&labels),
    ]);
    let set = read_pseudo_labels(&labels).unwrap();
    let identical = code == 0
        && set.len() == split_view(&store, Split::Train).len()
        && set
            .entries
            .iter()
            .all(|(id, p)| *p == softmax(&average_logits(&store, id, None).unwrap()).unwrap());
    ck.check("pseudo_t with gamma=1 equals softmax of averaged logits", identical);

    let classes: Vec<usize> = (0..100).map(|i| i % 3).collect();
    let oracle = preds_from(&classes, &onehot_probs(&classes, 3));
    let oracle_path = dir.join("oracle.jsonl");
    write_predictions(&oracle, &oracle_path).unwrap();
    let eval_dir = dir.join("eval-oracle");
    let (code, _, _) = run_bin(&["evaluate", "--predictions", p(&oracle_path), "--out-dir", p(&eval_dir)]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
    let f = |k: &str| report[k].as_f64().unwrap_or(f64::NAN);
    ck.check(
        &format!("oracle predictions evaluate perfectly (exit {code})"),
        code == 0
            && f("balanced_accuracy") == 1.0
            && f("balanced_mae") == 0.0
            && f("balanced_ece") == 0.0
            && (f("aurc") - 0.75).abs() < 1e-12,
    );

    let mut big = cfg.clone();
    big.sim.num_studies = 1000;
    let big_dir = dir.join("big");
    cmd_simulate(&big, &big_dir).unwrap();
    cmd_train_toy(&big, &big_dir.join("dataset.jsonl"), None, &big_dir).unwrap();
    let (code, out, _) = run_bin(&[
        "evaluate",
        "--model",
        p(&big_dir.join("model.json")),
        "--dataset",
        p(&big_dir.join("dataset.jsonl")),
        "--subgroup-tag",
        "bicuspid",
        "--out-dir",
        p(&big_dir),
    ]);
    let rows = out.lines().filter(|l| l.trim_start().starts_with("bicuspid=")).count();
    ck.check(&format!("subgroup table has 4 rows (exit {code}, {rows} rows)"), code == 0 && rows == 4);

    let bad = dir.join("bad.jsonl");
    let good = std::fs::read_to_string(&oracle_path).unwrap();
    let mut lines: Vec<&str> = good.lines().collect();
    lines[3] = "{\"id\": \"broken\", ";
    std::fs::write(&bad, lines.join("\n") + "\n").unwrap();
    let (code, _, err) = run_bin(&["evaluate", "--predictions", p(&bad), "--out-dir", p(&dir.join("eval-bad"))]);
    ck.check(
        &format!("malformed prediction file names the line ({code}: {})", err.trim()),
        code == 2 && err.contains("line 4"),
    );

    let normal_videos = video_set(
        3,
        vec![
            prediction("a1", 0, &[0.7, 0.2, 0.1]),
            prediction("a2", 0, &[0.9, 0.05, 0.05]),
            prediction("b1", 0, &[0.5, 0.3, 0.2]),
            prediction("b2", 0, &[0.6, 0.1, 0.3]),
        ],
    );
    let mixed_videos = video_set(
        3,
        vec![
            prediction("a1", 1, &[0.7, 0.2, 0.1]),
            prediction("a2", 1, &[0.2, 0.6, 0.2]),
            prediction("b1", 2, &[0.1, 0.7, 0.2]),
            prediction("b2", 2, &[0.1, 0.2, 0.7]),
        ],
    );
    let map_path = dir.join("map.jsonl");
    let map: BTreeMap<String, String> = [("a1", "A"), ("a2", "A"), ("b1", "B"), ("b2", "B")]
        .into_iter()
        .map(|(v, s)| (v.to_string(), s.to_string()))
        .collect();
    write_study_map(&map, &map_path).unwrap();
    let fuse = |set: &PredictionSet, name: &str| -> Option<BTreeMap<String, Vec<f64>>> {
        let path = dir.join(format!("{name}.jsonl"));
        write_predictions(set, &path).unwrap();
        let out_dir = dir.join(format!("fuse-{name}"));
        let (code, _, _) = run_bin(&[
            "fuse",
            "--predictions",
            p(&path),
            "--study-map",
            p(&map_path),
            "--out-dir",
            p(&out_dir),
        ]);
        let studies = read_predictions(&out_dir.join("predictions_study.jsonl")).ok()?;
        (code == 0).then(|| studies.entries().iter().map(|s| (s.id.clone(), s.probs.clone())).collect())
    };
    let means = fuse(&normal_videos, "normal");
    let want_a: Vec<f64> = [0.7, 0.2, 0.1].iter().zip([0.9, 0.05, 0.05]).map(|(x, y)| (x + y) / 2.0).collect();
    let want_b: Vec<f64> = [0.5, 0.3, 0.2].iter().zip([0.6, 0.1, 0.3]).map(|(x, y)| (x + y) / 2.0).collect();
    ck.check(
        "fuse on all-normal studies gives per-study means",
        means.is_some_and(|m| m["A"] == want_a && m["B"] == want_b),
    );
    let mixed = fuse(&mixed_videos, "mixed");
    ck.check(
        "fuse on mixed studies matches the hand values",
        mixed.is_some_and(|m| {
            m["A"] == vec![0.2, 0.6, 0.2] && m["B"].iter().zip([0.1, 0.45, 0.45]).all(|(a, b)| (a - b).abs() < 1e-15)
        }),
    );
    let mut short_map = map.clone();
    short_map.remove("b2");
    write_study_map(&short_map, &map_path).unwrap();
    let path = dir.join("mixed.jsonl");
    let (code, _, err) = run_bin(&["fuse", "--predictions", p(&path), "--study-map", p(&map_path), "--out-dir", p(&dir)]);
    ck.check(&format!("fuse with an unmapped video fails ({code}: {})", err.trim()), code == 2);

    let run_dir = dir.join("pipeline");
    let (code, out, _) = run_bin(&["pipeline", "--seed", "0", "--out-dir", p(&run_dir)]);
    let csv = std::fs::read_to_string(run_dir.join("summary.csv")).unwrap_or_default();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    ck.check(
        &format!("pipeline table has 4 methods x 8 metrics (exit {code})"),
        (code == 0 || code == 3)
            && rows.len() == 4
            && rows.iter().all(|r| r.len() == 9 && r[1..].iter().all(|v| v.parse::<f64>().is_ok()))
            && out.contains("pseudo_d"),
    );
    let lib_dir = dir.join("pipeline-lib");
    trajcal::pipeline::run_pipeline(&PipelineConfig::default().with_seed(0), &lib_dir).unwrap();
    ck.check(
        "pipeline table is identical across runs",
        std::fs::read(lib_dir.join("summary.csv")).ok() == Some(csv.into_bytes()),
    );
    let _ = read_dataset(&run_dir.join("dataset.jsonl")).map(|d| ck.check("pipeline dataset readable", !d.rows.is_empty()));
}
