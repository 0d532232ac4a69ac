//! Stage orchestration shared by the CLI subcommands and the end-to-end
//! `pipeline` run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::{
    fit_dirichlet, fit_temperature, mean_cross_entropy, CalibrationFile, CalibrationMap, LabeledLogits,
    OptimizerConfig, RegularizerConfig,
};
use crate::data_model::{
    load_trajectories, mean_over_window, write_trajectories, EpochWindow, Split, TrajectoryStore,
};
use crate::error::{Error, Result};
use crate::fusion::{fuse_all, read_study_map, write_study_map, DEFAULT_NORMAL_CLASS};
use crate::jsonl;
use crate::metrics::{
    evaluate, read_predictions, subgroup_confidence_report, write_predictions, MetricsReport, PredictionSet,
    SelectiveConfig, DEFAULT_ECE_BINS,
};
use crate::pseudo_label::{make_pseudo_labels, read_pseudo_labels, write_pseudo_labels, Method, PseudoLabelSet};
use crate::simulator::{
    predict_toy, read_dataset, simulate_dataset, simulate_trajectories, train_toy, write_dataset, SimConfig,
    SyntheticDataset, Targets, ToyModel, ToyTrainConfig, SUBGROUP_TAG,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationKind {
    Temperature,
    Dirichlet,
}

impl FromStr for CalibrationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temperature" => Ok(CalibrationKind::Temperature),
            "dirichlet" => Ok(CalibrationKind::Dirichlet),
            other => Err(Error::Usage(format!("unknown calibration method '{other}'"))),
        }
    }
}

/// File locations used by the standalone subcommands. All optional; flags
/// fill in whatever the config file leaves out.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub trajectory: Option<PathBuf>,
    pub pseudo_labels: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub study_map: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub method: Method,
    pub sim: SimConfig,
    pub toy: ToyTrainConfig,
    pub optimizer: OptimizerConfig,
    pub regularizer: RegularizerConfig,
    pub selective: SelectiveConfig,
    pub epoch_window: Option<EpochWindow>,
    pub normal_class: usize,
    pub ece_bins: usize,
    pub subgroup_tag: Option<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: PathsConfig::default(),
            method: Method::PseudoD,
            sim: SimConfig::default(),
            toy: ToyTrainConfig::default(),
            optimizer: OptimizerConfig::default(),
            regularizer: RegularizerConfig::default(),
            selective: SelectiveConfig::default(),
            epoch_window: None,
            normal_class: DEFAULT_NORMAL_CLASS,
            ece_bins: DEFAULT_ECE_BINS,
            subgroup_tag: Some(SUBGROUP_TAG.to_string()),
        }
    }
}

impl PipelineConfig {
    /// Reads a config file; malformed content is a configuration error.
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = jsonl::read_json(path).map_err(|e| match e {
            Error::Parse { message, .. } => Error::config(format!("{}: {message}", path.display())),
            other => other,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one seed to every stage that records one.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sim.seed = seed;
        self.toy.seed = seed;
        self.optimizer.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.optimizer.validate()?;
        self.regularizer.validate()?;
        self.selective.validate()?;
        if self.normal_class >= self.sim.num_classes {
            return Err(Error::config("normal_class out of range"));
        }
        if self.ece_bins == 0 {
            return Err(Error::config("ece_bins must be positive"));
        }
        Ok(())
    }
}

/// Epoch-averaged validation logits with their labels, in sample-id order.
pub fn validation_logits(store: &TrajectoryStore, window: Option<EpochWindow>) -> Result<Vec<LabeledLogits>> {
    let window = store.resolve_window(window)?;
    let val: Vec<LabeledLogits> = store
        .samples()
        .filter(|s| s.split == Split::Val)
        .map(|s| LabeledLogits::new(mean_over_window(store, s, window), s.label))
        .collect();
    if val.is_empty() {
        return Err(Error::data("trajectory has no validation-split samples"));
    }
    Ok(val)
}

pub fn calibrate(
    store: &TrajectoryStore,
    kind: CalibrationKind,
    window: Option<EpochWindow>,
    reg: &RegularizerConfig,
    opt: &OptimizerConfig,
) -> Result<CalibrationFile> {
    let val = validation_logits(store, window)?;
    Ok(match kind {
        CalibrationKind::Temperature => CalibrationFile::from(&fit_temperature(&val, opt)?),
        CalibrationKind::Dirichlet => CalibrationFile::from(&fit_dirichlet(&val, reg, opt)?),
    })
}

/// Video-level test predictions of a model, with the study-level fusion.
pub struct Evaluation {
    pub video_predictions: PredictionSet,
    pub study_predictions: PredictionSet,
    pub video: MetricsReport,
    pub study: MetricsReport,
}

pub fn evaluate_model(model: &ToyModel, dataset: &SyntheticDataset, cfg: &PipelineConfig) -> Result<Evaluation> {
    let test = dataset.rows_in(Split::Test);
    if test.is_empty() {
        return Err(Error::data("dataset has no test-split rows"));
    }
    let video_predictions = predict_toy(model, &test)?;
    let study_predictions = fuse_all(&video_predictions, &dataset.study_map(), cfg.normal_class)?;
    Ok(Evaluation {
        video: evaluate(&video_predictions, &cfg.selective, cfg.ece_bins)?,
        study: evaluate(&study_predictions, &cfg.selective, cfg.ece_bins)?,
        video_predictions,
        study_predictions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: Method,
    pub video: MetricsReport,
    pub study: MetricsReport,
    /// Mean confidence of correct minus incorrect video predictions inside
    /// the tagged subgroup (`subgroup_tag` = "true").
    pub subgroup_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub gamma: f64,
    pub temperature_converged: bool,
    pub dirichlet_a: Vec<Vec<f64>>,
    pub dirichlet_b: Vec<f64>,
    pub dirichlet_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub seed: u64,
    pub calibration: CalibrationSummary,
    pub rows: Vec<MethodRow>,
}

impl PipelineSummary {
    pub fn row(&self, method: Method) -> &MethodRow {
        self.rows
            .iter()
            .find(|r| r.method == method)
            .expect("every method has a row")
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if !self.calibration.temperature_converged {
            w.push("temperature fit did not converge".to_string());
        }
        if !self.calibration.dirichlet_converged {
            w.push("Dirichlet fit did not converge".to_string());
        }
        w
    }

    pub const COLUMNS: [&'static str; 8] = [
        "video_mae",
        "video_acc",
        "video_ece",
        "video_aurc",
        "study_mae",
        "study_acc",
        "study_ece",
        "study_aurc",
    ];

    /// Comparison table: one row per method, MAE/ACC/ECE/AURC at video and
    /// study level.
    pub fn to_csv(&self) -> String {
        let mut out = format!("method,{}\n", Self::COLUMNS.join(","));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.method,
                r.video.balanced_mae,
                r.video.balanced_accuracy,
                r.video.balanced_ece,
                r.video.aurc,
                r.study.balanced_mae,
                r.study.balanced_accuracy,
                r.study.balanced_ece,
                r.study.aurc
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<10}", "method");
        for c in Self::COLUMNS {
            let _ = write!(out, " {c:>10}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<10}", r.method.as_str());
            for v in [
                r.video.balanced_mae,
                r.video.balanced_accuracy,
                r.video.balanced_ece,
                r.video.aurc,
                r.study.balanced_mae,
                r.study.balanced_accuracy,
                r.study.balanced_ece,
                r.study.aurc,
            ] {
                let _ = write!(out, " {v:>10.4}");
            }
            out.push('\n');
        }
        out
    }
}

/// Marker written into the output directory when a stage fails.
pub const FAILURE_MARKER: &str = "FAILED_STAGE";

struct Stages<'a> {
    out: &'a Path,
}

impl Stages<'_> {
    fn run<T>(&self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        f().map_err(|e| {
            let _ = std::fs::write(self.out.join(FAILURE_MARKER), format!("{name}\n{e}\n"));
            e
        })
    }
}

/// simulate -> train (recorded labels) -> calibrate -> pseudo-labels for
/// every method -> retrain per method -> evaluate at video and study level.
/// All artifacts land under `out_dir`.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: &Path) -> Result<PipelineSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let marker = out_dir.join(FAILURE_MARKER);
    if marker.exists() {
        std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    let stages = Stages { out: out_dir };

    let dataset = stages.run("simulate", || {
        let ds = simulate_dataset(&cfg.sim)?;
        write_dataset(&ds, &out_dir.join("dataset.jsonl"))?;
        write_study_map(&ds.study_map(), &out_dir.join("study_map.jsonl"))?;
        Ok(ds)
    })?;

    let store = stages.run("train-toy", || {
        let (model, store) = train_toy(&dataset, Targets::Recorded, &cfg.toy)?;
        let dir = out_dir.join("dynamics");
        model.write(&dir.join("model.json"))?;
        write_trajectories(&store, &dir.join("trajectories.jsonl"))?;
        Ok(store)
    })?;

    let (temperature, dirichlet) = stages.run("calibrate", || {
        let t = calibrate(&store, CalibrationKind::Temperature, cfg.epoch_window, &cfg.regularizer, &cfg.optimizer)?;
        let d = calibrate(&store, CalibrationKind::Dirichlet, cfg.epoch_window, &cfg.regularizer, &cfg.optimizer)?;
        t.write(&out_dir.join("calibration_temperature.json"))?;
        d.write(&out_dir.join("calibration_dirichlet.json"))?;
        Ok((t, d))
    })?;

    let mut rows = Vec::new();
    for method in Method::ALL {
        let labels: PseudoLabelSet = stages.run(&format!("pseudo:{method}"), || {
            let map = match method {
                Method::PseudoT => Some(&temperature.map),
                Method::PseudoD => Some(&dirichlet.map),
                Method::Rt4u | Method::Onehot => None,
            };
            let set = make_pseudo_labels(&store, method, map, cfg.epoch_window)?;
            write_pseudo_labels(&set, &out_dir.join(method.as_str()).join("pseudo_labels.jsonl"))?;
            Ok(set)
        })?;
        let row = stages.run(&format!("retrain:{method}"), || {
            let dir = out_dir.join(method.as_str());
            let (model, _) = train_toy(&dataset, Targets::Soft(&labels), &cfg.toy)?;
            model.write(&dir.join("model.json"))?;
            let eval = evaluate_model(&model, &dataset, cfg)?;
            write_predictions(&eval.video_predictions, &dir.join("predictions_video.jsonl"))?;
            write_predictions(&eval.study_predictions, &dir.join("predictions_study.jsonl"))?;
            jsonl::write_json(&dir.join("report_video.json"), &eval.video)?;
            jsonl::write_json(&dir.join("report_study.json"), &eval.study)?;
            let subgroup_gap = match &cfg.subgroup_tag {
                Some(tag) => {
                    let report = subgroup_confidence_report(&eval.video_predictions, tag)?;
                    write_text(&dir.join("subgroup_video.csv"), &report.to_csv())?;
                    report.confidence_gap_for("true")
                }
                None => None,
            };
            Ok(MethodRow {
                method,
                video: eval.video,
                study: eval.study,
                subgroup_gap,
            })
        })?;
        rows.push(row);
    }

    let (gamma, a, b) = match (&temperature.map, &dirichlet.map) {
        (CalibrationMap::Temperature(g), CalibrationMap::Dirichlet(m)) => (g.gamma(), m.rows(), m.bias().to_vec()),
        _ => unreachable!("calibrate returns the requested kind"),
    };
    let summary = PipelineSummary {
        seed: cfg.sim.seed,
        calibration: CalibrationSummary {
            gamma,
            temperature_converged: temperature.converged,
            dirichlet_a: a,
            dirichlet_b: b,
            dirichlet_converged: dirichlet.converged,
        },
        rows,
    };
    stages.run("report", || {
        jsonl::write_json(&out_dir.join("summary.json"), &summary)?;
        write_text(&out_dir.join("summary.csv"), &summary.to_csv())
    })?;
    Ok(summary)
}

/// What a command did: lines for stdout and warnings that map to the
/// non-convergence exit status.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Outcome {
    pub messages: Vec<String>,
    pub warnings: Vec<String>,
}

impl Outcome {
    fn say(&mut self, msg: impl Into<String>) {
        self.messages.push(msg.into());
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `dataset.jsonl`, `study_map.jsonl` and directly simulated
/// `trajectories.jsonl`.
pub fn cmd_simulate(cfg: &PipelineConfig, out_dir: &Path) -> Result<Outcome> {
    cfg.sim.validate()?;
    let dataset = simulate_dataset(&cfg.sim)?;
    let store = simulate_trajectories(&cfg.sim, &dataset)?;
    write_dataset(&dataset, &out_dir.join("dataset.jsonl"))?;
    write_study_map(&dataset.study_map(), &out_dir.join("study_map.jsonl"))?;
    write_trajectories(&store, &out_dir.join("trajectories.jsonl"))?;
    let mut out = Outcome::default();
    let m = &dataset.manifest;
    out.say(format!(
        "simulated {} videos in {} studies (C={}, T={}, rng={}, seed={})",
        m.num_videos, cfg.sim.num_studies, cfg.sim.num_classes, cfg.sim.num_epochs, m.rng, cfg.sim.seed
    ));
    for split in Split::ALL {
        out.say(format!("  {split}: {} videos", dataset.rows_in(split).len()));
    }
    Ok(out)
}

/// Trains the toy model on recorded labels, or on a pseudo-label file when
/// given. Writes `model.json` and the recorded `trajectories.jsonl`.
pub fn cmd_train_toy(cfg: &PipelineConfig, dataset: &Path, labels: Option<&Path>, out_dir: &Path) -> Result<Outcome> {
    let dataset = read_dataset(dataset)?;
    let labels = labels.map(read_pseudo_labels).transpose()?;
    let targets = match &labels {
        Some(set) => Targets::Soft(set),
        None => Targets::Recorded,
    };
    let (model, store) = train_toy(&dataset, targets, &cfg.toy)?;
    model.write(&out_dir.join("model.json"))?;
    write_trajectories(&store, &out_dir.join("trajectories.jsonl"))?;
    let mut out = Outcome::default();
    out.say(format!(
        "trained on {} ({} epochs, {} recorded samples)",
        labels.as_ref().map_or("recorded labels", |l| l.method.as_str()),
        store.num_epochs(),
        store.len()
    ));
    Ok(out)
}

pub fn cmd_calibrate(cfg: &PipelineConfig, trajectory: &Path, kind: CalibrationKind, out_path: &Path) -> Result<Outcome> {
    let store = load_trajectories(trajectory)?;
    let val = validation_logits(&store, cfg.epoch_window)?;
    let before = mean_cross_entropy(&val)?;
    let file = calibrate(&store, kind, cfg.epoch_window, &cfg.regularizer, &cfg.optimizer)?;
    file.write(out_path)?;
    let mut out = Outcome::default();
    match &file.map {
        CalibrationMap::Temperature(g) => out.say(format!("gamma = {}", g.gamma())),
        CalibrationMap::Dirichlet(m) => {
            out.say(format!("A = {:?}", m.rows()));
            out.say(format!("b = {:?}", m.bias()));
        }
    }
    out.say(format!(
        "validation NLL {before:.6} -> {:.6} over {} samples ({} iterations)",
        file.final_nll,
        val.len(),
        file.iters
    ));
    if !file.converged {
        out.warnings.push(format!(
            "{kind:?} fit did not converge within {} iterations",
            cfg.optimizer.max_iters
        ));
    }
    Ok(out)
}

pub fn cmd_pseudo(
    cfg: &PipelineConfig,
    trajectory: &Path,
    method: Method,
    calibration: Option<&Path>,
    out_path: &Path,
) -> Result<Outcome> {
    let store = load_trajectories(trajectory)?;
    let file = calibration.map(CalibrationFile::read).transpose()?;
    let set = make_pseudo_labels(&store, method, file.as_ref().map(|f| &f.map), cfg.epoch_window)?;
    write_pseudo_labels(&set, out_path)?;
    let mut out = Outcome::default();
    out.say(format!(
        "{method}: {} train samples, epochs {}..={}",
        set.len(),
        set.epoch_window.lo,
        set.epoch_window.hi
    ));
    Ok(out)
}

pub enum EvalInput<'a> {
    Predictions(&'a Path),
    /// Test-split predictions of a toy model on a dataset.
    Model { model: &'a Path, dataset: &'a Path },
}

/// Writes `report.json` (and `predictions.jsonl` for model input, and
/// `subgroup.csv` when a tag is configured).
pub fn cmd_evaluate(cfg: &PipelineConfig, input: EvalInput, out_dir: &Path) -> Result<Outcome> {
    let preds = match input {
        EvalInput::Predictions(path) => read_predictions(path)?,
        EvalInput::Model { model, dataset } => {
            let model = ToyModel::read(model)?;
            let dataset = read_dataset(dataset)?;
            let test = dataset.rows_in(Split::Test);
            if test.is_empty() {
                return Err(Error::data("dataset has no test-split rows"));
            }
            let preds = predict_toy(&model, &test)?;
            write_predictions(&preds, &out_dir.join("predictions.jsonl"))?;
            preds
        }
    };
    let report = evaluate(&preds, &cfg.selective, cfg.ece_bins)?;
    jsonl::write_json(&out_dir.join("report.json"), &report)?;
    let mut out = Outcome::default();
    out.say(format!(
        "{:?}-level, {} predictions: acc {:.4}  mae {:.4}  ece {:.4}  aurc {:.4}",
        report.level,
        preds.len(),
        report.balanced_accuracy,
        report.balanced_mae,
        report.balanced_ece,
        report.aurc
    ));
    if let Some(tag) = &cfg.subgroup_tag {
        let sub = subgroup_confidence_report(&preds, tag)?;
        write_text(&out_dir.join("subgroup.csv"), &sub.to_csv())?;
        out.say(format!("subgroup '{tag}':"));
        for r in &sub.rows {
            out.say(format!(
                "  {}={:<10} correct={:<5} n={:<5} mean confidence {:.4}",
                tag, r.tag_value, r.correct, r.count, r.mean_confidence
            ));
        }
    }
    Ok(out)
}

/// Writes `predictions_study.jsonl` and `report_study.json`.
pub fn cmd_fuse(cfg: &PipelineConfig, predictions: &Path, study_map: &Path, out_dir: &Path) -> Result<Outcome> {
    let videos = read_predictions(predictions)?;
    let map = read_study_map(study_map)?;
    let studies = fuse_all(&videos, &map, cfg.normal_class)?;
    write_predictions(&studies, &out_dir.join("predictions_study.jsonl"))?;
    let report = evaluate(&studies, &cfg.selective, cfg.ece_bins)?;
    jsonl::write_json(&out_dir.join("report_study.json"), &report)?;
    let mut out = Outcome::default();
    out.say(format!(
        "fused {} videos into {} studies: acc {:.4}  mae {:.4}  ece {:.4}  aurc {:.4}",
        videos.len(),
        studies.len(),
        report.balanced_accuracy,
        report.balanced_mae,
        report.balanced_ece,
        report.aurc
    ));
    Ok(out)
}

pub fn cmd_pipeline(cfg: &PipelineConfig, out_dir: &Path) -> Result<Outcome> {
    let summary = run_pipeline(cfg, out_dir)?;
    let mut out = Outcome::default();
    out.say(format!("seed {}", summary.seed));
    out.say(summary.to_table().trim_end().to_string());
    out.warnings = summary.warnings();
    Ok(out)
}
