//! Seeded synthetic studies with controllable per-video difficulty, a direct
//! trajectory generator, and a small multinomial-logistic trainer whose
//! per-epoch logits feed the rest of the pipeline.
//!
//! Randomness comes from `ChaCha8Rng` seeded with `seed_from_u64(seed)`.
//! Dataset draws use stream 0 in this order: per study (latent class,
//! subgroup flag, view count), then the study permutation that assigns
//! splits, then per video in study order (difficulty, label-flip uniform,
//! `F` feature-noise normals). Trajectory draws use stream 1: per video in
//! dataset order, per epoch ascending, per class ascending.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calibration::softmax_into;
use crate::data_model::{LogitRecord, Split, Tags, TrajectoryStore};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::metrics::{Level, Prediction, PredictionSet};
use crate::pseudo_label::PseudoLabelSet;

pub const RNG_NAME: &str = "ChaCha8Rng (rand_chacha 0.9, seed_from_u64)";
pub const SUBGROUP_TAG: &str = "bicuspid";
const VIEW_NAMES: [&str; 5] = ["PLAX", "PSAX-AV", "PSAX-MV", "A4C", "A5C"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct ViewRange {
    pub min: usize,
    pub max: usize,
}

impl From<(usize, usize)> for ViewRange {
    fn from((min, max): (usize, usize)) -> Self {
        ViewRange { min, max }
    }
}

impl From<ViewRange> for (usize, usize) {
    fn from(r: ViewRange) -> Self {
        (r.min, r.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub num_classes: usize,
    pub num_studies: usize,
    pub views_per_study: ViewRange,
    pub feature_dim: usize,
    pub num_epochs: usize,
    pub difficulty_alpha: f64,
    pub difficulty_beta: f64,
    /// Added to `difficulty_alpha` for subgroup members, making them harder
    /// on average.
    pub subgroup_difficulty_boost: f64,
    pub label_noise_rate: f64,
    pub margin_max: f64,
    pub noise_scale: f64,
    pub confusion_kappa: f64,
    pub subgroup_rate: f64,
    /// Train / val / test fractions, assigned per study.
    pub split_fractions: [f64; 3],
    /// Forces every video's difficulty to this value instead of sampling.
    pub difficulty_override: Option<f64>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            num_classes: 3,
            num_studies: 200,
            views_per_study: ViewRange { min: 2, max: 5 },
            feature_dim: 8,
            num_epochs: 40,
            difficulty_alpha: 2.0,
            difficulty_beta: 2.0,
            subgroup_difficulty_boost: 2.0,
            label_noise_rate: 0.05,
            margin_max: 6.0,
            noise_scale: 0.5,
            confusion_kappa: 0.7,
            subgroup_rate: 0.141,
            split_fractions: [0.8, 0.1, 0.1],
            difficulty_override: None,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.num_classes > self.feature_dim {
            return bad("num_classes must not exceed feature_dim (class means use distinct axes)");
        }
        if self.num_studies == 0 || self.num_epochs == 0 {
            return bad("num_studies and num_epochs must be positive");
        }
        if self.views_per_study.min == 0 || self.views_per_study.min > self.views_per_study.max {
            return bad("views_per_study must be a range 1 <= min <= max");
        }
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if !pos(self.difficulty_alpha) || !pos(self.difficulty_beta) {
            return bad("difficulty shape parameters must be positive");
        }
        if self.subgroup_difficulty_boost.is_nan() || self.subgroup_difficulty_boost < 0.0 {
            return bad("subgroup_difficulty_boost must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.label_noise_rate) {
            return bad("label_noise_rate must lie in [0, 1)");
        }
        if !(self.margin_max >= 0.0 && self.noise_scale >= 0.0) {
            return bad("margin_max and noise_scale must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.confusion_kappa) || !(0.0..=1.0).contains(&self.subgroup_rate) {
            return bad("confusion_kappa and subgroup_rate must lie in [0, 1]");
        }
        if self.split_fractions.iter().any(|f| f.is_nan() || *f < 0.0)
            || (self.split_fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad("split_fractions must be nonnegative and sum to 1");
        }
        if let Some(d) = self.difficulty_override {
            if !(0.0..=1.0).contains(&d) {
                return bad("difficulty_override must lie in [0, 1]");
            }
        }
        Ok(())
    }

    /// Ordinal neighbour a class is confused with: the next class inward,
    /// with interior classes confused upward.
    pub fn confusable_class(&self, class: usize) -> usize {
        if class + 1 < self.num_classes {
            class + 1
        } else {
            class - 1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRow {
    pub video_id: String,
    pub study_id: String,
    pub view: String,
    pub split: Split,
    pub latent_class: usize,
    /// Recorded (possibly noise-flipped) label.
    pub label: usize,
    pub difficulty: f64,
    pub subgroup: bool,
    pub features: Vec<f64>,
}

impl VideoRow {
    pub fn tags(&self) -> Tags {
        let mut t = Tags::new();
        t.insert(SUBGROUP_TAG.to_string(), self.subgroup.to_string());
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: SimConfig,
    pub rng: String,
    pub generation_order: String,
    pub num_videos: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub manifest: Manifest,
    pub rows: Vec<VideoRow>,
}

impl SyntheticDataset {
    pub fn rows_in(&self, split: Split) -> Vec<&VideoRow> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }

    pub fn study_map(&self) -> BTreeMap<String, String> {
        self.rows
            .iter()
            .map(|r| (r.video_id.clone(), r.study_id.clone()))
            .collect()
    }

    pub fn config(&self) -> &SimConfig {
        &self.manifest.config
    }
}

const GENERATION_ORDER: &str = "studies(latent,subgroup,views) > split permutation > videos(difficulty,flip,features) | stream1: videos > epochs > classes";

fn class_mean(class: usize, f: usize) -> f64 {
    if class == f {
        2.0
    } else {
        0.0
    }
}

pub fn simulate_dataset(cfg: &SimConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.num_classes;

    struct Study {
        latent: usize,
        subgroup: bool,
        views: usize,
    }
    let studies: Vec<Study> = (0..cfg.num_studies)
        .map(|_| Study {
            latent: rng.random_range(0..c),
            subgroup: rng.random::<f64>() < cfg.subgroup_rate,
            views: rng.random_range(cfg.views_per_study.min..=cfg.views_per_study.max),
        })
        .collect();

    let n = cfg.num_studies;
    let n_train = ((cfg.split_fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((cfg.split_fractions[1] * n as f64).round() as usize).min(n - n_train);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut split_of = vec![Split::Test; n];
    for (rank, &s) in perm.iter().enumerate() {
        split_of[s] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let beta_plain = Beta::new(cfg.difficulty_alpha, cfg.difficulty_beta)
        .map_err(|e| Error::config(e.to_string()))?;
    let beta_sub = Beta::new(cfg.difficulty_alpha + cfg.subgroup_difficulty_boost, cfg.difficulty_beta)
        .map_err(|e| Error::config(e.to_string()))?;

    let mut rows = Vec::new();
    for (s, study) in studies.iter().enumerate() {
        let study_id = format!("s{s:04}");
        for k in 0..study.views {
            let d = match cfg.difficulty_override {
                Some(d) => d,
                None if study.subgroup => beta_sub.sample(&mut rng),
                None => beta_plain.sample(&mut rng),
            };
            let confusable = cfg.confusable_class(study.latent);
            let flip_p = (cfg.label_noise_rate * (0.5 + d)).min(1.0);
            let label = if rng.random::<f64>() < flip_p {
                confusable
            } else {
                study.latent
            };
            let mix = d * cfg.confusion_kappa;
            let features = (0..cfg.feature_dim)
                .map(|f| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    class_mean(study.latent, f) * (1.0 - mix) + class_mean(confusable, f) * mix + noise
                })
                .collect();
            rows.push(VideoRow {
                video_id: format!("{study_id}_v{k}"),
                study_id: study_id.clone(),
                view: VIEW_NAMES[k % VIEW_NAMES.len()].to_string(),
                split: split_of[s],
                latent_class: study.latent,
                label,
                difficulty: d,
                subgroup: study.subgroup,
                features,
            });
        }
    }
    Ok(SyntheticDataset {
        manifest: Manifest {
            config: cfg.clone(),
            rng: RNG_NAME.to_string(),
            generation_order: GENERATION_ORDER.to_string(),
            num_videos: rows.len(),
        },
        rows,
    })
}

/// Generates per-epoch logits directly from each video's difficulty: the
/// latent-class logit ramps to `M (1 - d)`, the confusable logit to
/// `M d kappa`, with difficulty-scaled Gaussian noise.
pub fn simulate_trajectories(cfg: &SimConfig, dataset: &SyntheticDataset) -> Result<TrajectoryStore> {
    cfg.validate()?;
    if dataset.manifest.config != *cfg {
        return Err(Error::config("configuration does not match the dataset manifest"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let c = cfg.num_classes;
    let t_total = cfg.num_epochs as f64;
    let base = Normal::new(0.0, cfg.noise_scale).map_err(|e| Error::config(e.to_string()))?;
    let mut records = Vec::with_capacity(dataset.rows.len() * cfg.num_epochs);
    for row in &dataset.rows {
        let d = row.difficulty;
        let target = row.latent_class;
        let confusable = cfg.confusable_class(target);
        let wide = Normal::new(0.0, cfg.noise_scale * (1.0 + d)).map_err(|e| Error::config(e.to_string()))?;
        for epoch in 1..=cfg.num_epochs {
            let ramp = epoch as f64 / t_total;
            let logits = (0..c)
                .map(|k| {
                    if k == target {
                        cfg.margin_max * (1.0 - d) * ramp + wide.sample(&mut rng)
                    } else if k == confusable {
                        cfg.margin_max * d * cfg.confusion_kappa * ramp + wide.sample(&mut rng)
                    } else {
                        base.sample(&mut rng)
                    }
                })
                .collect();
            records.push(LogitRecord {
                sample_id: row.video_id.clone(),
                study_id: row.study_id.clone(),
                view: row.view.clone(),
                split: row.split,
                label: row.label,
                epoch: epoch as u32,
                logits,
                subgroup_tags: row.tags(),
            });
        }
    }
    TrajectoryStore::from_records(records)
}

/// Linear softmax classifier: `logits = W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyModel {
    #[serde(rename = "W")]
    pub weights: Vec<Vec<f64>>,
    #[serde(rename = "b")]
    pub bias: Vec<f64>,
    #[serde(rename = "F")]
    pub feature_dim: usize,
    #[serde(rename = "C")]
    pub num_classes: usize,
}

impl ToyModel {
    pub fn zeros(num_classes: usize, feature_dim: usize) -> Self {
        ToyModel {
            weights: vec![vec![0.0; feature_dim]; num_classes],
            bias: vec![0.0; num_classes],
            feature_dim,
            num_classes,
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b)
            .collect()
    }

    fn check_dims(&self) -> Result<()> {
        if self.weights.len() != self.num_classes
            || self.bias.len() != self.num_classes
            || self.weights.iter().any(|w| w.len() != self.feature_dim)
        {
            return Err(Error::data("toy model shape does not match its declared C and F"));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        jsonl::write_lines(path, [jsonl::to_line(self)])
    }

    pub fn read(path: &Path) -> Result<Self> {
        let m: ToyModel = jsonl::read_json(path)?;
        m.check_dims()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTrainConfig {
    pub learning_rate: f64,
    /// Defaults to the dataset's `num_epochs`.
    pub epochs: Option<usize>,
    pub seed: u64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        ToyTrainConfig {
            learning_rate: 0.1,
            epochs: None,
            seed: 0,
        }
    }
}

/// Training targets for [`train_toy`].
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    /// Exact one-hot vectors of the recorded labels.
    Recorded,
    Soft(&'a PseudoLabelSet),
}

/// Mean soft-target cross-entropy `-sum_k y_k log p_k` over `rows`.
pub fn soft_cross_entropy(model: &ToyModel, rows: &[&VideoRow], targets: &[Vec<f64>]) -> f64 {
    let total: f64 = rows
        .iter()
        .zip(targets)
        .map(|(r, y)| {
            let z = model.logits(&r.features);
            let lse = crate::calibration::log_sum_exp(&z);
            y.iter().zip(&z).map(|(yk, zk)| yk * (lse - zk)).sum::<f64>()
        })
        .sum();
    total / rows.len() as f64
}

/// Gradient of [`soft_cross_entropy`], shaped like the model.
pub fn soft_cross_entropy_gradient(model: &ToyModel, rows: &[&VideoRow], targets: &[Vec<f64>]) -> ToyModel {
    let mut grad = ToyModel::zeros(model.num_classes, model.feature_dim);
    let mut p = vec![0.0; model.num_classes];
    let n = rows.len() as f64;
    for (r, y) in rows.iter().zip(targets) {
        let z = model.logits(&r.features);
        softmax_into(&z, &mut p);
        // Soft targets need not sum to exactly 1, so keep the sum factor.
        let mass: f64 = y.iter().sum();
        for k in 0..model.num_classes {
            let delta = (p[k] * mass - y[k]) / n;
            grad.bias[k] += delta;
            for (g, x) in grad.weights[k].iter_mut().zip(&r.features) {
                *g += delta * x;
            }
        }
    }
    grad
}

fn target_vectors(dataset: &SyntheticDataset, rows: &[&VideoRow], targets: Targets) -> Result<Vec<Vec<f64>>> {
    let c = dataset.config().num_classes;
    rows.iter()
        .map(|r| match targets {
            Targets::Recorded => {
                let mut v = vec![0.0; c];
                v[r.label] = 1.0;
                Ok(v)
            }
            Targets::Soft(set) => {
                if set.num_classes != c {
                    return Err(Error::data(format!(
                        "pseudo-labels have {} classes, dataset has {c}",
                        set.num_classes
                    )));
                }
                set.get(&r.video_id)
                    .map(<[f64]>::to_vec)
                    .ok_or_else(|| Error::data(format!("label coverage gap: no target for train video '{}'", r.video_id)))
            }
        })
        .collect()
}

/// Trains a zero-initialized linear classifier by full-batch gradient
/// descent (one step per epoch) and records train/val logits after every
/// epoch.
pub fn train_toy(
    dataset: &SyntheticDataset,
    targets: Targets,
    cfg: &ToyTrainConfig,
) -> Result<(ToyModel, TrajectoryStore)> {
    let sim = dataset.config();
    let train = dataset.rows_in(Split::Train);
    if train.is_empty() {
        return Err(Error::data("dataset has no train-split rows"));
    }
    if cfg.learning_rate.is_nan() || cfg.learning_rate <= 0.0 {
        return Err(Error::config("toy learning_rate must be positive"));
    }
    let epochs = cfg.epochs.unwrap_or(sim.num_epochs);
    if epochs == 0 {
        return Err(Error::config("toy epochs must be positive"));
    }
    let y = target_vectors(dataset, &train, targets)?;
    let recorded: Vec<&VideoRow> = dataset
        .rows
        .iter()
        .filter(|r| matches!(r.split, Split::Train | Split::Val))
        .collect();

    let mut model = ToyModel::zeros(sim.num_classes, sim.feature_dim);
    let mut records = Vec::with_capacity(recorded.len() * epochs);
    for epoch in 1..=epochs {
        let g = soft_cross_entropy_gradient(&model, &train, &y);
        for (w, gw) in model.weights.iter_mut().zip(&g.weights) {
            w.iter_mut().zip(gw).for_each(|(a, d)| *a -= cfg.learning_rate * d);
        }
        model.bias.iter_mut().zip(&g.bias).for_each(|(a, d)| *a -= cfg.learning_rate * d);
        for r in &recorded {
            records.push(LogitRecord {
                sample_id: r.video_id.clone(),
                study_id: r.study_id.clone(),
                view: r.view.clone(),
                split: r.split,
                label: r.label,
                epoch: epoch as u32,
                logits: model.logits(&r.features),
                subgroup_tags: r.tags(),
            });
        }
    }
    let store = TrajectoryStore::from_records(records)?;
    Ok((model, store))
}

/// Softmax predictions of the model for `rows`. Predictions carry the latent
/// class as ground truth, not the (possibly flipped) recorded label.
pub fn predict_toy(model: &ToyModel, rows: &[&VideoRow]) -> Result<PredictionSet> {
    model.check_dims()?;
    let mut entries = Vec::with_capacity(rows.len());
    let mut p = vec![0.0; model.num_classes];
    for r in rows {
        if r.features.len() != model.feature_dim {
            return Err(Error::data(format!(
                "row '{}' has {} features, model expects {}",
                r.video_id,
                r.features.len(),
                model.feature_dim
            )));
        }
        if r.latent_class >= model.num_classes {
            return Err(Error::data(format!("row '{}' class out of range for the model", r.video_id)));
        }
        softmax_into(&model.logits(&r.features), &mut p);
        entries.push(Prediction {
            id: r.video_id.clone(),
            label: r.latent_class,
            probs: p.clone(),
            tags: r.tags(),
        });
    }
    PredictionSet::new(Level::Video, model.num_classes, entries)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    manifest: Manifest,
}

pub fn write_dataset(dataset: &SyntheticDataset, path: &Path) -> Result<()> {
    let head = jsonl::to_line(&ManifestLine {
        manifest: dataset.manifest.clone(),
    });
    jsonl::write_lines(path, std::iter::once(head).chain(dataset.rows.iter().map(jsonl::to_line)))
}

pub fn read_dataset(path: &Path) -> Result<SyntheticDataset> {
    let lines = jsonl::read_lines(path)?;
    let mut iter = lines.iter();
    let (line_no, text) = iter
        .next()
        .ok_or_else(|| Error::data(format!("{}: empty dataset file", path.display())))?;
    let head: ManifestLine = jsonl::parse_line(*line_no, text)?;
    let cfg = &head.manifest.config;
    let rows = iter
        .map(|(line_no, text)| {
            let row: VideoRow = jsonl::parse_line(*line_no, text)?;
            if row.features.len() != cfg.feature_dim || row.label >= cfg.num_classes || row.latent_class >= cfg.num_classes {
                return Err(Error::Parse {
                    line: *line_no,
                    message: "row does not match the manifest's dimensions".into(),
                });
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    if rows.len() != head.manifest.num_videos {
        return Err(Error::data(format!(
            "{}: manifest declares {} videos, file has {}",
            path.display(),
            head.manifest.num_videos,
            rows.len()
        )));
    }
    Ok(SyntheticDataset {
        manifest: head.manifest,
        rows,
    })
}
