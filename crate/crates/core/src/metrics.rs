//! Class-balanced evaluation of probabilistic predictions.
//!
//! Every "balanced" metric is computed separately over the samples of each
//! ground-truth class and then averaged over the classes that occur. Classes
//! with no ground-truth samples are left out of the average.
//!
//! Selective classification uses the softmax response (the probability of
//! the predicted class) as the selector. AURC is the mean, over a grid of
//! target coverages, of selective balanced accuracy times coverage, so
//! higher is better.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_model::Tags;
use crate::error::{Error, Result};
use crate::jsonl;

const SUM_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_ECE_BINS: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Video,
    Study,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Video => "video",
            Level::Study => "study",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub id: String,
    pub label: usize,
    pub probs: Vec<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tags: Tags,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    level: Level,
    num_classes: usize,
    entries: Vec<Prediction>,
}

impl PredictionSet {
    pub fn new(level: Level, num_classes: usize, entries: Vec<Prediction>) -> Result<Self> {
        let mut ids = HashSet::new();
        for p in &entries {
            if p.probs.len() != num_classes {
                return Err(Error::data(format!(
                    "prediction '{}' has {} probabilities, expected {num_classes}",
                    p.id,
                    p.probs.len()
                )));
            }
            if p.label >= num_classes {
                return Err(Error::data(format!("prediction '{}' label {} out of range", p.id, p.label)));
            }
            if p.probs.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::data(format!("prediction '{}' has invalid probabilities", p.id)));
            }
            let sum: f64 = p.probs.iter().sum();
            if (sum - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::data(format!("prediction '{}' probabilities sum to {sum}", p.id)));
            }
            if !ids.insert(p.id.as_str()) {
                return Err(Error::data(format!("duplicate prediction id '{}'", p.id)));
            }
        }
        Ok(PredictionSet {
            level,
            num_classes,
            entries,
        })
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn entries(&self) -> &[Prediction] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Softmax-response selector value of every entry, in entry order.
    pub fn confidences(&self) -> Vec<f64> {
        self.entries.iter().map(|p| confidence(&p.probs)).collect()
    }

    fn non_empty(&self) -> Result<()> {
        if self.entries.is_empty() {
            Err(Error::data("empty prediction set"))
        } else {
            Ok(())
        }
    }
}

/// Argmax with ties broken toward the lowest class index.
pub fn predicted_class(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Probability assigned to the predicted class.
pub fn confidence(probs: &[f64]) -> f64 {
    probs[predicted_class(probs)]
}

/// Averages a per-sample score within each ground-truth class, then across
/// the classes present among `indices`.
fn balanced_mean(
    preds: &PredictionSet,
    indices: impl Iterator<Item = usize>,
    score: impl Fn(&Prediction) -> f64,
) -> f64 {
    let mut sums = vec![0.0; preds.num_classes];
    let mut counts = vec![0usize; preds.num_classes];
    for i in indices {
        let p = &preds.entries[i];
        sums[p.label] += score(p);
        counts[p.label] += 1;
    }
    let per_class: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .filter(|(_, &n)| n > 0)
        .map(|(s, &n)| s / n as f64)
        .collect();
    per_class.iter().sum::<f64>() / per_class.len() as f64
}

fn is_correct(p: &Prediction) -> bool {
    predicted_class(&p.probs) == p.label
}

/// Mean per-class recall.
pub fn balanced_accuracy(preds: &PredictionSet) -> Result<f64> {
    preds.non_empty()?;
    Ok(balanced_mean(preds, 0..preds.len(), |p| f64::from(u8::from(is_correct(p)))))
}

/// Mean per-class absolute ordinal error of the predicted class.
pub fn balanced_mae(preds: &PredictionSet) -> Result<f64> {
    preds.non_empty()?;
    Ok(balanced_mean(preds, 0..preds.len(), |p| {
        (predicted_class(&p.probs) as f64 - p.label as f64).abs()
    }))
}

fn bin_index(conf: f64, num_bins: usize) -> usize {
    ((conf * num_bins as f64) as usize).min(num_bins - 1)
}

/// Equal-width-bin ECE computed within each ground-truth class and averaged
/// over the present classes. Bins are half-open except the last.
pub fn balanced_ece(preds: &PredictionSet, num_bins: usize) -> Result<f64> {
    preds.non_empty()?;
    if num_bins == 0 {
        return Err(Error::config("num_bins must be positive"));
    }
    let c = preds.num_classes;
    // [class][bin] -> (count, correct, confidence sum)
    let mut bins = vec![vec![(0usize, 0usize, 0.0f64); num_bins]; c];
    let mut class_counts = vec![0usize; c];
    for p in &preds.entries {
        let conf = confidence(&p.probs);
        let slot = &mut bins[p.label][bin_index(conf, num_bins)];
        slot.0 += 1;
        slot.1 += usize::from(is_correct(p));
        slot.2 += conf;
        class_counts[p.label] += 1;
    }
    let per_class: Vec<f64> = bins
        .iter()
        .zip(&class_counts)
        .filter(|(_, &n)| n > 0)
        .map(|(class_bins, &n)| {
            class_bins
                .iter()
                .filter(|b| b.0 > 0)
                .map(|&(count, correct, conf_sum)| {
                    let nb = count as f64;
                    (nb / n as f64) * (correct as f64 / nb - conf_sum / nb).abs()
                })
                .sum::<f64>()
        })
        .collect();
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// Fraction of samples whose softmax response strictly exceeds `tau`.
pub fn coverage(preds: &PredictionSet, tau: f64) -> Result<f64> {
    preds.non_empty()?;
    let covered = preds.confidences().iter().filter(|&&g| g > tau).count();
    Ok(covered as f64 / preds.len() as f64)
}

/// Balanced accuracy over the samples whose softmax response exceeds `tau`.
pub fn selective_balanced_accuracy(preds: &PredictionSet, tau: f64) -> Result<f64> {
    preds.non_empty()?;
    let conf = preds.confidences();
    let covered: Vec<usize> = (0..preds.len()).filter(|&i| conf[i] > tau).collect();
    if covered.is_empty() {
        return Err(Error::data(format!("no samples covered at threshold {tau}")));
    }
    Ok(balanced_mean(preds, covered.into_iter(), |p| {
        f64::from(u8::from(is_correct(p)))
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectiveConfig {
    /// Target coverage fractions, strictly increasing within `(0, 1]`.
    pub coverage_grid: Vec<f64>,
}

impl Default for SelectiveConfig {
    fn default() -> Self {
        SelectiveConfig {
            coverage_grid: (0..=50).map(|i| 0.5 + i as f64 / 100.0).collect(),
        }
    }
}

impl SelectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.coverage_grid.is_empty() {
            return Err(Error::config("coverage grid is empty"));
        }
        if self.coverage_grid.iter().any(|&c| !(c > 0.0 && c <= 1.0)) {
            return Err(Error::config("coverage grid values must lie in (0, 1]"));
        }
        if self.coverage_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("coverage grid must be strictly increasing"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectiveRow {
    /// Selector value of the least confident accepted sample.
    pub tau: f64,
    /// Achieved coverage fraction.
    pub coverage: f64,
    /// Balanced accuracy over the accepted samples.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveReport {
    pub rows: Vec<SelectiveRow>,
    pub aurc: f64,
}

/// AURC with the softmax-response selector.
pub fn aurc(preds: &PredictionSet, cfg: &SelectiveConfig) -> Result<SelectiveReport> {
    aurc_with_selector(preds, &preds.confidences(), cfg)
}

/// AURC for an arbitrary selector (one value per entry, higher = keep).
///
/// For each target coverage `c` the `ceil(c * N)` highest-selector samples
/// are accepted (nearest rank). Equal selector values are ordered by entry
/// position, so the achieved coverage always equals the nearest-rank target.
pub fn aurc_with_selector(
    preds: &PredictionSet,
    selector: &[f64],
    cfg: &SelectiveConfig,
) -> Result<SelectiveReport> {
    preds.non_empty()?;
    cfg.validate()?;
    if selector.len() != preds.len() {
        return Err(Error::data(format!(
            "selector has {} values for {} predictions",
            selector.len(),
            preds.len()
        )));
    }
    if selector.iter().any(|g| !g.is_finite()) {
        return Err(Error::data("selector values must be finite"));
    }
    let n = preds.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| selector[b].total_cmp(&selector[a]));

    let rows: Vec<SelectiveRow> = cfg
        .coverage_grid
        .iter()
        .map(|&target| {
            let k = ((target * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
            let accepted = &order[..k];
            SelectiveRow {
                tau: selector[order[k - 1]],
                coverage: k as f64 / n as f64,
                accuracy: balanced_mean(preds, accepted.iter().copied(), |p| {
                    f64::from(u8::from(is_correct(p)))
                }),
            }
        })
        .collect();
    let aurc = rows_aurc(&rows);
    Ok(SelectiveReport { rows, aurc })
}

/// Mean of `accuracy * coverage` over the rows, in row order.
pub fn rows_aurc(rows: &[SelectiveRow]) -> f64 {
    rows.iter().map(|r| r.accuracy * r.coverage).sum::<f64>() / rows.len() as f64
}

pub const ABSENT_TAG: &str = "(absent)";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubgroupRow {
    pub tag_value: String,
    pub correct: bool,
    pub count: usize,
    pub mean_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubgroupSample {
    pub id: String,
    pub tag: String,
    pub correct: bool,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubgroupReport {
    pub tag_key: String,
    pub rows: Vec<SubgroupRow>,
    pub samples: Vec<SubgroupSample>,
}

impl SubgroupReport {
    pub fn row(&self, tag_value: &str, correct: bool) -> Option<&SubgroupRow> {
        self.rows
            .iter()
            .find(|r| r.tag_value == tag_value && r.correct == correct)
    }

    /// Mean confidence of correct minus incorrect predictions, pooled over
    /// all tag values. `None` when either side is empty.
    pub fn confidence_gap(&self) -> Option<f64> {
        self.gap_where(|_| true)
    }

    /// Same gap restricted to samples carrying `tag_value`.
    pub fn confidence_gap_for(&self, tag_value: &str) -> Option<f64> {
        self.gap_where(|s| s.tag == tag_value)
    }

    fn gap_where(&self, keep: impl Fn(&SubgroupSample) -> bool) -> Option<f64> {
        let mean = |correct: bool| {
            let (sum, n) = self
                .samples
                .iter()
                .filter(|s| s.correct == correct && keep(s))
                .fold((0.0, 0usize), |(s, n), x| (s + x.confidence, n + 1));
            (n > 0).then(|| sum / n as f64)
        };
        Some(mean(true)? - mean(false)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,tag,correct,confidence\n");
        for s in &self.samples {
            out.push_str(&format!(
                "{},{},{},{}\n",
                csv_field(&s.id),
                csv_field(&s.tag),
                s.correct,
                s.confidence
            ));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Groups predictions by the value of `tag_key` and by correctness.
/// Samples without the tag fall under [`ABSENT_TAG`].
pub fn subgroup_confidence_report(preds: &PredictionSet, tag_key: &str) -> Result<SubgroupReport> {
    preds.non_empty()?;
    if !preds.entries.iter().any(|p| p.tags.contains_key(tag_key)) {
        return Err(Error::data(format!("no prediction carries tag '{tag_key}'")));
    }
    let samples: Vec<SubgroupSample> = preds
        .entries
        .iter()
        .map(|p| SubgroupSample {
            id: p.id.clone(),
            tag: p.tags.get(tag_key).cloned().unwrap_or_else(|| ABSENT_TAG.to_string()),
            correct: is_correct(p),
            confidence: confidence(&p.probs),
        })
        .collect();
    let mut groups: BTreeMap<(String, bool), (usize, f64)> = BTreeMap::new();
    for s in &samples {
        let g = groups.entry((s.tag.clone(), s.correct)).or_default();
        g.0 += 1;
        g.1 += s.confidence;
    }
    let rows = groups
        .into_iter()
        .map(|((tag_value, correct), (count, sum))| SubgroupRow {
            tag_value,
            correct,
            count,
            mean_confidence: sum / count as f64,
        })
        .collect();
    Ok(SubgroupReport {
        tag_key: tag_key.to_string(),
        rows,
        samples,
    })
}

/// Metrics report file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub level: Level,
    pub balanced_accuracy: f64,
    pub balanced_mae: f64,
    pub balanced_ece: f64,
    pub aurc: f64,
    pub rows: Vec<SelectiveRow>,
}

pub fn evaluate(preds: &PredictionSet, cfg: &SelectiveConfig, num_bins: usize) -> Result<MetricsReport> {
    let selective = aurc(preds, cfg)?;
    Ok(MetricsReport {
        level: preds.level,
        balanced_accuracy: balanced_accuracy(preds)?,
        balanced_mae: balanced_mae(preds)?,
        balanced_ece: balanced_ece(preds, num_bins)?,
        aurc: selective.aurc,
        rows: selective.rows,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionHeader {
    level: Level,
    num_classes: usize,
}

/// Writes a prediction file: a `{"level", "num_classes"}` header line
/// followed by one `{"id", "label", "probs", "tags"}` line per entry.
pub fn write_predictions(preds: &PredictionSet, path: &Path) -> Result<()> {
    let header = jsonl::to_line(&PredictionHeader {
        level: preds.level,
        num_classes: preds.num_classes,
    });
    jsonl::write_lines(
        path,
        std::iter::once(header).chain(preds.entries.iter().map(jsonl::to_line)),
    )
}

pub fn read_predictions(path: &Path) -> Result<PredictionSet> {
    let lines = jsonl::read_lines(path)?;
    let mut iter = lines.iter();
    let (line_no, text) = iter
        .next()
        .ok_or_else(|| Error::data(format!("{}: empty prediction file", path.display())))?;
    let header: PredictionHeader = jsonl::parse_line(*line_no, text)?;
    let mut entries = Vec::new();
    let mut ids = BTreeSet::new();
    for (line_no, text) in iter {
        let p: Prediction = jsonl::parse_line(*line_no, text)?;
        let single = PredictionSet::new(header.level, header.num_classes, vec![p.clone()]);
        if let Err(e) = single {
            return Err(Error::Parse {
                line: *line_no,
                message: e.to_string(),
            });
        }
        if !ids.insert(p.id.clone()) {
            return Err(Error::Parse {
                line: *line_no,
                message: format!("duplicate prediction id '{}'", p.id),
            });
        }
        entries.push(p);
    }
    PredictionSet::new(header.level, header.num_classes, entries)
}
