//! Per-epoch logit records and the validated, immutable store built from them.
//!
//! A trajectory file is line-delimited JSON, one [`LogitRecord`] per line.
//! Loading enforces a dense grid: every sample must carry exactly one record
//! for every epoch that appears anywhere in the file, and all records of a
//! sample must agree on its metadata.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub type Tags = BTreeMap<String, String>;

/// One line of a trajectory file: the logits of one sample at one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogitRecord {
    pub sample_id: String,
    pub study_id: String,
    pub view: String,
    pub split: Split,
    pub label: usize,
    pub epoch: u32,
    pub logits: Vec<f64>,
    #[serde(default, rename = "tags", skip_serializing_if = "BTreeMap::is_empty")]
    pub subgroup_tags: Tags,
}

/// Inclusive epoch range `[lo, hi]`, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(u32, u32)", into = "(u32, u32)")]
pub struct EpochWindow {
    pub lo: u32,
    pub hi: u32,
}

impl EpochWindow {
    pub fn new(lo: u32, hi: u32) -> Self {
        EpochWindow { lo, hi }
    }

    pub fn contains(&self, epoch: u32) -> bool {
        self.lo <= epoch && epoch <= self.hi
    }
}

impl From<(u32, u32)> for EpochWindow {
    fn from((lo, hi): (u32, u32)) -> Self {
        EpochWindow { lo, hi }
    }
}

impl From<EpochWindow> for (u32, u32) {
    fn from(w: EpochWindow) -> Self {
        (w.lo, w.hi)
    }
}

/// All epochs of one sample, logits ordered by ascending epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrajectory {
    pub sample_id: String,
    pub study_id: String,
    pub view: String,
    pub split: Split,
    pub label: usize,
    pub subgroup_tags: Tags,
    /// `logits[k]` belongs to `store.epochs()[k]`.
    pub logits: Vec<Vec<f64>>,
}

/// Validated, immutable collection of trajectories on a dense epoch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStore {
    num_classes: usize,
    epochs: Vec<u32>,
    samples: BTreeMap<String, SampleTrajectory>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationIssue {
    /// Zero-based position of the offending record, when one record is to blame.
    pub record_index: Option<usize>,
    pub rule: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub errors: Vec<ValidationIssue>,
    pub warnings: Vec<String>,
    /// Number of distinct samples per split.
    pub split_counts: BTreeMap<Split, usize>,
    pub num_classes: usize,
    pub num_epochs: usize,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Checks every store invariant over a flat list of records.
pub fn validate_records(records: &[LogitRecord]) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut err = |idx: Option<usize>, rule: String| {
        report.errors.push(ValidationIssue {
            record_index: idx,
            rule,
        })
    };

    let Some(first) = records.first() else {
        err(None, "empty trajectory: no records".into());
        return report;
    };
    let c = first.logits.len();
    if c < 2 {
        err(Some(0), format!("class count must be at least 2, found {c}"));
    }

    let mut seen: HashMap<(&str, u32), usize> = HashMap::new();
    let mut by_sample: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut all_epochs = BTreeSet::new();
    for (i, r) in records.iter().enumerate() {
        if r.logits.len() != c {
            err(
                Some(i),
                format!(
                    "inconsistent class count: sample '{}' epoch {} has {} logits, expected {c}",
                    r.sample_id,
                    r.epoch,
                    r.logits.len()
                ),
            );
        }
        if r.logits.iter().any(|x| !x.is_finite()) {
            err(Some(i), format!("non-finite logit in sample '{}' epoch {}", r.sample_id, r.epoch));
        }
        if r.label >= c {
            err(Some(i), format!("label {} out of range for {c} classes", r.label));
        }
        if r.epoch < 1 {
            err(Some(i), "epoch must be >= 1".into());
        }
        if let Some(prev) = seen.insert((r.sample_id.as_str(), r.epoch), i) {
            err(
                Some(i),
                format!(
                    "duplicate (sample_id, epoch) = ('{}', {}); first seen at record {prev}",
                    r.sample_id, r.epoch
                ),
            );
        }
        by_sample.entry(r.sample_id.as_str()).or_default().push(i);
        all_epochs.insert(r.epoch);
    }

    for (sample, idxs) in &by_sample {
        let head = &records[idxs[0]];
        for &i in &idxs[1..] {
            let r = &records[i];
            if r.split != head.split
                || r.label != head.label
                || r.study_id != head.study_id
                || r.view != head.view
                || r.subgroup_tags != head.subgroup_tags
            {
                err(Some(i), format!("inconsistent metadata across epochs for sample '{sample}'"));
            }
        }
        let have: BTreeSet<u32> = idxs.iter().map(|&i| records[i].epoch).collect();
        let missing: Vec<u32> = all_epochs.difference(&have).copied().collect();
        if !missing.is_empty() {
            err(None, format!("missing epochs for sample '{sample}': {missing:?}"));
        }
        *report.split_counts.entry(head.split).or_default() += 1;
    }

    if all_epochs.len() > 1 {
        let (lo, hi) = (*all_epochs.first().unwrap(), *all_epochs.last().unwrap());
        if (hi - lo + 1) as usize != all_epochs.len() {
            report
                .warnings
                .push(format!("epoch set is not contiguous between {lo} and {hi}"));
        }
    }
    for split in Split::ALL {
        if !report.split_counts.contains_key(&split) {
            report.warnings.push(format!("no samples in split '{split}'"));
        }
    }
    report.num_classes = c;
    report.num_epochs = all_epochs.len();
    report
}

impl TrajectoryStore {
    /// Builds a store, rejecting any record list that violates an invariant.
    pub fn from_records(records: Vec<LogitRecord>) -> Result<Self> {
        let report = validate_records(&records);
        if !report.is_valid() {
            return Err(Error::data(summarize(&report.errors, |i| format!("record {i}"))));
        }
        Ok(Self::assemble(records, report.num_classes))
    }

    fn assemble(records: Vec<LogitRecord>, num_classes: usize) -> Self {
        let epochs: Vec<u32> = records
            .iter()
            .map(|r| r.epoch)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut grouped: BTreeMap<String, Vec<LogitRecord>> = BTreeMap::new();
        for r in records {
            grouped.entry(r.sample_id.clone()).or_default().push(r);
        }
        let samples = grouped
            .into_iter()
            .map(|(id, mut recs)| {
                recs.sort_by_key(|r| r.epoch);
                let head = &recs[0];
                let traj = SampleTrajectory {
                    sample_id: id.clone(),
                    study_id: head.study_id.clone(),
                    view: head.view.clone(),
                    split: head.split,
                    label: head.label,
                    subgroup_tags: head.subgroup_tags.clone(),
                    logits: Vec::new(),
                };
                let logits = recs.into_iter().map(|r| r.logits).collect();
                (id, SampleTrajectory { logits, ..traj })
            })
            .collect();
        TrajectoryStore {
            num_classes,
            epochs,
            samples,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_epochs(&self) -> usize {
        self.epochs.len()
    }

    /// Sorted set of recorded epochs.
    pub fn epochs(&self) -> &[u32] {
        &self.epochs
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, sample_id: &str) -> Option<&SampleTrajectory> {
        self.samples.get(sample_id)
    }

    /// Samples in ascending `sample_id` order.
    pub fn samples(&self) -> impl Iterator<Item = &SampleTrajectory> {
        self.samples.values()
    }

    pub fn full_window(&self) -> Option<EpochWindow> {
        Some(EpochWindow::new(*self.epochs.first()?, *self.epochs.last()?))
    }

    /// Resolves an optional window against the recorded epochs, rejecting
    /// windows that reach outside them or select nothing.
    pub fn resolve_window(&self, window: Option<EpochWindow>) -> Result<EpochWindow> {
        let full = self
            .full_window()
            .ok_or_else(|| Error::data("store has no epochs"))?;
        let w = window.unwrap_or(full);
        if w.lo > w.hi {
            return Err(Error::data(format!("empty epoch window [{}, {}]", w.lo, w.hi)));
        }
        if w.lo < full.lo || w.hi > full.hi {
            return Err(Error::data(format!(
                "epoch window [{}, {}] is not within recorded epochs [{}, {}]",
                w.lo, w.hi, full.lo, full.hi
            )));
        }
        if !self.epochs.iter().any(|&e| w.contains(e)) {
            return Err(Error::data(format!(
                "empty epoch window [{}, {}]: no recorded epochs inside",
                w.lo, w.hi
            )));
        }
        Ok(w)
    }

    /// Logit vectors of one sample restricted to `window`, ascending by epoch.
    pub fn window_logits<'a>(
        &'a self,
        sample: &'a SampleTrajectory,
        window: EpochWindow,
    ) -> impl Iterator<Item = &'a [f64]> + 'a {
        self.epochs
            .iter()
            .zip(&sample.logits)
            .filter(move |(e, _)| window.contains(**e))
            .map(|(_, l)| l.as_slice())
    }

    /// Sub-store holding only the samples of `split`. Class count and epoch
    /// set are preserved even when the result is empty.
    pub fn split_view(&self, split: Split) -> TrajectoryStore {
        TrajectoryStore {
            num_classes: self.num_classes,
            epochs: self.epochs.clone(),
            samples: self
                .samples
                .iter()
                .filter(|(_, s)| s.split == split)
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Flattens back into records: samples by id, epochs ascending.
    pub fn to_records(&self) -> Vec<LogitRecord> {
        let mut out = Vec::with_capacity(self.samples.len() * self.epochs.len());
        for s in self.samples.values() {
            for (&epoch, logits) in self.epochs.iter().zip(&s.logits) {
                out.push(LogitRecord {
                    sample_id: s.sample_id.clone(),
                    study_id: s.study_id.clone(),
                    view: s.view.clone(),
                    split: s.split,
                    label: s.label,
                    epoch,
                    logits: logits.clone(),
                    subgroup_tags: s.subgroup_tags.clone(),
                });
            }
        }
        out
    }
}

/// Epoch-averaged logits of one sample, summed in ascending epoch order.
pub fn average_logits(
    store: &TrajectoryStore,
    sample_id: &str,
    window: Option<EpochWindow>,
) -> Result<Vec<f64>> {
    let sample = store
        .sample(sample_id)
        .ok_or_else(|| Error::data(format!("unknown sample '{sample_id}'")))?;
    let window = store.resolve_window(window)?;
    Ok(mean_over_window(store, sample, window))
}

pub(crate) fn mean_over_window(
    store: &TrajectoryStore,
    sample: &SampleTrajectory,
    window: EpochWindow,
) -> Vec<f64> {
    let mut sum = vec![0.0; store.num_classes()];
    let mut n = 0usize;
    for logits in store.window_logits(sample, window) {
        for (acc, x) in sum.iter_mut().zip(logits) {
            *acc += x;
        }
        n += 1;
    }
    let n = n as f64;
    sum.iter_mut().for_each(|x| *x /= n);
    sum
}

pub fn split_view(store: &TrajectoryStore, split: Split) -> TrajectoryStore {
    store.split_view(split)
}

/// Parses and validates a trajectory file. Errors name the offending line.
pub fn load_trajectories(path: &Path) -> Result<TrajectoryStore> {
    let lines = jsonl::read_lines(path)?;
    let mut line_numbers = Vec::with_capacity(lines.len());
    let mut records = Vec::with_capacity(lines.len());
    for (line_no, text) in &lines {
        records.push(jsonl::parse_line::<LogitRecord>(*line_no, text)?);
        line_numbers.push(*line_no);
    }
    let report = validate_records(&records);
    if !report.is_valid() {
        return Err(Error::data(format!(
            "{}: {}",
            path.display(),
            summarize(&report.errors, |i| format!("line {}", line_numbers[i]))
        )));
    }
    Ok(TrajectoryStore::assemble(records, report.num_classes))
}

pub fn write_trajectories(store: &TrajectoryStore, path: &Path) -> Result<()> {
    jsonl::write_lines(path, store.to_records().iter().map(jsonl::to_line))
}

fn summarize(errors: &[ValidationIssue], locate: impl Fn(usize) -> String) -> String {
    const SHOWN: usize = 5;
    let mut parts: Vec<String> = errors
        .iter()
        .take(SHOWN)
        .map(|e| match e.record_index {
            Some(i) => format!("{}: {}", locate(i), e.rule),
            None => e.rule.clone(),
        })
        .collect();
    if errors.len() > SHOWN {
        parts.push(format!("... and {} more", errors.len() - SHOWN));
    }
    parts.join("; ")
}
