//! Soft training targets built from recorded trajectories.
//!
//! * `rt4u`: mean over epochs of per-epoch softmaxes (softmax, then average).
//! * `pseudo_t`: softmax of the temperature-scaled epoch-averaged logits.
//! * `pseudo_d`: softmax of the Dirichlet-mapped epoch-averaged logits.
//! * `onehot`: the recorded label with a small floor, as a control.
//!
//! Only train-split samples receive labels; validation logits are used for
//! fitting the calibration map and nothing else.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::{self, CalibrationMap, DirichletMap, TemperatureParam};
use crate::data_model::{mean_over_window, EpochWindow, Split, TrajectoryStore};
use crate::error::{Error, Result};
use crate::jsonl;

/// Floor added to every class of a one-hot target before renormalizing.
pub const ONEHOT_EPSILON: f64 = 1e-6;

const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Onehot,
    Rt4u,
    PseudoT,
    PseudoD,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Onehot, Method::Rt4u, Method::PseudoT, Method::PseudoD];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Onehot => "onehot",
            Method::Rt4u => "rt4u",
            Method::PseudoT => "pseudo_t",
            Method::PseudoD => "pseudo_d",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown pseudo-label method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub method: Method,
    pub num_classes: usize,
    pub epoch_window: EpochWindow,
    /// Probability vector per train sample, keyed by sample id.
    pub entries: BTreeMap<String, Vec<f64>>,
}

impl PseudoLabelSet {
    /// Checks the probability-vector invariants of every entry.
    pub fn validate(&self) -> Result<()> {
        for (id, probs) in &self.entries {
            check_probs(id, probs, self.num_classes)?;
        }
        Ok(())
    }

    pub fn get(&self, sample_id: &str) -> Option<&[f64]> {
        self.entries.get(sample_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn check_probs(id: &str, probs: &[f64], c: usize) -> Result<()> {
    if probs.len() != c {
        return Err(Error::data(format!(
            "pseudo-label for '{id}' has {} entries, expected {c}",
            probs.len()
        )));
    }
    if probs.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
        return Err(Error::data(format!(
            "pseudo-label for '{id}' has non-positive or non-finite entries"
        )));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::data(format!(
            "pseudo-label for '{id}' sums to {sum}, not 1"
        )));
    }
    Ok(())
}

fn build(
    store: &TrajectoryStore,
    method: Method,
    window: Option<EpochWindow>,
    mut label: impl FnMut(&crate::data_model::SampleTrajectory, EpochWindow) -> Result<Vec<f64>>,
) -> Result<PseudoLabelSet> {
    let window = store.resolve_window(window)?;
    let mut entries = BTreeMap::new();
    for sample in store.samples().filter(|s| s.split == Split::Train) {
        let probs = label(sample, window)?;
        check_probs(&sample.sample_id, &probs, store.num_classes())?;
        entries.insert(sample.sample_id.clone(), probs);
    }
    if entries.is_empty() && method != Method::Onehot {
        return Err(Error::data("store has no train-split samples"));
    }
    Ok(PseudoLabelSet {
        method,
        num_classes: store.num_classes(),
        epoch_window: window,
        entries,
    })
}

/// Time-averaged class confidence over the epoch window.
pub fn make_rt4u(store: &TrajectoryStore, window: Option<EpochWindow>) -> Result<PseudoLabelSet> {
    let c = store.num_classes();
    build(store, Method::Rt4u, window, |sample, w| {
        let mut mean = vec![0.0; c];
        let mut probs = vec![0.0; c];
        let mut n = 0usize;
        for logits in store.window_logits(sample, w) {
            calibration::softmax_into(logits, &mut probs);
            mean.iter_mut().zip(&probs).for_each(|(m, p)| *m += p);
            n += 1;
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        Ok(mean)
    })
}

pub fn make_pseudo_t(
    store: &TrajectoryStore,
    gamma: TemperatureParam,
    window: Option<EpochWindow>,
) -> Result<PseudoLabelSet> {
    build(store, Method::PseudoT, window, |sample, w| {
        let v = mean_over_window(store, sample, w);
        calibration::softmax(&calibration::apply_temperature(gamma, &v))
    })
}

pub fn make_pseudo_d(
    store: &TrajectoryStore,
    map: &DirichletMap,
    window: Option<EpochWindow>,
) -> Result<PseudoLabelSet> {
    if map.num_classes() != store.num_classes() {
        return Err(Error::data(format!(
            "Dirichlet map dimension {} does not match {} classes",
            map.num_classes(),
            store.num_classes()
        )));
    }
    build(store, Method::PseudoD, window, |sample, w| {
        let v = mean_over_window(store, sample, w);
        calibration::softmax(&calibration::apply_dirichlet(map, &v)?)
    })
}

/// Recorded labels as floored one-hot vectors:
/// `eps / (1 + C eps)` off-label and `(1 + eps) / (1 + C eps)` on-label.
pub fn make_onehot(store: &TrajectoryStore) -> Result<PseudoLabelSet> {
    let c = store.num_classes();
    let denom = 1.0 + c as f64 * ONEHOT_EPSILON;
    build(store, Method::Onehot, None, |sample, _| {
        let mut v = vec![ONEHOT_EPSILON / denom; c];
        v[sample.label] = (1.0 + ONEHOT_EPSILON) / denom;
        Ok(v)
    })
}

/// Dispatches on `method`, enforcing which methods take a calibration map.
pub fn make_pseudo_labels(
    store: &TrajectoryStore,
    method: Method,
    calibration: Option<&CalibrationMap>,
    window: Option<EpochWindow>,
) -> Result<PseudoLabelSet> {
    match (method, calibration) {
        (Method::Rt4u | Method::Onehot, Some(_)) => Err(Error::Usage(format!(
            "calibration not applicable to method '{method}'"
        ))),
        (Method::PseudoT | Method::PseudoD, None) => Err(Error::Usage(format!(
            "method '{method}' requires a calibration file"
        ))),
        (Method::Rt4u, None) => make_rt4u(store, window),
        (Method::Onehot, None) => make_onehot(store),
        (Method::PseudoT, Some(CalibrationMap::Temperature(g))) => make_pseudo_t(store, *g, window),
        (Method::PseudoD, Some(CalibrationMap::Dirichlet(m))) => make_pseudo_d(store, m, window),
        (_, Some(map)) => Err(Error::Usage(format!(
            "map type mismatch: method '{method}' cannot use a {} calibration",
            map.kind()
        ))),
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    num_classes: usize,
    epoch_window: EpochWindow,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Row {
    sample_id: String,
    method: Method,
    probs: Vec<f64>,
}

pub fn write_pseudo_labels(set: &PseudoLabelSet, path: &Path) -> Result<()> {
    let header = jsonl::to_line(&Header {
        num_classes: set.num_classes,
        epoch_window: set.epoch_window,
    });
    let rows = set.entries.iter().map(|(id, probs)| {
        jsonl::to_line(&Row {
            sample_id: id.clone(),
            method: set.method,
            probs: probs.clone(),
        })
    });
    jsonl::write_lines(path, std::iter::once(header).chain(rows))
}

pub fn read_pseudo_labels(path: &Path) -> Result<PseudoLabelSet> {
    let lines = jsonl::read_lines(path)?;
    let mut iter = lines.iter();
    let (line_no, text) = iter
        .next()
        .ok_or_else(|| Error::data(format!("{}: empty pseudo-label file", path.display())))?;
    let header: Header = jsonl::parse_line(*line_no, text)?;
    let mut method = None;
    let mut entries = BTreeMap::new();
    for (line_no, text) in iter {
        let row: Row = jsonl::parse_line(*line_no, text)?;
        if *method.get_or_insert(row.method) != row.method {
            return Err(Error::Parse {
                line: *line_no,
                message: "mixed methods in one pseudo-label file".into(),
            });
        }
        check_probs(&row.sample_id, &row.probs, header.num_classes).map_err(|e| Error::Parse {
            line: *line_no,
            message: e.to_string(),
        })?;
        if entries.insert(row.sample_id.clone(), row.probs).is_some() {
            return Err(Error::Parse {
                line: *line_no,
                message: format!("duplicate sample '{}'", row.sample_id),
            });
        }
    }
    let method = method.ok_or_else(|| Error::data(format!("{}: no pseudo-label rows", path.display())))?;
    Ok(PseudoLabelSet {
        method,
        num_classes: header.num_classes,
        epoch_window: header.epoch_window,
        entries,
    })
}
