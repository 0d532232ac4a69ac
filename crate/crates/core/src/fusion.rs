//! Study-level fusion of per-video predictions.
//!
//! Worst-case rule: when every video of a study predicts the normal class,
//! the study prediction is the mean of all video vectors; otherwise it is the
//! mean over only the videos that predict an abnormal class.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_model::Tags;
use crate::error::{Error, Result};
use crate::jsonl;
use crate::metrics::{predicted_class, Level, Prediction, PredictionSet};

pub const DEFAULT_NORMAL_CLASS: usize = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct StudyGroup {
    pub study_id: String,
    pub label: usize,
    /// `(video id, probability vector)` per member.
    pub members: Vec<(String, Vec<f64>)>,
}

/// Fuses one study's member vectors. Members are summed in a canonical
/// order so the result does not depend on the order they are given in.
pub fn fuse_study(group: &StudyGroup, normal_class: usize) -> Result<Vec<f64>> {
    fuse_vectors(group.members.iter().map(|(_, v)| v.as_slice()), normal_class)
        .ok_or_else(|| Error::data(format!("study '{}' has no members", group.study_id)))
}

/// Worst-case fusion over bare vectors; `None` for an empty input.
pub fn fuse_vectors<'a>(
    members: impl IntoIterator<Item = &'a [f64]>,
    normal_class: usize,
) -> Option<Vec<f64>> {
    let members: Vec<&[f64]> = members.into_iter().collect();
    let c = members.first()?.len();
    let abnormal: Vec<&[f64]> = members
        .iter()
        .copied()
        .filter(|v| predicted_class(v) != normal_class)
        .collect();
    let mut pool = if abnormal.is_empty() { members } else { abnormal };
    pool.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut mean = vec![0.0; c];
    for v in &pool {
        mean.iter_mut().zip(v.iter()).for_each(|(m, x)| *m += x);
    }
    let n = pool.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Some(mean)
}

/// Fuses a video-level prediction set into one entry per study. Study tags
/// are the union of member tags; conflicting values are an error.
pub fn fuse_all(
    videos: &PredictionSet,
    study_map: &BTreeMap<String, String>,
    normal_class: usize,
) -> Result<PredictionSet> {
    if videos.level() != Level::Video {
        return Err(Error::data("fusion expects a video-level prediction set"));
    }
    if normal_class >= videos.num_classes() {
        return Err(Error::config(format!("normal class {normal_class} out of range")));
    }
    struct Acc<'a> {
        label: usize,
        tags: Tags,
        members: Vec<&'a [f64]>,
    }
    let mut studies: BTreeMap<&str, Acc> = BTreeMap::new();
    for p in videos.entries() {
        let study = study_map
            .get(&p.id)
            .ok_or_else(|| Error::data(format!("video '{}' has no study in the study map", p.id)))?;
        let acc = studies.entry(study.as_str()).or_insert_with(|| Acc {
            label: p.label,
            tags: Tags::new(),
            members: Vec::new(),
        });
        if acc.label != p.label {
            return Err(Error::data(format!(
                "label conflict in study '{study}': {} vs {}",
                acc.label, p.label
            )));
        }
        for (k, v) in &p.tags {
            match acc.tags.get(k) {
                Some(prev) if prev != v => {
                    return Err(Error::data(format!(
                        "tag conflict in study '{study}' for '{k}': '{prev}' vs '{v}'"
                    )))
                }
                Some(_) => {}
                None => {
                    acc.tags.insert(k.clone(), v.clone());
                }
            }
        }
        acc.members.push(&p.probs);
    }
    let entries = studies
        .into_iter()
        .map(|(id, acc)| Prediction {
            id: id.to_string(),
            label: acc.label,
            probs: fuse_vectors(acc.members, normal_class).expect("non-empty study"),
            tags: acc.tags,
        })
        .collect();
    PredictionSet::new(Level::Study, videos.num_classes(), entries)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StudyMapRow {
    video_id: String,
    study_id: String,
}

pub fn read_study_map(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (line_no, text) in jsonl::read_lines(path)? {
        let row: StudyMapRow = jsonl::parse_line(line_no, &text)?;
        if let Some(prev) = map.insert(row.video_id.clone(), row.study_id.clone()) {
            if prev != row.study_id {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("video '{}' mapped to two studies", row.video_id),
                });
            }
        }
    }
    Ok(map)
}

pub fn write_study_map(map: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    jsonl::write_lines(
        path,
        map.iter().map(|(v, s)| {
            jsonl::to_line(&StudyMapRow {
                video_id: v.clone(),
                study_id: s.clone(),
            })
        }),
    )
}
