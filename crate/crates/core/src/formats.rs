//! Line-oriented JSON records exchanged with the command-line tool.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heatmap::Peak;
use crate::likelihood::{LikelihoodReport, RefinedPose};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: duplicate id `{id}`")]
    DuplicateId { path: PathBuf, id: String },
}

/// Parses one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, FormatError> {
    let text = fs::read_to_string(path).map_err(|source| FormatError::Io { path: path.to_path_buf(), source })?;
    parse_jsonl(&text, path)
}

pub fn parse_jsonl<T: DeserializeOwned>(text: &str, path: &Path) -> Result<Vec<T>, FormatError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| FormatError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_jsonl<T: Serialize, W: Write>(records: &[T], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
}

/// Reads a heatmap manifest; relative paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, FormatError> {
    let mut entries: Vec<ManifestEntry> = read_jsonl(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut seen = std::collections::BTreeSet::new();
    for e in &mut entries {
        if !seen.insert(e.id.clone()) {
            return Err(FormatError::DuplicateId { path: path.to_path_buf(), id: e.id.clone() });
        }
        if e.path.is_relative() {
            e.path = base.join(&e.path);
        }
    }
    Ok(entries)
}

/// A labeled pose; `null` marks a missing joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub id: String,
    pub pose: Vec<Option<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreLine<'a> {
    pub id: &'a str,
    #[serde(flatten)]
    pub report: &'a LikelihoodReport,
}

/// A single named score, as emitted for the entropy and max-objective modes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalarLine<'a> {
    pub id: &'a str,
    pub mode: &'a str,
    pub total: f64,
}

/// Score-only view of a score line, as consumed by selection.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ScoreInput {
    pub id: String,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefinedLine<'a> {
    pub id: &'a str,
    #[serde(flatten)]
    pub report: LikelihoodReport,
    pub objective: f64,
    pub pose: Vec<Option<Vec<f64>>>,
    pub peak_index: &'a [usize],
}

impl<'a> RefinedLine<'a> {
    pub fn new(id: &'a str, refined: &'a RefinedPose, report: LikelihoodReport) -> Self {
        Self {
            id,
            report,
            objective: refined.objective,
            pose: refined.pose.to_optional(),
            peak_index: &refined.chosen_peak_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeaksLine {
    pub id: String,
    pub joints: Vec<Vec<Peak>>,
}
