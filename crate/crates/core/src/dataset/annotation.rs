//! Append-only label log for manual review of flagged clips, with the
//! latest-per-annotator view, expert adjudication and inter-annotator
//! agreement.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::record::{Catalog, Label, Scene};
use crate::error::{Error, Result};

/// Annotator id whose label overrides the others.
pub const EXPERT: &str = "expert";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub clip_id: String,
    pub annotator_id: String,
    pub label: Label,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    /// Row of the annotation protocol that motivated the label.
    #[serde(default)]
    pub protocol_row: Option<usize>,
}

/// One (scene, driving behavior, gaze behavior) -> label guideline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolRow {
    pub id: usize,
    pub scene: Scene,
    pub driving_behavior: String,
    pub gaze_behavior: String,
    pub label: Label,
}

pub fn protocol_rows() -> Vec<ProtocolRow> {
    serde_json::from_str(include_str!("../../data/protocol.json"))
        .expect("bundled protocol table is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Disagreement {
    pub clip_id: String,
    pub labels: BTreeMap<String, Label>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementReport {
    /// Clips with at least two non-expert annotators.
    pub eligible: usize,
    pub matching: usize,
    /// `None` when no clip is eligible.
    pub fraction: Option<f64>,
    pub disagreements: Vec<Disagreement>,
}

/// The label log, optionally mirrored to a file. Only flagged clips may be
/// labeled; every accepted record is appended and never rewritten.
#[derive(Debug, Default)]
pub struct AnnotationStore {
    log: Vec<AnnotationRecord>,
    file: Option<(PathBuf, File)>,
}

impl AnnotationStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Replays an existing log (if any) and appends new records to it.
    pub fn open(path: &Path) -> Result<Self> {
        let mut log = Vec::new();
        if path.exists() {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                log.push(serde_json::from_str(&line).map_err(|e| Error::Schema {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })?);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            log,
            file: Some((path.to_path_buf(), file)),
        })
    }

    pub fn log(&self) -> &[AnnotationRecord] {
        &self.log
    }

    pub fn record_label(&mut self, catalog: &Catalog, record: AnnotationRecord) -> Result<()> {
        let Some(clip) = catalog.get(&record.clip_id) else {
            return Err(Error::Validation(format!("unknown clip {}", record.clip_id)));
        };
        if record.annotator_id.trim().is_empty() {
            return Err(Error::Validation("annotator_id must not be empty".into()));
        }
        if record.label == Label::Unlabeled {
            return Err(Error::Validation(
                "label must be attentive, distracted or erroneous".into(),
            ));
        }
        if let Some(row) = record.protocol_row {
            let rows = protocol_rows().len();
            if row >= rows {
                return Err(Error::Validation(format!(
                    "protocol_row {row} out of range (0..{rows})"
                )));
            }
        }
        if !clip.flagged {
            return Err(Error::Policy(format!(
                "clip {} is not flagged for manual review",
                record.clip_id
            )));
        }
        if let Some((path, file)) = &mut self.file {
            let mut line = serde_json::to_vec(&record)?;
            line.push(b'\n');
            file.write_all(&line)
                .and_then(|_| file.sync_data())
                .map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.log.push(record);
        Ok(())
    }

    /// Latest record per (clip, annotator); later log entries win.
    pub fn latest(&self) -> BTreeMap<&str, BTreeMap<&str, &AnnotationRecord>> {
        let mut view: BTreeMap<&str, BTreeMap<&str, &AnnotationRecord>> = BTreeMap::new();
        for record in &self.log {
            view.entry(&record.clip_id)
                .or_default()
                .insert(&record.annotator_id, record);
        }
        view
    }

    pub fn labels_for(&self, clip_id: &str) -> BTreeMap<String, Label> {
        self.latest()
            .get(clip_id)
            .map(|m| m.iter().map(|(a, r)| (a.to_string(), r.label)).collect())
            .unwrap_or_default()
    }

    /// Expert label if present, otherwise the label all other annotators agree on.
    pub fn final_label(&self, clip_id: &str) -> Option<Label> {
        let labels = self.labels_for(clip_id);
        if let Some(&expert) = labels.get(EXPERT) {
            return Some(expert);
        }
        let mut values = labels.values();
        let first = *values.next()?;
        values.all(|&l| l == first).then_some(first)
    }

    pub fn agreement(&self) -> AgreementReport {
        let mut eligible = 0;
        let mut matching = 0;
        let mut disagreements = Vec::new();
        for (clip, annotators) in self.latest() {
            let labels: BTreeMap<String, Label> = annotators
                .iter()
                .filter(|(a, _)| **a != EXPERT)
                .map(|(a, r)| (a.to_string(), r.label))
                .collect();
            if labels.len() < 2 {
                continue;
            }
            eligible += 1;
            let first = *labels.values().next().expect("two labels");
            if labels.values().all(|&l| l == first) {
                matching += 1;
            } else {
                disagreements.push(Disagreement {
                    clip_id: clip.to_string(),
                    labels,
                });
            }
        }
        AgreementReport {
            eligible,
            matching,
            fraction: (eligible > 0).then(|| matching as f64 / eligible as f64),
            disagreements,
        }
    }
}
