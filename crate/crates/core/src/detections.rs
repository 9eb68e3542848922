//! Per-frame detection records, the JSONL sidecar format and class-set
//! derivation.
//!
//! Sidecar lines look like
//! `{"t": 0, "detections": [{"label": "chair", "conf": 0.9, "bbox": [x, y, w, h]}]}`.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.25;

#[derive(thiserror::Error, Debug)]
pub enum DetectionError {
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("line {line}: duplicate timestep {timestep}")]
    DuplicateTimestep { line: usize, timestep: usize },
    #[error("line {line}: {message}")]
    SchemaViolation { line: usize, message: String },
    #[error("failed to write detections: {0}")]
    WriteError(#[source] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub label: String,
    pub conf: f64,
    pub bbox: [f64; 4],
}

impl Detection {
    fn check(&self) -> Result<(), String> {
        if self.label.is_empty() {
            return Err("empty label".into());
        }
        if !(0.0..=1.0).contains(&self.conf) {
            return Err(format!("confidence {} outside [0, 1]", self.conf));
        }
        if !(self.bbox[2] > 0.0 && self.bbox[3] > 0.0) {
            return Err(format!("bbox width/height must be positive, got {:?}", self.bbox));
        }
        if self.bbox.iter().any(|v| !v.is_finite()) {
            return Err("non-finite bbox".into());
        }
        Ok(())
    }
}

/// One sidecar line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameDetections {
    pub t: usize,
    pub detections: Vec<Detection>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectionTimeline {
    entries: Vec<FrameDetections>,
    vocabulary: BTreeSet<String>,
}

impl DetectionTimeline {
    /// Builds a timeline, sorting by timestep. Fails on duplicate timesteps
    /// or invalid detections.
    pub fn new(mut entries: Vec<FrameDetections>) -> Result<Self, DetectionError> {
        for (i, e) in entries.iter().enumerate() {
            for d in &e.detections {
                d.check().map_err(|message| DetectionError::SchemaViolation { line: i + 1, message })?;
            }
        }
        entries.sort_by_key(|e| e.t);
        for (i, w) in entries.windows(2).enumerate() {
            if w[0].t == w[1].t {
                return Err(DetectionError::DuplicateTimestep {
                    line: i + 2,
                    timestep: w[1].t,
                });
            }
        }
        let vocabulary = entries
            .iter()
            .flat_map(|e| e.detections.iter().map(|d| d.label.clone()))
            .collect();
        Ok(Self { entries, vocabulary })
    }

    pub fn entries(&self) -> &[FrameDetections] {
        &self.entries
    }

    pub fn vocabulary(&self) -> &BTreeSet<String> {
        &self.vocabulary
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn timesteps(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.t)
    }

    /// Class sets C_t for every entry at the given threshold.
    pub fn class_sets(&self, conf_threshold: f64) -> Vec<(usize, ClassSet)> {
        self.entries
            .iter()
            .map(|e| (e.t, class_set(&e.detections, conf_threshold)))
            .collect()
    }
}

/// The distinct labels detected in a frame.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassSet {
    labels: BTreeSet<String>,
}

impl ClassSet {
    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &BTreeSet<String> {
        &self.labels
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn overlap(&self, other: &BTreeSet<String>) -> usize {
        self.labels.iter().filter(|l| other.contains(*l)).count()
    }
}

impl<S: Into<String>> FromIterator<S> for ClassSet {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self {
            labels: iter.into_iter().map(Into::into).collect(),
        }
    }
}

pub fn class_set(detections: &[Detection], conf_threshold: f64) -> ClassSet {
    detections
        .iter()
        .filter(|d| d.conf >= conf_threshold)
        .map(|d| d.label.as_str())
        .collect()
}

pub fn parse_detections<R: BufRead>(source: R) -> Result<DetectionTimeline, DetectionError> {
    let mut entries = Vec::new();
    let mut seen = std::collections::HashMap::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| DetectionError::ParseError {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: FrameDetections = serde_json::from_str(&line).map_err(|e| DetectionError::ParseError {
            line: line_no,
            message: e.to_string(),
        })?;
        for d in &entry.detections {
            d.check()
                .map_err(|message| DetectionError::SchemaViolation { line: line_no, message })?;
        }
        if seen.insert(entry.t, line_no).is_some() {
            return Err(DetectionError::DuplicateTimestep {
                line: line_no,
                timestep: entry.t,
            });
        }
        entries.push(entry);
    }
    DetectionTimeline::new(entries)
}

pub fn parse_detections_str(text: &str) -> Result<DetectionTimeline, DetectionError> {
    parse_detections(text.as_bytes())
}

pub fn write_detections<W: Write>(timeline: &DetectionTimeline, mut sink: W) -> Result<(), DetectionError> {
    for entry in timeline.entries() {
        serde_json::to_writer(&mut sink, entry).map_err(|e| DetectionError::WriteError(e.into()))?;
        sink.write_all(b"\n").map_err(DetectionError::WriteError)?;
    }
    sink.flush().map_err(DetectionError::WriteError)
}
