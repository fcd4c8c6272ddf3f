//! Manifest loading and frame-label extraction.
//!
//! Training examples are built by concatenating two consecutive corpus
//! segments and labeling each feature frame 0 (inside an utterance) or
//! 1 (outside). Labels are aligned to the model's downsampled output
//! grid by stride sampling.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{compute_fbank_with_id, AudioError, FeatureConfig, FeatureMatrix, Waveform};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("segment span [{start}, {end}) exceeds audio length {len}s")]
    SpanOutOfRange { start: f64, end: f64, len: f64 },
    #[error("label alignment error: {0}")]
    Alignment(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

/// One reference segment from a corpus manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentRecord {
    #[serde(rename = "audio")]
    pub audio_id: String,
    #[serde(rename = "offset")]
    pub offset_s: f64,
    #[serde(rename = "duration")]
    pub duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translation: Option<String>,
}

impl SegmentRecord {
    pub fn end_s(&self) -> f64 {
        self.offset_s + self.duration_s
    }
}

/// Per-frame 0/1 labels paired with the frame shift that defines the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLabels {
    pub labels: Vec<u8>,
    pub frame_shift_s: f64,
}

impl FrameLabels {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub features: FeatureMatrix,
    pub labels: FrameLabels,
    /// (audio_id, index of the first segment of the pair)
    pub source: (String, usize),
}

/// Load a JSON Lines manifest. Records come back grouped by audio_id
/// and sorted by offset within each group, preserving first-seen group
/// order.
pub fn load_manifest(path: &Path) -> Result<Vec<SegmentRecord>, CorpusError> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SegmentRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Manifest {
                line: i + 1,
                msg: e.to_string(),
            })?;
        if rec.offset_s < 0.0 {
            return Err(CorpusError::Manifest {
                line: i + 1,
                msg: format!("negative offset {}", rec.offset_s),
            });
        }
        if rec.duration_s <= 0.0 {
            return Err(CorpusError::Manifest {
                line: i + 1,
                msg: format!("non-positive duration {}", rec.duration_s),
            });
        }
        records.push(rec);
    }
    // group by audio id in first-seen order, sort within group by offset
    let mut order: Vec<String> = Vec::new();
    for r in &records {
        if !order.contains(&r.audio_id) {
            order.push(r.audio_id.clone());
        }
    }
    let mut grouped = Vec::with_capacity(records.len());
    for id in &order {
        let mut group: Vec<SegmentRecord> =
            records.iter().filter(|r| &r.audio_id == id).cloned().collect();
        group.sort_by(|a, b| a.offset_s.partial_cmp(&b.offset_s).unwrap());
        grouped.extend(group);
    }
    Ok(grouped)
}

/// Label each of `n_frames` frames 0 if its center time falls inside any
/// segment interval [offset, offset + duration), else 1. Frame k's center
/// is span_start_s + k * frame_shift_s + frame_shift_s / 2.
pub fn frame_labels_for_span(
    segments: &[SegmentRecord],
    span_start_s: f64,
    frame_shift_s: f64,
    n_frames: usize,
) -> FrameLabels {
    let labels = (0..n_frames)
        .map(|k| {
            let center = span_start_s + k as f64 * frame_shift_s + frame_shift_s / 2.0;
            let inside = segments
                .iter()
                .any(|s| center >= s.offset_s && center < s.end_s());
            if inside {
                0
            } else {
                1
            }
        })
        .collect();
    FrameLabels {
        labels,
        frame_shift_s,
    }
}

/// Build one training example from two consecutive segments of the same
/// audio: features over [seg_i.offset, seg_next.end), labels marking the
/// inter-segment gap as 1.
pub fn extract_pair_example(
    seg_i: &SegmentRecord,
    seg_next: &SegmentRecord,
    seg_index: usize,
    wave: &Waveform,
    fcfg: &FeatureConfig,
) -> Result<TrainingExample, CorpusError> {
    debug_assert_eq!(seg_i.audio_id, seg_next.audio_id);
    let start = seg_i.offset_s;
    let end = seg_next.end_s();
    if end > wave.duration_s() + 1e-3 {
        return Err(CorpusError::SpanOutOfRange {
            start,
            end,
            len: wave.duration_s(),
        });
    }
    let span = wave.slice_seconds(start, end);
    let feats = compute_fbank_with_id(&span, fcfg, &seg_i.audio_id)?;
    let labels = frame_labels_for_span(
        &[seg_i.clone(), seg_next.clone()],
        start,
        feats.frame_shift_s,
        feats.num_frames(),
    );
    Ok(TrainingExample {
        features: feats,
        labels,
        source: (seg_i.audio_id.clone(), seg_index),
    })
}

/// Stride-sample full-rate labels onto the model output grid:
/// output[k] = labels[min(k * factor, N - 1)].
pub fn downsample_labels(
    labels: &FrameLabels,
    out_len: usize,
    factor: usize,
) -> Result<FrameLabels, CorpusError> {
    if factor < 1 {
        return Err(CorpusError::Alignment("factor must be >= 1".into()));
    }
    let n = labels.len();
    if n == 0 {
        return Err(CorpusError::Alignment("empty label sequence".into()));
    }
    let expected = n.div_ceil(factor);
    if out_len.abs_diff(expected) > 1 {
        return Err(CorpusError::Alignment(format!(
            "out_len {out_len} inconsistent with ceil({n}/{factor}) = {expected}"
        )));
    }
    let out = (0..out_len)
        .map(|k| labels.labels[(k * factor).min(n - 1)])
        .collect();
    Ok(FrameLabels {
        labels: out,
        frame_shift_s: labels.frame_shift_s * factor as f64,
    })
}

/// Debug label dump: one 0/1 character per frame.
pub fn write_label_dump(path: &Path, labels: &FrameLabels) -> Result<(), CorpusError> {
    let mut file = File::create(path)?;
    let text: String = labels
        .labels
        .iter()
        .map(|&l| if l == 0 { '0' } else { '1' })
        .collect();
    file.write_all(text.as_bytes())?;
    Ok(())
}

pub fn read_label_dump(path: &Path, frame_shift_s: f64) -> Result<FrameLabels, CorpusError> {
    let text = std::fs::read_to_string(path)?;
    let mut labels = Vec::with_capacity(text.len());
    for (i, c) in text.trim().chars().enumerate() {
        match c {
            '0' => labels.push(0),
            '1' => labels.push(1),
            _ => {
                return Err(CorpusError::Alignment(format!(
                    "label dump char {i} is {c:?}, expected 0 or 1"
                )))
            }
        }
    }
    Ok(FrameLabels {
        labels,
        frame_shift_s,
    })
}
