//! Label decoding: per-frame argmax, the hybrid rule that requires
//! model/VAD agreement until a segment exceeds maxlen, run-length
//! conversion to segments, fixed-window streaming inference, and the
//! fixed-length baseline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{compute_fbank_with_id, AudioError, FeatureConfig, Waveform};
use crate::model::{forward, LabelProbabilities, ModelError, ModelParams, SUBSAMPLE_FACTOR};
use crate::vad::{vad_to_model_frames_from, VadError, VadTrace};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("hybrid mode requires a VAD trace")]
    MissingVad,
    #[error("non-positive duration {0}")]
    BadDuration(f64),
    #[error("window {window}: {source}")]
    Window {
        window: usize,
        #[source]
        source: Box<DecodeError>,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vad(#[from] VadError),
}

/// A predicted segment in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentHypothesis {
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    ModelOnly,
    Hybrid,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Fixed inference window length T.
    pub window_t_s: f64,
    /// Segment length at which the hybrid rule relaxes from AND to OR.
    pub maxlen_s: f64,
    pub min_segment_s: f64,
    pub min_gap_frames: usize,
    pub mode: DecodeMode,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            window_t_s: 20.0,
            maxlen_s: 10.0,
            min_segment_s: 0.2,
            min_gap_frames: 1,
            mode: DecodeMode::ModelOnly,
        }
    }
}

/// Per-frame argmax over the two classes; exact ties go to 0 (inside).
pub fn argmax_labels(probs: &LabelProbabilities) -> Vec<u8> {
    probs
        .probs
        .rows()
        .into_iter()
        .map(|row| if row[1] > row[0] { 1 } else { 0 })
        .collect()
}

/// The hybrid recursion over plain 0/1 sequences. `len_state` counts
/// consecutive in-utterance frames decided so far and carries across
/// calls (windows). Below maxlen a frame is a boundary only when model
/// AND vad agree; at or above it, when either allows it.
pub fn hybrid_decode(
    model: &[u8],
    vad: &[u8],
    maxlen_frames: usize,
    len_state: &mut usize,
) -> Vec<u8> {
    let mut out = Vec::with_capacity(model.len());
    for (&m, &v) in model.iter().zip(vad.iter()) {
        let l = if *len_state < maxlen_frames {
            m & v
        } else {
            m | v
        };
        *len_state = if l == 0 { *len_state + 1 } else { 0 };
        out.push(l);
    }
    out
}

/// Hybrid decoding of one probability matrix against a VAD sequence on
/// the same model frame grid.
pub fn hybrid_labels(
    probs: &LabelProbabilities,
    vad: &[u8],
    cfg: &DecodeConfig,
) -> Result<Vec<u8>, DecodeError> {
    if vad.len() != probs.probs.nrows() {
        return Err(DecodeError::Length(format!(
            "{} vad frames vs {} probability rows",
            vad.len(),
            probs.probs.nrows()
        )));
    }
    let model = argmax_labels(probs);
    let maxlen_frames = maxlen_to_frames(cfg.maxlen_s, probs.frame_duration_s);
    let mut len_state = 0usize;
    Ok(hybrid_decode(&model, vad, maxlen_frames, &mut len_state))
}

fn maxlen_to_frames(maxlen_s: f64, frame_duration_s: f64) -> usize {
    ((maxlen_s / frame_duration_s).round() as usize).max(1)
}

/// Turn a 0/1 label sequence into segments: maximal runs of 0 become
/// segments, interior 1-runs shorter than min_gap_frames are absorbed,
/// and segments shorter than min_segment_s are merged with the nearer
/// neighbor (ties prefer the previous one).
pub fn labels_to_segments(
    labels: &[u8],
    frame_duration_s: f64,
    origin_s: f64,
    cfg: &DecodeConfig,
) -> Vec<SegmentHypothesis> {
    let mut labels = labels.to_vec();
    if cfg.min_gap_frames > 1 {
        let mut i = 0;
        while i < labels.len() {
            if labels[i] == 1 {
                let mut j = i;
                while j < labels.len() && labels[j] == 1 {
                    j += 1;
                }
                if i > 0 && j < labels.len() && j - i < cfg.min_gap_frames {
                    labels[i..j].fill(0);
                }
                i = j;
            } else {
                i += 1;
            }
        }
    }
    let fd = frame_duration_s;
    let mut segments: Vec<SegmentHypothesis> = Vec::new();
    let mut start: Option<usize> = None;
    for (i, &l) in labels.iter().enumerate() {
        match (l, start) {
            (0, None) => start = Some(i),
            (1, Some(s)) => {
                segments.push(SegmentHypothesis {
                    start_s: origin_s + s as f64 * fd,
                    end_s: origin_s + i as f64 * fd,
                });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        segments.push(SegmentHypothesis {
            start_s: origin_s + s as f64 * fd,
            end_s: origin_s + labels.len() as f64 * fd,
        });
    }
    if cfg.min_segment_s > 0.0 {
        merge_short_segments(&mut segments, cfg.min_segment_s);
    }
    segments
}

fn merge_short_segments(segments: &mut Vec<SegmentHypothesis>, min_segment_s: f64) {
    loop {
        let short = segments.iter().position(|s| {
            s.end_s - s.start_s < min_segment_s && segments.len() > 1
        });
        let Some(i) = short else { break };
        let prev_gap = if i > 0 {
            Some(segments[i].start_s - segments[i - 1].end_s)
        } else {
            None
        };
        let next_gap = if i + 1 < segments.len() {
            Some(segments[i + 1].start_s - segments[i].end_s)
        } else {
            None
        };
        match (prev_gap, next_gap) {
            (Some(p), Some(n)) if p <= n => {
                segments[i - 1].end_s = segments[i].end_s;
                segments.remove(i);
            }
            (Some(_), None) => {
                segments[i - 1].end_s = segments[i].end_s;
                segments.remove(i);
            }
            (_, Some(_)) => {
                segments[i + 1].start_s = segments[i].start_s;
                segments.remove(i);
            }
            (None, None) => break,
        }
    }
}

/// Windowed inference over a whole recording: cut into T-second windows,
/// run the model per window, decode labels (the hybrid length state
/// carries across window boundaries), and assemble segments over the
/// full stream.
pub fn segment_stream(
    wave: &Waveform,
    params: &ModelParams,
    vad_trace: Option<&VadTrace>,
    cfg: &DecodeConfig,
    fcfg: &FeatureConfig,
) -> Result<Vec<SegmentHypothesis>, DecodeError> {
    if cfg.mode == DecodeMode::Hybrid && vad_trace.is_none() {
        return Err(DecodeError::MissingVad);
    }
    let sr = wave.sample_rate as usize;
    let window_samples = ((cfg.window_t_s * sr as f64).round() as usize).max(1);
    let mut bounds: Vec<(usize, usize)> = Vec::new();
    let mut pos = 0;
    while pos < wave.samples.len() {
        let end = (pos + window_samples).min(wave.samples.len());
        bounds.push((pos, end));
        pos = end;
    }
    // a trailing window too short for the subsampler joins the previous one
    let min_samples = fcfg.frame_length_samples(wave.sample_rate)
        + (SUBSAMPLE_FACTOR - 1) * fcfg.frame_shift_samples(wave.sample_rate);
    if bounds.len() > 1 {
        let (last_start, last_end) = *bounds.last().unwrap();
        if last_end - last_start < min_samples {
            bounds.pop();
            bounds.last_mut().unwrap().1 = last_end;
        }
    }

    let fd = fcfg.frame_shift_ms / 1000.0 * SUBSAMPLE_FACTOR as f64;
    let maxlen_frames = maxlen_to_frames(cfg.maxlen_s, fd);
    let mut len_state = 0usize;
    let mut all_labels = Vec::new();
    for (w, &(a, b)) in bounds.iter().enumerate() {
        let wrap = |e: DecodeError| DecodeError::Window {
            window: w,
            source: Box::new(e),
        };
        let chunk = Waveform {
            samples: wave.samples[a..b].to_vec(),
            sample_rate: wave.sample_rate,
        };
        let feats = compute_fbank_with_id(&chunk, fcfg, "window")
            .map_err(|e| wrap(e.into()))?;
        let probs = forward(params, &feats, false).map_err(|e| wrap(e.into()))?;
        let model = argmax_labels(&probs);
        let labels = match cfg.mode {
            DecodeMode::ModelOnly => model,
            DecodeMode::Hybrid => {
                let origin_s = a as f64 / sr as f64;
                let vad = vad_to_model_frames_from(
                    vad_trace.unwrap(),
                    model.len(),
                    fd,
                    origin_s,
                )
                .map_err(|e| wrap(e.into()))?;
                hybrid_decode(&model, &vad, maxlen_frames, &mut len_state)
            }
        };
        all_labels.extend(labels);
    }

    let mut segments = labels_to_segments(&all_labels, fd, 0.0, cfg);
    let duration = wave.duration_s();
    segments.retain(|s| s.start_s < duration);
    for s in &mut segments {
        s.end_s = s.end_s.min(duration);
    }
    Ok(segments)
}

/// Baseline 2: split at a pre-defined fixed length.
pub fn fixed_length_segment(
    duration_s: f64,
    length_s: f64,
) -> Result<Vec<SegmentHypothesis>, DecodeError> {
    if duration_s <= 0.0 {
        return Err(DecodeError::BadDuration(duration_s));
    }
    if length_s <= 0.0 {
        return Err(DecodeError::BadDuration(length_s));
    }
    let mut segments = Vec::new();
    let mut start = 0.0;
    while start < duration_s {
        let end = (start + length_s).min(duration_s);
        segments.push(SegmentHypothesis {
            start_s: start,
            end_s: end,
        });
        start += length_s;
    }
    Ok(segments)
}

/// JSON Lines segment record with 3-decimal fixed-point seconds.
pub fn format_segment_jsonl(audio_id: &str, seg: &SegmentHypothesis) -> String {
    format!(
        "{{\"audio\": {}, \"start\": {:.3}, \"end\": {:.3}}}",
        serde_json::to_string(audio_id).unwrap(),
        seg.start_s,
        seg.end_s
    )
}

pub fn format_segment_tsv(audio_id: &str, seg: &SegmentHypothesis) -> String {
    format!("{audio_id}\t{:.3}\t{:.3}", seg.start_s, seg.end_s)
}
