//! Energy-based voice activity detection. Per-frame log energies are
//! split by 1-D two-cluster k-means; the active threshold interpolates
//! between the cluster centers according to the aggressiveness level.
//! Decisions use 0 = active speech, 1 = inactive, matching the
//! segmenter's inside-utterance convention.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use thiserror::Error;

use crate::audio::Waveform;
use crate::decoder::SegmentHypothesis;

const ENERGY_EPS: f64 = 1e-12;
/// Below this cluster separation (nats) the audio is treated as having
/// no speech at all.
const DEGENERATE_GAP_NATS: f64 = 1.0;

#[derive(Debug, Error)]
pub enum VadError {
    #[error("vad configuration error: {0}")]
    Config(String),
    #[error("audio shorter than one VAD frame ({frame_ms} ms)")]
    TooShort { frame_ms: u32 },
    #[error("empty VAD trace")]
    EmptyTrace,
    #[error("vad trace parse error: {0}")]
    Trace(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct VadConfig {
    /// One of 10, 20, 30.
    pub frame_ms: u32,
    /// 1, 2 or 3; higher marks fewer frames active.
    pub aggressiveness: u8,
    pub hangover_ms: u32,
    /// Odd median-smoothing window length in frames.
    pub smoothing_frames: usize,
}

impl Default for VadConfig {
    fn default() -> Self {
        VadConfig {
            frame_ms: 10,
            aggressiveness: 2,
            hangover_ms: 200,
            smoothing_frames: 5,
        }
    }
}

impl VadConfig {
    pub fn validate(&self) -> Result<(), VadError> {
        if ![10, 20, 30].contains(&self.frame_ms) {
            return Err(VadError::Config(format!(
                "frame_ms must be 10, 20 or 30, got {}",
                self.frame_ms
            )));
        }
        if !(1..=3).contains(&self.aggressiveness) {
            return Err(VadError::Config(format!(
                "aggressiveness must be 1, 2 or 3, got {}",
                self.aggressiveness
            )));
        }
        if self.smoothing_frames % 2 == 0 {
            return Err(VadError::Config(format!(
                "smoothing_frames must be odd, got {}",
                self.smoothing_frames
            )));
        }
        Ok(())
    }

    fn alpha(&self) -> f64 {
        match self.aggressiveness {
            1 => 0.3,
            2 => 0.5,
            _ => 0.7,
        }
    }
}

/// Per-frame VAD decisions: 0 = active, 1 = inactive.
#[derive(Debug, Clone, PartialEq)]
pub struct VadTrace {
    pub decisions: Vec<u8>,
    pub frame_ms: u32,
}

impl VadTrace {
    pub fn frame_s(&self) -> f64 {
        self.frame_ms as f64 / 1000.0
    }
}

fn kmeans2(values: &[f64]) -> (f64, f64) {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut low, mut high) = (min, max);
    for _ in 0..100 {
        let mid = (low + high) / 2.0;
        let (mut s_lo, mut n_lo, mut s_hi, mut n_hi) = (0.0, 0usize, 0.0, 0usize);
        for &v in values {
            if v <= mid {
                s_lo += v;
                n_lo += 1;
            } else {
                s_hi += v;
                n_hi += 1;
            }
        }
        let new_low = if n_lo > 0 { s_lo / n_lo as f64 } else { low };
        let new_high = if n_hi > 0 { s_hi / n_hi as f64 } else { high };
        if (new_low - low).abs() < 1e-12 && (new_high - high).abs() < 1e-12 {
            break;
        }
        low = new_low;
        high = new_high;
    }
    (low, high)
}

fn median_smooth(decisions: &mut Vec<u8>, window: usize) {
    if window <= 1 || decisions.is_empty() {
        return;
    }
    let half = window / 2;
    let orig = decisions.clone();
    for i in 0..orig.len() {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(orig.len());
        let ones: usize = orig[lo..hi].iter().map(|&d| d as usize).sum();
        decisions[i] = if 2 * ones > hi - lo { 1 } else { 0 };
    }
}

fn apply_hangover(decisions: &mut [u8], hang_frames: usize) {
    if hang_frames == 0 {
        return;
    }
    let mut since_active = usize::MAX;
    for d in decisions.iter_mut() {
        if *d == 0 {
            since_active = 0;
        } else if since_active < hang_frames {
            since_active += 1;
            *d = 0;
        }
    }
}

/// Frame the audio, cluster log energies, threshold, smooth, and extend
/// active runs by the hangover.
pub fn vad_decide(wave: &Waveform, config: &VadConfig) -> Result<VadTrace, VadError> {
    config.validate()?;
    let frame_len = (config.frame_ms as usize * wave.sample_rate as usize) / 1000;
    let n_frames = wave.samples.len() / frame_len;
    if n_frames == 0 {
        return Err(VadError::TooShort {
            frame_ms: config.frame_ms,
        });
    }
    let energies: Vec<f64> = (0..n_frames)
        .map(|k| {
            let frame = &wave.samples[k * frame_len..(k + 1) * frame_len];
            (frame.iter().map(|s| s * s).sum::<f64>() + ENERGY_EPS).ln()
        })
        .collect();
    let (c_low, c_high) = kmeans2(&energies);
    let mut decisions: Vec<u8> = if c_high - c_low < DEGENERATE_GAP_NATS {
        // single-cluster audio (all silence or uniform noise): no speech
        vec![1; n_frames]
    } else {
        let alpha = config.alpha();
        let theta = (1.0 - alpha) * c_low + alpha * c_high;
        energies
            .iter()
            .map(|&e| if e >= theta { 0 } else { 1 })
            .collect()
    };
    median_smooth(&mut decisions, config.smoothing_frames);
    let hang_frames = (config.hangover_ms / config.frame_ms) as usize;
    apply_hangover(&mut decisions, hang_frames);
    Ok(VadTrace {
        decisions,
        frame_ms: config.frame_ms,
    })
}

/// Resample a VAD trace onto the model frame grid by majority vote over
/// overlapping VAD frames; ties go to 0 (active).
pub fn vad_to_model_frames(
    trace: &VadTrace,
    n_out: usize,
    model_frame_s: f64,
) -> Result<Vec<u8>, VadError> {
    vad_to_model_frames_from(trace, n_out, model_frame_s, 0.0)
}

/// Same as `vad_to_model_frames` with the model grid offset by
/// `origin_s` into the trace (used for windowed inference).
pub fn vad_to_model_frames_from(
    trace: &VadTrace,
    n_out: usize,
    model_frame_s: f64,
    origin_s: f64,
) -> Result<Vec<u8>, VadError> {
    if trace.decisions.is_empty() {
        return Err(VadError::EmptyTrace);
    }
    let vf = trace.frame_s();
    let out = (0..n_out)
        .map(|k| {
            let start = origin_s + k as f64 * model_frame_s;
            let end = start + model_frame_s;
            // VAD frames with positive overlap of [start, end)
            let first = (start / vf).floor().max(0.0) as usize;
            let last = ((end / vf).ceil() as usize).min(trace.decisions.len());
            if first >= trace.decisions.len() {
                return *trace.decisions.last().unwrap();
            }
            let mut ones = 0usize;
            let mut total = 0usize;
            for (j, &d) in trace.decisions[first..last.max(first + 1).min(trace.decisions.len())]
                .iter()
                .enumerate()
            {
                let j = first + j;
                let f_start = j as f64 * vf;
                let f_end = f_start + vf;
                if f_end > start + 1e-12 && f_start < end - 1e-12 {
                    total += 1;
                    ones += d as usize;
                }
            }
            if total == 0 {
                return *trace.decisions.last().unwrap();
            }
            if 2 * ones > total {
                1
            } else {
                0 // tie goes to active
            }
        })
        .collect();
    Ok(out)
}

/// Baseline 1: pause-based segmentation straight from the VAD trace.
/// Inactive runs shorter than `min_gap_ms` are absorbed into speech.
pub fn vad_segment(
    wave: &Waveform,
    config: &VadConfig,
    min_gap_ms: u32,
) -> Result<Vec<SegmentHypothesis>, VadError> {
    let trace = vad_decide(wave, config)?;
    Ok(trace_to_segments(&trace, min_gap_ms, wave.duration_s()))
}

pub fn trace_to_segments(
    trace: &VadTrace,
    min_gap_ms: u32,
    audio_duration_s: f64,
) -> Vec<SegmentHypothesis> {
    let min_gap_frames = (min_gap_ms / trace.frame_ms) as usize;
    let mut decisions = trace.decisions.clone();
    // absorb short inactive runs
    if min_gap_frames > 0 {
        let mut i = 0;
        while i < decisions.len() {
            if decisions[i] == 1 {
                let mut j = i;
                while j < decisions.len() && decisions[j] == 1 {
                    j += 1;
                }
                let interior = i > 0 && j < decisions.len();
                if interior && j - i < min_gap_frames {
                    decisions[i..j].fill(0);
                }
                i = j;
            } else {
                i += 1;
            }
        }
    }
    let fs = trace.frame_s();
    let mut segments = Vec::new();
    let mut start: Option<usize> = None;
    for (i, &d) in decisions.iter().enumerate() {
        match (d, start) {
            (0, None) => start = Some(i),
            (1, Some(s)) => {
                segments.push(SegmentHypothesis {
                    start_s: s as f64 * fs,
                    end_s: (i as f64 * fs).min(audio_duration_s),
                });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        segments.push(SegmentHypothesis {
            start_s: s as f64 * fs,
            end_s: (decisions.len() as f64 * fs).min(audio_duration_s),
        });
    }
    segments
}

/// External trace import: header line "frame_ms=<int>", then one 0/1
/// character per frame (newlines ignored).
pub fn read_vad_trace(path: &Path) -> Result<VadTrace, VadError> {
    let file = File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let frame_ms: u32 = header
        .trim()
        .strip_prefix("frame_ms=")
        .ok_or_else(|| VadError::Trace("missing frame_ms= header".into()))?
        .parse()
        .map_err(|e| VadError::Trace(format!("bad frame_ms value: {e}")))?;
    let mut decisions = Vec::new();
    for line in reader.lines() {
        for c in line?.trim().chars() {
            match c {
                '0' => decisions.push(0),
                '1' => decisions.push(1),
                _ => return Err(VadError::Trace(format!("unexpected character {c:?}"))),
            }
        }
    }
    if decisions.is_empty() {
        return Err(VadError::EmptyTrace);
    }
    Ok(VadTrace {
        decisions,
        frame_ms,
    })
}

pub fn write_vad_trace(path: &Path, trace: &VadTrace) -> Result<(), VadError> {
    let mut file = File::create(path)?;
    writeln!(file, "frame_ms={}", trace.frame_ms)?;
    let body: String = trace
        .decisions
        .iter()
        .map(|&d| if d == 0 { '0' } else { '1' })
        .collect();
    writeln!(file, "{body}")?;
    Ok(())
}
