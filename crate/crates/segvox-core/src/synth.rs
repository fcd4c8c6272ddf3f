//! Seeded synthetic corpus generation: tone "utterances" separated by
//! silences, written as WAV plus a manifest, for smoke tests and demos.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::audio::{write_wav, AudioError, Waveform};
use crate::corpus::SegmentRecord;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub sample_rate: u32,
    pub n_utterances: usize,
    pub utterance_s: (f64, f64),
    pub gap_s: (f64, f64),
    pub freq_hz: (f64, f64),
    pub amplitude: f64,
    pub noise_amplitude: f64,
    /// Leading/trailing silence around the whole recording.
    pub pad_s: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sample_rate: 16_000,
            n_utterances: 8,
            utterance_s: (0.5, 3.0),
            gap_s: (0.3, 1.5),
            freq_hz: (200.0, 2000.0),
            amplitude: 0.5,
            noise_amplitude: 1e-3,
            pad_s: 0.5,
            seed: 0,
        }
    }
}

/// A generated recording together with the true utterance spans.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub wave: Waveform,
    pub segments: Vec<SegmentRecord>,
}

pub fn generate(cfg: &SynthConfig, audio_id: &str) -> SynthCorpus {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let sr = cfg.sample_rate as f64;
    let mut samples: Vec<f64> = Vec::new();
    let mut segments = Vec::with_capacity(cfg.n_utterances);

    let pad = (cfg.pad_s * sr).round() as usize;
    samples.resize(pad, 0.0);

    for i in 0..cfg.n_utterances {
        if i > 0 {
            let gap = rng.gen_range(cfg.gap_s.0..=cfg.gap_s.1);
            let n = (gap * sr).round() as usize;
            samples.resize(samples.len() + n, 0.0);
        }
        let dur = rng.gen_range(cfg.utterance_s.0..=cfg.utterance_s.1);
        let freq = rng.gen_range(cfg.freq_hz.0..=cfg.freq_hz.1);
        let n = (dur * sr).round() as usize;
        let start = samples.len();
        for k in 0..n {
            let t = k as f64 / sr;
            // short fade at both ends to avoid clicks
            let fade = (t * 100.0).min((n as f64 / sr - t) * 100.0).min(1.0).max(0.0);
            // fundamental plus two decaying harmonics: a single spectral
            // line can fall between mel filters, harmonics keep every
            // utterance visible across several bins
            let mut v = 0.0;
            let mut gain = 1.0;
            for h in 1..=3 {
                v += gain * (2.0 * PI * h as f64 * freq * t).sin();
                gain *= 0.5;
            }
            samples.push(cfg.amplitude * fade * v / 1.75);
        }
        segments.push(SegmentRecord {
            audio_id: audio_id.to_string(),
            offset_s: start as f64 / sr,
            duration_s: (samples.len() - start) as f64 / sr,
            transcript: None,
            translation: None,
        });
    }
    samples.resize(samples.len() + pad, 0.0);

    if cfg.noise_amplitude > 0.0 {
        for s in samples.iter_mut() {
            *s += rng.gen_range(-cfg.noise_amplitude..cfg.noise_amplitude);
        }
    }

    SynthCorpus {
        wave: Waveform {
            samples,
            sample_rate: cfg.sample_rate,
        },
        segments,
    }
}

/// Write the WAV and a manifest line per segment under `dir`, returning
/// the (wav_path, manifest_path) pair.
pub fn write_corpus(
    corpus: &SynthCorpus,
    dir: &Path,
    audio_id: &str,
) -> Result<(PathBuf, PathBuf), AudioError> {
    let wav_path = dir.join(format!("{audio_id}.wav"));
    write_wav(&wav_path, &corpus.wave)?;
    let manifest_path = dir.join(format!("{audio_id}.jsonl"));
    let mut out = String::new();
    for seg in &corpus.segments {
        out.push_str(&serde_json::to_string(seg).expect("segment serializes"));
        out.push('\n');
    }
    std::fs::write(&manifest_path, out)?;
    Ok((wav_path, manifest_path))
}
