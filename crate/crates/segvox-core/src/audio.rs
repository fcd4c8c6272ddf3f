//! WAV input and log-Mel filterbank (FBANK) feature extraction.
//!
//! The processing chain per frame: pre-emphasis, Hamming window, power
//! spectrum via FFT, triangular mel filterbank, natural log with a floor.
//! All timing is derived from the frame shift so downstream label
//! alignment is exact.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};
use thiserror::Error;

pub const FEATURE_DUMP_MAGIC: &[u8; 4] = b"SVFB";
pub const FEATURE_DUMP_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("unsupported wav format: {0}")]
    Format(String),
    #[error("wav parse error: {0}")]
    Parse(String),
    #[error("feature configuration error: {0}")]
    Config(String),
    #[error("audio too short: {got} samples, need at least {need}")]
    TooShort { got: usize, need: usize },
    #[error("feature dump error: {0}")]
    Dump(String),
}

/// Mono PCM audio in [-1, 1].
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Samples covering [start_s, end_s), clamped to the audio bounds.
    pub fn slice_seconds(&self, start_s: f64, end_s: f64) -> Waveform {
        let sr = self.sample_rate as f64;
        let a = ((start_s * sr).round() as usize).min(self.samples.len());
        let b = ((end_s * sr).round() as usize).min(self.samples.len());
        Waveform {
            samples: self.samples[a..b.max(a)].to_vec(),
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FeatureConfig {
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub num_mel_bins: usize,
    pub low_freq_hz: f64,
    /// None means Nyquist (sample_rate / 2).
    pub high_freq_hz: Option<f64>,
    pub dither: bool,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            num_mel_bins: 80,
            low_freq_hz: 20.0,
            high_freq_hz: None,
            dither: false,
            log_floor: 1e-10,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<(), AudioError> {
        if self.frame_shift_ms > self.frame_length_ms {
            return Err(AudioError::Config(format!(
                "frame_shift_ms {} exceeds frame_length_ms {}",
                self.frame_shift_ms, self.frame_length_ms
            )));
        }
        if self.num_mel_bins < 1 {
            return Err(AudioError::Config("num_mel_bins must be >= 1".into()));
        }
        let nyquist = sample_rate as f64 / 2.0;
        let high = self.high_freq_hz.unwrap_or(nyquist);
        if !(self.low_freq_hz < high && high <= nyquist) {
            return Err(AudioError::Config(format!(
                "need low_freq_hz < high_freq_hz <= nyquist; got {} / {} / {}",
                self.low_freq_hz, high, nyquist
            )));
        }
        if self.log_floor <= 0.0 {
            return Err(AudioError::Config("log_floor must be positive".into()));
        }
        Ok(())
    }

    pub fn frame_length_samples(&self, sample_rate: u32) -> usize {
        (self.frame_length_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn frame_shift_samples(&self, sample_rate: u32) -> usize {
        (self.frame_shift_ms * sample_rate as f64 / 1000.0).round() as usize
    }
}

/// Per-frame log-Mel feature vectors with frame timing metadata.
/// Frame k covers [k * frame_shift_s, k * frame_shift_s + frame_length_s).
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    /// N frames x D mel bins.
    pub data: Array2<f64>,
    pub frame_shift_s: f64,
    pub frame_length_s: f64,
    pub audio_id: String,
}

impl FeatureMatrix {
    pub fn num_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

/// Mel scale: mel(f) = 1127 * ln(1 + f / 700).
pub fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * ((mel / 1127.0).exp() - 1.0)
}

/// Read a RIFF/WAVE file containing 16-bit mono PCM.
pub fn read_wav(path: &Path) -> Result<Waveform, AudioError> {
    let mut file = File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    parse_wav(&bytes)
}

fn parse_wav(bytes: &[u8]) -> Result<Waveform, AudioError> {
    if bytes.len() < 12 {
        return Err(AudioError::Parse("file shorter than RIFF header".into()));
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::Format("not a RIFF/WAVE file".into()));
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err(AudioError::Parse(format!(
                "truncated chunk {:?}: declared {} bytes, {} available",
                String::from_utf8_lossy(id),
                size,
                bytes.len() - body_start
            )));
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(AudioError::Parse("fmt chunk too small".into()));
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word-aligned
        pos = body_start + size + (size & 1);
    }
    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| AudioError::Parse("missing fmt chunk".into()))?;
    if format != 1 {
        return Err(AudioError::Format(format!(
            "only PCM supported, got format tag {format}"
        )));
    }
    if channels != 1 {
        return Err(AudioError::Format(format!(
            "only mono supported, got {channels} channels"
        )));
    }
    if bits != 16 {
        return Err(AudioError::Format(format!(
            "only 16-bit PCM supported, got {bits} bits"
        )));
    }
    let data = data.ok_or_else(|| AudioError::Parse("missing data chunk".into()))?;
    if data.len() % 2 != 0 {
        return Err(AudioError::Parse("data chunk has odd byte count".into()));
    }
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: rate,
    })
}

/// Write a 16-bit mono PCM WAV. Samples are clamped to [-1, 1].
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<(), AudioError> {
    let mut out = Vec::with_capacity(44 + wave.samples.len() * 2);
    let data_len = (wave.samples.len() * 2) as u32;
    out.extend_from_slice(b"RIFF");
    out.write_u32::<LittleEndian>(36 + data_len)?;
    out.extend_from_slice(b"WAVEfmt ");
    out.write_u32::<LittleEndian>(16)?;
    out.write_u16::<LittleEndian>(1)?; // PCM
    out.write_u16::<LittleEndian>(1)?; // mono
    out.write_u32::<LittleEndian>(wave.sample_rate)?;
    out.write_u32::<LittleEndian>(wave.sample_rate * 2)?;
    out.write_u16::<LittleEndian>(2)?;
    out.write_u16::<LittleEndian>(16)?;
    out.extend_from_slice(b"data");
    out.write_u32::<LittleEndian>(data_len)?;
    for &s in &wave.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.write_i16::<LittleEndian>(v)?;
    }
    let mut file = File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Triangular mel filterbank matrix, num_mel_bins x (fft_size/2 + 1).
/// Centers are equally spaced on the mel scale between low and high.
pub fn mel_filterbank(
    config: &FeatureConfig,
    fft_size: usize,
    sample_rate: u32,
) -> Result<Array2<f64>, AudioError> {
    config.validate(sample_rate)?;
    if !fft_size.is_power_of_two() {
        return Err(AudioError::Config(format!(
            "fft_size {fft_size} is not a power of two"
        )));
    }
    let n_bins = fft_size / 2 + 1;
    let high = config.high_freq_hz.unwrap_or(sample_rate as f64 / 2.0);
    let mel_low = hz_to_mel(config.low_freq_hz);
    let mel_high = hz_to_mel(high);
    let m = config.num_mel_bins;
    // m + 2 edge points: left edge, m centers, right edge
    let edges: Vec<f64> = (0..m + 2)
        .map(|i| mel_low + (mel_high - mel_low) * i as f64 / (m + 1) as f64)
        .collect();
    let bin_hz = sample_rate as f64 / fft_size as f64;
    let mut bank = Array2::zeros((m, n_bins));
    for filt in 0..m {
        let (left, center, right) = (edges[filt], edges[filt + 1], edges[filt + 2]);
        let mut any_positive = false;
        for k in 0..n_bins {
            let mel_k = hz_to_mel(k as f64 * bin_hz);
            let w = if mel_k <= left || mel_k >= right {
                0.0
            } else if mel_k <= center {
                (mel_k - left) / (center - left)
            } else {
                (right - mel_k) / (right - center)
            };
            if w > 0.0 {
                any_positive = true;
            }
            bank[[filt, k]] = w;
        }
        if !any_positive {
            return Err(AudioError::Config(format!(
                "mel filter {filt} is empty: {m} bins exceed fft resolution"
            )));
        }
    }
    Ok(bank)
}

/// Center frequency (Hz) of each mel filter. Used to sanity-check spectra.
pub fn mel_filter_centers(config: &FeatureConfig, sample_rate: u32) -> Vec<f64> {
    let high = config.high_freq_hz.unwrap_or(sample_rate as f64 / 2.0);
    let mel_low = hz_to_mel(config.low_freq_hz);
    let mel_high = hz_to_mel(high);
    let m = config.num_mel_bins;
    (1..=m)
        .map(|i| mel_to_hz(mel_low + (mel_high - mel_low) * i as f64 / (m + 1) as f64))
        .collect()
}

/// Number of frames produced for a signal of `num_samples` samples.
pub fn frame_count(num_samples: usize, config: &FeatureConfig, sample_rate: u32) -> Option<usize> {
    let flen = config.frame_length_samples(sample_rate);
    let fshift = config.frame_shift_samples(sample_rate);
    if num_samples < flen {
        None
    } else {
        Some(1 + (num_samples - flen) / fshift)
    }
}

/// Compute log-Mel filterbank features over the whole waveform.
pub fn compute_fbank(wave: &Waveform, config: &FeatureConfig) -> Result<FeatureMatrix, AudioError> {
    compute_fbank_with_id(wave, config, "")
}

pub fn compute_fbank_with_id(
    wave: &Waveform,
    config: &FeatureConfig,
    audio_id: &str,
) -> Result<FeatureMatrix, AudioError> {
    config.validate(wave.sample_rate)?;
    let flen = config.frame_length_samples(wave.sample_rate);
    let fshift = config.frame_shift_samples(wave.sample_rate);
    let n_frames = frame_count(wave.samples.len(), config, wave.sample_rate).ok_or(
        AudioError::TooShort {
            got: wave.samples.len(),
            need: flen,
        },
    )?;
    let fft_size = flen.next_power_of_two();
    let bank = mel_filterbank(config, fft_size, wave.sample_rate)?;

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(fft_size);
    let window: Vec<f64> = (0..flen)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (flen - 1) as f64).cos())
        .collect();

    let mut dither_rng = if config.dither {
        Some(rand::thread_rng())
    } else {
        None
    };

    let n_bins = fft_size / 2 + 1;
    let mut data = Array2::zeros((n_frames, config.num_mel_bins));
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    let mut power = vec![0.0f64; n_bins];
    for k in 0..n_frames {
        let start = k * fshift;
        let frame = &wave.samples[start..start + flen];
        for (i, slot) in buf.iter_mut().enumerate() {
            let mut s = if i < flen {
                let prev = if i == 0 { frame[0] } else { frame[i - 1] };
                frame[i] - 0.97 * prev
            } else {
                0.0
            };
            if let Some(rng) = dither_rng.as_mut() {
                use rand::Rng;
                s += rng.gen_range(-1.0e-5..1.0e-5);
            }
            if i < flen {
                s *= window[i];
            }
            *slot = Complex::new(s, 0.0);
        }
        fft.process(&mut buf);
        for (i, p) in power.iter_mut().enumerate() {
            *p = buf[i].norm_sqr();
        }
        for m in 0..config.num_mel_bins {
            let mut e = 0.0;
            for (i, &p) in power.iter().enumerate() {
                e += bank[[m, i]] * p;
            }
            data[[k, m]] = e.max(config.log_floor).ln();
        }
    }
    Ok(FeatureMatrix {
        data,
        frame_shift_s: config.frame_shift_ms / 1000.0,
        frame_length_s: config.frame_length_ms / 1000.0,
        audio_id: audio_id.to_string(),
    })
}

/// Binary feature dump: magic "SVFB", version, N, D, frame_shift_us, then
/// N*D little-endian f32, row-major.
pub fn write_feature_dump(path: &Path, feats: &FeatureMatrix) -> Result<(), AudioError> {
    let mut out = io::BufWriter::new(File::create(path)?);
    out.write_all(FEATURE_DUMP_MAGIC)?;
    out.write_u32::<LittleEndian>(FEATURE_DUMP_VERSION)?;
    out.write_u32::<LittleEndian>(feats.num_frames() as u32)?;
    out.write_u32::<LittleEndian>(feats.dim() as u32)?;
    out.write_u32::<LittleEndian>((feats.frame_shift_s * 1e6).round() as u32)?;
    for &v in feats.data.iter() {
        out.write_f32::<LittleEndian>(v as f32)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_feature_dump(path: &Path) -> Result<FeatureMatrix, AudioError> {
    let mut file = io::BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != FEATURE_DUMP_MAGIC {
        return Err(AudioError::Dump("bad magic, not a feature dump".into()));
    }
    let version = file.read_u32::<LittleEndian>()?;
    if version != FEATURE_DUMP_VERSION {
        return Err(AudioError::Dump(format!(
            "unsupported feature dump version {version}"
        )));
    }
    let n = file.read_u32::<LittleEndian>()? as usize;
    let d = file.read_u32::<LittleEndian>()? as usize;
    let shift_us = file.read_u32::<LittleEndian>()?;
    let mut data = Array2::zeros((n, d));
    for v in data.iter_mut() {
        *v = file.read_f32::<LittleEndian>()? as f64;
    }
    let audio_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let frame_shift_s = shift_us as f64 / 1e6;
    Ok(FeatureMatrix {
        data,
        frame_shift_s,
        // not stored in the dump; conventional 2.5x shift
        frame_length_s: frame_shift_s * 2.5,
        audio_id,
    })
}
