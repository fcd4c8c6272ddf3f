//! Flat `key = value` configuration files with `[section]` headers.
//! Every field has a default; unknown sections or keys are rejected so
//! typos fail loudly instead of silently using a default.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use segvox_core::decoder::{DecodeConfig, DecodeMode};
use segvox_core::model::{ModelConfig, OptimizerConfig};
use segvox_core::vad::VadConfig;
use segvox_core::FeatureConfig;

use crate::errors::AppError;

#[derive(Debug, Clone, Default)]
pub struct Paths {
    pub audio_dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub feature: FeatureConfig,
    pub model: ModelConfig,
    pub decode: DecodeConfig,
    pub vad: VadConfig,
    pub train: OptimizerConfig,
    pub paths: Paths,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            feature: FeatureConfig::default(),
            model: ModelConfig::default(),
            decode: DecodeConfig::default(),
            vad: VadConfig::default(),
            train: OptimizerConfig::default(),
            paths: Paths::default(),
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T, AppError> {
    value.parse().map_err(|_| {
        AppError::usage(format!(
            "config: [{section}] {key} = {value:?} is not a valid value"
        ))
    })
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<PipelineConfig, AppError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::Data(format!("config {}: {e}", path.display())))?;
        let mut cfg = PipelineConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), AppError> {
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                AppError::usage(format!("config line {}: expected key = value", lineno + 1))
            })?;
            self.set(&section, key.trim(), value.trim())?;
        }
        Ok(())
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), AppError> {
        let unknown = || {
            Err(AppError::usage(format!(
                "config: unknown key {key:?} in section [{section}]"
            )))
        };
        match section {
            "feature" => match key {
                "frame_length_ms" => self.feature.frame_length_ms = parse(section, key, value)?,
                "frame_shift_ms" => self.feature.frame_shift_ms = parse(section, key, value)?,
                "num_mel_bins" => self.feature.num_mel_bins = parse(section, key, value)?,
                "low_freq_hz" => self.feature.low_freq_hz = parse(section, key, value)?,
                "high_freq_hz" => {
                    self.feature.high_freq_hz = Some(parse(section, key, value)?);
                }
                "dither" => self.feature.dither = parse(section, key, value)?,
                "log_floor" => self.feature.log_floor = parse(section, key, value)?,
                _ => return unknown(),
            },
            "model" => match key {
                "input_dim" => self.model.input_dim = parse(section, key, value)?,
                "conv_channels" => self.model.conv_channels = parse(section, key, value)?,
                "d_model" => self.model.d_model = parse(section, key, value)?,
                "n_heads" => self.model.n_heads = parse(section, key, value)?,
                "ffn_dim" => self.model.ffn_dim = parse(section, key, value)?,
                "n_layers" => self.model.n_layers = parse(section, key, value)?,
                "dropout" => self.model.dropout = parse(section, key, value)?,
                "w_s" => self.model.w_s = parse(section, key, value)?,
                "max_positions" => self.model.max_positions = parse(section, key, value)?,
                _ => return unknown(),
            },
            "decode" => match key {
                "window_t_s" => self.decode.window_t_s = parse(section, key, value)?,
                "maxlen_s" => self.decode.maxlen_s = parse(section, key, value)?,
                "min_segment_s" => self.decode.min_segment_s = parse(section, key, value)?,
                "min_gap_frames" => self.decode.min_gap_frames = parse(section, key, value)?,
                "mode" => {
                    self.decode.mode = match value {
                        "model" => DecodeMode::ModelOnly,
                        "hybrid" => DecodeMode::Hybrid,
                        _ => {
                            return Err(AppError::usage(format!(
                                "config: [decode] mode must be model or hybrid, got {value:?}"
                            )))
                        }
                    }
                }
                _ => return unknown(),
            },
            "vad" => match key {
                "frame_ms" => self.vad.frame_ms = parse(section, key, value)?,
                "aggressiveness" => self.vad.aggressiveness = parse(section, key, value)?,
                "hangover_ms" => self.vad.hangover_ms = parse(section, key, value)?,
                "smoothing_frames" => self.vad.smoothing_frames = parse(section, key, value)?,
                _ => return unknown(),
            },
            "train" => match key {
                "lr_scale" => self.train.lr_scale = parse(section, key, value)?,
                "warmup_steps" => self.train.warmup_steps = parse(section, key, value)?,
                "beta1" => self.train.beta1 = parse(section, key, value)?,
                "beta2" => self.train.beta2 = parse(section, key, value)?,
                "eps" => self.train.eps = parse(section, key, value)?,
                "grad_clip" => self.train.grad_clip = parse(section, key, value)?,
                "batch_size" => self.train.batch_size = parse(section, key, value)?,
                "epochs" => self.train.epochs = parse(section, key, value)?,
                "val_fraction" => self.train.val_fraction = parse(section, key, value)?,
                "average_best" => {
                    self.train.average_best = Some(parse(section, key, value)?);
                }
                _ => return unknown(),
            },
            "paths" => match key {
                "audio_dir" => self.paths.audio_dir = Some(PathBuf::from(value)),
                "manifest" => self.paths.manifest = Some(PathBuf::from(value)),
                "checkpoint" => self.paths.checkpoint = Some(PathBuf::from(value)),
                "output" => self.paths.output = Some(PathBuf::from(value)),
                _ => return unknown(),
            },
            "" => match key {
                "seed" => self.seed = parse(section, key, value)?,
                _ => return unknown(),
            },
            _ => {
                return Err(AppError::usage(format!(
                    "config: unknown section [{section}]"
                )))
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_without_file() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.feature.num_mel_bins, 80);
        assert_eq!(cfg.model.d_model, 256);
        assert_eq!(cfg.decode.window_t_s, 20.0);
        assert_eq!(cfg.vad.aggressiveness, 2);
    }

    #[test]
    fn sections_and_comments_parse() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_text(
            "seed = 7\n\n[feature]\nnum_mel_bins = 40 # smaller\n[model]\nd_model = 64\n[decode]\nmode = hybrid\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.feature.num_mel_bins, 40);
        assert_eq!(cfg.model.d_model, 64);
        assert_eq!(cfg.decode.mode, DecodeMode::Hybrid);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = PipelineConfig::default();
        let err = cfg.apply_text("[feature]\nnum_mel_binz = 40\n").unwrap_err();
        assert!(err.to_string().contains("num_mel_binz"));
        assert!(cfg.apply_text("[nosuch]\nx = 1\n").is_err());
        assert!(cfg.apply_text("loose_key = 1\n").is_err());
    }

    #[test]
    fn malformed_line_rejected() {
        let mut cfg = PipelineConfig::default();
        assert!(cfg.apply_text("[feature]\nnum_mel_bins\n").is_err());
        assert!(cfg.apply_text("[feature]\nnum_mel_bins = forty\n").is_err());
    }
}
