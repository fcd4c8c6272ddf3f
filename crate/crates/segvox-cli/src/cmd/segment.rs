use std::path::PathBuf;

use rayon::prelude::*;

use segvox_core::audio::read_wav;
use segvox_core::decoder::{
    fixed_length_segment, format_segment_jsonl, format_segment_tsv, segment_stream, DecodeMode,
    SegmentHypothesis,
};
use segvox_core::model::{load_checkpoint, ModelParams};
use segvox_core::vad::{read_vad_trace, trace_to_segments, vad_decide};
use segvox_core::VadTrace;

use crate::config::PipelineConfig;
use crate::errors::AppError;
use crate::util::{audio_id, write_atomic};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mode {
    Model,
    Hybrid,
    Vad,
    Fixed(f64),
}

fn parse_mode(s: &str) -> Result<Mode, AppError> {
    match s {
        "model" => Ok(Mode::Model),
        "hybrid" => Ok(Mode::Hybrid),
        "vad" => Ok(Mode::Vad),
        _ => {
            if let Some(l) = s.strip_prefix("fixed:") {
                let l: f64 = l
                    .parse()
                    .map_err(|_| AppError::usage(format!("bad fixed length in --mode {s}")))?;
                if l <= 0.0 {
                    return Err(AppError::usage("fixed length must be positive"));
                }
                Ok(Mode::Fixed(l))
            } else {
                Err(AppError::usage(format!(
                    "--mode must be model, hybrid, vad, or fixed:<seconds>, got {s:?}"
                )))
            }
        }
    }
}

pub struct Request {
    pub cfg: PipelineConfig,
    pub audio: Vec<PathBuf>,
    pub mode: String,
    pub checkpoint: Option<PathBuf>,
    pub vad_trace: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub format: String,
    pub jobs: usize,
    pub continue_on_error: bool,
    pub min_gap_ms: u32,
}

fn process_one(
    path: &PathBuf,
    mode: Mode,
    params: Option<&ModelParams>,
    trace: Option<&VadTrace>,
    req: &Request,
) -> Result<Vec<SegmentHypothesis>, AppError> {
    match mode {
        Mode::Fixed(l) => {
            let wave = read_wav(path)?;
            Ok(fixed_length_segment(wave.duration_s(), l)?)
        }
        Mode::Vad => {
            let wave = read_wav(path)?;
            let owned;
            let t = match trace {
                Some(t) => t,
                None => {
                    owned = vad_decide(&wave, &req.cfg.vad)?;
                    &owned
                }
            };
            Ok(trace_to_segments(t, req.min_gap_ms, wave.duration_s()))
        }
        Mode::Model | Mode::Hybrid => {
            let wave = read_wav(path)?;
            let mut decode = req.cfg.decode.clone();
            decode.mode = if mode == Mode::Hybrid {
                DecodeMode::Hybrid
            } else {
                DecodeMode::ModelOnly
            };
            let owned;
            let t = if mode == Mode::Hybrid {
                Some(match trace {
                    Some(t) => t,
                    None => {
                        owned = vad_decide(&wave, &req.cfg.vad)?;
                        &owned
                    }
                })
            } else {
                None
            };
            Ok(segment_stream(
                &wave,
                params.expect("checkpoint checked before dispatch"),
                t,
                &decode,
                &req.cfg.feature,
            )?)
        }
    }
}

pub fn run(req: Request) -> Result<(), AppError> {
    let mode = parse_mode(&req.mode)?;
    if matches!(mode, Mode::Model | Mode::Hybrid) && req.checkpoint.is_none() {
        return Err(AppError::usage(format!(
            "--mode {} requires --checkpoint",
            req.mode
        )));
    }
    if req.vad_trace.is_some() && req.audio.len() > 1 {
        return Err(AppError::usage(
            "--vad-trace applies to a single audio input",
        ));
    }
    if req.format != "jsonl" && req.format != "tsv" {
        return Err(AppError::usage(format!(
            "--format must be jsonl or tsv, got {:?}",
            req.format
        )));
    }
    if req.jobs == 0 {
        return Err(AppError::usage("--jobs must be at least 1"));
    }

    let params = match &req.checkpoint {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    let trace = match &req.vad_trace {
        Some(p) => Some(read_vad_trace(p)?),
        None => None,
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(req.jobs)
        .build()
        .map_err(|e| AppError::Data(e.to_string()))?;
    // par_iter + collect preserves input order, so output is identical
    // regardless of --jobs
    let results: Vec<Result<Vec<SegmentHypothesis>, AppError>> = pool.install(|| {
        req.audio
            .par_iter()
            .map(|path| process_one(path, mode, params.as_ref(), trace.as_ref(), &req))
            .collect()
    });

    let mut lines = String::new();
    let mut first_err: Option<AppError> = None;
    let mut n_failed = 0usize;
    for (path, result) in req.audio.iter().zip(results) {
        let id = audio_id(path);
        match result {
            Ok(segments) => {
                for seg in &segments {
                    let line = if req.format == "tsv" {
                        format_segment_tsv(&id, seg)
                    } else {
                        format_segment_jsonl(&id, seg)
                    };
                    lines.push_str(&line);
                    lines.push('\n');
                }
            }
            Err(e) => {
                eprintln!("segvox: {}: {e}", path.display());
                n_failed += 1;
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }

    if let Some(e) = first_err {
        if !req.continue_on_error {
            return Err(e);
        }
        if n_failed == req.audio.len() {
            return Err(e);
        }
    }

    match &req.out {
        Some(path) => write_atomic(path, lines.as_bytes())?,
        None => print!("{lines}"),
    }
    Ok(())
}
