use std::path::Path;

use segvox_core::audio::read_wav;
use segvox_core::decoder::format_segment_jsonl;
use segvox_core::vad::{trace_to_segments, vad_decide};

use crate::config::PipelineConfig;
use crate::errors::AppError;
use crate::util::{audio_id, write_atomic};

pub fn run(
    cfg: &PipelineConfig,
    audio: &Path,
    out: Option<&Path>,
    segments_out: Option<&Path>,
    min_gap_ms: u32,
) -> Result<(), AppError> {
    let wave = read_wav(audio)?;
    let trace = vad_decide(&wave, &cfg.vad)?;

    let mut text = format!("frame_ms={}\n", trace.frame_ms);
    text.extend(trace.decisions.iter().map(|&d| if d == 0 { '0' } else { '1' }));
    text.push('\n');
    match out {
        Some(path) => write_atomic(path, text.as_bytes())?,
        None => print!("{text}"),
    }

    if let Some(path) = segments_out {
        let id = audio_id(audio);
        let segments = trace_to_segments(&trace, min_gap_ms, wave.duration_s());
        let mut lines = String::new();
        for seg in &segments {
            lines.push_str(&format_segment_jsonl(&id, seg));
            lines.push('\n');
        }
        write_atomic(path, lines.as_bytes())?;
    }
    Ok(())
}
