use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use segvox_core::audio::{read_wav, write_feature_dump};
use segvox_core::corpus::{extract_pair_example, load_manifest, write_label_dump, SegmentRecord};

use crate::config::PipelineConfig;
use crate::errors::AppError;

/// One line of the archive index written next to the dumps.
#[derive(Debug, Serialize, Deserialize)]
pub struct IndexEntry {
    pub features: String,
    pub labels: String,
    pub audio: String,
    pub segment: usize,
    pub frame_shift_s: f64,
    pub seconds: f64,
}

pub const INDEX_FILE: &str = "index.jsonl";

fn resolve_audio(audio_dir: &Path, audio_id: &str) -> Option<PathBuf> {
    let direct = audio_dir.join(audio_id);
    if direct.is_file() {
        return Some(direct);
    }
    let with_ext = audio_dir.join(format!("{audio_id}.wav"));
    with_ext.is_file().then_some(with_ext)
}

pub fn run(
    cfg: &PipelineConfig,
    manifest: &Path,
    audio_dir: &Path,
    out: &Path,
    max_example_s: f64,
) -> Result<(), AppError> {
    let records = load_manifest(manifest)?;
    std::fs::create_dir_all(out)?;

    // group by audio, preserving manifest order
    let mut groups: Vec<(String, Vec<SegmentRecord>)> = Vec::new();
    for rec in records {
        match groups.last_mut() {
            Some((id, segs)) if *id == rec.audio_id => segs.push(rec),
            _ => groups.push((rec.audio_id.clone(), vec![rec])),
        }
    }

    let mut index_lines = String::new();
    let mut failures: Vec<String> = Vec::new();
    let mut n_examples = 0usize;
    let mut label1_frames = 0usize;
    let mut total_frames = 0usize;
    let mut total_seconds = 0.0f64;

    for (audio_id, segs) in &groups {
        let Some(wav_path) = resolve_audio(audio_dir, audio_id) else {
            failures.push(format!("{audio_id}: audio file not found"));
            continue;
        };
        let wave = match read_wav(&wav_path) {
            Ok(w) => w,
            Err(e) => {
                failures.push(format!("{audio_id}: {e}"));
                continue;
            }
        };
        if segs.len() < 2 {
            warn!("{audio_id}: only {} segment(s), no pair examples", segs.len());
            continue;
        }
        for i in 0..segs.len() - 1 {
            let span_s = segs[i + 1].end_s() - segs[i].offset_s;
            if span_s > max_example_s {
                warn!("{audio_id} pair {i}: {span_s:.1}s exceeds max_example_s, skipped");
                continue;
            }
            let ex = match extract_pair_example(&segs[i], &segs[i + 1], i, &wave, &cfg.feature) {
                Ok(ex) => ex,
                Err(e) => {
                    failures.push(format!("{audio_id} pair {i}: {e}"));
                    continue;
                }
            };
            let base = format!("ex{n_examples:05}");
            let feat_name = format!("{base}.svfb");
            let label_name = format!("{base}.labels");
            write_feature_dump(&out.join(&feat_name), &ex.features)?;
            write_label_dump(&out.join(&label_name), &ex.labels)?;
            label1_frames += ex.labels.labels.iter().filter(|&&l| l == 1).count();
            total_frames += ex.labels.len();
            total_seconds += span_s;
            let entry = IndexEntry {
                features: feat_name,
                labels: label_name,
                audio: audio_id.clone(),
                segment: i,
                frame_shift_s: ex.features.frame_shift_s,
                seconds: span_s,
            };
            index_lines.push_str(&serde_json::to_string(&entry).expect("entry serializes"));
            index_lines.push('\n');
            n_examples += 1;
        }
    }

    crate::util::write_atomic(&out.join(INDEX_FILE), index_lines.as_bytes())?;

    for f in &failures {
        eprintln!("segvox: extract: {f}");
    }
    let label1_fraction = if total_frames == 0 {
        0.0
    } else {
        label1_frames as f64 / total_frames as f64
    };
    let mean_seconds = if n_examples == 0 {
        0.0
    } else {
        total_seconds / n_examples as f64
    };
    println!(
        "examples={n_examples} label1_fraction={label1_fraction:.4} mean_seconds={mean_seconds:.2}"
    );

    if !failures.is_empty() && n_examples == 0 {
        return Err(AppError::Data(format!(
            "all {} audio record(s) failed",
            failures.len()
        )));
    }
    Ok(())
}
