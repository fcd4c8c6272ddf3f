use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use segvox_core::corpus::load_manifest;
use segvox_core::decoder::SegmentHypothesis;
use segvox_core::eval::{align_to_reference, boundary_metrics, over_under_counts};

use crate::errors::AppError;
use crate::util::write_atomic;

#[derive(Debug, Deserialize)]
struct HypLine {
    audio: String,
    start: f64,
    end: f64,
}

fn load_hyp(path: &Path) -> Result<BTreeMap<String, Vec<SegmentHypothesis>>, AppError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AppError::Data(format!("hypothesis {}: {e}", path.display())))?;
    let mut by_audio: BTreeMap<String, Vec<SegmentHypothesis>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let h: HypLine = serde_json::from_str(line)
            .map_err(|e| AppError::Data(format!("hypothesis line {}: {e}", lineno + 1)))?;
        by_audio.entry(h.audio).or_default().push(SegmentHypothesis {
            start_s: h.start,
            end_s: h.end,
        });
    }
    Ok(by_audio)
}

pub fn run(
    hyp_path: &Path,
    ref_path: &Path,
    tolerance: f64,
    hyp_text: Option<&Path>,
    ref_text: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), AppError> {
    let hyp = load_hyp(hyp_path)?;
    let records = load_manifest(ref_path)?;
    let mut reference: BTreeMap<String, Vec<SegmentHypothesis>> = BTreeMap::new();
    for rec in records {
        reference
            .entry(rec.audio_id.clone())
            .or_default()
            .push(SegmentHypothesis {
                start_s: rec.offset_s,
                end_s: rec.end_s(),
            });
    }

    let unmatched: Vec<&String> = hyp.keys().filter(|id| !reference.contains_key(*id)).collect();
    if !unmatched.is_empty() {
        return Err(AppError::Data(format!(
            "hypothesis ids missing from reference: {}",
            unmatched
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }

    let mut per_audio = serde_json::Map::new();
    let mut tp_weighted = 0.0f64;
    let mut n_hyp_total = 0usize;
    let mut n_ref_total = 0usize;
    let mut over_total = 0usize;
    let mut under_total = 0usize;
    for (id, refs) in &reference {
        let hyps = hyp.get(id).cloned().unwrap_or_default();
        let m = boundary_metrics(&hyps, refs, tolerance)?;
        let (over, under) = over_under_counts(&hyps, refs, tolerance)?;
        tp_weighted += m.precision * m.n_hyp as f64;
        n_hyp_total += m.n_hyp;
        n_ref_total += m.n_ref;
        over_total += over;
        under_total += under;
        per_audio.insert(
            id.clone(),
            serde_json::json!({
                "precision": m.precision,
                "recall": m.recall,
                "f1": m.f1,
                "over": over,
                "under": under,
            }),
        );
    }

    // micro-average over all boundaries
    let precision = if n_hyp_total == 0 { 0.0 } else { tp_weighted / n_hyp_total as f64 };
    let recall = if n_ref_total == 0 { 0.0 } else { tp_weighted / n_ref_total as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };

    let mut result = serde_json::json!({
        "tolerance_s": tolerance,
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "over": over_total,
        "under": under_total,
        "per_audio": per_audio,
    });

    if let (Some(ht), Some(rt)) = (hyp_text, ref_text) {
        let hyp_doc = std::fs::read_to_string(ht)
            .map_err(|e| AppError::Data(format!("hyp text {}: {e}", ht.display())))?;
        let ref_doc = std::fs::read_to_string(rt)
            .map_err(|e| AppError::Data(format!("ref text {}: {e}", rt.display())))?;
        let hyp_tokens: Vec<&str> = hyp_doc.split_whitespace().collect();
        let ref_sentences: Vec<Vec<&str>> = ref_doc
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.split_whitespace().collect())
            .collect();
        let alignment = align_to_reference(&hyp_tokens, &ref_sentences)?;
        result["alignment"] = serde_json::json!({
            "split_points": alignment.split_points,
            "edit_distance": alignment.total_edit_distance,
        });
    }

    let pretty = serde_json::to_string_pretty(&result).expect("metrics serialize");
    match out {
        Some(path) => write_atomic(path, pretty.as_bytes())?,
        None => println!("{pretty}"),
    }
    Ok(())
}
