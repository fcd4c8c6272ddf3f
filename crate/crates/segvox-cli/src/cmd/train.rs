use std::path::Path;

use log::info;

use segvox_core::audio::read_feature_dump;
use segvox_core::corpus::read_label_dump;
use segvox_core::model::{save_checkpoint, train, ModelConfig};
use segvox_core::TrainingExample;

use crate::cmd::extract::{IndexEntry, INDEX_FILE};
use crate::config::PipelineConfig;
use crate::errors::AppError;
use crate::util::write_atomic;

fn load_examples(dir: &Path) -> Result<Vec<TrainingExample>, AppError> {
    let index_path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&index_path).map_err(|e| {
        AppError::Data(format!("examples index {}: {e}", index_path.display()))
    })?;
    let mut examples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: IndexEntry = serde_json::from_str(line).map_err(|e| {
            AppError::Data(format!("index line {}: {e}", lineno + 1))
        })?;
        let mut features = read_feature_dump(&dir.join(&entry.features))?;
        features.audio_id = entry.audio.clone();
        let labels = read_label_dump(&dir.join(&entry.labels), entry.frame_shift_s)?;
        examples.push(TrainingExample {
            features,
            labels,
            source: (entry.audio, entry.segment),
        });
    }
    Ok(examples)
}

pub fn run(
    cfg: &PipelineConfig,
    examples_dir: &Path,
    checkpoint_out: &Path,
    loss_log: Option<&Path>,
    desk_scale: bool,
) -> Result<(), AppError> {
    let examples = load_examples(examples_dir)?;
    if examples.is_empty() {
        return Err(AppError::Data(format!(
            "no examples in {}",
            examples_dir.display()
        )));
    }
    let input_dim = examples[0].features.dim();
    let mut model_cfg = if desk_scale {
        ModelConfig::desk_scale(input_dim)
    } else {
        cfg.model.clone()
    };
    model_cfg.input_dim = input_dim;

    info!(
        "training on {} examples, input_dim={input_dim}, {} epochs",
        examples.len(),
        cfg.train.epochs
    );
    let outcome = train(&model_cfg, &examples, &cfg.train)?;

    // checkpoint written via temp + rename so a crash can't truncate it
    let tmp = checkpoint_out.with_extension("ckpt.tmp");
    save_checkpoint(&outcome.params, &tmp)?;
    std::fs::rename(&tmp, checkpoint_out)?;

    let mut log_lines = String::new();
    for s in &outcome.log {
        log_lines.push_str(&format!(
            "{{\"epoch\": {}, \"train_loss\": {:.6}, \"val_loss\": {:.6}}}\n",
            s.epoch, s.train_loss, s.val_loss
        ));
    }
    let log_path = loss_log
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| checkpoint_out.with_extension("loss.jsonl"));
    write_atomic(&log_path, log_lines.as_bytes())?;

    println!(
        "trained epochs={} best_epoch={} final_val_loss={:.6}",
        outcome.log.len(),
        outcome.best_epoch,
        outcome.log.last().map(|s| s.val_loss).unwrap_or(f64::NAN)
    );
    Ok(())
}
