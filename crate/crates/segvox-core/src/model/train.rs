//! Adam with an inverse-square-root warmup schedule, gradient-norm
//! clipping, and length-bucketed batching. Training is single-threaded
//! and bit-deterministic given a seed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::backward::{batch_loss, loss_and_gradients, Batch, BatchItem};
use super::loss::softmax_rows;
use super::{
    forward_logits, is_trainable, output_length, ModelConfig, ModelError, ModelParams, ParamSet,
    SUBSAMPLE_FACTOR,
};
use crate::corpus::{downsample_labels, TrainingExample};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Scale on lr(t) = scale * d_model^-0.5 * min(t^-0.5, t * warmup^-1.5).
    pub lr_scale: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub val_fraction: f64,
    /// Average the parameters of the best-k validation epochs.
    pub average_best: Option<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr_scale: 5.0,
            warmup_steps: 25000,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            grad_clip: 5.0,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            val_fraction: 0.1,
            average_best: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochStats>,
    pub best_epoch: usize,
}

pub fn noam_lr(opt: &OptimizerConfig, d_model: usize, step: usize) -> f64 {
    let t = step as f64;
    let warmup = opt.warmup_steps as f64;
    opt.lr_scale * (d_model as f64).powf(-0.5) * t.powf(-0.5).min(t * warmup.powf(-1.5))
}

struct Adam {
    m: ParamSet,
    v: ParamSet,
    t: usize,
}

impl Adam {
    fn new(params: &ModelParams) -> Adam {
        Adam {
            m: params.zero_grads(),
            v: params.zero_grads(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &ParamSet, lr: f64, opt: &OptimizerConfig) {
        self.t += 1;
        let bc1 = 1.0 - opt.beta1.powi(self.t as i32);
        let bc2 = 1.0 - opt.beta2.powi(self.t as i32);
        for (name, g) in grads.iter() {
            let m = self.m.get_mut(name);
            m.zip_mut_with(g, |m, &g| *m = opt.beta1 * *m + (1.0 - opt.beta1) * g);
            let v = self.v.get_mut(name);
            v.zip_mut_with(g, |v, &g| *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g);
        }
        for (name, p) in params.set.iter_mut() {
            if !is_trainable(name) {
                continue;
            }
            let m = self.m.get(name);
            let v = self.v.get(name);
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + opt.eps);
            });
        }
    }
}

/// Scale all gradients so their global L2 norm is at most `clip`.
fn clip_global_norm(grads: &mut ParamSet, clip: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > clip {
        let scale = clip / norm;
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

/// Downsample an example's labels onto the model output grid.
pub fn example_to_item(ex: &TrainingExample) -> Result<BatchItem, ModelError> {
    let n = ex.features.num_frames();
    let n_out = output_length(n)?;
    let labels = downsample_labels(&ex.labels, n_out, SUBSAMPLE_FACTOR)
        .map_err(|e| ModelError::Train(e.to_string()))?;
    Ok(BatchItem {
        features: ex.features.data.clone(),
        labels,
        mask: None,
    })
}

/// Train the segmenter, returning the parameters of the best validation
/// epoch (or the best-k average when configured) and a per-epoch loss log.
pub fn train(
    config: &ModelConfig,
    dataset: &[TrainingExample],
    opt: &OptimizerConfig,
) -> Result<TrainOutcome, ModelError> {
    if dataset.is_empty() {
        return Err(ModelError::Train("empty dataset".into()));
    }
    config.validate()?;
    let mut items = Vec::with_capacity(dataset.len());
    for ex in dataset {
        items.push(example_to_item(ex)?);
    }

    let mut rng = ChaCha20Rng::seed_from_u64(opt.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((items.len() as f64 * opt.val_fraction).round() as usize).min(items.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let val_items: Vec<BatchItem> = val_idx.iter().map(|&i| items[i].clone()).collect();
    let mut train_items: Vec<BatchItem> = train_idx.iter().map(|&i| items[i].clone()).collect();

    // length buckets: sort by frame count so batches are nearly uniform
    train_items.sort_by_key(|it| it.features.nrows());
    let batches: Vec<Batch> = train_items
        .chunks(opt.batch_size.max(1))
        .map(|c| Batch {
            items: c.to_vec(),
        })
        .collect();

    let mut params = ModelParams::init(config, opt.seed)?;
    let mut adam = Adam::new(&params);
    let mut log = Vec::with_capacity(opt.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut snapshots: Vec<(f64, ModelParams)> = Vec::new();
    let mut step = 0usize;

    for epoch in 1..=opt.epochs {
        let mut batch_order: Vec<usize> = (0..batches.len()).collect();
        batch_order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for &bi in &batch_order {
            step += 1;
            let (loss, mut grads) = loss_and_gradients(&params, &batches[bi], opt.seed, step as u64)?;
            if !loss.is_finite() {
                return Err(ModelError::Train(format!(
                    "loss diverged at epoch {epoch}, step {step}"
                )));
            }
            train_loss += loss;
            clip_global_norm(&mut grads, opt.grad_clip);
            let lr = noam_lr(opt, config.d_model, step);
            adam.step(&mut params, &grads, lr, opt);
        }
        train_loss /= batches.len() as f64;

        let val_loss = if val_items.is_empty() {
            train_loss
        } else {
            eval_loss(&params, &val_items)?
        };
        if !val_loss.is_finite() {
            return Err(ModelError::Train(format!(
                "validation loss diverged at epoch {epoch}"
            )));
        }
        log.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
        if best.as_ref().map(|(l, _, _)| val_loss < *l).unwrap_or(true) {
            best = Some((val_loss, epoch, params.clone()));
        }
        if opt.average_best.is_some() {
            snapshots.push((val_loss, params.clone()));
        }
    }

    let (_, best_epoch, best_params) = best.expect("epochs >= 1");
    let final_params = match opt.average_best {
        Some(k) if k > 1 => average_snapshots(&mut snapshots, k),
        _ => best_params,
    };
    Ok(TrainOutcome {
        params: final_params,
        log,
        best_epoch,
    })
}

fn average_snapshots(snapshots: &mut [(f64, ModelParams)], k: usize) -> ModelParams {
    snapshots.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let k = k.min(snapshots.len());
    let mut avg = snapshots[0].1.clone();
    for (_, p) in avg.set.iter_mut() {
        p.fill(0.0);
    }
    for (_, snap) in snapshots.iter().take(k) {
        avg.set.add_scaled(&snap.set, 1.0 / k as f64);
    }
    avg
}

/// Mean per-example loss without dropout.
pub fn eval_loss(params: &ModelParams, items: &[BatchItem]) -> Result<f64, ModelError> {
    let batch = Batch {
        items: items.to_vec(),
    };
    batch_loss(params, &batch, 0, 0, false)
}

/// Fraction of output frames where argmax disagrees with the label.
pub fn frame_error_rate(params: &ModelParams, items: &[BatchItem]) -> Result<f64, ModelError> {
    let mut errors = 0usize;
    let mut total = 0usize;
    for item in items {
        let logits = forward_logits(params, &item.features)?;
        let probs = softmax_rows(&logits);
        for (n, &label) in item.labels.labels.iter().enumerate() {
            let pred = if probs[[n, 1]] > probs[[n, 0]] { 1u8 } else { 0u8 };
            if pred != label {
                errors += 1;
            }
            total += 1;
        }
    }
    Ok(errors as f64 / total.max(1) as f64)
}
