//! The segmentation classifier: a 2D convolutional subsampler (two
//! stride-2 layers, x4 time reduction), a stack of post-norm Transformer
//! encoder blocks with sinusoidal positions, and a Linear+Softmax output
//! producing per-frame inside/outside probabilities. Forward and
//! backward passes are implemented directly; gradients are checked
//! against finite differences in the tests.

mod backward;
mod checkpoint;
mod forward;
mod loss;
mod train;

pub use backward::{batch_loss, loss_and_gradients, Batch, BatchItem};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{forward, forward_logits};
pub use loss::{seg_loss, softmax_rows};
pub use train::{
    eval_loss, example_to_item, frame_error_rate, noam_lr, train, EpochStats, OptimizerConfig,
    TrainOutcome,
};

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONV_KERNEL: usize = 3;
pub const CONV_STRIDE: usize = 2;
pub const CONV_LAYERS: usize = 2;
/// Total time reduction of the subsampler.
pub const SUBSAMPLE_FACTOR: usize = 4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model configuration error: {0}")]
    Config(String),
    #[error("input too short: {got} frames, need at least {need}")]
    TooShort { got: usize, need: usize },
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {layer}")]
    Numeric { layer: String },
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("checkpoint version {got}, expected {expected}")]
    Version { got: u32, expected: u32 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("training error: {0}")]
    Train(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Feature dimension D.
    pub input_dim: usize,
    pub conv_channels: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub n_layers: usize,
    pub dropout: f64,
    /// Weight on the label-1 (outside-utterance) loss term.
    pub w_s: f64,
    /// Length of the sinusoidal position table (model frames).
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 80,
            conv_channels: 16,
            d_model: 256,
            n_heads: 4,
            ffn_dim: 2048,
            n_layers: 12,
            dropout: 0.1,
            w_s: 0.9,
            max_positions: 2048,
        }
    }
}

impl ModelConfig {
    /// Small configuration for tests and quick experiments.
    pub fn desk_scale(input_dim: usize) -> Self {
        ModelConfig {
            input_dim,
            conv_channels: 8,
            d_model: 32,
            n_heads: 2,
            ffn_dim: 64,
            n_layers: 2,
            dropout: 0.1,
            w_s: 0.9,
            max_positions: 2048,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0 < self.w_s && self.w_s < 1.0) {
            return Err(ModelError::Config(format!("w_s must be in (0,1), got {}", self.w_s)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout must be in [0,1), got {}",
                self.dropout
            )));
        }
        if self.input_dim < SUBSAMPLE_FACTOR {
            return Err(ModelError::Config(format!(
                "input_dim {} too small for the conv subsampler",
                self.input_dim
            )));
        }
        Ok(())
    }

    /// Frequency dimension after the two stride-2 conv layers.
    pub fn conv_freq_out(&self) -> usize {
        half_up(half_up(self.input_dim))
    }

    /// Flattened width fed to the input projection.
    pub fn flat_dim(&self) -> usize {
        self.conv_channels * self.conv_freq_out()
    }
}

fn half_up(n: usize) -> usize {
    n.div_ceil(2)
}

/// Output sequence length of the conv subsampler for `n_in` input frames.
/// Each layer (kernel 3, stride 2, padding 1) maps L to ceil(L / 2).
pub fn output_length(n_in: usize) -> Result<usize, ModelError> {
    if n_in < SUBSAMPLE_FACTOR {
        return Err(ModelError::TooShort {
            got: n_in,
            need: SUBSAMPLE_FACTOR,
        });
    }
    Ok(half_up(half_up(n_in)))
}

/// Per-frame label posteriors on the model's output grid.
#[derive(Debug, Clone)]
pub struct LabelProbabilities {
    /// N_out x 2, rows sum to 1.
    pub probs: ndarray::Array2<f64>,
    /// SUBSAMPLE_FACTOR x feature frame shift.
    pub frame_duration_s: f64,
}

/// Ordered named tensors. Order is fixed at construction and drives both
/// checkpoint layout and optimizer iteration.
#[derive(Debug, Clone)]
pub struct ParamSet {
    entries: Vec<(String, ArrayD<f64>)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: ArrayD<f64>) {
        debug_assert!(self.index_of(name).is_none(), "duplicate tensor {name}");
        self.entries.push((name.to_string(), tensor));
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        let i = self
            .index_of(name)
            .unwrap_or_else(|| panic!("missing tensor {name}"));
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        let i = self
            .index_of(name)
            .unwrap_or_else(|| panic!("missing tensor {name}"));
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), ArrayD::zeros(t.raw_dim())))
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) {
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(other.entries.iter()) {
            a.zip_mut_with(b, |x, y| *x += scale * y);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// All model tensors plus the configuration that shapes them.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub set: ParamSet,
}

/// The sinusoidal position table is the only non-trainable tensor.
pub fn is_trainable(name: &str) -> bool {
    name != "pos_table"
}

impl ModelParams {
    /// Seeded Xavier-uniform initialization for projections and conv
    /// kernels, zeros for biases, ones for layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let c = config.conv_channels;
        let k = CONV_KERNEL;
        let d = config.d_model;

        let xavier = |shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha20Rng| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-limit..limit))
        };

        set.insert("conv1.weight", xavier(&[c, 1, k, k], k * k, c * k * k, &mut rng));
        set.insert("conv1.bias", ArrayD::zeros(IxDyn(&[c])));
        set.insert("conv2.weight", xavier(&[c, c, k, k], c * k * k, c * k * k, &mut rng));
        set.insert("conv2.bias", ArrayD::zeros(IxDyn(&[c])));

        let flat = config.flat_dim();
        set.insert("in_proj.weight", xavier(&[flat, d], flat, d, &mut rng));
        set.insert("in_proj.bias", ArrayD::zeros(IxDyn(&[d])));

        for l in 0..config.n_layers {
            for proj in ["wq", "wk", "wv", "wo"] {
                set.insert(&format!("enc{l}.attn.{proj}"), xavier(&[d, d], d, d, &mut rng));
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                set.insert(&format!("enc{l}.attn.{bias}"), ArrayD::zeros(IxDyn(&[d])));
            }
            set.insert(&format!("enc{l}.ln1.gain"), ArrayD::ones(IxDyn(&[d])));
            set.insert(&format!("enc{l}.ln1.bias"), ArrayD::zeros(IxDyn(&[d])));
            set.insert(
                &format!("enc{l}.ffn.w1"),
                xavier(&[d, config.ffn_dim], d, config.ffn_dim, &mut rng),
            );
            set.insert(&format!("enc{l}.ffn.b1"), ArrayD::zeros(IxDyn(&[config.ffn_dim])));
            set.insert(
                &format!("enc{l}.ffn.w2"),
                xavier(&[config.ffn_dim, d], config.ffn_dim, d, &mut rng),
            );
            set.insert(&format!("enc{l}.ffn.b2"), ArrayD::zeros(IxDyn(&[d])));
            set.insert(&format!("enc{l}.ln2.gain"), ArrayD::ones(IxDyn(&[d])));
            set.insert(&format!("enc{l}.ln2.bias"), ArrayD::zeros(IxDyn(&[d])));
        }

        set.insert("out.weight", xavier(&[d, 2], d, 2, &mut rng));
        set.insert("out.bias", ArrayD::zeros(IxDyn(&[2])));
        set.insert("pos_table", sinusoid_table(config.max_positions, d));

        Ok(ModelParams {
            config: config.clone(),
            set,
        })
    }

    /// Gradient container: zero tensors for every trainable parameter,
    /// in parameter order.
    pub fn zero_grads(&self) -> ParamSet {
        let mut g = ParamSet::new();
        for (name, t) in self.set.iter() {
            if is_trainable(name) {
                g.insert(name, ArrayD::zeros(t.raw_dim()));
            }
        }
        g
    }
}

/// Standard sinusoidal position encoding table.
pub fn sinusoid_table(max_positions: usize, d_model: usize) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(&[max_positions, d_model]), |idx| {
        let (t, i) = (idx[0] as f64, idx[1]);
        let exponent = (2 * (i / 2)) as f64 / d_model as f64;
        let angle = t / 10000f64.powf(exponent);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
