//! Forward pass with activation caching for the backward pass.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView4, Ix1, Ix2, Ix4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::softmax_rows;
use super::{
    output_length, LabelProbabilities, ModelError, ModelParams, CONV_KERNEL, CONV_STRIDE,
    SUBSAMPLE_FACTOR,
};
use crate::audio::FeatureMatrix;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Deterministic dropout: masks are drawn from a generator seeded by
/// (seed, step, example) counters, so training replays bit-identically.
#[derive(Debug, Clone, Copy)]
pub struct DropoutPlan {
    pub p: f64,
    pub seed: u64,
    pub step: u64,
    pub example: u64,
}

const DROPOUT_DOMAIN: u64 = 0x7365677678; // "segvx"

impl DropoutPlan {
    fn rng(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.step.to_le_bytes());
        key[16..24].copy_from_slice(&self.example.to_le_bytes());
        key[24..32].copy_from_slice(&DROPOUT_DOMAIN.to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }
}

struct DropoutState {
    rng: ChaCha8Rng,
    p: f64,
}

impl DropoutState {
    fn new(plan: &DropoutPlan) -> Option<DropoutState> {
        if plan.p > 0.0 {
            Some(DropoutState {
                rng: plan.rng(),
                p: plan.p,
            })
        } else {
            None
        }
    }

    /// Inverted-dropout multiplier mask: 0 or 1/(1-p) per element.
    fn mask(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        let keep = 1.0 - self.p;
        Array2::from_shape_fn((rows, cols), |_| {
            if self.rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
    }
}

pub(crate) struct LnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub(crate) struct LayerCache {
    pub h_in: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub attn_probs: Vec<Array2<f64>>,
    pub ctx: Array2<f64>,
    pub attn_drop: Option<Array2<f64>>,
    pub ln1: LnCache,
    pub h_mid: Array2<f64>,
    pub ffn_pre: Array2<f64>,
    pub ffn_drop: Option<Array2<f64>>,
    pub ln2: LnCache,
}

pub(crate) struct Cache {
    pub input: Array2<f64>,
    pub conv1_pre: Array3<f64>,
    pub conv2_pre: Array3<f64>,
    pub conv2_out: Array3<f64>,
    pub flat: Array2<f64>,
    pub emb_drop: Option<Array2<f64>>,
    pub layers: Vec<LayerCache>,
    pub h_final: Array2<f64>,
    pub logits: Array2<f64>,
}

pub(crate) fn view2<'a>(params: &'a ModelParams, name: &str) -> ArrayView2<'a, f64> {
    params
        .set
        .get(name)
        .view()
        .into_dimensionality::<Ix2>()
        .unwrap()
}

pub(crate) fn view1<'a>(params: &'a ModelParams, name: &str) -> ArrayView1<'a, f64> {
    params
        .set
        .get(name)
        .view()
        .into_dimensionality::<Ix1>()
        .unwrap()
}

pub(crate) fn view4<'a>(params: &'a ModelParams, name: &str) -> ArrayView4<'a, f64> {
    params
        .set
        .get(name)
        .view()
        .into_dimensionality::<Ix4>()
        .unwrap()
}

fn linear(x: &Array2<f64>, w: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    y += b;
    y
}

/// Stride-2, padding-1 2D convolution: out[o,i,j] = b[o] +
/// sum over c,u,v of w[o,c,u,v] * x[c, 2i+u-1, 2j+v-1].
pub(crate) fn conv_forward(
    input: &Array3<f64>,
    weight: &ArrayView4<f64>,
    bias: &ArrayView1<f64>,
) -> Array3<f64> {
    let (c_in, h, w) = input.dim();
    let c_out = weight.dim().0;
    debug_assert_eq!(weight.dim().1, c_in);
    let h_out = h.div_ceil(CONV_STRIDE);
    let w_out = w.div_ceil(CONV_STRIDE);
    let mut out = Array3::zeros((c_out, h_out, w_out));
    for o in 0..c_out {
        let b = bias[o];
        for i in 0..h_out {
            for j in 0..w_out {
                let mut acc = b;
                for c in 0..c_in {
                    for u in 0..CONV_KERNEL {
                        let y = (CONV_STRIDE * i + u).wrapping_sub(1);
                        if y >= h {
                            continue;
                        }
                        for v in 0..CONV_KERNEL {
                            let x = (CONV_STRIDE * j + v).wrapping_sub(1);
                            if x >= w {
                                continue;
                            }
                            acc += weight[[o, c, u, v]] * input[[c, y, x]];
                        }
                    }
                }
                out[[o, i, j]] = acc;
            }
        }
    }
    out
}

fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

fn layer_norm(x: &Array2<f64>, gain: &ArrayView1<f64>, bias: &ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let (n, d) = x.dim();
    let mut xhat = Array2::zeros((n, d));
    let mut inv_std = Array1::zeros(n);
    let mut out = Array2::zeros((n, d));
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = istd;
        for j in 0..d {
            let xh = (x[[i, j]] - mean) * istd;
            xhat[[i, j]] = xh;
            out[[i, j]] = gain[j] * xh + bias[j];
        }
    }
    (out, LnCache { xhat, inv_std })
}

fn check_finite(x: &Array2<f64>, layer: &str) -> Result<(), ModelError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::Numeric {
            layer: layer.to_string(),
        })
    }
}

/// Full forward pass over one example. Returns pre-softmax logits and
/// the cached activations needed by the backward pass.
pub(crate) fn forward_cached(
    params: &ModelParams,
    input: &Array2<f64>,
    dropout: Option<&DropoutPlan>,
) -> Result<Cache, ModelError> {
    let cfg = &params.config;
    let (n_in, dim) = input.dim();
    if dim != cfg.input_dim {
        return Err(ModelError::Shape(format!(
            "feature dim {dim} != configured input_dim {}",
            cfg.input_dim
        )));
    }
    let n_out = output_length(n_in)?;
    if n_out > cfg.max_positions {
        return Err(ModelError::Shape(format!(
            "{n_out} output frames exceed position table length {}",
            cfg.max_positions
        )));
    }
    let mut drop = dropout.and_then(DropoutState::new);

    // conv subsampler over a 1-channel (time x freq) image
    let img = input
        .clone()
        .insert_axis(ndarray::Axis(0))
        .into_dimensionality()
        .unwrap();
    let conv1_pre = conv_forward(&img, &view4(params, "conv1.weight"), &view1(params, "conv1.bias"));
    let conv1_out = relu(&conv1_pre);
    let conv2_pre = conv_forward(
        &conv1_out,
        &view4(params, "conv2.weight"),
        &view1(params, "conv2.bias"),
    );
    let conv2_out = relu(&conv2_pre);
    let (c, t2, f2) = conv2_out.dim();
    debug_assert_eq!(t2, n_out);
    debug_assert_eq!(f2, cfg.conv_freq_out());

    // flatten channels x freq per model frame
    let mut flat = Array2::zeros((t2, c * f2));
    for ch in 0..c {
        for t in 0..t2 {
            for f in 0..f2 {
                flat[[t, ch * f2 + f]] = conv2_out[[ch, t, f]];
            }
        }
    }

    // input projection + sinusoidal positions
    let mut h = linear(&flat, &view2(params, "in_proj.weight"), &view1(params, "in_proj.bias"));
    let pos = view2(params, "pos_table");
    h += &pos.slice(s![0..t2, ..]);
    check_finite(&h, "input projection")?;

    let emb_drop = drop.as_mut().map(|d| d.mask(t2, cfg.d_model));
    if let Some(m) = &emb_drop {
        h *= m;
    }

    let dk = cfg.d_model / cfg.n_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let h_in = h.clone();
        let q = linear(
            &h,
            &view2(params, &format!("enc{l}.attn.wq")),
            &view1(params, &format!("enc{l}.attn.bq")),
        );
        let k = linear(
            &h,
            &view2(params, &format!("enc{l}.attn.wk")),
            &view1(params, &format!("enc{l}.attn.bk")),
        );
        let v = linear(
            &h,
            &view2(params, &format!("enc{l}.attn.wv")),
            &view1(params, &format!("enc{l}.attn.bv")),
        );
        let mut ctx = Array2::zeros((t2, cfg.d_model));
        let mut attn_probs = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let cols = s![.., head * dk..(head + 1) * dk];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            let probs = softmax_rows(&scores);
            ctx.slice_mut(cols).assign(&probs.dot(&vh));
            attn_probs.push(probs);
        }
        let mut attn_out = linear(
            &ctx,
            &view2(params, &format!("enc{l}.attn.wo")),
            &view1(params, &format!("enc{l}.attn.bo")),
        );
        let attn_drop = drop.as_mut().map(|d| d.mask(t2, cfg.d_model));
        if let Some(m) = &attn_drop {
            attn_out *= m;
        }
        let sum1 = &h_in + &attn_out;
        let (h_mid, ln1) = layer_norm(
            &sum1,
            &view1(params, &format!("enc{l}.ln1.gain")),
            &view1(params, &format!("enc{l}.ln1.bias")),
        );

        let ffn_pre = linear(
            &h_mid,
            &view2(params, &format!("enc{l}.ffn.w1")),
            &view1(params, &format!("enc{l}.ffn.b1")),
        );
        let ffn_hidden = ffn_pre.mapv(|v| v.max(0.0));
        let mut ffn_out = linear(
            &ffn_hidden,
            &view2(params, &format!("enc{l}.ffn.w2")),
            &view1(params, &format!("enc{l}.ffn.b2")),
        );
        let ffn_drop = drop.as_mut().map(|d| d.mask(t2, cfg.d_model));
        if let Some(m) = &ffn_drop {
            ffn_out *= m;
        }
        let sum2 = &h_mid + &ffn_out;
        let (h_out, ln2) = layer_norm(
            &sum2,
            &view1(params, &format!("enc{l}.ln2.gain")),
            &view1(params, &format!("enc{l}.ln2.bias")),
        );
        check_finite(&h_out, &format!("encoder layer {l}"))?;

        layers.push(LayerCache {
            h_in,
            q,
            k,
            v,
            attn_probs,
            ctx,
            attn_drop,
            ln1,
            h_mid,
            ffn_pre,
            ffn_drop,
            ln2,
        });
        h = h_out;
    }

    let logits = linear(&h, &view2(params, "out.weight"), &view1(params, "out.bias"));
    check_finite(&logits, "output layer")?;

    Ok(Cache {
        input: input.clone(),
        conv1_pre,
        conv2_pre,
        conv2_out,
        flat,
        emb_drop,
        layers,
        h_final: h,
        logits,
    })
}

/// Pre-softmax logits for one example (no dropout).
pub fn forward_logits(params: &ModelParams, input: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
    Ok(forward_cached(params, input, None)?.logits)
}

/// Label posteriors for a feature matrix. With `train_mode` dropout is
/// applied from a default plan; inference callers pass false.
pub fn forward(
    params: &ModelParams,
    features: &FeatureMatrix,
    train_mode: bool,
) -> Result<LabelProbabilities, ModelError> {
    let plan = DropoutPlan {
        p: params.config.dropout,
        seed: 0,
        step: 0,
        example: 0,
    };
    let cache = forward_cached(
        params,
        &features.data,
        if train_mode { Some(&plan) } else { None },
    )?;
    Ok(LabelProbabilities {
        probs: softmax_rows(&cache.logits),
        frame_duration_s: features.frame_shift_s * SUBSAMPLE_FACTOR as f64,
    })
}
