//! Analytic gradients for the full model, verified against central
//! finite differences in the tests and the acceptance suite.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView4, Axis};

use super::forward::{forward_cached, view1, view2, view4, Cache, DropoutPlan, LayerCache, LnCache};
use super::loss::{seg_loss, seg_loss_grad};
use super::{ModelError, ModelParams, ParamSet, CONV_KERNEL, CONV_STRIDE};
use crate::corpus::FrameLabels;

/// One training example on the model's output grid: features at full
/// frame rate, labels and validity mask already downsampled.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub features: Array2<f64>,
    pub labels: FrameLabels,
    /// None means all frames valid.
    pub mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

fn dropout_plan(params: &ModelParams, seed: u64, step: u64, example: u64) -> Option<DropoutPlan> {
    if params.config.dropout > 0.0 {
        Some(DropoutPlan {
            p: params.config.dropout,
            seed,
            step,
            example,
        })
    } else {
        None
    }
}

/// Masked loss of a batch under the same dropout draw the gradients use:
/// per-example frame sums averaged over the batch.
pub fn batch_loss(
    params: &ModelParams,
    batch: &Batch,
    seed: u64,
    step: u64,
    with_dropout: bool,
) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for (idx, item) in batch.items.iter().enumerate() {
        let plan = if with_dropout {
            dropout_plan(params, seed, step, idx as u64)
        } else {
            None
        };
        let cache = forward_cached(params, &item.features, plan.as_ref())?;
        total += seg_loss(
            &cache.logits,
            &item.labels,
            params.config.w_s,
            item.mask.as_deref(),
        )?;
    }
    Ok(total / batch.items.len() as f64)
}

/// Loss and gradients of every trainable tensor for a batch. Dropout is
/// active when the model config enables it; masks are replayed from
/// (seed, step, example index) so results are deterministic.
pub fn loss_and_gradients(
    params: &ModelParams,
    batch: &Batch,
    seed: u64,
    step: u64,
) -> Result<(f64, ParamSet), ModelError> {
    if batch.items.is_empty() {
        return Err(ModelError::Train("empty batch".into()));
    }
    let inv_b = 1.0 / batch.items.len() as f64;
    let mut grads = params.zero_grads();
    let mut total = 0.0;
    for (idx, item) in batch.items.iter().enumerate() {
        let plan = dropout_plan(params, seed, step, idx as u64);
        let cache = forward_cached(params, &item.features, plan.as_ref())?;
        let loss = seg_loss(
            &cache.logits,
            &item.labels,
            params.config.w_s,
            item.mask.as_deref(),
        )?;
        total += loss * inv_b;
        let mut d_logits = seg_loss_grad(
            &cache.logits,
            &item.labels,
            params.config.w_s,
            item.mask.as_deref(),
        );
        d_logits *= inv_b;
        backward_example(params, &cache, &d_logits, &mut grads)?;
    }
    if !grads.all_finite() {
        return Err(ModelError::Numeric {
            layer: "gradients".into(),
        });
    }
    Ok((total, grads))
}

fn acc2(grads: &mut ParamSet, name: &str, delta: Array2<f64>) {
    let g = grads.get_mut(name);
    *g += &delta.into_dyn();
}

fn acc1(grads: &mut ParamSet, name: &str, delta: Array1<f64>) {
    let g = grads.get_mut(name);
    *g += &delta.into_dyn();
}

fn acc4(grads: &mut ParamSet, name: &str, delta: Array4<f64>) {
    let g = grads.get_mut(name);
    *g += &delta.into_dyn();
}

/// Backward of y = g * xhat + b given upstream dY.
/// Returns dX; accumulates dGain and dBias.
fn layer_norm_backward(
    d_y: &Array2<f64>,
    ln: &LnCache,
    gain: &ndarray::ArrayView1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let (n, d) = d_y.dim();
    let d_gain = (d_y * &ln.xhat).sum_axis(Axis(0));
    let d_bias = d_y.sum_axis(Axis(0));
    let mut d_x = Array2::zeros((n, d));
    for i in 0..n {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            let dxh = d_y[[i, j]] * gain[j];
            m1 += dxh;
            m2 += dxh * ln.xhat[[i, j]];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for j in 0..d {
            let dxh = d_y[[i, j]] * gain[j];
            d_x[[i, j]] = ln.inv_std[i] * (dxh - m1 - ln.xhat[[i, j]] * m2);
        }
    }
    (d_x, d_gain, d_bias)
}

/// Backward of A = softmax(S) rows: dS = A * (dA - rowsum(dA * A)).
fn softmax_backward(probs: &Array2<f64>, d_probs: &Array2<f64>) -> Array2<f64> {
    let mut d_s = Array2::zeros(probs.raw_dim());
    for i in 0..probs.nrows() {
        let dot: f64 = probs
            .row(i)
            .iter()
            .zip(d_probs.row(i).iter())
            .map(|(a, b)| a * b)
            .sum();
        for j in 0..probs.ncols() {
            d_s[[i, j]] = probs[[i, j]] * (d_probs[[i, j]] - dot);
        }
    }
    d_s
}

/// Backward of the stride-2 padded conv. Returns (dWeight, dBias, dInput).
fn conv_backward(
    input: &Array3<f64>,
    weight: &ArrayView4<f64>,
    grad_out: &Array3<f64>,
) -> (Array4<f64>, Array1<f64>, Array3<f64>) {
    let (c_in, h, w) = input.dim();
    let (c_out, _, _, _) = weight.dim();
    let (_, h_out, w_out) = grad_out.dim();
    let mut d_weight = Array4::zeros(weight.raw_dim());
    let mut d_bias = Array1::zeros(c_out);
    let mut d_input = Array3::zeros(input.raw_dim());
    for o in 0..c_out {
        for i in 0..h_out {
            for j in 0..w_out {
                let g = grad_out[[o, i, j]];
                if g == 0.0 {
                    continue;
                }
                d_bias[o] += g;
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
                            d_weight[[o, c, u, v]] += g * input[[c, y, x]];
                            d_input[[c, y, x]] += g * weight[[o, c, u, v]];
                        }
                    }
                }
            }
        }
    }
    (d_weight, d_bias, d_input)
}

fn backward_example(
    params: &ModelParams,
    cache: &Cache,
    d_logits: &Array2<f64>,
    grads: &mut ParamSet,
) -> Result<(), ModelError> {
    let cfg = &params.config;
    let dk = cfg.d_model / cfg.n_heads;
    let scale = 1.0 / (dk as f64).sqrt();

    // output layer
    acc2(grads, "out.weight", cache.h_final.t().dot(d_logits));
    acc1(grads, "out.bias", d_logits.sum_axis(Axis(0)));
    let mut d_h = d_logits.dot(&view2(params, "out.weight").t());

    for (l, layer) in cache.layers.iter().enumerate().rev() {
        let LayerCache {
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
            ..
        } = layer;

        // second sublayer: h_out = ln2(h_mid + dropout(ffn(h_mid)))
        let (d_sum2, d_gain2, d_bias2) =
            layer_norm_backward(&d_h, ln2, &view1(params, &format!("enc{l}.ln2.gain")));
        acc1(grads, &format!("enc{l}.ln2.gain"), d_gain2);
        acc1(grads, &format!("enc{l}.ln2.bias"), d_bias2);

        let mut d_ffn_out = d_sum2.clone();
        if let Some(m) = ffn_drop {
            d_ffn_out *= m;
        }
        let ffn_hidden = ffn_pre.mapv(|x| x.max(0.0));
        acc2(grads, &format!("enc{l}.ffn.w2"), ffn_hidden.t().dot(&d_ffn_out));
        acc1(grads, &format!("enc{l}.ffn.b2"), d_ffn_out.sum_axis(Axis(0)));
        let mut d_pre = d_ffn_out.dot(&view2(params, &format!("enc{l}.ffn.w2")).t());
        d_pre.zip_mut_with(ffn_pre, |g, &p| {
            if p <= 0.0 {
                *g = 0.0;
            }
        });
        acc2(grads, &format!("enc{l}.ffn.w1"), h_mid.t().dot(&d_pre));
        acc1(grads, &format!("enc{l}.ffn.b1"), d_pre.sum_axis(Axis(0)));
        let mut d_h_mid = d_sum2;
        d_h_mid += &d_pre.dot(&view2(params, &format!("enc{l}.ffn.w1")).t());

        // first sublayer: h_mid = ln1(h_in + dropout(attn(h_in)))
        let (d_sum1, d_gain1, d_bias1) =
            layer_norm_backward(&d_h_mid, ln1, &view1(params, &format!("enc{l}.ln1.gain")));
        acc1(grads, &format!("enc{l}.ln1.gain"), d_gain1);
        acc1(grads, &format!("enc{l}.ln1.bias"), d_bias1);

        let mut d_attn_out = d_sum1.clone();
        if let Some(m) = attn_drop {
            d_attn_out *= m;
        }
        acc2(grads, &format!("enc{l}.attn.wo"), ctx.t().dot(&d_attn_out));
        acc1(grads, &format!("enc{l}.attn.bo"), d_attn_out.sum_axis(Axis(0)));
        let d_ctx = d_attn_out.dot(&view2(params, &format!("enc{l}.attn.wo")).t());

        let n = h_in.nrows();
        let mut d_q = Array2::zeros((n, cfg.d_model));
        let mut d_k = Array2::zeros((n, cfg.d_model));
        let mut d_v = Array2::zeros((n, cfg.d_model));
        for head in 0..cfg.n_heads {
            let cols = s![.., head * dk..(head + 1) * dk];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let probs = &attn_probs[head];
            let d_ctx_h = d_ctx.slice(cols);
            let d_probs = d_ctx_h.dot(&vh.t());
            d_v.slice_mut(cols).assign(&probs.t().dot(&d_ctx_h));
            let mut d_scores = softmax_backward(probs, &d_probs);
            d_scores *= scale;
            d_q.slice_mut(cols).assign(&d_scores.dot(&kh));
            d_k.slice_mut(cols).assign(&d_scores.t().dot(&qh));
        }
        acc2(grads, &format!("enc{l}.attn.wq"), h_in.t().dot(&d_q));
        acc1(grads, &format!("enc{l}.attn.bq"), d_q.sum_axis(Axis(0)));
        acc2(grads, &format!("enc{l}.attn.wk"), h_in.t().dot(&d_k));
        acc1(grads, &format!("enc{l}.attn.bk"), d_k.sum_axis(Axis(0)));
        acc2(grads, &format!("enc{l}.attn.wv"), h_in.t().dot(&d_v));
        acc1(grads, &format!("enc{l}.attn.bv"), d_v.sum_axis(Axis(0)));

        let mut d_h_in = d_sum1;
        d_h_in += &d_q.dot(&view2(params, &format!("enc{l}.attn.wq")).t());
        d_h_in += &d_k.dot(&view2(params, &format!("enc{l}.attn.wk")).t());
        d_h_in += &d_v.dot(&view2(params, &format!("enc{l}.attn.wv")).t());
        d_h = d_h_in;
    }

    // embedding dropout, positions (non-trainable), input projection
    if let Some(m) = &cache.emb_drop {
        d_h *= m;
    }
    acc2(grads, "in_proj.weight", cache.flat.t().dot(&d_h));
    acc1(grads, "in_proj.bias", d_h.sum_axis(Axis(0)));
    let d_flat = d_h.dot(&view2(params, "in_proj.weight").t());

    // unflatten into conv grid
    let (c, t2, f2) = cache.conv2_out.dim();
    let mut d_conv2_out = Array3::zeros((c, t2, f2));
    for ch in 0..c {
        for t in 0..t2 {
            for f in 0..f2 {
                d_conv2_out[[ch, t, f]] = d_flat[[t, ch * f2 + f]];
            }
        }
    }

    // conv2 relu + conv, then conv1
    d_conv2_out.zip_mut_with(&cache.conv2_pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    let conv1_out = cache.conv1_pre.mapv(|x| x.max(0.0));
    let (d_w2, d_b2, mut d_conv1_out) =
        conv_backward(&conv1_out, &view4(params, "conv2.weight"), &d_conv2_out);
    acc4(grads, "conv2.weight", d_w2);
    acc1(grads, "conv2.bias", d_b2);

    d_conv1_out.zip_mut_with(&cache.conv1_pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    let img = cache
        .input
        .clone()
        .insert_axis(Axis(0))
        .into_dimensionality()
        .unwrap();
    let (d_w1, d_b1, _) = conv_backward(&img, &view4(params, "conv1.weight"), &d_conv1_out);
    acc4(grads, "conv1.weight", d_w1);
    acc1(grads, "conv1.bias", d_b1);

    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{is_trainable, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_dim: 8,
            conv_channels: 2,
            d_model: 8,
            n_heads: 2,
            ffn_dim: 8,
            n_layers: 1,
            dropout: 0.0,
            w_s: 0.9,
            max_positions: 64,
        }
    }

    fn random_batch(cfg: &ModelConfig, n_frames: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features =
            Array2::from_shape_fn((n_frames, cfg.input_dim), |_| rng.gen_range(-1.5..1.5));
        let n_out = crate::model::output_length(n_frames).unwrap();
        let labels = FrameLabels {
            labels: (0..n_out).map(|_| rng.gen_range(0..=1u8)).collect(),
            frame_shift_s: 0.04,
        };
        Batch {
            items: vec![BatchItem {
                features,
                labels,
                mask: None,
            }],
        }
    }

    /// Max |analytic - fd| over a tensor, relative to the largest fd or
    /// analytic magnitude in that tensor. The denominator is floored so
    /// that tensors whose true gradient is identically zero (e.g. the
    /// attention key bias, which cancels in the row softmax) compare
    /// cancellation noise against an absolute scale instead of itself.
    pub(crate) fn max_rel_error(
        params: &mut ModelParams,
        batch: &Batch,
        name: &str,
        analytic: &ndarray::ArrayD<f64>,
        step_h: f64,
    ) -> f64 {
        let n_el = params.set.get(name).len();
        let mut max_abs_diff = 0.0f64;
        let mut max_fd = 0.0f64;
        for i in 0..n_el {
            let orig = params.set.get(name).as_slice().unwrap()[i];
            params.set.get_mut(name).as_slice_mut().unwrap()[i] = orig + step_h;
            let plus = batch_loss(params, batch, 0, 0, false).unwrap();
            params.set.get_mut(name).as_slice_mut().unwrap()[i] = orig - step_h;
            let minus = batch_loss(params, batch, 0, 0, false).unwrap();
            params.set.get_mut(name).as_slice_mut().unwrap()[i] = orig;
            let fd = (plus - minus) / (2.0 * step_h);
            let a = analytic.as_slice().unwrap()[i];
            max_abs_diff = max_abs_diff.max((a - fd).abs());
            max_fd = max_fd.max(fd.abs()).max(a.abs());
        }
        max_abs_diff / max_fd.max(1e-6)
    }

    #[test]
    fn gradient_shapes_match_parameters() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 0).unwrap();
        let batch = random_batch(&cfg, 12, 1);
        let (_, grads) = loss_and_gradients(&params, &batch, 0, 0).unwrap();
        for (name, g) in grads.iter() {
            assert!(is_trainable(name));
            assert_eq!(g.shape(), params.set.get(name).shape(), "{name}");
        }
    }

    #[test]
    fn all_masked_batch_gives_zero_loss_and_grads() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 0).unwrap();
        let mut batch = random_batch(&cfg, 12, 2);
        let n_out = batch.items[0].labels.len();
        batch.items[0].mask = Some(vec![false; n_out]);
        let (loss, grads) = loss_and_gradients(&params, &batch, 0, 0).unwrap();
        assert_eq!(loss, 0.0);
        for (name, g) in grads.iter() {
            assert!(g.iter().all(|&v| v == 0.0), "{name} has nonzero grad");
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let cfg = tiny_config();
        let mut params = ModelParams::init(&cfg, 3).unwrap();
        let batch = random_batch(&cfg, 16, 4);
        let (_, grads) = loss_and_gradients(&params, &batch, 0, 0).unwrap();
        for (name, g) in grads.clone().iter() {
            let rel = max_rel_error(&mut params, &batch, name, g, 1e-4);
            assert!(rel < 1e-4, "{name}: rel error {rel:.3e}");
        }
    }

    #[test]
    fn gradcheck_holds_with_dropout_masks_replayed() {
        // dropout masks depend only on (seed, step, example), so central
        // differences see the same masks on both sides
        let mut cfg = tiny_config();
        cfg.dropout = 0.2;
        let params = ModelParams::init(&cfg, 5).unwrap();
        let batch = random_batch(&cfg, 12, 6);
        let (_, grads) = loss_and_gradients(&params, &batch, 7, 3).unwrap();
        // spot-check the output bias against fd under the same plan
        let mut p = params.clone();
        let g = grads.get("out.bias").clone();
        let h = 1e-5;
        for i in 0..2 {
            let orig = p.set.get("out.bias").as_slice().unwrap()[i];
            p.set.get_mut("out.bias").as_slice_mut().unwrap()[i] = orig + h;
            let plus = batch_loss(&p, &batch, 7, 3, true).unwrap();
            p.set.get_mut("out.bias").as_slice_mut().unwrap()[i] = orig - h;
            let minus = batch_loss(&p, &batch, 7, 3, true).unwrap();
            p.set.get_mut("out.bias").as_slice_mut().unwrap()[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            assert!((fd - g.as_slice().unwrap()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_mean_of_two_singletons() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 0).unwrap();
        let a = random_batch(&cfg, 12, 10).items.remove(0);
        let b = random_batch(&cfg, 8, 11).items.remove(0);
        let (la, _) = loss_and_gradients(&params, &Batch { items: vec![a.clone()] }, 0, 0).unwrap();
        let (lb, _) = loss_and_gradients(&params, &Batch { items: vec![b.clone()] }, 0, 0).unwrap();
        let (lab, _) = loss_and_gradients(&params, &Batch { items: vec![a, b] }, 0, 0).unwrap();
        assert!((lab - (la + lb) / 2.0).abs() < 1e-10);
    }
}
