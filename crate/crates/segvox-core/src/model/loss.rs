//! Weighted cross-entropy over inside/outside frame labels. The loss
//! puts weight w_s on label-1 (outside-utterance) frames and 1 - w_s on
//! label-0 frames, summed over frames.

use ndarray::Array2;

use super::ModelError;
use crate::corpus::FrameLabels;

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// L = -sum_n [ w_s * ln p_n(1) * x_{n,1} + (1 - w_s) * ln p_n(0) * x_{n,0} ]
/// over unmasked frames, where p_n = softmax(logits_n). Returns the sum,
/// not the mean.
pub fn seg_loss(
    logits: &Array2<f64>,
    labels: &FrameLabels,
    w_s: f64,
    mask: Option<&[bool]>,
) -> Result<f64, ModelError> {
    if logits.nrows() != labels.len() {
        return Err(ModelError::Shape(format!(
            "{} logit rows vs {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    if let Some(m) = mask {
        if m.len() != labels.len() {
            return Err(ModelError::Shape(format!(
                "{} mask entries vs {} labels",
                m.len(),
                labels.len()
            )));
        }
    }
    let mut total = 0.0;
    for (n, &label) in labels.labels.iter().enumerate() {
        if mask.map(|m| !m[n]).unwrap_or(false) {
            continue;
        }
        let (l0, l1) = (logits[[n, 0]], logits[[n, 1]]);
        let max = l0.max(l1);
        // ln p(c) = logit_c - max - ln(e^(l0-max) + e^(l1-max))
        let log_z = max + ((l0 - max).exp() + (l1 - max).exp()).ln();
        let (weight, log_p) = if label == 1 {
            (w_s, l1 - log_z)
        } else {
            (1.0 - w_s, l0 - log_z)
        };
        total -= weight * log_p;
    }
    Ok(total)
}

/// Gradient of `seg_loss` with respect to the logits.
pub(crate) fn seg_loss_grad(
    logits: &Array2<f64>,
    labels: &FrameLabels,
    w_s: f64,
    mask: Option<&[bool]>,
) -> Array2<f64> {
    let probs = softmax_rows(logits);
    let mut grad = Array2::zeros(logits.raw_dim());
    for (n, &label) in labels.labels.iter().enumerate() {
        if mask.map(|m| !m[n]).unwrap_or(false) {
            continue;
        }
        let (weight, target) = if label == 1 {
            (w_s, 1usize)
        } else {
            (1.0 - w_s, 0usize)
        };
        for c in 0..2 {
            let indicator = if c == target { 1.0 } else { 0.0 };
            grad[[n, c]] = weight * (probs[[n, c]] - indicator);
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn labels(values: &[u8]) -> FrameLabels {
        FrameLabels {
            labels: values.to_vec(),
            frame_shift_s: 0.04,
        }
    }

    #[test]
    fn equal_logits_label_one_gives_ws_ln2() {
        let logits = array![[0.0, 0.0]];
        let loss = seg_loss(&logits, &labels(&[1]), 0.9, None).unwrap();
        assert!((loss - 0.9 * 2f64.ln()).abs() < 1e-12);
        assert!((loss - 0.623832).abs() < 1e-6);
    }

    #[test]
    fn equal_logits_label_zero_gives_one_minus_ws_ln2() {
        let logits = array![[0.0, 0.0]];
        let loss = seg_loss(&logits, &labels(&[0]), 0.9, None).unwrap();
        assert!((loss - 0.1 * 2f64.ln()).abs() < 1e-12);
        assert!((loss - 0.069315).abs() < 1e-6);
    }

    #[test]
    fn perfect_prediction_loss_tends_to_zero() {
        let logits = array![[0.0, 60.0], [60.0, 0.0]];
        let loss = seg_loss(&logits, &labels(&[1, 0]), 0.9, None).unwrap();
        assert!(loss >= 0.0);
        assert!(loss < 1e-20);
    }

    #[test]
    fn masked_frames_contribute_nothing() {
        let logits = array![[3.0, -1.0], [0.5, 0.5]];
        let full = seg_loss(&logits, &labels(&[1, 0]), 0.9, None).unwrap();
        let masked = seg_loss(&logits, &labels(&[1, 0]), 0.9, Some(&[true, false])).unwrap();
        let only_first = seg_loss(
            &logits.slice(ndarray::s![0..1, ..]).to_owned(),
            &labels(&[1]),
            0.9,
            None,
        )
        .unwrap();
        assert!((masked - only_first).abs() < 1e-12);
        assert!(masked < full);
        let all_masked = seg_loss(&logits, &labels(&[1, 0]), 0.9, Some(&[false, false])).unwrap();
        assert_eq!(all_masked, 0.0);
    }

    #[test]
    fn length_mismatch_rejected() {
        let logits = array![[0.0, 0.0]];
        assert!(seg_loss(&logits, &labels(&[1, 0]), 0.9, None).is_err());
        assert!(seg_loss(&logits, &labels(&[1]), 0.9, Some(&[true, true])).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            vals in proptest::collection::vec(-50.0f64..50.0, 2..40),
        ) {
            prop_assume!(vals.len() % 2 == 0);
            let n = vals.len() / 2;
            let logits = Array2::from_shape_vec((n, 2), vals).unwrap();
            let p = softmax_rows(&logits);
            for row in p.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn loss_nonnegative_and_half_ws_matches_unweighted(
            vals in proptest::collection::vec(-10.0f64..10.0, 2..30),
            seed in 0u64..100,
        ) {
            prop_assume!(vals.len() % 2 == 0);
            let n = vals.len() / 2;
            let logits = Array2::from_shape_vec((n, 2), vals).unwrap();
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let lab: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
            let lab = labels(&lab);
            let loss = seg_loss(&logits, &lab, 0.9, None).unwrap();
            prop_assert!(loss >= 0.0);
            // with w_s = 0.5 the loss is exactly half the unweighted CE
            let half = seg_loss(&logits, &lab, 0.5, None).unwrap();
            let probs = softmax_rows(&logits);
            let unweighted: f64 = lab.labels.iter().enumerate()
                .map(|(i, &l)| -probs[[i, l as usize]].ln())
                .sum();
            prop_assert!((half - 0.5 * unweighted).abs() < 1e-9);
        }
    }

    #[test]
    fn grad_matches_finite_difference_on_logits() {
        let logits = array![[0.3, -0.7], [1.2, 0.4], [-0.5, 0.9]];
        let lab = labels(&[1, 0, 1]);
        let grad = seg_loss_grad(&logits, &lab, 0.9, None);
        let h = 1e-6;
        for n in 0..3 {
            for c in 0..2 {
                let mut plus = logits.clone();
                plus[[n, c]] += h;
                let mut minus = logits.clone();
                minus[[n, c]] -= h;
                let fd = (seg_loss(&plus, &lab, 0.9, None).unwrap()
                    - seg_loss(&minus, &lab, 0.9, None).unwrap())
                    / (2.0 * h);
                assert!((fd - grad[[n, c]]).abs() < 1e-7, "n={n} c={c}");
            }
        }
    }
}
