//! Scoring hypothesis segmentations against references: boundary
//! precision/recall, over-/under-segmentation counts, frame metrics,
//! and edit-distance alignment of hypothesis text to reference
//! sentences.

use serde::Serialize;
use thiserror::Error;

use crate::corpus::FrameLabels;
use crate::decoder::SegmentHypothesis;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("segments must be sorted and disjoint: {0}")]
    Unsorted(String),
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("need at least one reference sentence")]
    EmptyReference,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundaryMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tolerance_s: f64,
    pub n_hyp: usize,
    pub n_ref: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentResult {
    /// |ref| - 1 non-decreasing indices into the hypothesis token stream.
    pub split_points: Vec<usize>,
    pub total_edit_distance: usize,
}

fn check_sorted(segments: &[SegmentHypothesis], which: &str) -> Result<(), EvalError> {
    for w in segments.windows(2) {
        if w[0].end_s > w[1].start_s + 1e-9 {
            return Err(EvalError::Unsorted(format!(
                "{which} segments overlap near {:.3}s",
                w[1].start_s
            )));
        }
    }
    for s in segments {
        if s.start_s >= s.end_s {
            return Err(EvalError::Unsorted(format!(
                "{which} segment [{:.3}, {:.3}) is empty",
                s.start_s, s.end_s
            )));
        }
    }
    Ok(())
}

fn boundaries(segments: &[SegmentHypothesis]) -> Vec<f64> {
    let mut b = Vec::with_capacity(segments.len() * 2);
    for s in segments {
        b.push(s.start_s);
        b.push(s.end_s);
    }
    b
}

fn f1_of(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Greedy nearest-first matching of hypothesis boundaries to reference
/// boundaries within the tolerance; each boundary matches at most once.
pub fn boundary_metrics(
    hyp: &[SegmentHypothesis],
    reference: &[SegmentHypothesis],
    tolerance_s: f64,
) -> Result<BoundaryMetrics, EvalError> {
    check_sorted(hyp, "hypothesis")?;
    check_sorted(reference, "reference")?;
    let hb = boundaries(hyp);
    let rb = boundaries(reference);
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, &h) in hb.iter().enumerate() {
        for (j, &r) in rb.iter().enumerate() {
            let d = (h - r).abs();
            if d <= tolerance_s {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut hyp_used = vec![false; hb.len()];
    let mut ref_used = vec![false; rb.len()];
    let mut tp = 0usize;
    for (_, i, j) in pairs {
        if !hyp_used[i] && !ref_used[j] {
            hyp_used[i] = true;
            ref_used[j] = true;
            tp += 1;
        }
    }
    let precision = if hb.is_empty() { 0.0 } else { tp as f64 / hb.len() as f64 };
    let recall = if rb.is_empty() { 0.0 } else { tp as f64 / rb.len() as f64 };
    Ok(BoundaryMetrics {
        precision,
        recall,
        f1: f1_of(precision, recall),
        tolerance_s,
        n_hyp: hb.len(),
        n_ref: rb.len(),
    })
}

/// over = reference segments whose interior (minus tolerance collars)
/// contains a hypothesis boundary; under = hypothesis segments
/// containing two or more reference midpoints.
pub fn over_under_counts(
    hyp: &[SegmentHypothesis],
    reference: &[SegmentHypothesis],
    tolerance_s: f64,
) -> Result<(usize, usize), EvalError> {
    check_sorted(hyp, "hypothesis")?;
    check_sorted(reference, "reference")?;
    let hb = boundaries(hyp);
    let over = reference
        .iter()
        .filter(|r| {
            let lo = r.start_s + tolerance_s;
            let hi = r.end_s - tolerance_s;
            hb.iter().any(|&b| b > lo && b < hi)
        })
        .count();
    let midpoints: Vec<f64> = reference.iter().map(|r| (r.start_s + r.end_s) / 2.0).collect();
    let under = hyp
        .iter()
        .filter(|h| {
            midpoints
                .iter()
                .filter(|&&m| m >= h.start_s && m < h.end_s)
                .count()
                >= 2
        })
        .count();
    Ok((over, under))
}

#[derive(Debug, Clone, Serialize)]
pub struct FrameMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Binary precision/recall/f1 treating label 1 as positive.
pub fn frame_f1(pred: &FrameLabels, truth: &FrameLabels) -> Result<FrameMetrics, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::Length(format!(
            "{} predicted frames vs {} truth frames",
            pred.len(),
            truth.len()
        )));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &t) in pred.labels.iter().zip(truth.labels.iter()) {
        match (p, t) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    Ok(FrameMetrics {
        precision,
        recall,
        f1: f1_of(precision, recall),
    })
}

/// Unit-cost Levenshtein distance between token slices.
pub fn levenshtein(a: &[&str], b: &[&str]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ta) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, tb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ta != tb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Partition the hypothesis token stream into |ref| chunks minimizing
/// total Levenshtein distance chunk-by-chunk against the reference
/// sentences. Ties prefer the leftmost (lexicographically smallest)
/// split vector.
pub fn align_to_reference(
    hyp_tokens: &[&str],
    ref_sentences: &[Vec<&str>],
) -> Result<AlignmentResult, EvalError> {
    if ref_sentences.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let n = hyp_tokens.len();
    let r = ref_sentences.len();
    const INF: usize = usize::MAX / 2;
    // suffix[k][j] = min cost of aligning refs k.. to hyp[j..]
    let mut suffix = vec![vec![INF; n + 1]; r + 1];
    for (j, v) in suffix[r].iter_mut().enumerate() {
        *v = if j == n { 0 } else { INF };
    }
    for k in (0..r).rev() {
        for j in 0..=n {
            let mut best = INF;
            for j2 in j..=n {
                if suffix[k + 1][j2] == INF {
                    continue;
                }
                let cost = levenshtein(&hyp_tokens[j..j2], &ref_sentences[k]) + suffix[k + 1][j2];
                if cost < best {
                    best = cost;
                }
            }
            suffix[k][j] = best;
        }
    }
    let total = suffix[0][0];
    // forward reconstruction, choosing the smallest split at each step
    let mut split_points = Vec::with_capacity(r.saturating_sub(1));
    let mut j = 0usize;
    for k in 0..r - 1 {
        let remaining = suffix[k][j];
        let mut chosen = None;
        for j2 in j..=n {
            if suffix[k + 1][j2] == INF {
                continue;
            }
            let cost = levenshtein(&hyp_tokens[j..j2], &ref_sentences[k]) + suffix[k + 1][j2];
            if cost == remaining {
                chosen = Some(j2);
                break;
            }
        }
        j = chosen.expect("dp table is consistent");
        split_points.push(j);
    }
    Ok(AlignmentResult {
        split_points,
        total_edit_distance: total,
    })
}

/// Exhaustive split enumeration with the same leftmost tie rule; the
/// independent oracle for `align_to_reference` on small inputs.
pub fn align_brute_force(
    hyp_tokens: &[&str],
    ref_sentences: &[Vec<&str>],
) -> Result<AlignmentResult, EvalError> {
    if ref_sentences.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let n = hyp_tokens.len();
    let r = ref_sentences.len();
    let mut best: Option<AlignmentResult> = None;
    let mut splits = vec![0usize; r - 1];
    enumerate_splits(&mut splits, 0, 0, n, &mut |splits| {
        let mut cost = 0usize;
        let mut prev = 0usize;
        for (k, sentence) in ref_sentences.iter().enumerate() {
            let end = if k < splits.len() { splits[k] } else { n };
            cost += levenshtein(&hyp_tokens[prev..end], sentence);
            prev = end;
        }
        let better = match &best {
            None => true,
            Some(b) => cost < b.total_edit_distance,
        };
        if better {
            best = Some(AlignmentResult {
                split_points: splits.to_vec(),
                total_edit_distance: cost,
            });
        }
    });
    Ok(best.unwrap())
}

fn enumerate_splits(
    splits: &mut Vec<usize>,
    idx: usize,
    min: usize,
    n: usize,
    visit: &mut impl FnMut(&[usize]),
) {
    if idx == splits.len() {
        visit(splits);
        return;
    }
    for v in min..=n {
        splits[idx] = v;
        enumerate_splits(splits, idx + 1, v, n, visit);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seg(start: f64, end: f64) -> SegmentHypothesis {
        SegmentHypothesis {
            start_s: start,
            end_s: end,
        }
    }

    #[test]
    fn identical_segments_score_one() {
        let segs = vec![seg(0.0, 1.0), seg(1.5, 3.0)];
        let m = boundary_metrics(&segs, &segs, 0.2).unwrap();
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.f1, 1.0);
        let (over, under) = over_under_counts(&segs, &segs, 0.2).unwrap();
        assert_eq!((over, under), (0, 0));
    }

    #[test]
    fn empty_hypothesis_conventions() {
        let refs = vec![seg(0.0, 1.0)];
        let m = boundary_metrics(&[], &refs, 0.2).unwrap();
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn near_miss_matching() {
        // ref boundaries {1.0, 2.0}, hyp {1.04, 3.0}, tol 0.05
        let refs = vec![seg(1.0, 2.0)];
        let hyp = vec![seg(1.04, 3.0)];
        let m = boundary_metrics(&hyp, &refs, 0.05).unwrap();
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 0.5);
    }

    #[test]
    fn metrics_symmetric_under_swap() {
        let a = vec![seg(0.0, 1.0), seg(1.2, 2.0)];
        let b = vec![seg(0.05, 0.9), seg(1.5, 2.2)];
        let ab = boundary_metrics(&a, &b, 0.2).unwrap();
        let ba = boundary_metrics(&b, &a, 0.2).unwrap();
        assert!((ab.precision - ba.recall).abs() < 1e-12);
        assert!((ab.recall - ba.precision).abs() < 1e-12);
    }

    #[test]
    fn duplicate_boundary_never_raises_precision() {
        let refs = vec![seg(0.0, 1.0), seg(2.0, 3.0)];
        let hyp = vec![seg(0.0, 1.0)];
        let base = boundary_metrics(&hyp, &refs, 0.1).unwrap();
        // adjacent segment sharing the 1.0 boundary duplicates it
        let dup = vec![seg(0.0, 1.0), seg(1.0, 1.5)];
        let dup_m = boundary_metrics(&dup, &refs, 0.1).unwrap();
        assert!(dup_m.precision <= base.precision);
    }

    #[test]
    fn unsorted_rejected() {
        let bad = vec![seg(1.0, 2.5), seg(2.0, 3.0)];
        assert!(boundary_metrics(&bad, &[seg(0.0, 1.0)], 0.1).is_err());
    }

    #[test]
    fn over_under_examples() {
        // one hyp segment spanning two ref segments: under = 1
        let refs = vec![seg(0.0, 1.0), seg(1.5, 2.5)];
        let hyp = vec![seg(0.0, 2.5)];
        assert_eq!(over_under_counts(&hyp, &refs, 0.1).unwrap(), (0, 1));
        // ref [0, 10), hyp [0,4),[4,10): over = 1
        let refs = vec![seg(0.0, 10.0)];
        let hyp = vec![seg(0.0, 4.0), seg(4.0, 10.0)];
        assert_eq!(over_under_counts(&hyp, &refs, 0.1).unwrap(), (1, 0));
    }

    #[test]
    fn frame_f1_cases() {
        let fl = |v: &[u8]| FrameLabels {
            labels: v.to_vec(),
            frame_shift_s: 0.04,
        };
        let m = frame_f1(&fl(&[1, 0, 1]), &fl(&[1, 0, 1])).unwrap();
        assert_eq!(m.f1, 1.0);
        let m = frame_f1(&fl(&[0, 0, 0]), &fl(&[1, 0, 1])).unwrap();
        assert_eq!(m.recall, 0.0);
        let m = frame_f1(&fl(&[1, 1, 0, 0]), &fl(&[1, 0, 1, 0])).unwrap();
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 0.5);
        assert_eq!(m.f1, 0.5);
        assert!(frame_f1(&fl(&[1]), &fl(&[1, 0])).is_err());
    }

    fn tokens(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn alignment_exact_concatenation_is_zero() {
        let hyp = tokens("the cat sat on the mat");
        let refs = vec![tokens("the cat sat"), tokens("on the mat")];
        let r = align_to_reference(&hyp, &refs).unwrap();
        assert_eq!(r.total_edit_distance, 0);
        assert_eq!(r.split_points, vec![3]);
    }

    #[test]
    fn alignment_empty_hypothesis_all_insertions() {
        let refs = vec![tokens("a b c"), tokens("d e f g")];
        let r = align_to_reference(&[], &refs).unwrap();
        assert_eq!(r.total_edit_distance, 7);
        assert_eq!(r.split_points, vec![0]);
    }

    #[test]
    fn alignment_substitution_case() {
        let hyp = tokens("a b c d");
        let refs = vec![tokens("a b"), tokens("x d")];
        let r = align_to_reference(&hyp, &refs).unwrap();
        assert_eq!(r.split_points, vec![2]);
        assert_eq!(r.total_edit_distance, 1);
        let bf = align_brute_force(&hyp, &refs).unwrap();
        assert_eq!(r, bf);
    }

    #[test]
    fn alignment_matches_brute_force_randomized() {
        let vocabulary = ["a", "b", "c", "d", "e"];
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let hyp_len = rng.gen_range(0..=12);
            let hyp: Vec<&str> = (0..hyp_len)
                .map(|_| vocabulary[rng.gen_range(0..vocabulary.len())])
                .collect();
            let n_ref = rng.gen_range(1..=3);
            let refs: Vec<Vec<&str>> = (0..n_ref)
                .map(|_| {
                    let len = rng.gen_range(1..=5);
                    (0..len)
                        .map(|_| vocabulary[rng.gen_range(0..vocabulary.len())])
                        .collect()
                })
                .collect();
            let fast = align_to_reference(&hyp, &refs).unwrap();
            let slow = align_brute_force(&hyp, &refs).unwrap();
            assert_eq!(fast, slow, "hyp={hyp:?} refs={refs:?}");
        }
    }

    #[test]
    fn alignment_zero_iff_concatenation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vocabulary = ["x", "y", "z"];
        for _ in 0..50 {
            let refs: Vec<Vec<&str>> = (0..rng.gen_range(1..=3))
                .map(|_| {
                    (0..rng.gen_range(1..=4))
                        .map(|_| vocabulary[rng.gen_range(0..3)])
                        .collect()
                })
                .collect();
            let concat: Vec<&str> = refs.iter().flatten().cloned().collect();
            let r = align_to_reference(&concat, &refs).unwrap();
            assert_eq!(r.total_edit_distance, 0);
        }
    }
}
