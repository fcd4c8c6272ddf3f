//! The release gate: one test per acceptance criterion, each printing a
//! pass/fail line. Run with `cargo test --test acceptance -- --nocapture`
//! to see the lines as they complete.

use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use segvox_core::audio::{compute_fbank, frame_count, hz_to_mel, write_wav};
use segvox_core::corpus::frame_labels_for_span;
use segvox_core::decoder::{hybrid_decode, segment_stream, DecodeConfig, DecodeMode};
use segvox_core::eval::{align_brute_force, align_to_reference, over_under_counts};
use segvox_core::model::{
    batch_loss, example_to_item, frame_error_rate, loss_and_gradients, seg_loss, train, Batch,
    BatchItem, ModelConfig, ModelParams, OptimizerConfig,
};
use segvox_core::synth::{generate, SynthConfig, SynthCorpus};
use segvox_core::vad::vad_decide;
use segvox_core::{FeatureConfig, FeatureMatrix, FrameLabels, TrainingExample, Waveform};

fn criterion(number: usize, name: &str, f: impl FnOnce()) {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(()) => println!("criterion {number} ({name}): PASS"),
        Err(e) => {
            println!("criterion {number} ({name}): FAIL");
            resume_unwind(e);
        }
    }
}

fn segvox() -> Command {
    Command::new(env!("CARGO_BIN_EXE_segvox"))
}

// ---------------------------------------------------------------- 1

fn grad_config() -> ModelConfig {
    ModelConfig {
        input_dim: 8,
        conv_channels: 4,
        d_model: 8,
        n_heads: 2,
        ffn_dim: 16,
        n_layers: 1,
        dropout: 0.0,
        w_s: 0.9,
        max_positions: 64,
    }
}

fn random_item(cfg: &ModelConfig, n_frames: usize, seed: u64) -> BatchItem {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let data = Array2::from_shape_fn((n_frames, cfg.input_dim), |_| rng.gen_range(-1.0..1.0));
    let labels: Vec<u8> = (0..n_frames).map(|_| rng.gen_range(0..2u8)).collect();
    let ex = TrainingExample {
        features: FeatureMatrix {
            data,
            frame_shift_s: 0.01,
            frame_length_s: 0.025,
            audio_id: "rand".into(),
        },
        labels: FrameLabels {
            labels,
            frame_shift_s: 0.01,
        },
        source: ("rand".into(), 0),
    };
    example_to_item(&ex).unwrap()
}

/// Max |analytic - fd| relative to the largest magnitude in the tensor,
/// with the denominator floored so identically-zero gradients (the
/// attention key bias cancels in the row softmax) compare cancellation
/// noise against an absolute scale.
fn tensor_rel_error(
    params: &mut ModelParams,
    batch: &Batch,
    name: &str,
    analytic: &ndarray::ArrayD<f64>,
) -> f64 {
    let h = 1e-4;
    let n_el = params.set.get(name).len();
    let mut max_diff = 0.0f64;
    let mut scale = 0.0f64;
    for i in 0..n_el {
        let orig = params.set.get(name).as_slice().unwrap()[i];
        params.set.get_mut(name).as_slice_mut().unwrap()[i] = orig + h;
        let plus = batch_loss(params, batch, 0, 0, false).unwrap();
        params.set.get_mut(name).as_slice_mut().unwrap()[i] = orig - h;
        let minus = batch_loss(params, batch, 0, 0, false).unwrap();
        params.set.get_mut(name).as_slice_mut().unwrap()[i] = orig;
        let fd = (plus - minus) / (2.0 * h);
        let a = analytic.as_slice().unwrap()[i];
        max_diff = max_diff.max((a - fd).abs());
        scale = scale.max(fd.abs()).max(a.abs());
    }
    max_diff / scale.max(1e-6)
}

#[test]
fn acceptance_1_gradient_fidelity() {
    criterion(1, "gradient fidelity", || {
        let started = Instant::now();
        let cfg = grad_config();
        for seed in 0..3u64 {
            let mut params = ModelParams::init(&cfg, seed).unwrap();
            let batch = Batch {
                items: vec![random_item(&cfg, 32, seed + 100)],
            };
            let (_, grads) = loss_and_gradients(&params, &batch, 0, 0).unwrap();
            for (name, g) in grads.clone().iter() {
                let rel = tensor_rel_error(&mut params, &batch, name, g);
                assert!(rel < 1e-4, "seed {seed}, {name}: rel error {rel:.3e}");
            }
        }
        let elapsed = started.elapsed();
        assert!(elapsed.as_secs() < 60, "took {elapsed:?}, budget 1 minute");
    });
}

// ---------------------------------------------------------------- 2

#[test]
fn acceptance_2_loss_oracle() {
    criterion(2, "loss oracle", || {
        let logits = ndarray::array![[0.25, 0.25]];
        let ln2 = std::f64::consts::LN_2;
        let label = |l: u8| FrameLabels {
            labels: vec![l],
            frame_shift_s: 0.04,
        };
        let l1 = seg_loss(&logits, &label(1), 0.9, None).unwrap();
        let l0 = seg_loss(&logits, &label(0), 0.9, None).unwrap();
        assert!((l1 - 0.9 * ln2).abs() < 1e-9, "label 1: {l1}");
        assert!((l0 - 0.1 * ln2).abs() < 1e-9, "label 0: {l0}");
    });
}

// ---------------------------------------------------------------- 3

#[test]
fn acceptance_3_hybrid_truth_table() {
    criterion(3, "hybrid truth table", || {
        // exhaustive 8 cases: (len vs maxlen) x model x vad
        for (len_state, m, v, expected) in [
            (0usize, 0u8, 0u8, 0u8), // AND: both in-utterance
            (0, 0, 1, 0),            // AND: vad boundary alone ignored
            (0, 1, 0, 0),            // AND: model boundary alone ignored
            (0, 1, 1, 1),            // AND: agreement splits
            (5, 0, 0, 0),            // OR: neither wants a boundary
            (5, 0, 1, 1),            // OR: vad alone suffices
            (5, 1, 0, 1),            // OR: model alone suffices
            (5, 1, 1, 1),            // OR: both
        ] {
            let mut len = len_state;
            let out = hybrid_decode(&[m], &[v], 5, &mut len);
            assert_eq!(
                out[0], expected,
                "len_state={len_state} model={m} vad={v}"
            );
            // len increments on 0 decisions and resets on 1
            if expected == 0 {
                assert_eq!(len, len_state + 1);
            } else {
                assert_eq!(len, 0);
            }
        }

        // 5-frame walkthrough: maxlen 2, model all 1, vad all 0 ->
        // [0,0,1,0,0], replayed against a literal step-by-step oracle
        let mut len = 0usize;
        let got = hybrid_decode(&[1, 1, 1, 1, 1], &[0, 0, 0, 0, 0], 2, &mut len);
        let mut oracle = Vec::new();
        let mut olen = 0usize;
        for (m, v) in [(1u8, 0u8); 5] {
            let l = if olen < 2 { m & v } else { m | v };
            olen = if l == 0 { olen + 1 } else { 0 };
            oracle.push(l);
        }
        assert_eq!(oracle, vec![0, 0, 1, 0, 0]);
        assert_eq!(got, oracle);
    });
}

// ---------------------------------------------------------------- 4

fn gap_example(rng: &mut ChaCha20Rng, input_dim: usize) -> TrainingExample {
    let n = rng.gen_range(40..80);
    let gap_start = rng.gen_range(10..n / 2);
    let gap_end = gap_start + rng.gen_range(5..15);
    let mut data = Array2::zeros((n, input_dim));
    let mut labels = Vec::with_capacity(n);
    for t in 0..n {
        let outside = t >= gap_start && t < gap_end;
        labels.push(u8::from(outside));
        for d in 0..input_dim {
            let base = if outside { -8.0 } else { 2.0 };
            data[[t, d]] = base + rng.gen_range(-0.5..0.5);
        }
    }
    TrainingExample {
        features: FeatureMatrix {
            data,
            frame_shift_s: 0.01,
            frame_length_s: 0.025,
            audio_id: "synthetic".into(),
        },
        labels: FrameLabels {
            labels,
            frame_shift_s: 0.01,
        },
        source: ("synthetic".into(), 0),
    }
}

#[test]
fn acceptance_4_overfit() {
    criterion(4, "overfit check", || {
        let started = Instant::now();
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let data: Vec<TrainingExample> = (0..20).map(|_| gap_example(&mut rng, 8)).collect();
        let mut cfg = ModelConfig::desk_scale(8);
        cfg.dropout = 0.0;
        let opt = OptimizerConfig {
            lr_scale: 2.0,
            warmup_steps: 50,
            batch_size: 4,
            epochs: 60, // well within the 200-epoch budget
            seed: 3,
            val_fraction: 0.0,
            ..OptimizerConfig::default()
        };
        let out = train(&cfg, &data, &opt).unwrap();
        let items: Vec<BatchItem> = data.iter().map(|e| example_to_item(e).unwrap()).collect();
        let fer = frame_error_rate(&out.params, &items).unwrap();
        assert!(fer < 0.05, "frame error rate {fer}");
        let elapsed = started.elapsed();
        assert!(elapsed.as_secs() < 300, "took {elapsed:?}, budget 5 minutes");
    });
}

// ---------------------------------------------------------------- 5

/// Random windows over the corpus, labeled from the true segment spans.
/// Varying the window origin stops the model from tying labels to
/// absolute positions (real recordings start anywhere in an utterance).
fn window_examples(
    corpus: &SynthCorpus,
    fcfg: &FeatureConfig,
    n: usize,
    seed: u64,
) -> Vec<TrainingExample> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let duration = corpus.wave.duration_s();
    (0..n)
        .map(|i| {
            let len = rng.gen_range(3.0..8.0f64);
            let start = rng.gen_range(0.0..duration - len);
            let span = corpus.wave.slice_seconds(start, start + len);
            let features = compute_fbank(&span, fcfg).unwrap();
            let labels = frame_labels_for_span(
                &corpus.segments,
                start,
                features.frame_shift_s,
                features.num_frames(),
            );
            TrainingExample {
                features,
                labels,
                source: ("train".into(), i),
            }
        })
        .collect()
}

#[test]
fn acceptance_5_end_to_end_synthetic() {
    criterion(5, "end-to-end synthetic segmentation", || {
        let fcfg = FeatureConfig {
            num_mel_bins: 40,
            ..FeatureConfig::default()
        };
        let train_corpus = generate(
            &SynthConfig {
                n_utterances: 101,
                seed: 11,
                ..SynthConfig::default()
            },
            "train",
        );
        let examples = window_examples(&train_corpus, &fcfg, 100, 13);
        assert_eq!(examples.len(), 100);

        let mut cfg = ModelConfig::desk_scale(fcfg.num_mel_bins);
        cfg.dropout = 0.0;
        let opt = OptimizerConfig {
            lr_scale: 1.0,
            warmup_steps: 100,
            batch_size: 16,
            epochs: 20,
            seed: 5,
            val_fraction: 0.0,
            ..OptimizerConfig::default()
        };
        let outcome = train(&cfg, &examples, &opt).unwrap();

        let stream = generate(
            &SynthConfig {
                n_utterances: 8,
                seed: 21,
                ..SynthConfig::default()
            },
            "stream",
        );
        let refs: Vec<segvox_core::SegmentHypothesis> = stream
            .segments
            .iter()
            .map(|s| segvox_core::SegmentHypothesis {
                start_s: s.offset_s,
                end_s: s.end_s(),
            })
            .collect();

        let decode = DecodeConfig {
            window_t_s: 20.0,
            maxlen_s: 10.0,
            mode: DecodeMode::ModelOnly,
            ..DecodeConfig::default()
        };
        let hyp = segment_stream(&stream.wave, &outcome.params, None, &decode, &fcfg).unwrap();
        assert_eq!(hyp.len(), 8, "expected 8 segments, got {hyp:?}");
        for (h, r) in hyp.iter().zip(refs.iter()) {
            assert!(
                (h.start_s - r.start_s).abs() <= 0.1,
                "start {:.3} vs reference {:.3}",
                h.start_s,
                r.start_s
            );
            assert!(
                (h.end_s - r.end_s).abs() <= 0.1,
                "end {:.3} vs reference {:.3}",
                h.end_s,
                r.end_s
            );
        }

        let trace = vad_decide(&stream.wave, &segvox_core::VadConfig::default()).unwrap();
        let hybrid_cfg = DecodeConfig {
            mode: DecodeMode::Hybrid,
            ..decode
        };
        let hyb =
            segment_stream(&stream.wave, &outcome.params, Some(&trace), &hybrid_cfg, &fcfg)
                .unwrap();
        let (over, under) = over_under_counts(&hyb, &refs, 0.1).unwrap();
        assert_eq!((over, under), (0, 0), "hybrid segments {hyb:?}");
    });
}

// ---------------------------------------------------------------- 6

#[test]
fn acceptance_6_fixed_length_exactness() {
    criterion(6, "fixed-length exactness", || {
        let dir = tempfile::tempdir().unwrap();
        let wav = dir.path().join("long.wav");
        write_wav(
            &wav,
            &Waveform {
                samples: vec![0.0; 16_000 * 65],
                sample_rate: 16_000,
            },
        )
        .unwrap();
        let out = dir.path().join("segments.tsv");
        let status = segvox()
            .args(["segment", "--mode", "fixed:20", "--format", "tsv", "--out"])
            .arg(&out)
            .arg(&wav)
            .status()
            .unwrap();
        assert!(status.success());
        let got = std::fs::read_to_string(&out).unwrap();
        assert_eq!(
            got,
            "long\t0.000\t20.000\nlong\t20.000\t40.000\nlong\t40.000\t60.000\nlong\t60.000\t65.000\n"
        );
    });
}

// ---------------------------------------------------------------- 7

#[test]
fn acceptance_7_alignment_oracle() {
    criterion(7, "alignment oracle", || {
        let vocabulary = ["a", "b", "c", "d", "e", "f"];
        let mut rng = ChaCha20Rng::seed_from_u64(2024);
        for case in 0..200 {
            let hyp_len = rng.gen_range(0..=12);
            let hyp: Vec<&str> = (0..hyp_len)
                .map(|_| vocabulary[rng.gen_range(0..vocabulary.len())])
                .collect();
            let n_ref = rng.gen_range(1..=3);
            let refs: Vec<Vec<&str>> = (0..n_ref)
                .map(|_| {
                    (0..rng.gen_range(1..=6))
                        .map(|_| vocabulary[rng.gen_range(0..vocabulary.len())])
                        .collect()
                })
                .collect();
            let fast = align_to_reference(&hyp, &refs).unwrap();
            let slow = align_brute_force(&hyp, &refs).unwrap();
            assert_eq!(fast, slow, "case {case}: hyp={hyp:?} refs={refs:?}");
        }
    });
}

// ---------------------------------------------------------------- 8

fn run_ok(cmd: &mut Command) {
    let output = cmd.output().unwrap();
    assert!(
        output.status.success(),
        "command failed: {}\n{}",
        output.status,
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn acceptance_8_determinism() {
    criterion(8, "determinism", || {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        for (id, seed) in [("a", 31u64), ("b", 32), ("c", 33)] {
            run_ok(segvox().args([
                "synth",
                "--out",
                data.to_str().unwrap(),
                "--id",
                id,
                "--seed",
                &seed.to_string(),
                "--n-utterances",
                "4",
            ]));
        }
        let examples = dir.path().join("examples");
        run_ok(segvox().args([
            "extract",
            "--manifest",
            data.join("a.jsonl").to_str().unwrap(),
            "--audio-dir",
            data.to_str().unwrap(),
            "--out",
            examples.to_str().unwrap(),
        ]));

        // identical seeds -> byte-identical checkpoints
        let ckpt1 = dir.path().join("m1.ckpt");
        let ckpt2 = dir.path().join("m2.ckpt");
        for ckpt in [&ckpt1, &ckpt2] {
            run_ok(segvox().args([
                "train",
                "--examples",
                examples.to_str().unwrap(),
                "--checkpoint-out",
                ckpt.to_str().unwrap(),
                "--desk-scale",
                "--epochs",
                "2",
                "--seed",
                "7",
            ]));
        }
        let bytes1 = std::fs::read(&ckpt1).unwrap();
        let bytes2 = std::fs::read(&ckpt2).unwrap();
        assert_eq!(bytes1, bytes2, "checkpoints differ between identical runs");

        // --jobs 1 vs --jobs 4 produce identical segment output
        let seg = |jobs: &str, out: &Path| {
            run_ok(
                segvox()
                    .args([
                        "segment",
                        "--mode",
                        "model",
                        "--checkpoint",
                        ckpt1.to_str().unwrap(),
                        "--jobs",
                        jobs,
                        "--out",
                        out.to_str().unwrap(),
                    ])
                    .arg(data.join("a.wav"))
                    .arg(data.join("b.wav"))
                    .arg(data.join("c.wav")),
            );
        };
        let out1 = dir.path().join("jobs1.jsonl");
        let out4 = dir.path().join("jobs4.jsonl");
        seg("1", &out1);
        seg("4", &out4);
        assert_eq!(
            std::fs::read(&out1).unwrap(),
            std::fs::read(&out4).unwrap(),
            "segment output depends on --jobs"
        );
    });
}

// ---------------------------------------------------------------- 9

#[test]
fn acceptance_9_feature_formulas() {
    criterion(9, "feature formulas", || {
        // mel(700) = 1127 ln 2
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);

        // frame-count formula over a randomized (duration, config) grid
        let mut rng = ChaCha20Rng::seed_from_u64(88);
        for _ in 0..100 {
            let sample_rate = *[8_000u32, 16_000, 44_100].iter().nth(rng.gen_range(0..3)).unwrap();
            let fcfg = FeatureConfig {
                frame_length_ms: rng.gen_range(20.0..40.0f64).round(),
                frame_shift_ms: rng.gen_range(5.0..15.0f64).round(),
                num_mel_bins: 23,
                ..FeatureConfig::default()
            };
            let samples = rng.gen_range(0..sample_rate as usize * 2);
            let flen = fcfg.frame_length_samples(sample_rate);
            let fshift = fcfg.frame_shift_samples(sample_rate);
            let expected = if samples < flen {
                None
            } else {
                Some(1 + (samples - flen) / fshift)
            };
            assert_eq!(frame_count(samples, &fcfg, sample_rate), expected);
            if let Some(n) = expected {
                let wave = Waveform {
                    samples: vec![0.0; samples],
                    sample_rate,
                };
                let feats = compute_fbank(&wave, &fcfg).unwrap();
                assert_eq!(feats.num_frames(), n);
            }
        }

        // silence -> every value exactly at the log floor
        let fcfg = FeatureConfig::default();
        let wave = Waveform {
            samples: vec![0.0; 16_000],
            sample_rate: 16_000,
        };
        let feats = compute_fbank(&wave, &fcfg).unwrap();
        let floor = fcfg.log_floor.ln();
        assert!(feats.data.iter().all(|&v| v == floor));
    });
}
