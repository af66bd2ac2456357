//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use arrn_core::fusion::{argmax, evaluate, fuse};
use arrn_core::skeleton::{
    compute_lines, generate_synthetic, normalize_frame, save_dataset, SynthOptions,
};
use arrn_core::spatial::{rrn_values, Affine, MessageMlpParams, NodeGruParams};
use arrn_core::temporal::classify;
use arrn_core::tensor::softmax;
use arrn_core::{
    DatasetSpec, Model, ModelConfig, OptimizerKind, SkeletonFrame, SkeletonSequence, StreamKind,
    StreamParams, Tape, Tensor, Trainer,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIN: &str = env!("CARGO_BIN_EXE_arrn");

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let out = Command::new(BIN)
        .args(["gradcheck", "--seed", "0", "--epsilon", "1e-5"])
        .env("RAYON_NUM_THREADS", "1")
        .output()
        .expect("run arrn gradcheck");
    let elapsed = start.elapsed();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let worst = stdout
        .lines()
        .filter_map(|l| l.trim().strip_prefix("max relative error "))
        .filter_map(|v| v.trim().parse::<f64>().ok())
        .fold(0.0, f64::max);
    let ok = out.status.success() && worst <= 1e-5 && elapsed < Duration::from_secs(60);
    outcome(
        ok,
        format!(
            "exit {:?}, max rel err {worst:.3e} (≤ 1e-5), {:.1?} on one thread (< 60 s)",
            out.status.code(),
            elapsed
        ),
    )
}

fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    let c = x.dims2().1;
    Tensor::new(
        vec![perm.len(), c],
        perm.iter().flat_map(|&p| x.row(p).to_vec()).collect(),
    )
    .unwrap()
}

fn rrn_equivariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let j = rng.random_range(2..9);
        let m = rng.random_range(1..9);
        let e = rng.random_range(1..5);
        let msg = MessageMlpParams::init(m, &mut rng);
        let gru = NodeGruParams::init(m, &mut rng);
        let v = Tensor::uniform(&[j, m], 2.0, &mut rng);
        let mut perm: Vec<usize> = (0..j).collect();
        perm.shuffle(&mut rng);
        let out = rrn_values(&v, e, &msg, &gru).unwrap();
        let permuted = rrn_values(&permute_rows(&v, &perm), e, &msg, &gru).unwrap();
        worst = worst.max(permuted.max_abs_diff(&permute_rows(&out, &perm)));
    }
    outcome(
        worst <= 1e-9,
        format!("100 instances, max abs deviation {worst:.3e} (≤ 1e-9)"),
    )
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn hand_unrolled_oracle() -> Outcome {
    let v = [0.3, -0.7];
    let message = MessageMlpParams {
        layers: [
            Affine {
                weight: t(&[2, 1], &[0.5, -0.4]),
                bias: t(&[1], &[0.1]),
            },
            Affine {
                weight: t(&[1, 1], &[0.8]),
                bias: t(&[1], &[-0.2]),
            },
            Affine {
                weight: t(&[1, 1], &[1.3]),
                bias: t(&[1], &[0.05]),
            },
        ],
    };
    let gru = NodeGruParams {
        input: t(&[2, 3], &[0.2, -0.3, 0.6, 0.7, 0.1, -0.5]),
        state_gates: t(&[1, 2], &[0.4, -0.6]),
        state_candidate: t(&[1, 1], &[0.9]),
        bias: t(&[3], &[0.05, -0.1, 0.2]),
    };
    // Golden values from an independent manual unrolling of one message
    // round and one GRU update per node.
    let golden = [0.32005266455723647, -0.5805159430201301];
    let out = rrn_values(&t(&[2, 1], &v), 1, &message, &gru).unwrap();
    let dev = out
        .data()
        .iter()
        .zip(golden)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    outcome(
        dev <= 1e-12,
        format!("J=2 M=1 E=1, max deviation {dev:.3e} (≤ 1e-12)"),
    )
}

fn dyadic(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(-65536i32..65536) as f64 / 1024.0
}

fn geometry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut antisym, mut transl) = (0, 0);
    let mut idem: f64 = 0.0;
    for _ in 0..1000 {
        let j = rng.random_range(2..26);
        let frame = SkeletonFrame::new(
            (0..j)
                .map(|_| [dyadic(&mut rng), dyadic(&mut rng), dyadic(&mut rng)])
                .collect(),
        );
        let offset = [dyadic(&mut rng), dyadic(&mut rng), dyadic(&mut rng)];
        let lines = compute_lines(&frame).unwrap();
        for a in 0..j {
            for b in (0..j).filter(|&b| b != a) {
                let (x, y) = (lines.block(a, b), lines.block(b, a));
                if x != [-y[0], -y[1], -y[2]] {
                    antisym += 1;
                }
            }
        }
        if compute_lines(&frame.translate(offset)).unwrap() != lines {
            transl += 1;
        }
        let real = SkeletonFrame::new(
            (0..j)
                .map(|_| {
                    [
                        rng.random_range(-5.0..5.0),
                        rng.random_range(-5.0..5.0),
                        rng.random_range(-5.0..5.0),
                    ]
                })
                .collect(),
        );
        let hips: Vec<usize> = (0..rng.random_range(1..=j.min(5)))
            .map(|_| rng.random_range(0..j))
            .collect();
        let spec = DatasetSpec {
            num_joints: j,
            num_classes: 1,
            hip_reference_indices: hips,
        };
        let once = normalize_frame(&real, &spec).unwrap();
        let twice = normalize_frame(&once, &spec).unwrap();
        for (a, b) in once
            .joints
            .iter()
            .flatten()
            .zip(twice.joints.iter().flatten())
        {
            idem = idem.max((a - b).abs());
        }
    }
    outcome(
        antisym == 0 && transl == 0 && idem <= 1e-12,
        format!("1000 frames: {antisym} antisymmetry and {transl} translation mismatches (exact), idempotence deviation {idem:.3e} (≤ 1e-12)"),
    )
}

fn prob_violation(y: &[f64]) -> f64 {
    let neg = y.iter().cloned().fold(0.0, f64::min).abs();
    neg.max((y.iter().sum::<f64>() - 1.0).abs())
}

fn random_probs(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let scale = rng.random_range(0.1..30.0);
    softmax(
        &(0..k)
            .map(|_| rng.random_range(-scale..scale))
            .collect::<Vec<_>>(),
    )
    .unwrap()
}

fn probability_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut sm, mut cl, mut fu): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut shared_fail = 0;
    for _ in 0..1000 {
        let k = rng.random_range(1..50);
        let scale = 10f64.powf(rng.random_range(-2.0..3.0));
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-scale..scale)).collect();
        sm = sm.max(prob_violation(&softmax(&logits).unwrap()));

        let (steps, width, classes) = (
            rng.random_range(1..6),
            rng.random_range(1..6),
            rng.random_range(2..10),
        );
        let head = Affine::init(steps * width, classes, &mut rng);
        let q = Tensor::uniform(&[steps, width], scale, &mut rng);
        let mut tape = Tape::new();
        let h = head.map("classifier", &mut |n, x| tape.param(n, x));
        let qv = tape.constant(q);
        let y = classify(&mut tape, qv, &h).unwrap();
        cl = cl.max(prob_violation(tape.value(y).data()));

        let kf = rng.random_range(2..20);
        let (yj, yl) = (random_probs(&mut rng, kf), random_probs(&mut rng, kf));
        let alpha = rng.random_range(0.0..=1.0);
        fu = fu.max(prob_violation(&fuse(&yj, &yl, alpha, 1.0 - alpha).unwrap()));
    }
    let mut pairs = 0;
    while pairs < 1000 {
        let k = rng.random_range(2..20);
        let (yj, yl) = (random_probs(&mut rng, k), random_probs(&mut rng, k));
        if argmax(&yj) != argmax(&yl) {
            continue;
        }
        pairs += 1;
        let alpha = rng.random_range(0.0..=1.0);
        if argmax(&fuse(&yj, &yl, alpha, 1.0 - alpha).unwrap()) != argmax(&yj) {
            shared_fail += 1;
        }
    }
    let ok = sm <= 1e-12 && cl <= 1e-12 && fu <= 1e-12 && shared_fail == 0;
    outcome(
        ok,
        format!("1000 inputs each: softmax {sm:.1e}, classify {cl:.1e}, fuse {fu:.1e} (≤ 1e-12); shared argmax lost {shared_fail}/1000"),
    )
}

fn synthetic(classes: usize, per_class: usize, seed: u64) -> Vec<SkeletonSequence> {
    generate_synthetic(&SynthOptions {
        classes,
        samples_per_class: per_class,
        joints: 5,
        min_frames: 6,
        max_frames: 12,
        seed,
        ..SynthOptions::default()
    })
    .unwrap()
}

fn overfit_config() -> ModelConfig {
    let config = ModelConfig::preset("synthetic").unwrap();
    assert_eq!(
        (
            config.joints,
            config.frames,
            config.embed_dim,
            config.rrn_iterations,
            config.lstm_layers
        ),
        (5, 8, 16, 3, 2)
    );
    assert_eq!(config.layer_widths, vec![32, 32]);
    assert_eq!(
        (config.optimizer, config.learning_rate, config.epochs),
        (OptimizerKind::Adam, 1e-3, 200)
    );
    config
}

fn overfit(kind: StreamKind) -> Outcome {
    let config = overfit_config();
    let data = synthetic(2, 20, 100);
    let start = Instant::now();
    let mut trainer = Trainer::new(&config, &[kind], &data, &data).unwrap();
    let mut reached = None;
    let mut last = 0.0;
    for _ in 0..config.epochs {
        let record = trainer.run_epoch().unwrap();
        last = record.stream(kind).unwrap().train_accuracy;
        if last == 1.0 {
            reached = Some(record.epoch);
            break;
        }
    }
    let elapsed = start.elapsed();
    let ok = reached.is_some() && elapsed < Duration::from_secs(300);
    let detail = match reached {
        Some(e) => format!(
            "{kind} stream: 100% training accuracy at epoch {e}/200 in {elapsed:.1?} (< 5 min)"
        ),
        None => format!(
            "{kind} stream: {:.1}% training accuracy after 200 epochs ({elapsed:.1?})",
            100.0 * last
        ),
    };
    outcome(ok, detail)
}

fn generalization() -> Outcome {
    let config = ModelConfig {
        classes: 3,
        ..overfit_config()
    };
    let train = synthetic(3, 20, 200);
    let test = synthetic(3, 10, 300);
    let mut trainer = Trainer::new(&config, &StreamKind::BOTH, &train, &train).unwrap();
    for _ in 0..config.epochs {
        trainer.run_epoch().unwrap();
    }
    let epochs = trainer.epochs_done();
    let (model, report) = trainer.finish().unwrap();
    let w = report.fusion.clone().unwrap();
    let eval = evaluate(&model, &test, w.alpha, w.beta).unwrap();
    let fused = eval.fused_accuracy.unwrap();
    let kept: Vec<String> = report
        .selected
        .iter()
        .map(|s| format!("{} epoch {}", s.stream, s.epoch))
        .collect();
    outcome(
        fused >= 0.95,
        format!(
            "K=3, 60 train / 30 test, {epochs} epochs (kept {}): joint {:.3}, line {:.3}, fused {fused:.3} (≥ 0.95) at alpha {} beta {}",
            kept.join(", "),
            eval.joint_accuracy.unwrap(),
            eval.line_accuracy.unwrap(),
            w.alpha,
            w.beta
        ),
    )
}

fn run_train(dir: &Path, out: &str) -> (bool, Vec<u8>, Vec<u8>) {
    let status = Command::new(BIN)
        .current_dir(dir)
        .args([
            "train",
            "--config",
            "preset:synthetic",
            "--train",
            "train.jsonl",
            "--val",
            "val.jsonl",
            "--out",
            out,
            "--seed",
            "17",
            "--epochs",
            "4",
            "--quiet",
        ])
        .output()
        .expect("run arrn train")
        .status;
    let read = |f: &str| std::fs::read(dir.join(out).join(f)).unwrap_or_default();
    (status.success(), read("report.json"), read("model.json"))
}

fn determinism(dir: &Path) -> Outcome {
    save_dataset(dir.join("train.jsonl"), &synthetic(2, 6, 1)).unwrap();
    save_dataset(dir.join("val.jsonl"), &synthetic(2, 3, 2)).unwrap();
    let (ok_a, report_a, model_a) = run_train(dir, "run_a");
    let (ok_b, report_b, model_b) = run_train(dir, "run_b");
    let same = ok_a && ok_b && !report_a.is_empty() && report_a == report_b && model_a == model_b;
    outcome(
        same,
        format!(
            "two seeded runs: report.json {} ({} bytes), model.json {}",
            if report_a == report_b {
                "identical"
            } else {
                "differs"
            },
            report_a.len(),
            if model_a == model_b {
                "identical"
            } else {
                "differs"
            }
        ),
    )
}

fn serialization(dir: &Path) -> Outcome {
    let mut checked = 0;
    let mut mismatches = 0;
    let mut sources: Vec<_> = ["run_a/model.json"]
        .iter()
        .map(|p| dir.join(p))
        .filter(|p| p.exists())
        .collect();
    let fresh = dir.join("fresh.json");
    Model::new(ModelConfig::tiny(), &StreamKind::BOTH)
        .unwrap()
        .save(&fresh)
        .unwrap();
    sources.push(fresh);
    for (i, src) in sources.iter().enumerate() {
        let first = std::fs::read(src).unwrap();
        let model = Model::load(src).unwrap();
        let again = dir.join(format!("resaved_{i}.json"));
        model.save(&again).unwrap();
        let second = std::fs::read(&again).unwrap();
        let third_path = dir.join(format!("resaved_{i}_b.json"));
        Model::load(&again).unwrap().save(&third_path).unwrap();
        checked += 1;
        if first != second || second != std::fs::read(&third_path).unwrap() {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0 && checked == 2,
        format!("save→load→save on {checked} model files, {mismatches} byte mismatches"),
    )
}

fn presets() -> Outcome {
    let expected = [
        ("ntu_rgbd", 100, 50, OptimizerKind::Sgd, vec![512, 512, 512]),
        (
            "florence3d",
            25,
            20,
            OptimizerKind::Adam,
            vec![512, 256, 512],
        ),
        (
            "msraction3d",
            20,
            20,
            OptimizerKind::Adam,
            vec![512, 256, 512],
        ),
    ];
    let mut problems = Vec::new();
    for (name, frames, m, opt, widths) in expected {
        let config = match ModelConfig::preset(name) {
            Ok(c) => c,
            Err(e) => {
                problems.push(format!("{name}: {e}"));
                continue;
            }
        };
        let fields_ok = config.frames == frames
            && config.embed_dim == m
            && config.rrn_iterations == 5
            && config.lstm_layers == 3
            && config.attention_dim == 256
            && config.optimizer == opt
            && config.layer_widths == widths
            && (opt != OptimizerKind::Sgd
                || (config.learning_rate == 0.01 && config.lr_decay_factor == 0.1));
        if !fields_ok {
            problems.push(format!("{name}: unexpected hyperparameters"));
        }
        let (j, k, a) = (config.joints, config.classes, config.attention_dim);
        for kind in StreamKind::BOTH {
            let params = StreamParams::seeded(&config, kind);
            let layout: std::collections::BTreeMap<_, _> = params.layout().into_iter().collect();
            let expect = [
                ("embed.weight", vec![kind.input_dim(j), m]),
                ("message.0.weight", vec![2 * m, m]),
                ("gru.input", vec![2 * m, 3 * m]),
                ("attention.mask", vec![j]),
                ("attention.reduce.weight", vec![j * m, a]),
                ("lstm.0.input", vec![a, 4 * widths[0]]),
                ("lstm.1.recurrent", vec![widths[1], 4 * widths[1]]),
                ("lstm.2.input", vec![widths[1], 4 * widths[2]]),
                ("classifier.weight", vec![frames * widths[2], k]),
            ];
            for (n, shape) in expect {
                if layout.get(n) != Some(&shape) {
                    problems.push(format!(
                        "{name}/{kind}: {n} is {:?}, expected {shape:?}",
                        layout.get(n)
                    ));
                }
            }
        }
    }
    let detail = if problems.is_empty() {
        "ntu_rgbd, florence3d, msraction3d validate; stream tensor shapes match".to_string()
    } else {
        problems.join("; ")
    };
    outcome(problems.is_empty(), detail)
}

fn main() {
    // Cargo passes harness flags such as --list; only a real run executes.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let dir = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome + '_>)> = vec![
        ("gradient fidelity", Box::new(gradient_fidelity)),
        ("RRN equivariance", Box::new(rrn_equivariance)),
        ("hand-unrolled RRN oracle", Box::new(hand_unrolled_oracle)),
        ("geometry invariants", Box::new(geometry)),
        ("probability contracts", Box::new(probability_contracts)),
        (
            "overfit joint stream",
            Box::new(|| overfit(StreamKind::Joint)),
        ),
        (
            "overfit line stream",
            Box::new(|| overfit(StreamKind::Line)),
        ),
        ("generalization and fusion", Box::new(generalization)),
        ("training determinism", Box::new(|| determinism(dir.path()))),
        (
            "serialization round trip",
            Box::new(|| serialization(dir.path())),
        ),
        ("dataset presets", Box::new(presets)),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let result = check();
        if !result.passed {
            failed += 1;
        }
        println!(
            "{} {name}: {}",
            if result.passed { "PASS" } else { "FAIL" },
            result.detail
        );
    }
    println!("acceptance: {failed} criterion(s) failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
