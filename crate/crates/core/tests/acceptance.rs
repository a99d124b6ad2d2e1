//! Acceptance runner: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Criteria 7 and 11 train the tiny detector, so a full run
//! takes several minutes on one core.

mod common;

use std::time::Instant;

use fastyolo::detector::{format_detections, iou, kmeans_anchors, nms, DetectionBox};
use fastyolo::evolve::{evolve_generations, synthesize_offspring, EnvironmentalFactor, GenomeLayer, SynapticGenome, Task};
use fastyolo::motion::{Frame, GatingPolicy};
use fastyolo::netdef::{bundled, count_flops, count_params, WeightStore};
use fastyolo::nn::{Loss, TrainConfig};
use fastyolo::pipeline::{detect_all, run, Detector, Mode, RunReport};
use fastyolo::synth::{alternating_schedule, random_scene, render, scene, SceneParams};
use fastyolo::tiny::{self, TinyModel, TinyTrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// 200 frames, 124 of them moving, in four moving/frozen blocks.
fn mixed_sequence() -> Vec<Frame> {
    let spec = scene(&SceneParams {
        width: 96,
        height: 96,
        channels: 3,
        frames: 200,
        objects: 2,
        speed: 2,
        noise: 0.0,
        schedule: alternating_schedule(200, 124, 4),
        seed: 21,
    });
    render(&spec).expect("valid scene").frames
}

fn run_mode(frames: &[Frame], detector: &Detector, mode: Mode) -> RunReport {
    run(frames.iter().cloned().map(Ok), detector, &GatingPolicy::new(3), mode, |_, _| Ok(())).expect("pipeline run")
}

fn c1_gating_frequency(detector: &Detector) -> Outcome {
    let report = run_mode(&mixed_sequence(), detector, Mode::Gated);
    let f = report.inference_frequency;
    outcome(
        (f - 61.87).abs() <= 5.0,
        format!("inference frequency {f:.2}% over {} frames (target 61.87 ± 5)", report.frames),
    )
}

fn c2_static_scene(detector: &Detector) -> Outcome {
    let first = mixed_sequence().remove(0);
    let frames: Vec<Frame> = (1..=50).map(|i| Frame::new(i, first.pixels().clone()).unwrap()).collect();
    let report = run_mode(&frames, detector, Mode::Gated);
    outcome(
        report.inferences == 1 && (report.inference_frequency - 2.0).abs() < 1e-9,
        format!("{} inference(s), {:.2}% (target exactly 1, 2%)", report.inferences, report.inference_frequency),
    )
}

fn c3_equivalence(detector: &Detector) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let configs = 12;
    let mut identical = 0;
    for _ in 0..configs {
        let frames = rng.random_range(8..=24);
        let moving = rng.random_range(0..=frames);
        let video = render(&random_scene(rng.random(), 96, 96, frames, moving)).unwrap();
        let mut always = String::new();
        run(video.frames.iter().cloned().map(Ok), detector, &GatingPolicy::new(3), Mode::Always, |i, b| {
            always.push_str(&format_detections(i, b));
            Ok(())
        })
        .unwrap();
        let mut plain = String::new();
        detect_all(video.frames.iter().cloned().map(Ok), detector, |i, b| {
            plain.push_str(&format_detections(i, b));
            Ok(())
        })
        .unwrap();
        identical += usize::from(always.as_bytes() == plain.as_bytes());
    }
    outcome(identical == configs, format!("{identical}/{configs} random sequences byte-identical"))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn c4_throughput(detector: &Detector) -> Outcome {
    let frames = mixed_sequence();
    // warm-up, then interleave the two modes so drift hits both alike
    run_mode(&frames, detector, Mode::Always);
    let (mut gated, mut always) = (Vec::new(), Vec::new());
    for _ in 0..5 {
        always.push(run_mode(&frames, detector, Mode::Always).frames_per_second);
        gated.push(run_mode(&frames, detector, Mode::Gated).frames_per_second);
    }
    let (g, a) = (median(gated), median(always));
    outcome(
        g >= 1.3 * a,
        format!("gated {g:.1} fps vs ungated {a:.1} fps, ratio {:.2} (target ≥ 1.3)", g / a),
    )
}

fn c5_params() -> Outcome {
    let p = count_params(&bundled::yolov2_voc(), None);
    let rel = (p as f64 - 48.2e6) / 48.2e6;
    outcome(rel.abs() <= 0.02, format!("YOLOv2-VOC {p} params ({:+.2}% vs 48.2M, tolerance ±2%)", 100.0 * rel))
}

fn c6_flops() -> Outcome {
    let f = count_flops(&bundled::vgg16(), [3, 224, 224]).unwrap();
    let rel = (f as f64 - 30.69e9) / 30.69e9;
    outcome(
        rel.abs() <= 0.02,
        format!("VGG-16 at 224: {:.3}e9 FLOPs ({:+.2}% vs 30.69e9, tolerance ±2%)", f as f64 / 1e9, 100.0 * rel),
    )
}

fn c7_evolution(model: &TinyModel, cfg: &TinyTrainConfig) -> Outcome {
    let (train, held_out) = tiny::datasets(cfg);
    let d = &model.detector;
    let net = d.net().clone();
    let pairs = tiny::training_pairs(&train, &net, d.anchors()).unwrap();
    let metric = |w: &WeightStore| {
        let candidate = Detector::new(net.clone(), w.clone(), d.anchors().to_vec(), d.obj_threshold, d.nms_threshold)?;
        tiny::evaluate(&candidate, &held_out)
    };
    let task = Task {
        train: &pairs,
        metric: &metric,
    };
    let retrain = TrainConfig {
        learning_rate: 0.001,
        epochs: 40,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        loss: Loss::DetectorComposite,
        momentum: cfg.momentum,
    };
    let lineage = match evolve_generations(&net, d.weights(), &task, 1, &EnvironmentalFactor::Uniform(1.0), &retrain, 11, |_| {}) {
        Ok(l) => l,
        Err(e) => return outcome(false, format!("evolution failed: {e}")),
    };
    if let Some(reason) = &lineage.aborted {
        return outcome(false, format!("lineage aborted: {reason}"));
    }
    let (first, last) = (&lineage.generations[0], lineage.last());
    let ratio = first.params as f64 / last.params as f64;
    let drop = 100.0 * (first.metric - last.metric);
    let expected = first.params as f64 / last.expected_params.unwrap();
    outcome(
        ratio >= 2.8 && drop <= 5.0,
        format!(
            "{} -> {} params ({ratio:.2}x, expected {expected:.2}x, target ≥ 2.8x); IOU {:.4} -> {:.4} (drop {drop:.2}pp, target ≤ 5)",
            first.params, last.params, first.metric, last.metric
        ),
    )
}

fn c8_sampling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let probs: Vec<f32> = (0..10_000).map(|_| rng.random::<f32>()).collect();
    let genome = SynapticGenome {
        ancestor: "synthetic".into(),
        layers: vec![Some(GenomeLayer {
            shape: [100, 100, 1, 1],
            probs: probs.clone(),
        })],
    };
    let gamma = 0.7f32;
    let mean: f64 = probs.iter().map(|&p| (gamma * p) as f64).sum();
    let sigma = probs.iter().map(|&p| (gamma * p) as f64 * (1.0 - (gamma * p) as f64)).sum::<f64>().sqrt();
    let passing = (0..20u64)
        .filter(|&seed| {
            let o = synthesize_offspring(&genome, &EnvironmentalFactor::Uniform(gamma), seed).unwrap();
            (o.retained() as f64 - mean).abs() <= 3.0 * sigma
        })
        .count();
    outcome(
        passing >= 19,
        format!("{passing}/20 seeds within 3σ (Σγp = {mean:.1}, σ = {sigma:.1}; target ≥ 19)"),
    )
}

fn random_box(rng: &mut ChaCha8Rng) -> DetectionBox {
    DetectionBox {
        cx: rng.random_range(0.0..1.0),
        cy: rng.random_range(0.0..1.0),
        w: rng.random_range(0.02..0.6),
        h: rng.random_range(0.02..0.6),
        // a coarse score grid makes ties common
        objectness: (rng.random_range(0..8) as f32) / 8.0 + 0.0625,
        class_id: rng.random_range(0..2),
        class_score: 1.0,
    }
}

/// The suppression definition, quadratically: repeatedly take the best
/// remaining box (earliest on ties) and discard its same-class overlaps.
fn nms_oracle(boxes: &[DetectionBox], thr: f32) -> Vec<DetectionBox> {
    let mut alive = vec![true; boxes.len()];
    let mut out = Vec::new();
    while let Some(i) = (0..boxes.len())
        .filter(|&i| alive[i])
        .fold(None, |best: Option<usize>, i| match best {
            Some(j) if boxes[j].score() >= boxes[i].score() => Some(j),
            _ => Some(i),
        })
    {
        alive[i] = false;
        out.push(boxes[i]);
        for j in 0..boxes.len() {
            if alive[j] && boxes[j].class_id == boxes[i].class_id && iou(&boxes[i], &boxes[j]) > thr {
                alive[j] = false;
            }
        }
    }
    out
}

fn area_iou(a: &DetectionBox, b: &DetectionBox) -> f64 {
    let edges = |x: &DetectionBox| {
        let (cx, cy, w, h) = (x.cx as f64, x.cy as f64, x.w as f64, x.h as f64);
        (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    };
    let (ax0, ay0, ax1, ay1) = edges(a);
    let (bx0, by0, bx1, by1) = edges(b);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    inter / ((ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter)
}

fn c9_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let nms_ok = (0..500)
        .filter(|_| {
            let n = rng.random_range(0..=12);
            let boxes: Vec<DetectionBox> = (0..n).map(|_| random_box(&mut rng)).collect();
            let thr = rng.random_range(0.1..0.8);
            nms(&boxes, thr) == nms_oracle(&boxes, thr)
        })
        .count();
    let mut worst_iou = 0.0f64;
    for _ in 0..500 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        worst_iou = worst_iou.max((iou(&a, &b) as f64 - area_iou(&a, &b)).abs());
    }
    let planted = [(1.0f32, 1.2f32), (3.5, 2.5)];
    let boxes: Vec<(f32, f32)> = (0..200)
        .map(|n| {
            let (w, h) = planted[n % 2];
            (w * rng.random_range(0.97..1.03), h * rng.random_range(0.97..1.03))
        })
        .collect();
    let anchors = kmeans_anchors(&boxes, 2, 9).unwrap();
    let worst_k = anchors
        .iter()
        .zip(planted)
        .map(|(a, (w, h))| ((a.w - w).abs() / w).max((a.h - h).abs() / h))
        .fold(0.0f32, f32::max);
    outcome(
        nms_ok == 500 && worst_iou <= 1e-6 && worst_k <= 0.05,
        format!(
            "nms {nms_ok}/500 match; iou max |err| {worst_iou:.2e} (≤ 1e-6); k-means worst relative error {:.2}% (≤ 5%)",
            100.0 * worst_k
        ),
    )
}

fn c10_gradients() -> Outcome {
    let (mut worst, mut layers, mut entries, mut skipped) = (0.0f32, 0, 0, 0);
    for seed in 0..4 {
        for case in common::grad_cases(seed) {
            for c in common::check_gradients(&case) {
                worst = worst.max(c.error);
                layers += 1;
                entries += c.entries;
                skipped += c.skipped;
            }
        }
    }
    outcome(
        worst < 1e-2,
        format!(
            "{layers} layer checks over {entries} parameters ({skipped} straddling a switch skipped), max relative error {worst:.2e} (step {}, target < 1e-2)",
            common::FD_STEP
        ),
    )
}

fn c11_quality(model: &TinyModel) -> Outcome {
    outcome(
        model.held_out_iou >= 0.5,
        format!("held-out mean best IOU {:.4} after training on 500 frames (target ≥ 0.5)", model.held_out_iou),
    )
}

fn main() {
    let start = Instant::now();
    let cfg = TinyTrainConfig::default();
    eprintln!("training the tiny detector ({} epochs on {} frames)...", cfg.epochs, cfg.train_frames);
    let model = tiny::train_tiny(&cfg).expect("tiny detector trains");
    let detector = &model.detector;

    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("gating frequency", Box::new(|| c1_gating_frequency(detector))),
        ("static-scene limit", Box::new(|| c2_static_scene(detector))),
        ("always-mode equivalence", Box::new(|| c3_equivalence(detector))),
        ("gated throughput", Box::new(|| c4_throughput(detector))),
        ("YOLOv2-VOC parameter count", Box::new(c5_params)),
        ("VGG-16 FLOP count", Box::new(c6_flops)),
        ("evolution parameter reduction", Box::new(|| c7_evolution(&model, &cfg))),
        ("offspring sampling statistics", Box::new(c8_sampling)),
        ("brute-force oracles", Box::new(c9_oracles)),
        ("finite-difference gradients", Box::new(c10_gradients)),
        ("tiny-detector quality floor", Box::new(|| c11_quality(&model))),
    ];
    let mut failed = 0;
    for (n, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = check();
        failed += usize::from(!o.pass);
        println!(
            "{} criterion {:>2} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            n + 1,
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {} criteria passed in {:.0}s", criteria.len() - failed, criteria.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
