//! Property tests against independent oracles.

use fastyolo::detector::{iou, kmeans_anchors_traced, nms, wh_iou, DetectionBox};
use fastyolo::evolve::{encode_genome, prune_dead_units, synthesize_offspring, EnvironmentalFactor};
use fastyolo::motion::{decide, motion_map, stack_frames, Frame, GatingPolicy};
use fastyolo::netdef::{bundled, WeightStore};
use fastyolo::pipeline::{detect_all, run, Detector, Mode};
use fastyolo::synth::{random_scene, render};
use fastyolo::tensor::{conv2d, Tensor};
use fastyolo::detector::{format_detections, AnchorPrior};
use proptest::prelude::*;

fn arb_box() -> impl Strategy<Value = DetectionBox> {
    (0.0f32..1.0, 0.0f32..1.0, 0.01f32..0.6, 0.01f32..0.6, 0.0f32..1.0, 0usize..3, 0.0f32..1.0).prop_map(
        |(cx, cy, w, h, objectness, class_id, class_score)| DetectionBox {
            cx,
            cy,
            w,
            h,
            objectness,
            class_id,
            class_score,
        },
    )
}

/// Greedy suppression written straight from its definition, quadratically.
fn nms_oracle(boxes: &[DetectionBox], thr: f32) -> Vec<DetectionBox> {
    let mut alive: Vec<bool> = vec![true; boxes.len()];
    let mut out = Vec::new();
    loop {
        // highest remaining score; earliest index on ties
        let mut best: Option<usize> = None;
        for (i, b) in boxes.iter().enumerate() {
            if alive[i] && best.is_none_or(|j| b.score() > boxes[j].score()) {
                best = Some(i);
            }
        }
        let Some(i) = best else { return out };
        alive[i] = false;
        out.push(boxes[i]);
        for (j, b) in boxes.iter().enumerate() {
            if alive[j] && b.class_id == boxes[i].class_id && iou(&boxes[i], b) > thr {
                alive[j] = false;
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn iou_is_symmetric_bounded_and_reflexive(a in arb_box(), b in arb_box()) {
        let ab = iou(&a, &b);
        prop_assert_eq!(ab, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn iou_is_translation_invariant(a in arb_box(), b in arb_box(), dx in -0.25f32..0.25, dy in -0.25f32..0.25) {
        let shift = |mut x: DetectionBox| { x.cx += dx; x.cy += dy; x };
        prop_assert!((iou(&a, &b) - iou(&shift(a), &shift(b))).abs() < 1e-5);
    }

    #[test]
    fn nms_matches_oracle_and_leaves_no_overlapping_pair(
        boxes in prop::collection::vec(arb_box(), 0..12),
        thr in 0.1f32..0.9,
    ) {
        let kept = nms(&boxes, thr);
        prop_assert_eq!(&kept, &nms_oracle(&boxes, thr));
        for k in &kept {
            prop_assert!(boxes.contains(k));
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.class_id != b.class_id || iou(a, b) <= thr);
            }
        }
        prop_assert!(kept.windows(2).all(|w| w[0].score() >= w[1].score()));
    }

    #[test]
    fn kmeans_cost_never_increases(
        boxes in prop::collection::vec((0.1f32..5.0, 0.1f32..5.0), 3..60),
        k in 1usize..4,
        seed in 0u64..1000,
    ) {
        prop_assume!(boxes.len() >= k);
        let out = kmeans_anchors_traced(&boxes, k, seed).unwrap();
        prop_assert!(out.cost_history.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{:?}", out.cost_history);
        prop_assert!(out.iterations <= 100);
        prop_assert!(out.anchors.windows(2).all(|w| w[0].w * w[0].h <= w[1].w * w[1].h));
        let cost: f64 = boxes
            .iter()
            .map(|&b| out.anchors.iter().map(|a| 1.0 - wh_iou(b, (a.w, a.h)) as f64).fold(f64::INFINITY, f64::min))
            .sum();
        prop_assert!(cost <= out.cost_history[0] + 1e-6);
    }

    #[test]
    fn motion_map_agrees_with_conv2d(
        seed in 0u64..500,
        c in prop::sample::select(vec![1usize, 3]),
    ) {
        let frame = |salt: u64| {
            Frame::new(0, Tensor::from_fn(vec![c, 5, 6], |i| (((i as u64 * 2654435761 + seed * 97 + salt) % 1000) as f32) / 999.0)).unwrap()
        };
        let (cur, rf) = (frame(1), frame(2));
        let policy = GatingPolicy::new(c);
        let stack = stack_frames(&cur, &rf).unwrap();
        let map = motion_map(&stack, &policy).unwrap();
        let direct = conv2d(&stack, &policy.gate.kernel, &[policy.gate.bias], 1, 0).unwrap();
        for (m, d) in map.values().data().iter().zip(direct.data()) {
            prop_assert!((m - d.abs().clamp(0.0, 1.0)).abs() < 1e-6);
        }
        let same = motion_map(&stack_frames(&cur, &cur).unwrap(), &policy).unwrap();
        prop_assert!(same.values().data().iter().all(|&v| v == 0.0));
        prop_assert!(!decide(&same, &policy, 1));
    }

    #[test]
    fn offspring_are_closed_under_dead_unit_removal(seed in 0u64..200, gamma in 0.05f32..1.0) {
        let net = bundled::tiny_detector();
        let weights = WeightStore::init(&net, seed);
        let genome = encode_genome(&net, &weights).unwrap();
        let mut offspring = synthesize_offspring(&genome, &EnvironmentalFactor::Uniform(gamma), seed).unwrap();
        // a second closure pass finds nothing left to remove
        prop_assert_eq!(prune_dead_units(&genome, &mut offspring.masks), 0);
        // masked synapses get probability zero in the next genome
        let mut child = weights.clone();
        for (i, m) in offspring.masks.iter().enumerate() {
            if let Some(m) = m {
                child.layer_mut(i).unwrap().set_mask(m.clone()).unwrap();
            }
        }
        if let Ok(next) = encode_genome(&net, &child) {
            for (layer, mask) in next.layers.iter().zip(&offspring.masks) {
                if let (Some(layer), Some(mask)) = (layer, mask) {
                    for (&p, &keep) in layer.probs.iter().zip(mask) {
                        prop_assert!(keep || p == 0.0);
                    }
                }
            }
        }
    }
}

fn untrained_detector() -> Detector {
    let net = bundled::tiny_detector();
    let weights = WeightStore::init(&net, 11);
    Detector::new(net, weights, vec![AnchorPrior::new(1.2, 1.0), AnchorPrior::new(2.0, 2.4)], 0.2, 0.45).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn always_mode_equals_the_standalone_detector(seed in 0u64..10_000, frames in 3usize..10, moving_pct in 0usize..=100) {
        let detector = untrained_detector();
        let moving = frames * moving_pct / 100;
        let video = render(&random_scene(seed, 96, 96, frames, moving)).unwrap();
        let mut gated = String::new();
        let report = run(video.frames.iter().cloned().map(Ok), &detector, &GatingPolicy::new(3), Mode::Always, |i, b| {
            gated.push_str(&format_detections(i, b));
            Ok(())
        }).unwrap();
        let mut plain = String::new();
        detect_all(video.frames.iter().cloned().map(Ok), &detector, |i, b| {
            plain.push_str(&format_detections(i, b));
            Ok(())
        }).unwrap();
        prop_assert_eq!(gated, plain);
        prop_assert_eq!(report.inferences, frames);
    }

    #[test]
    fn gated_counters_are_consistent_and_monotone_in_tau(seed in 0u64..10_000, frames in 4usize..14, moving_pct in 0usize..=100) {
        let detector = untrained_detector();
        let video = render(&random_scene(seed, 96, 96, frames, frames * moving_pct / 100)).unwrap();
        let mut last = usize::MAX;
        for tau in [0.0f32, 0.001, 0.01, 0.05, 0.2] {
            let policy = GatingPolicy::new(3).with_thresholds(0.1, tau);
            let report = run(video.frames.iter().cloned().map(Ok), &detector, &policy, Mode::Gated, |_, _| Ok(())).unwrap();
            prop_assert_eq!(report.decisions.len(), frames);
            prop_assert_eq!(report.decisions[0], 1);
            prop_assert_eq!(report.inferences, report.decisions.iter().filter(|&&d| d == 1).count());
            prop_assert!((report.inference_frequency - 100.0 * report.inferences as f64 / frames as f64).abs() < 1e-9);
            prop_assert!(report.inferences <= last);
            last = report.inferences;
        }
    }

    #[test]
    fn skipped_frames_reuse_the_reference_map(seed in 0u64..10_000) {
        use fastyolo::pipeline::PipelineState;
        let detector = untrained_detector();
        let video = render(&random_scene(seed, 96, 96, 8, 4)).unwrap();
        let policy = GatingPolicy::new(3);
        let mut state = PipelineState::new();
        let mut reference_boxes = String::new();
        for f in &video.frames {
            let out = state.process_frame(f, &policy, &detector).unwrap();
            let text = format_detections(0, &out.detections);
            if out.did_infer {
                reference_boxes = text;
                prop_assert_eq!(state.reference_frame().unwrap(), f);
            } else {
                prop_assert_eq!(&text, &reference_boxes);
                let direct = detector.detect_map(state.reference_map().unwrap()).unwrap();
                prop_assert_eq!(format_detections(0, &direct), text);
            }
        }
    }
}
