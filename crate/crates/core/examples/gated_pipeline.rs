//! Gated versus always-on inference over a synthetic sequence that is frozen
//! 38% of the time.

use fastyolo::detector::AnchorPrior;
use fastyolo::motion::GatingPolicy;
use fastyolo::netdef::{bundled, WeightStore};
use fastyolo::pipeline::{run, Detector, Mode};
use fastyolo::synth::{alternating_schedule, render, scene, SceneParams};

pub fn main() -> fastyolo::Result<()> {
    // weights only affect what is detected, not when inference runs
    let net = bundled::tiny_detector();
    let weights = WeightStore::init(&net, 3);
    let anchors = vec![AnchorPrior::new(1.4, 1.1), AnchorPrior::new(1.6, 1.8)];
    let detector = Detector::new(net, weights, anchors, 0.3, 0.45)?;

    let frames = 100;
    let spec = scene(&SceneParams {
        width: 96,
        height: 96,
        channels: 3,
        frames,
        objects: 2,
        speed: 2,
        noise: 0.0,
        schedule: alternating_schedule(frames, 62, 4),
        seed: 9,
    });
    let video = render(&spec)?;
    let policy = GatingPolicy::new(3);

    for mode in [Mode::Always, Mode::Gated] {
        let report = run(video.frames.iter().cloned().map(Ok), &detector, &policy, mode, |_, _| Ok(()))?;
        println!(
            "{mode:?}: {} inferences over {} frames ({:.1}%), {:.0} fps, infer {:.3}s gate {:.3}s",
            report.inferences,
            report.frames,
            report.inference_frequency,
            report.frames_per_second,
            report.wall_time["infer"],
            report.wall_time["gate"]
        );
    }
    let bits: String = run(video.frames.iter().cloned().map(Ok), &detector, &policy, Mode::Gated, |_, _| Ok(()))?
        .decisions
        .iter()
        .map(|&d| if d == 1 { '#' } else { '.' })
        .collect();
    println!("decisions: {bits}");
    Ok(())
}
