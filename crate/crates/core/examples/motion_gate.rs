//! The frame-difference gate on a pair of synthetic frames.

use fastyolo::motion::{decide, motion_map, stack_frames, GatingPolicy};
use fastyolo::synth::{render, Interval, Motion, SceneObject, SyntheticSceneSpec};

pub fn main() -> fastyolo::Result<()> {
    let spec = SyntheticSceneSpec {
        width: 96,
        height: 96,
        channels: 3,
        frames: 3,
        objects: vec![SceneObject {
            x: 20,
            y: 30,
            w: 16,
            h: 12,
            vx: 2,
            vy: 0,
            color: [220, 220, 60],
            class_id: 0,
        }],
        schedule: vec![Interval::new(1, 2, Motion::Moving), Interval::new(3, 3, Motion::Frozen)],
        noise: 0.0,
        background: [30, 30, 30],
        seed: 1,
    };
    let video = render(&spec)?;
    let policy = GatingPolicy::new(3);
    for (cur, reference) in [(1, 0), (2, 1)] {
        let stack = stack_frames(&video.frames[cur], &video.frames[reference])?;
        let map = motion_map(&stack, &policy)?;
        println!(
            "frame {} vs {}: {:.4} of pixels above p0={}, infer = {}",
            cur + 1,
            reference + 1,
            map.fraction_above(policy.pixel_threshold),
            policy.pixel_threshold,
            decide(&map, &policy, 1)
        );
    }
    // raising tau past the moving area suppresses the decision
    let strict = GatingPolicy::new(3).with_thresholds(0.1, 0.05);
    let map = motion_map(&stack_frames(&video.frames[1], &video.frames[0])?, &strict)?;
    println!("with tau=0.05: infer = {}", decide(&map, &strict, 1));
    Ok(())
}
