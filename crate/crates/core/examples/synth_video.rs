//! Rendering a synthetic sequence to PPM frames plus a truth file, then
//! reading it back.

use fastyolo::detector::{group_by_frame, parse_detections};
use fastyolo::ppm;
use fastyolo::synth::{alternating_schedule, render, scene, SceneParams, TRUTH_FILE};

pub fn main() -> fastyolo::Result<()> {
    let spec = scene(&SceneParams {
        width: 96,
        height: 96,
        channels: 3,
        frames: 50,
        objects: 2,
        speed: 2,
        noise: 0.0,
        schedule: alternating_schedule(50, 31, 2),
        seed: 4,
    });
    let video = render(&spec)?;
    let dir = tempfile::tempdir().map_err(|e| fastyolo::Error::io("tempdir", e))?;
    video.write(dir.path())?;

    let frames: Vec<_> = ppm::read_frames(dir.path())?.collect::<fastyolo::Result<_>>()?;
    let changed = frames.windows(2).filter(|w| w[0].pixels() != w[1].pixels()).count();
    println!("{} frames, moving fraction {:.0}%", frames.len(), 100.0 * spec.moving_fraction());
    println!("{changed} of {} consecutive pairs differ", frames.len() - 1);

    let truth_text = std::fs::read_to_string(dir.path().join(TRUTH_FILE)).map_err(|e| fastyolo::Error::io(TRUTH_FILE, e))?;
    let truth = group_by_frame(&parse_detections(&truth_text)?, 1, frames.len());
    println!("frame 1 truth: {:?}", truth[0].iter().map(|b| (b.cx, b.cy)).collect::<Vec<_>>());
    assert_eq!(frames[0], video.frames[0]);
    Ok(())
}
