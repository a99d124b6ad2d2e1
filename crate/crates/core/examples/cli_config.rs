//! Driving the command-line subcommands in-process from a key=value config.

use fastyolo::cli::{dispatch, Command};
use fastyolo::config::RunConfig;

pub fn main() -> fastyolo::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| fastyolo::Error::io("tempdir", e))?;
    let frames = dir.path().join("frames");

    let mut cfg = RunConfig::parse("synth.frames=20\nsynth.moving=0.5\nsynth.blocks=2\nseed=3\n")?;
    cfg.set("output", frames.display().to_string())?;
    print!("synth: {}", dispatch(Command::Synth, &cfg)?);

    let mut anchors = RunConfig::new();
    anchors.set("input", frames.join("truth.txt").display().to_string())?;
    print!("anchors: {}", dispatch(Command::Anchors, &anchors)?);

    let mut profile = RunConfig::new();
    profile.set("network", "bundled:vgg16")?;
    profile.set("resolution", "224")?;
    let text = dispatch(Command::Profile, &profile)?;
    print!("profile tail:\n{}", text.lines().rev().take(2).collect::<Vec<_>>().into_iter().rev().map(|l| format!("{l}\n")).collect::<String>());

    match RunConfig::parse("thresh.object=0.5") {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => unreachable!("unknown keys are errors"),
    }
    Ok(())
}
