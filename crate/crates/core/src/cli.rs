//! Command-line front end. Every subcommand reads a [`RunConfig`] built from
//! `--config <path>` and any number of `--set key=value` overrides.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::detector::{format_detections, kmeans_anchors_traced, parse_detections, AnchorPrior};
use crate::error::{Error, Result};
use crate::evolve::{evolve_generations, EnvironmentalFactor, Task};
use crate::motion::{GateWeights, GatingPolicy};
use crate::netdef::{bundled, count_flops, count_params, load_network, profile_layers, save_network, NetworkDescriptor, WeightStore};
use crate::nn::TrainConfig;
use crate::pipeline::{detect_all, run, Detector, Mode};
use crate::ppm;
use crate::synth::{alternating_schedule, parse_schedule, render, scene, SceneParams};
use crate::tiny::{self, TinyTrainConfig};

#[derive(Debug, Parser)]
#[command(name = "fastyolo", about = "Motion-gated object detection on frame directories")]
pub struct Cli {
    /// key=value config file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// key=value override, applied after the config file
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Render a synthetic frame sequence with ground truth
    Synth,
    /// Train the bundled tiny detector on synthetic images
    TrainTiny,
    /// Run the detector on every frame
    Detect,
    /// Run the motion-gated pipeline
    Run,
    /// Count parameters and FLOPs of a network
    Profile,
    /// Cluster anchor priors from a truth file
    Anchors,
    /// Compress a trained detector over generations
    Evolve,
    /// List every config key with its default
    Keys,
}

pub fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::new(),
    };
    for pair in &cli.set {
        cfg.set_pair(pair)?;
    }
    Ok(cfg)
}

/// Parses `args` (program name first) and runs the subcommand, writing its
/// human-readable output to `out`.
pub fn run_cli<I, T>(args: I, out: &mut dyn std::io::Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            return out.write_all(e.to_string().as_bytes()).map_err(|e| Error::io("<stdout>", e));
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("bad arguments").trim_start_matches("error: ").to_string();
            return Err(Error::Config(first));
        }
    };
    let cfg = build_config(&cli)?;
    let text = dispatch(cli.command, &cfg)?;
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

/// Runs one subcommand and returns what it would print.
pub fn dispatch(command: Command, cfg: &RunConfig) -> Result<String> {
    match command {
        Command::Synth => cmd_synth(cfg),
        Command::TrainTiny => cmd_train_tiny(cfg),
        Command::Detect => cmd_detect(cfg),
        Command::Run => cmd_run(cfg),
        Command::Profile => cmd_profile(cfg),
        Command::Anchors => cmd_anchors(cfg),
        Command::Evolve => cmd_evolve(cfg),
        Command::Keys => Ok(crate::config::KEYS
            .iter()
            .map(|(k, d, help)| format!("{k:<20} {:<8} {help}\n", d.unwrap_or("-")))
            .collect()),
    }
}

/// `bundled:<name>` or a path to an FNET file.
pub fn load_network_ref(spec: &str) -> Result<(NetworkDescriptor, Option<WeightStore>)> {
    match spec.strip_prefix("bundled:") {
        Some(name) => bundled::by_name(name)
            .map(|n| (n, None))
            .ok_or_else(|| Error::Config(format!("no bundled network named {name:?}"))),
        None => load_network(spec),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn scene_params(cfg: &RunConfig) -> Result<SceneParams> {
    let frames: usize = cfg.parsed("synth.frames")?;
    let schedule = match cfg.get("synth.schedule").filter(|s| !s.is_empty()) {
        Some(s) => parse_schedule(s)?,
        None => {
            let fraction: f64 = cfg.parsed("synth.moving")?;
            if !(0.0..=1.0).contains(&fraction) {
                return Err(Error::Config(format!("synth.moving must lie in [0, 1], got {fraction}")));
            }
            let blocks: usize = cfg.parsed("synth.blocks")?;
            if blocks == 0 {
                return Err(Error::Config("synth.blocks must be positive".into()));
            }
            alternating_schedule(frames, (fraction * frames as f64).round() as usize, blocks)
        }
    };
    Ok(SceneParams {
        width: cfg.parsed("synth.width")?,
        height: cfg.parsed("synth.height")?,
        channels: cfg.parsed("synth.channels")?,
        frames,
        objects: cfg.parsed("synth.objects")?,
        speed: cfg.parsed("synth.speed")?,
        noise: cfg.parsed("synth.noise")?,
        schedule,
        seed: cfg.parsed("seed")?,
    })
}

fn cmd_synth(cfg: &RunConfig) -> Result<String> {
    let dir = PathBuf::from(cfg.require("output")?);
    let spec = scene(&scene_params(cfg)?);
    let video = render(&spec)?;
    video.write(&dir)?;
    let spec_path = dir.join("scene.json");
    write_file(&spec_path, &(serde_json::to_string_pretty(&spec)? + "\n"))?;
    Ok(format!(
        "wrote {} frames to {} (moving fraction {:.2}%)\n",
        spec.frames,
        dir.display(),
        100.0 * spec.moving_fraction()
    ))
}

fn tiny_config(cfg: &RunConfig) -> Result<TinyTrainConfig> {
    Ok(TinyTrainConfig {
        train_frames: cfg.parsed("train.frames")?,
        eval_frames: cfg.parsed("train.eval_frames")?,
        epochs: cfg.parsed("train.epochs")?,
        learning_rate: cfg.parsed("train.lr")?,
        batch_size: cfg.parsed("train.batch")?,
        momentum: cfg.parsed("train.momentum")?,
        seed: cfg.parsed("seed")?,
        obj_threshold: cfg.parsed("thresh.obj")?,
        nms_threshold: cfg.parsed("thresh.nms")?,
    })
}

fn cmd_train_tiny(cfg: &RunConfig) -> Result<String> {
    let output = PathBuf::from(cfg.require("output")?);
    let tcfg = tiny_config(cfg)?;
    if tcfg.epochs == 0 {
        return Err(Error::Config("train.epochs must be at least 1".into()));
    }
    let mut log = String::new();
    let model = tiny::train_tiny_with(&tcfg, |r| {
        let _ = writeln!(log, "epoch {:>3}  loss {:.4}", r.epoch, r.mean_loss);
        eprintln!("epoch {:>3}  loss {:.4}", r.epoch, r.mean_loss);
    })?;
    let d = &model.detector;
    save_network(d.net(), Some(d.weights()), &output)?;
    if let Some(report) = cfg.get("report") {
        let doc = serde_json::json!({
            "held-out-iou": model.held_out_iou,
            "anchors": AnchorPrior::format_list(d.anchors()),
            "epoch-losses": model.epoch_losses,
            "config": tcfg,
        });
        write_file(Path::new(report), &(serde_json::to_string_pretty(&doc)? + "\n"))?;
    }
    let _ = writeln!(
        log,
        "saved {} ({} params); held-out mean best IOU {:.4}",
        output.display(),
        count_params(d.net(), Some(d.weights())),
        model.held_out_iou
    );
    Ok(log)
}

/// The detector named by `network`, with anchors from `anchors` or the
/// network's own priors.
pub fn detector_from_config(cfg: &RunConfig) -> Result<Detector> {
    let spec = cfg.require("network")?;
    let (net, weights) = load_network_ref(spec)?;
    let weights = weights.ok_or_else(|| Error::Config(format!("network {spec:?} carries no weights")))?;
    let anchors = match cfg.get("anchors").filter(|s| !s.is_empty()) {
        Some(s) => AnchorPrior::parse_list(s).map_err(|e| Error::Config(format!("anchors: {e}")))?,
        None => net
            .head()
            .map(|h| h.priors.clone())
            .filter(|p| !p.is_empty())
            .ok_or_else(|| Error::Config(format!("network {spec:?} has no anchor priors; set `anchors`")))?,
    };
    Detector::new(net, weights, anchors, cfg.parsed("thresh.obj")?, cfg.parsed("thresh.nms")?)
}

pub fn policy_from_config(cfg: &RunConfig, channels: usize) -> Result<GatingPolicy> {
    let mut policy = GatingPolicy::new(channels).with_thresholds(cfg.parsed("gate.p0")?, cfg.parsed("gate.tau")?);
    policy.force_every = cfg.parsed("gate.force_every")?;
    if let Some(path) = cfg.get("gate.weights_file").filter(|s| !s.is_empty()) {
        let (net, store) = load_network(path)?;
        let store = store.ok_or_else(|| Error::Config(format!("gate weights file {path:?} carries no weights")))?;
        policy.gate = GateWeights::from_network(&net, &store)?;
        if policy.gate.in_channels() != 2 * channels {
            return Err(Error::Config(format!(
                "gate in {path:?} reads {} channels, frames stacked with their reference have {}",
                policy.gate.in_channels(),
                2 * channels
            )));
        }
    }
    policy.validate()?;
    Ok(policy)
}

fn sink_into(text: &mut String) -> impl FnMut(usize, &[crate::detector::DetectionBox]) -> Result<()> + '_ {
    move |i, boxes| {
        text.push_str(&format_detections(i, boxes));
        Ok(())
    }
}

fn emit_detections(cfg: &RunConfig, text: String, summary: String) -> Result<String> {
    match cfg.get("output") {
        Some(path) => {
            write_file(Path::new(path), &text)?;
            Ok(summary)
        }
        None => Ok(text),
    }
}

fn cmd_detect(cfg: &RunConfig) -> Result<String> {
    let detector = detector_from_config(cfg)?;
    let input = PathBuf::from(cfg.require("input")?);
    let mut text = String::new();
    let n = detect_all(ppm::read_frames(&input)?, &detector, sink_into(&mut text))?;
    emit_detections(cfg, text, format!("detected on {n} frames\n"))
}

/// Keys echoed into a run report.
pub const RUN_KEYS: &[&str] = &[
    "input",
    "network",
    "anchors",
    "thresh.obj",
    "thresh.nms",
    "gate.p0",
    "gate.tau",
    "gate.force_every",
    "gate.weights_file",
    "mode",
    "seed",
    "report",
    "output",
];

fn cmd_run(cfg: &RunConfig) -> Result<String> {
    let detector = detector_from_config(cfg)?;
    let input = PathBuf::from(cfg.require("input")?);
    let channels = detector.net().input_shape()[0];
    let policy = policy_from_config(cfg, channels)?;
    let mode: Mode = cfg.require("mode")?.parse()?;
    let mut text = String::new();
    let mut report = run(ppm::read_frames(&input)?, &detector, &policy, mode, sink_into(&mut text))?;
    report.config = cfg.effective(RUN_KEYS);
    if !report.config.contains_key("anchors") {
        report.config.insert("anchors".into(), AnchorPrior::format_list(detector.anchors()));
    }
    let json = serde_json::to_string_pretty(&report)? + "\n";
    let summary = format!(
        "{} frames, {} inferences ({:.2}%), {:.1} fps\n",
        report.frames, report.inferences, report.inference_frequency, report.frames_per_second
    );
    let mut shown = match cfg.get("report") {
        Some(path) => {
            write_file(Path::new(path), &json)?;
            summary
        }
        None => json,
    };
    if cfg.get("output").is_some() {
        emit_detections(cfg, text, String::new())?;
    } else {
        shown.push_str(&text);
    }
    Ok(shown)
}

/// `224` means `3,224,224`.
pub fn parse_resolution(s: &str, channels: usize) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("resolution {s:?} is not `N` or `C,H,W`"))))
        .collect::<Result<_>>()?;
    match parts[..] {
        [n] => Ok([channels, n, n]),
        [c, h, w] => Ok([c, h, w]),
        _ => Err(Error::Config(format!("resolution {s:?} is not `N` or `C,H,W`"))),
    }
}

fn cmd_profile(cfg: &RunConfig) -> Result<String> {
    let (net, weights) = load_network_ref(cfg.require("network")?)?;
    let input = match cfg.get("resolution") {
        Some(r) => parse_resolution(r, net.input_shape()[0])?,
        None => net.input_shape(),
    };
    let layers = profile_layers(&net, input, weights.as_ref())?;
    let mut s = format!("network {}  input {:?}\n", net.name(), input);
    let _ = writeln!(s, "{:>5} {:<10} {:<18} {:>12} {:>16}", "layer", "kind", "output", "params", "flops");
    for l in &layers {
        let _ = writeln!(
            s,
            "{:>5} {:<10} {:<18} {:>12} {:>16}",
            l.index,
            l.kind,
            format!("{:?}", l.output_shape),
            l.params,
            l.flops
        );
    }
    let flops = count_flops(&net, input)?;
    let _ = writeln!(s, "params {}", count_params(&net, weights.as_ref()));
    let _ = writeln!(s, "flops {} ({:.2}e9)", flops, flops as f64 / 1e9);
    Ok(s)
}

fn cmd_anchors(cfg: &RunConfig) -> Result<String> {
    let path = cfg.require("input")?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let grid: f32 = cfg.parsed::<usize>("anchors.grid")? as f32;
    let boxes: Vec<(f32, f32)> = parse_detections(&text)?
        .iter()
        .map(|(_, b)| (b.w * grid, b.h * grid))
        .collect();
    let out = kmeans_anchors_traced(&boxes, cfg.parsed("anchors.k")?, cfg.parsed("seed")?)?;
    Ok(format!(
        "{}\n# {} boxes, {} iterations, converged {}, cost {:.6}\n",
        AnchorPrior::format_list(&out.anchors),
        boxes.len(),
        out.iterations,
        out.converged,
        out.cost_history.last().copied().unwrap_or(0.0)
    ))
}

fn cmd_evolve(cfg: &RunConfig) -> Result<String> {
    let detector = detector_from_config(cfg)?;
    let dir = PathBuf::from(cfg.require("output")?);
    let tcfg = tiny_config(cfg)?;
    let (train, held_out) = tiny::datasets(&tcfg);
    let net = detector.net().clone();
    let pairs = tiny::training_pairs(&train, &net, detector.anchors())?;
    let metric = |w: &WeightStore| -> Result<f64> {
        let d = Detector::new(
            net.clone(),
            w.clone(),
            detector.anchors().to_vec(),
            detector.obj_threshold,
            detector.nms_threshold,
        )?;
        tiny::evaluate(&d, &held_out)
    };
    let task = Task {
        train: &pairs,
        metric: &metric,
    };
    let retrain = TrainConfig {
        learning_rate: cfg.parsed("evolve.lr")?,
        epochs: cfg.parsed("evolve.epochs")?,
        batch_size: tcfg.batch_size,
        seed: tcfg.seed,
        loss: crate::nn::Loss::DetectorComposite,
        momentum: tcfg.momentum,
    };
    let env = EnvironmentalFactor::parse(cfg.require("evolve.gamma")?)?;
    let lineage = evolve_generations(
        &net,
        detector.weights(),
        &task,
        cfg.parsed("evolve.generations")?,
        &env,
        &retrain,
        tcfg.seed,
        |g| eprintln!("generation {}: {} params, metric {:.4}", g.generation, g.params, g.metric),
    )?;
    lineage.save(&dir)?;
    let mut s = String::new();
    for g in &lineage.generations {
        let _ = writeln!(s, "generation {}  params {}  metric {:.4}", g.generation, g.params, g.metric);
    }
    let ratio = lineage.generations[0].params as f64 / lineage.last().params as f64;
    let _ = writeln!(s, "reduction {ratio:.2}x; lineage written to {}", dir.display());
    if let Some(reason) = &lineage.aborted {
        let _ = writeln!(s, "aborted: {reason}");
    }
    Ok(s)
}

/// Entry point for the binary: one line on stderr and exit code 1 on error.
pub fn main() -> std::process::ExitCode {
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run_cli(std::env::args_os(), &mut lock) {
        Ok(()) => {
            let _ = lock.flush();
            std::process::ExitCode::SUCCESS
        }
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("fastyolo: {line}");
            std::process::ExitCode::FAILURE
        }
    }
}
