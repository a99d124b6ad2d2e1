//! The per-frame state machine: gate against the reference frame, run the
//! detector only when the gate fires, and otherwise re-decode the cached map.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::detector::{decode, nms, AnchorPrior, ClassProbabilityMap, DetectionBox};
use crate::error::{Error, Result};
use crate::motion::{decide, motion_map, stack_frames, Frame, GatingPolicy};
use crate::netdef::{HeadSpec, NetworkDescriptor, WeightStore};
use crate::nn::forward;

/// A detection network with its priors and post-processing thresholds.
#[derive(Debug, Clone)]
pub struct Detector {
    net: NetworkDescriptor,
    weights: WeightStore,
    anchors: Vec<AnchorPrior>,
    pub obj_threshold: f32,
    pub nms_threshold: f32,
}

impl Detector {
    pub fn new(
        net: NetworkDescriptor,
        weights: WeightStore,
        anchors: Vec<AnchorPrior>,
        obj_threshold: f32,
        nms_threshold: f32,
    ) -> Result<Self> {
        let head = net
            .head()
            .ok_or_else(|| Error::InvalidArgument(format!("network {:?} has no detect head", net.name())))?;
        if anchors.len() != head.anchors {
            return Err(Error::InvalidArgument(format!(
                "network {:?} predicts {} anchors per cell but {} priors were given",
                net.name(),
                head.anchors,
                anchors.len()
            )));
        }
        if anchors.iter().any(|a| !(a.w > 0.0 && a.h > 0.0)) {
            return Err(Error::InvalidArgument("anchor priors must be positive".into()));
        }
        for (name, t) in [("thresh.obj", obj_threshold), ("thresh.nms", nms_threshold)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {t}")));
            }
        }
        weights.validate(&net)?;
        Ok(Self {
            net,
            weights,
            anchors,
            obj_threshold,
            nms_threshold,
        })
    }

    pub fn net(&self) -> &NetworkDescriptor {
        &self.net
    }

    pub fn weights(&self) -> &WeightStore {
        &self.weights
    }

    pub fn anchors(&self) -> &[AnchorPrior] {
        &self.anchors
    }

    pub fn head(&self) -> &HeadSpec {
        self.net.head().expect("checked in new")
    }

    /// Deep inference: the raw head output for one frame.
    pub fn infer(&self, frame: &Frame) -> Result<ClassProbabilityMap> {
        let raw = forward(&self.net, &self.weights, frame.pixels())?;
        ClassProbabilityMap::from_head(raw, self.head())
    }

    /// Decode plus suppression of a map.
    pub fn detect_map(&self, map: &ClassProbabilityMap) -> Result<Vec<DetectionBox>> {
        Ok(nms(&decode(map, &self.anchors, self.obj_threshold)?, self.nms_threshold))
    }

    pub fn detect(&self, frame: &Frame) -> Result<Vec<DetectionBox>> {
        self.detect_map(&self.infer(frame)?)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes {
    pub gate: Duration,
    pub infer: Duration,
    pub decode: Duration,
}

impl std::ops::AddAssign for StageTimes {
    fn add_assign(&mut self, o: Self) {
        self.gate += o.gate;
        self.infer += o.infer;
        self.decode += o.decode;
    }
}

#[derive(Debug, Clone)]
pub struct FrameOutcome {
    pub detections: Vec<DetectionBox>,
    pub did_infer: bool,
    pub times: StageTimes,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineState {
    /// The last frame that went through deep inference, with its map.
    reference: Option<(Frame, ClassProbabilityMap)>,
    frames_seen: usize,
    inferences_run: usize,
    frames_since_inference: usize,
}

impl PipelineState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reference_frame(&self) -> Option<&Frame> {
        self.reference.as_ref().map(|r| &r.0)
    }

    pub fn reference_map(&self) -> Option<&ClassProbabilityMap> {
        self.reference.as_ref().map(|r| &r.1)
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    pub fn inferences_run(&self) -> usize {
        self.inferences_run
    }

    pub fn frames_since_inference(&self) -> usize {
        self.frames_since_inference
    }

    /// Processes one frame. On error the state is left untouched.
    pub fn process_frame(&mut self, frame: &Frame, policy: &GatingPolicy, detector: &Detector) -> Result<FrameOutcome> {
        let mut times = StageTimes::default();
        let input = detector.net().input_shape();
        if frame.shape() != input {
            return Err(Error::shape("frame vs network input", &frame.shape(), &input));
        }

        let infer = match &self.reference {
            None => true,
            // always-infer sentinel: skip the gate arithmetic altogether
            Some(_) if policy.area_threshold < 0.0 => true,
            Some((reference, _)) => {
                let t = Instant::now();
                let map = motion_map(&stack_frames(frame, reference)?, policy)?;
                let fire = decide(&map, policy, self.frames_since_inference + 1);
                times.gate = t.elapsed();
                fire
            }
        };

        let detections;
        if infer {
            let t = Instant::now();
            let map = detector.infer(frame)?;
            times.infer = t.elapsed();
            let t = Instant::now();
            detections = detector.detect_map(&map)?;
            times.decode = t.elapsed();
            self.reference = Some((frame.clone(), map));
            self.inferences_run += 1;
            self.frames_since_inference = 0;
        } else {
            let (_, map) = self.reference.as_ref().expect("skip implies a reference");
            let t = Instant::now();
            detections = detector.detect_map(map)?;
            times.decode = t.elapsed();
            self.frames_since_inference += 1;
        }
        self.frames_seen += 1;
        Ok(FrameOutcome {
            detections,
            did_infer: infer,
            times,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Always,
    Gated,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "always" => Ok(Self::Always),
            "gated" => Ok(Self::Gated),
            _ => Err(Error::Config(format!("mode must be always or gated, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct RunReport {
    pub frames: usize,
    pub inferences: usize,
    /// Percentage of frames that ran deep inference.
    pub inference_frequency: f64,
    /// Seconds per stage (`gate`, `infer`, `decode`, `total`), millisecond
    /// resolution.
    pub wall_time: BTreeMap<String, f64>,
    pub frames_per_second: f64,
    pub decisions: Vec<u8>,
    /// Effective configuration of the run, filled in by the caller.
    #[serde(default)]
    pub config: BTreeMap<String, String>,
}

impl RunReport {
    /// The report with timing fields zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_time: self.wall_time.keys().map(|k| (k.clone(), 0.0)).collect(),
            frames_per_second: 0.0,
            ..self.clone()
        }
    }
}

fn millis(d: Duration) -> f64 {
    (d.as_secs_f64() * 1000.0).round() / 1000.0
}

/// Folds [`PipelineState::process_frame`] over a frame source in order,
/// handing each frame's detections to `sink`. `Mode::Always` replaces the
/// policy thresholds with the always-infer sentinel.
pub fn run<I>(
    frames: I,
    detector: &Detector,
    policy: &GatingPolicy,
    mode: Mode,
    mut sink: impl FnMut(usize, &[DetectionBox]) -> Result<()>,
) -> Result<RunReport>
where
    I: IntoIterator<Item = Result<Frame>>,
{
    policy.validate()?;
    let always;
    let policy = match mode {
        Mode::Gated => policy,
        Mode::Always => {
            always = GatingPolicy {
                area_threshold: -1.0,
                ..policy.clone()
            };
            &always
        }
    };
    let mut state = PipelineState::new();
    let mut times = StageTimes::default();
    let mut decisions = Vec::new();
    let start = Instant::now();
    for frame in frames {
        let frame = frame?;
        let index = frame.index();
        let out = state
            .process_frame(&frame, policy, detector)
            .map_err(|e| Error::at_frame(index, e))?;
        sink(index, &out.detections).map_err(|e| Error::at_frame(index, e))?;
        times += out.times;
        decisions.push(u8::from(out.did_infer));
    }
    let total = start.elapsed();
    if decisions.is_empty() {
        return Err(Error::InvalidArgument("frame sequence is empty".into()));
    }
    let frames = decisions.len();
    let inferences = state.inferences_run();
    let wall_time = [
        ("gate", times.gate),
        ("infer", times.infer),
        ("decode", times.decode),
        ("total", total),
    ]
    .into_iter()
    .map(|(k, d)| (k.to_string(), millis(d)))
    .collect();
    Ok(RunReport {
        frames,
        inferences,
        inference_frequency: 100.0 * inferences as f64 / frames as f64,
        wall_time,
        frames_per_second: frames as f64 / total.as_secs_f64().max(1e-9),
        decisions,
        config: BTreeMap::new(),
    })
}

/// The ungated baseline: the detector applied to every frame independently.
pub fn detect_all<I>(frames: I, detector: &Detector, mut sink: impl FnMut(usize, &[DetectionBox]) -> Result<()>) -> Result<usize>
where
    I: IntoIterator<Item = Result<Frame>>,
{
    let mut n = 0;
    for frame in frames {
        let frame = frame?;
        let index = frame.index();
        let boxes = detector.detect(&frame).map_err(|e| Error::at_frame(index, e))?;
        sink(index, &boxes).map_err(|e| Error::at_frame(index, e))?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("frame sequence is empty".into()));
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::format_detections;
    use crate::netdef::bundled;
    use crate::tensor::Tensor;

    fn detector() -> Detector {
        let net = bundled::tiny_detector();
        let weights = WeightStore::init(&net, 5);
        let anchors = vec![AnchorPrior::new(1.0, 1.0), AnchorPrior::new(2.0, 2.5)];
        Detector::new(net, weights, anchors, 0.0, 0.45).unwrap()
    }

    fn frame(index: usize, seed: usize) -> Frame {
        Frame::new(index, Tensor::from_fn(vec![3, 96, 96], |i| ((i * 31 + seed * 17) % 101) as f32 / 100.0)).unwrap()
    }

    #[test]
    fn first_frame_infers_and_repeat_is_skipped() {
        let d = detector();
        let policy = GatingPolicy::new(3).with_thresholds(0.1, 0.01);
        let mut state = PipelineState::new();
        let a = state.process_frame(&frame(1, 0), &policy, &d).unwrap();
        assert!(a.did_infer);
        let b = state.process_frame(&frame(2, 0), &policy, &d).unwrap();
        assert!(!b.did_infer);
        assert_eq!(format_detections(1, &a.detections), format_detections(1, &b.detections));
        assert_eq!((state.frames_seen(), state.inferences_run(), state.frames_since_inference()), (2, 1, 1));
        let c = state.process_frame(&frame(3, 1), &policy, &d).unwrap();
        assert!(c.did_infer);
        assert_eq!(state.frames_since_inference(), 0);
    }

    #[test]
    fn errors_leave_state_untouched() {
        let d = detector();
        let policy = GatingPolicy::new(3);
        let mut state = PipelineState::new();
        state.process_frame(&frame(1, 0), &policy, &d).unwrap();
        let small = Frame::new(2, Tensor::zeros(vec![3, 48, 48])).unwrap();
        assert!(state.process_frame(&small, &policy, &d).is_err());
        assert_eq!((state.frames_seen(), state.inferences_run()), (1, 1));
        assert_eq!(state.reference_frame().unwrap().index(), 1);
    }

    #[test]
    fn static_sequence_runs_once() {
        let d = detector();
        let frames: Vec<_> = (1..=50).map(|i| frame(i, 0)).collect();
        let report = run(frames.iter().cloned().map(Ok), &d, &GatingPolicy::new(3), Mode::Gated, |_, _| Ok(())).unwrap();
        assert_eq!(report.inferences, 1);
        assert!((report.inference_frequency - 2.0).abs() < 1e-12);
        assert_eq!(report.decisions.len(), 50);
        let always = run(frames.into_iter().map(Ok), &d, &GatingPolicy::new(3), Mode::Always, |_, _| Ok(())).unwrap();
        assert_eq!(always.inferences, 50);
    }

    #[test]
    fn force_every_bounds_the_gap() {
        let d = detector();
        let frames: Vec<_> = (1..=10).map(|i| Ok(frame(i, 0))).collect();
        let mut policy = GatingPolicy::new(3);
        policy.force_every = 3;
        let report = run(frames, &d, &policy, Mode::Gated, |_, _| Ok(())).unwrap();
        assert_eq!(report.decisions, vec![1, 0, 0, 1, 0, 0, 1, 0, 0, 1]);
    }

    #[test]
    fn always_matches_standalone() {
        let d = detector();
        let frames: Vec<_> = (1..=6).map(|i| frame(i, i % 2)).collect();
        let mut gated = String::new();
        run(frames.iter().cloned().map(Ok), &d, &GatingPolicy::new(3), Mode::Always, |i, b| {
            gated.push_str(&format_detections(i, b));
            Ok(())
        })
        .unwrap();
        let mut plain = String::new();
        detect_all(frames.into_iter().map(Ok), &d, |i, b| {
            plain.push_str(&format_detections(i, b));
            Ok(())
        })
        .unwrap();
        assert_eq!(gated, plain);
    }

    #[test]
    fn bad_frame_error_names_the_index() {
        let d = detector();
        let frames = vec![Ok(frame(1, 0)), Ok(Frame::new(7, Tensor::zeros(vec![3, 8, 8])).unwrap())];
        let err = run(frames, &d, &GatingPolicy::new(3), Mode::Gated, |_, _| Ok(())).unwrap_err();
        assert!(err.to_string().contains('7'), "{err}");
        assert!(run(Vec::new(), &d, &GatingPolicy::new(3), Mode::Gated, |_, _| Ok(())).is_err());
    }
}
