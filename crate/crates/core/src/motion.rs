//! The motion gate: stack the current frame on the reference frame, squash a
//! 1×1 convolution of the stack into a per-pixel motion probability, and
//! decide whether the frame needs a fresh deep inference.

use crate::error::{Error, Result};
use crate::netdef::{LayerSpec, NetworkDescriptor, WeightStore};
use crate::tensor::Tensor;

/// A video frame with pixels in `[0, 1]`, `C ∈ {1, 3}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    index: usize,
    pixels: Tensor,
}

impl Frame {
    pub fn new(index: usize, pixels: Tensor) -> Result<Self> {
        let (c, _, _) = pixels.dims3()?;
        if c != 1 && c != 3 {
            return Err(Error::InvalidShape(format!("frames need 1 or 3 channels, got {c}")));
        }
        if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { index, pixels })
    }

    /// From 8-bit samples in `[C, H, W]` order, scaled by 1/255.
    pub fn from_u8(index: usize, shape: [usize; 3], samples: &[u8]) -> Result<Self> {
        let data = samples.iter().map(|&b| b as f32 / 255.0).collect();
        Self::new(index, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn shape(&self) -> [usize; 3] {
        let (c, h, w) = self.pixels.dims3().expect("validated");
        [c, h, w]
    }
}

/// Per-pixel motion likelihood, `[1, H, W]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionProbabilityMap {
    values: Tensor,
}

impl MotionProbabilityMap {
    pub fn new(values: Tensor) -> Result<Self> {
        let (c, _, _) = values.dims3()?;
        if c != 1 {
            return Err(Error::InvalidShape(format!("motion map must be [1,H,W], got {:?}", values.shape())));
        }
        if values.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("motion map values must lie in [0, 1]".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Fraction of pixels strictly above `threshold`.
    pub fn fraction_above(&self, threshold: f32) -> f64 {
        let n = self.values.data().iter().filter(|&&v| v > threshold).count();
        n as f64 / self.values.len() as f64
    }
}

/// Parameters of the 1×1 gate convolution: a `[1, 2C, 1, 1]` kernel and a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct GateWeights {
    pub kernel: Tensor,
    pub bias: f32,
}

impl GateWeights {
    /// Frame difference: `+1/C` on current channels, `−1/C` on reference
    /// channels. Identical frames map to exactly zero.
    pub fn frame_difference(channels: usize) -> Self {
        let w = 1.0 / channels as f32;
        let data = (0..2 * channels).map(|c| if c < channels { w } else { -w }).collect();
        Self {
            kernel: Tensor::new(vec![1, 2 * channels, 1, 1], data).expect("gate kernel shape"),
            bias: 0.0,
        }
    }

    /// Takes the gate from a network holding a single 1×1 conv with one
    /// output channel.
    pub fn from_network(net: &NetworkDescriptor, store: &WeightStore) -> Result<Self> {
        store.validate(net)?;
        match net.layers() {
            [LayerSpec::Conv(conv)] if conv.kernel == 1 && conv.out_channels == 1 && conv.stride == 1 && conv.pad == 0 => {
                let w = store.layer(0).expect("validated");
                Ok(Self {
                    kernel: w.kernel().clone(),
                    bias: w.bias()[0],
                })
            }
            _ => Err(Error::InvalidArgument(format!(
                "gate network {:?} must be exactly one 1x1 conv with a single output channel",
                net.name()
            ))),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }
}

/// Thresholds and gate weights that turn a motion map into a skip-or-infer
/// decision.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingPolicy {
    /// A pixel counts as moving when its map value exceeds this.
    pub pixel_threshold: f32,
    /// Inference runs when the moving fraction exceeds this. A negative value
    /// always fires.
    pub area_threshold: f32,
    /// Force inference once this many frames have elapsed since the reference
    /// frame; 0 disables.
    pub force_every: usize,
    pub gate: GateWeights,
}

pub const DEFAULT_PIXEL_THRESHOLD: f32 = 0.1;
pub const DEFAULT_AREA_THRESHOLD: f32 = 0.001;

impl GatingPolicy {
    pub fn new(channels: usize) -> Self {
        Self {
            pixel_threshold: DEFAULT_PIXEL_THRESHOLD,
            area_threshold: DEFAULT_AREA_THRESHOLD,
            force_every: 0,
            gate: GateWeights::frame_difference(channels),
        }
    }

    /// A policy that infers on every frame.
    pub fn always(channels: usize) -> Self {
        Self {
            area_threshold: -1.0,
            ..Self::new(channels)
        }
    }

    pub fn with_thresholds(mut self, pixel: f32, area: f32) -> Self {
        self.pixel_threshold = pixel;
        self.area_threshold = area;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pixel_threshold) {
            return Err(Error::InvalidArgument(format!(
                "gate.p0 must lie in [0, 1], got {}",
                self.pixel_threshold
            )));
        }
        if !(self.area_threshold <= 1.0 && (self.area_threshold >= 0.0 || self.area_threshold == -1.0)) {
            return Err(Error::InvalidArgument(format!(
                "gate.tau must lie in [0, 1] (or be -1 for always-infer), got {}",
                self.area_threshold
            )));
        }
        Ok(())
    }
}

/// Channels `0..C` hold the current frame, `C..2C` the reference.
pub fn stack_frames(current: &Frame, reference: &Frame) -> Result<Tensor> {
    if current.shape() != reference.shape() {
        return Err(Error::shape("stack_frames current vs reference", &current.shape(), &reference.shape()));
    }
    let [c, h, w] = current.shape();
    let mut data = Vec::with_capacity(2 * c * h * w);
    data.extend_from_slice(current.pixels.data());
    data.extend_from_slice(reference.pixels.data());
    Tensor::new(vec![2 * c, h, w], data)
}

/// `clamp01(|conv1x1(stack)|)`.
///
/// The reduction pairs channel `c` with channel `c + C` before moving on, so
/// weights that are exact negatives of each other cancel exactly.
pub fn motion_map(stack: &Tensor, policy: &GatingPolicy) -> Result<MotionProbabilityMap> {
    let (c2, h, w) = stack.dims3()?;
    let gate = &policy.gate;
    if gate.kernel.shape() != [1, c2, 1, 1] {
        return Err(Error::shape("gate kernel vs image stack", gate.kernel.shape(), stack.shape()));
    }
    if c2 % 2 != 0 {
        return Err(Error::InvalidShape(format!("image stack needs an even channel count, got {c2}")));
    }
    let c = c2 / 2;
    let plane = h * w;
    let x = stack.data();
    let k = gate.kernel.data();
    let mut out = vec![gate.bias; plane];
    for ch in 0..c {
        let cur = &x[ch * plane..(ch + 1) * plane];
        let rf = &x[(ch + c) * plane..(ch + c + 1) * plane];
        let (wc, wr) = (k[ch], k[ch + c]);
        for ((o, &a), &b) in out.iter_mut().zip(cur).zip(rf) {
            *o += wc * a + wr * b;
        }
    }
    for v in &mut out {
        *v = v.abs().clamp(0.0, 1.0);
    }
    MotionProbabilityMap::new(Tensor::new(vec![1, h, w], out)?)
}

/// `true` when the moving fraction exceeds the area threshold, or when forced
/// by `force_every`. `frames_since_reference` is the frame distance to the
/// reference frame.
pub fn decide(map: &MotionProbabilityMap, policy: &GatingPolicy, frames_since_reference: usize) -> bool {
    if policy.force_every > 0 && frames_since_reference >= policy.force_every {
        return true;
    }
    map.fraction_above(policy.pixel_threshold) > policy.area_threshold as f64
}
