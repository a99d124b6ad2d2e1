//! Synthetic video: axis-aligned rectangles on a flat background, moving or
//! frozen according to a schedule, with exact ground truth.
//!
//! Frames are numbered from 1. Objects start at their initial position at a
//! virtual frame 0 and advance by one velocity step on every frame that lies
//! in a moving interval, so frame 1 already differs from the initial layout
//! when it is moving. During frozen intervals nothing moves and, with zero
//! noise, consecutive frames are bit-identical.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{format_detections, DetectionBox};
use crate::error::{Error, Result};
use crate::motion::Frame;
use crate::ppm;

pub const MAX_NOISE: f32 = 0.05;
pub const TRUTH_FILE: &str = "truth.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Moving,
    Frozen,
}

/// Inclusive frame range `start..=end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub start: usize,
    pub end: usize,
    pub motion: Motion,
}

impl Interval {
    pub fn new(start: usize, end: usize, motion: Motion) -> Self {
        Self { start, end, motion }
    }
}

/// Parses `1-31:moving,32-50:frozen`.
pub fn parse_schedule(s: &str) -> Result<Vec<Interval>> {
    s.split(',')
        .map(|part| {
            let bad = || Error::Config(format!("schedule entry {part:?}: expected START-END:moving|frozen"));
            let (range, motion) = part.trim().split_once(':').ok_or_else(bad)?;
            let (a, b) = range.split_once('-').ok_or_else(bad)?;
            let motion = match motion {
                "moving" => Motion::Moving,
                "frozen" => Motion::Frozen,
                _ => return Err(bad()),
            };
            Ok(Interval::new(a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?, motion))
        })
        .collect()
}

pub fn format_schedule(schedule: &[Interval]) -> String {
    schedule
        .iter()
        .map(|i| {
            let m = match i.motion {
                Motion::Moving => "moving",
                Motion::Frozen => "frozen",
            };
            format!("{}-{}:{m}", i.start, i.end)
        })
        .collect::<Vec<_>>()
        .join(",")
}

/// Alternating moving/frozen blocks over `frames` frames with exactly
/// `moving` moving frames, starting with a moving block.
pub fn alternating_schedule(frames: usize, moving: usize, blocks: usize) -> Vec<Interval> {
    assert!(moving <= frames && blocks > 0);
    let frozen = frames - moving;
    let split = |total: usize, k: usize| -> Vec<usize> { (0..k).map(|i| total * (i + 1) / k - total * i / k).collect() };
    let mv = split(moving, blocks);
    let fz = split(frozen, blocks);
    let mut out = Vec::new();
    let mut next = 1;
    for (m, f) in mv.into_iter().zip(fz) {
        for (len, motion) in [(m, Motion::Moving), (f, Motion::Frozen)] {
            if len > 0 {
                out.push(Interval::new(next, next + len - 1, motion));
                next += len;
            }
        }
    }
    out
}

/// A rectangle with its top-left corner at `(x, y)` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub x: i32,
    pub y: i32,
    pub w: i32,
    pub h: i32,
    /// Pixels per moving frame.
    pub vx: i32,
    pub vy: i32,
    pub color: [u8; 3],
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub frames: usize,
    pub objects: Vec<SceneObject>,
    pub schedule: Vec<Interval>,
    /// Uniform noise amplitude added to every sample of every frame.
    pub noise: f32,
    pub background: [u8; 3],
    pub seed: u64,
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return Err(Error::InvalidArgument("scene needs positive width, height and frame count".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidArgument(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if !(0.0..=MAX_NOISE).contains(&self.noise) {
            return Err(Error::InvalidArgument(format!("noise must lie in [0, {MAX_NOISE}], got {}", self.noise)));
        }
        let mut expected = 1;
        for iv in &self.schedule {
            if iv.start != expected || iv.end < iv.start {
                return Err(Error::InvalidArgument(format!(
                    "schedule must cover frames 1..={} in order without gaps or overlap; interval {}-{} breaks at frame {expected}",
                    self.frames, iv.start, iv.end
                )));
            }
            expected = iv.end + 1;
        }
        if expected != self.frames + 1 {
            return Err(Error::InvalidArgument(format!(
                "schedule covers frames 1..{} but the scene has {} frames",
                expected - 1,
                self.frames
            )));
        }
        for (n, o) in self.objects.iter().enumerate() {
            if o.w <= 0 || o.h <= 0 || o.w as usize > self.width || o.h as usize > self.height {
                return Err(Error::InvalidArgument(format!("object {n} has an invalid size {}x{}", o.w, o.h)));
            }
            if o.x < 0 || o.y < 0 || (o.x + o.w) as usize > self.width || (o.y + o.h) as usize > self.height {
                return Err(Error::InvalidArgument(format!("object {n} starts outside the frame")));
            }
        }
        Ok(())
    }

    pub fn motion_at(&self, frame: usize) -> Motion {
        self.schedule
            .iter()
            .find(|iv| (iv.start..=iv.end).contains(&frame))
            .map_or(Motion::Frozen, |iv| iv.motion)
    }

    /// Fraction of frames whose transition from the previous frame (virtual
    /// frame 0 for frame 1) moves the objects.
    pub fn moving_fraction(&self) -> f64 {
        let moving: usize = self
            .schedule
            .iter()
            .filter(|iv| iv.motion == Motion::Moving)
            .map(|iv| iv.end - iv.start + 1)
            .sum();
        moving as f64 / self.frames as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub frames: Vec<Frame>,
    /// Ground truth per frame, aligned with `frames`.
    pub truth: Vec<Vec<DetectionBox>>,
}

impl SyntheticVideo {
    pub fn truth_text(&self) -> String {
        self.frames
            .iter()
            .zip(&self.truth)
            .map(|(f, t)| format_detections(f.index(), t))
            .collect()
    }

    /// Writes `frame_NNNNNN.ppm` files plus `truth.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for frame in &self.frames {
            ppm::write_frame(dir, frame)?;
        }
        let path = dir.join(TRUTH_FILE);
        std::fs::write(&path, self.truth_text()).map_err(|e| Error::io(&path, e))
    }
}

fn step(pos: i32, size: i32, vel: &mut i32, limit: usize) -> i32 {
    let next = pos + *vel;
    if next < 0 || next + size > limit as i32 {
        *vel = -*vel;
        (pos + *vel).clamp(0, limit as i32 - size)
    } else {
        next
    }
}

struct Canvas {
    width: usize,
    height: usize,
    channels: usize,
    samples: Vec<u8>,
}

impl Canvas {
    fn new(width: usize, height: usize, channels: usize, background: [u8; 3]) -> Self {
        let plane = width * height;
        let mut samples = vec![0u8; channels * plane];
        for c in 0..channels {
            samples[c * plane..(c + 1) * plane].fill(if channels == 1 { gray(background) } else { background[c] });
        }
        Self {
            width,
            height,
            channels,
            samples,
        }
    }

    fn fill_rect(&mut self, x: i32, y: i32, w: i32, h: i32, color: [u8; 3]) {
        let plane = self.width * self.height;
        let x0 = x.max(0) as usize;
        let y0 = y.max(0) as usize;
        let x1 = ((x + w).max(0) as usize).min(self.width);
        let y1 = ((y + h).max(0) as usize).min(self.height);
        for c in 0..self.channels {
            let v = if self.channels == 1 { gray(color) } else { color[c] };
            for row in y0..y1 {
                let base = c * plane + row * self.width;
                self.samples[base + x0..base + x1.max(x0)].fill(v);
            }
        }
    }

    fn add_noise(&mut self, amplitude: f32, rng: &mut ChaCha8Rng) {
        if amplitude <= 0.0 {
            return;
        }
        for s in &mut self.samples {
            let n: f32 = rng.random_range(-amplitude..=amplitude);
            *s = ((*s as f32 / 255.0 + n).clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }

    fn into_frame(self, index: usize) -> Result<Frame> {
        Frame::from_u8(index, [self.channels, self.height, self.width], &self.samples)
    }
}

fn gray(c: [u8; 3]) -> u8 {
    ((c[0] as u32 + c[1] as u32 + c[2] as u32) / 3) as u8
}

fn truth_box(o: &SceneObject, width: usize, height: usize) -> DetectionBox {
    let (w, h) = (width as f32, height as f32);
    DetectionBox::truth(
        (o.x as f32 + o.w as f32 / 2.0) / w,
        (o.y as f32 + o.h as f32 / 2.0) / h,
        o.w as f32 / w,
        o.h as f32 / h,
        o.class_id,
    )
}

/// Renders every frame of the scene with its ground truth.
pub fn render(spec: &SyntheticSceneSpec) -> Result<SyntheticVideo> {
    spec.validate()?;
    let mut objects = spec.objects.clone();
    let mut frames = Vec::with_capacity(spec.frames);
    let mut truth = Vec::with_capacity(spec.frames);
    for index in 1..=spec.frames {
        if spec.motion_at(index) == Motion::Moving {
            for o in &mut objects {
                o.x = step(o.x, o.w, &mut o.vx, spec.width);
                o.y = step(o.y, o.h, &mut o.vy, spec.height);
            }
        }
        let mut canvas = Canvas::new(spec.width, spec.height, spec.channels, spec.background);
        for o in &objects {
            canvas.fill_rect(o.x, o.y, o.w, o.h, o.color);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        canvas.add_noise(spec.noise, &mut rng);
        frames.push(canvas.into_frame(index)?);
        truth.push(objects.iter().map(|o| truth_box(o, spec.width, spec.height)).collect());
    }
    Ok(SyntheticVideo { frames, truth })
}

fn contrasting_color(rng: &mut ChaCha8Rng, background: [u8; 3]) -> [u8; 3] {
    loop {
        let c = [rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()];
        let diff = (gray(c) as i32 - gray(background) as i32).abs();
        if diff >= 80 {
            return c;
        }
    }
}

/// Knobs for a randomly laid out scene; see [`scene`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub frames: usize,
    pub objects: usize,
    /// Largest per-axis speed in pixels per moving frame.
    pub speed: i32,
    pub noise: f32,
    pub schedule: Vec<Interval>,
    pub seed: u64,
}

/// Rectangles of 12–36 pixels (capped at a third of the frame) at random
/// positions, each moving with a nonzero speed on both axes, in colours that
/// stand out from a dark background.
pub fn scene(p: &SceneParams) -> SyntheticSceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let background = [rng.random_range(0..90), rng.random_range(0..90), rng.random_range(0..90)];
    let side = |extent: usize| 36.min((extent as i32 / 3).max(1));
    let speed = p.speed.max(1);
    let objects = (0..p.objects)
        .map(|_| {
            let w = rng.random_range(side(p.width).min(12)..=side(p.width));
            let h = rng.random_range(side(p.height).min(12)..=side(p.height));
            let mut v = || {
                let s: i32 = rng.random_range(1..=speed);
                if rng.random::<bool>() {
                    s
                } else {
                    -s
                }
            };
            let (vx, vy) = (v(), v());
            SceneObject {
                x: rng.random_range(0..=(p.width as i32 - w)),
                y: rng.random_range(0..=(p.height as i32 - h)),
                w,
                h,
                vx,
                vy,
                color: contrasting_color(&mut rng, background),
                class_id: 0,
            }
        })
        .collect();
    SyntheticSceneSpec {
        width: p.width,
        height: p.height,
        channels: p.channels,
        frames: p.frames,
        objects,
        schedule: p.schedule.clone(),
        noise: p.noise,
        background,
        seed: p.seed,
    }
}

/// A random scene for property tests and demos: 1–3 rectangles, `moving`
/// moving frames spread over 1–4 blocks.
pub fn random_scene(seed: u64, width: usize, height: usize, frames: usize, moving: usize) -> SyntheticSceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    scene(&SceneParams {
        width,
        height,
        channels: 3,
        frames,
        objects: rng.random_range(1..=3),
        speed: 3,
        noise: 0.0,
        schedule: alternating_schedule(frames, moving, rng.random_range(1..=4)),
        seed: rng.random(),
    })
}

/// Independent still images for detector training: each has its own
/// background and 1–2 rectangles of 12–36 pixels, class 0.
pub fn still_images(count: usize, width: usize, height: usize, seed: u64) -> SyntheticVideo {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(count);
    let mut truth = Vec::with_capacity(count);
    for index in 1..=count {
        let background = [rng.random_range(0..110), rng.random_range(0..110), rng.random_range(0..110)];
        let mut canvas = Canvas::new(width, height, 3, background);
        let n = rng.random_range(1..=2);
        let mut boxes = Vec::with_capacity(n);
        for _ in 0..n {
            let w = rng.random_range(12..=36.min(width as i32));
            let h = rng.random_range(12..=36.min(height as i32));
            let o = SceneObject {
                x: rng.random_range(0..=(width as i32 - w)),
                y: rng.random_range(0..=(height as i32 - h)),
                w,
                h,
                vx: 0,
                vy: 0,
                color: contrasting_color(&mut rng, background),
                class_id: 0,
            };
            canvas.fill_rect(o.x, o.y, o.w, o.h, o.color);
            boxes.push(truth_box(&o, width, height));
        }
        frames.push(canvas.into_frame(index).expect("canvas values are valid"));
        truth.push(boxes);
    }
    SyntheticVideo { frames, truth }
}
