//! Flat `key=value` run configuration shared by every subcommand.
//!
//! A config file holds one `key=value` per line; blank lines and lines
//! starting with `#` are ignored. Overrides given on the command line are
//! applied after the file. Unknown keys are errors.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Every recognised key, its default (if any) and a one-line description.
pub const KEYS: &[(&str, Option<&str>, &str)] = &[
    ("input", None, "frame directory (detect, run) or truth file (anchors)"),
    ("network", None, "FNET v1 file, or bundled:<name>"),
    ("anchors", None, "anchor priors `w,h;w,h` in grid cells; defaults to the network's priors"),
    ("thresh.obj", Some("0.3"), "objectness threshold for decoding"),
    ("thresh.nms", Some("0.45"), "IOU threshold for suppression"),
    ("gate.p0", Some("0.1"), "per-pixel motion threshold"),
    ("gate.tau", Some("0.001"), "moving-area fraction threshold; -1 always infers"),
    ("gate.force_every", Some("0"), "force inference after this many frames; 0 disables"),
    ("gate.weights_file", None, "FNET file holding a single 1x1 gate conv"),
    ("mode", Some("gated"), "always | gated"),
    ("seed", Some("7"), "seed for every random choice"),
    ("report", None, "JSON report path"),
    ("output", None, "output file or directory"),
    ("resolution", None, "profile input: `224` or `C,H,W`; defaults to the network input"),
    ("synth.width", Some("96"), "frame width"),
    ("synth.height", Some("96"), "frame height"),
    ("synth.channels", Some("3"), "1 or 3"),
    ("synth.frames", Some("200"), "frame count"),
    ("synth.objects", Some("2"), "number of rectangles"),
    ("synth.speed", Some("2"), "maximum speed in pixels per moving frame"),
    ("synth.noise", Some("0"), "uniform noise amplitude in [0, 0.05]"),
    ("synth.moving", Some("0.62"), "fraction of moving frames when no schedule is given"),
    ("synth.blocks", Some("4"), "moving/frozen block pairs when no schedule is given"),
    ("synth.schedule", None, "explicit schedule `1-31:moving,32-50:frozen`"),
    ("train.frames", Some("500"), "training images"),
    ("train.eval_frames", Some("100"), "held-out images"),
    ("train.epochs", Some("25"), "training epochs"),
    ("train.lr", Some("0.001"), "learning rate"),
    ("train.batch", Some("8"), "minibatch size"),
    ("train.momentum", Some("0.9"), "SGD momentum"),
    ("evolve.generations", Some("1"), "number of generations"),
    ("evolve.gamma", Some("1"), "environmental factor, scalar or per conv layer"),
    ("evolve.epochs", Some("40"), "retraining epochs per generation"),
    ("evolve.lr", Some("0.001"), "retraining learning rate"),
    ("anchors.k", Some("2"), "number of clusters"),
    ("anchors.grid", Some("6"), "grid size used to express anchors in cell units"),
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> Result<()> {
    if KEYS.iter().any(|(k, _, _)| *k == key) {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown config key {key:?}")))
    }
}

fn split_pair(line: &str) -> Result<(String, String)> {
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
    let k = k.trim();
    known(k)?;
    Ok((k.to_string(), v.trim().to_string()))
}

impl RunConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = split_pair(line).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
            cfg.values.insert(k, v);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = split_pair(pair)?;
        self.values.insert(k, v);
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        known(key)?;
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    /// Explicit value or the key's default.
    pub fn get(&self, key: &str) -> Option<&str> {
        if let Some(v) = self.values.get(key) {
            return Some(v);
        }
        KEYS.iter().find(|(k, _, _)| *k == key).and_then(|(_, d, _)| *d)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| Error::Config(format!("missing required key {key:?}")))
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("{key}={raw:?} is not a valid {}", std::any::type_name::<T>())))
    }

    pub fn parsed_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None | Some("") => Ok(None),
            Some(_) => self.parsed(key).map(Some),
        }
    }

    /// Explicit values only.
    pub fn explicit(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// The values `keys` resolve to, defaults included; unset keys without a
    /// default are left out.
    pub fn effective(&self, keys: &[&str]) -> BTreeMap<String, String> {
        keys.iter()
            .filter_map(|k| self.get(k).map(|v| (k.to_string(), v.to_string())))
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
