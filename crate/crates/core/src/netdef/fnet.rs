//! FNET v1: a text descriptor block followed by optional binary weights.
//!
//! ```text
//! FNET v1
//! name=<free text to end of line>
//! input=C,H,W
//! layers=N
//! layer=conv in=3 out=8 k=3 stride=1 pad=1 act=leaky_relu:0.1
//! layer=maxpool2
//! layer=pointwise act=sigmoid
//! layer=detect grid=6 anchors=2 classes=1 priors=1.5x2,3x4
//! weights=dense | weights=none
//! masks=0110             (dense only; one flag per conv layer)
//! WEIGHTS
//! <f32 LE: per conv layer, kernel row-major then bias>
//! MASKS
//! <packed mask bits, masked conv layers in order, MSB first, last byte zero-padded>
//! ```
//!
//! A `weights=none` file ends right after that line. Nothing may follow the
//! mask bytes.

use std::fmt::Write as _;
use std::path::Path;

use super::{ConvSpec, ConvWeights, HeadSpec, LayerSpec, NetworkDescriptor, WeightStore};
use crate::detector::AnchorPrior;
use crate::error::{Error, Result};
use crate::tensor::{Activation, Tensor};

pub const MAGIC: &str = "FNET v1";

pub fn save_network(net: &NetworkDescriptor, store: Option<&WeightStore>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(net, store)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_network(path: impl AsRef<Path>) -> Result<(NetworkDescriptor, Option<WeightStore>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

fn layer_line(layer: &LayerSpec) -> String {
    match layer {
        LayerSpec::Conv(c) => format!(
            "conv in={} out={} k={} stride={} pad={} act={}",
            c.in_channels,
            c.out_channels,
            c.kernel,
            c.stride,
            c.pad,
            c.activation.name()
        ),
        LayerSpec::MaxPool2 => "maxpool2".to_string(),
        LayerSpec::Pointwise(act) => format!("pointwise act={}", act.name()),
        LayerSpec::DetectHead(h) => {
            let mut s = format!("detect grid={} anchors={} classes={}", h.grid, h.anchors, h.classes);
            if !h.priors.is_empty() {
                let priors: Vec<String> = h.priors.iter().map(|p| format!("{}x{}", p.w, p.h)).collect();
                let _ = write!(s, " priors={}", priors.join(","));
            }
            s
        }
    }
}

pub fn to_bytes(net: &NetworkDescriptor, store: Option<&WeightStore>) -> Result<Vec<u8>> {
    if net.name().contains('\n') {
        return Err(Error::InvalidArgument("network name may not contain newlines".into()));
    }
    let [c, h, w] = net.input_shape();
    let mut text = format!("{MAGIC}\nname={}\ninput={c},{h},{w}\nlayers={}\n", net.name(), net.layers().len());
    for layer in net.layers() {
        text.push_str("layer=");
        text.push_str(&layer_line(layer));
        text.push('\n');
    }
    let Some(store) = store else {
        text.push_str("weights=none\n");
        return Ok(text.into_bytes());
    };
    store.validate(net)?;

    let convs: Vec<&ConvWeights> = net.conv_layers().map(|(i, _)| store.layer(i).expect("validated")).collect();
    let flags: String = convs.iter().map(|w| if w.mask().is_some() { '1' } else { '0' }).collect();
    let _ = write!(text, "weights=dense\nmasks={flags}\nWEIGHTS\n");

    let mut out = text.into_bytes();
    for w in &convs {
        for v in w.kernel().data().iter().chain(w.bias()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(b"MASKS\n");
    let mut byte = 0u8;
    let mut nbits = 0;
    for bit in convs.iter().filter_map(|w| w.mask()).flatten() {
        byte = (byte << 1) | u8::from(*bit);
        nbits += 1;
        if nbits == 8 {
            out.push(byte);
            byte = 0;
            nbits = 0;
        }
    }
    if nbits > 0 {
        out.push(byte << (8 - nbits));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    /// Next `\n`-terminated line, without the terminator. Returns the line's
    /// starting offset alongside.
    fn line(&mut self) -> Result<(usize, &'a str)> {
        let start = self.pos;
        let rest = &self.bytes[start..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(start, "truncated: expected a newline-terminated line"))?;
        let line = std::str::from_utf8(&rest[..end]).map_err(|_| Error::format(start, "line is not valid UTF-8"))?;
        self.pos = start + end + 1;
        Ok((start, line))
    }

    fn keyed(&mut self, key: &str) -> Result<(usize, &'a str)> {
        let (off, line) = self.line()?;
        match line.split_once('=') {
            Some((k, v)) if k == key => Ok((off, v)),
            _ => Err(Error::format(off, format!("expected `{key}=...`, found {line:?}"))),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn parse_usize(off: usize, what: &str, s: &str) -> Result<usize> {
    s.parse::<usize>()
        .map_err(|_| Error::format(off, format!("{what}: not a non-negative integer: {s:?}")))
}

fn parse_layer(off: usize, text: &str) -> Result<LayerSpec> {
    let mut tokens = text.split(' ');
    let kind = tokens.next().unwrap_or_default();
    let mut fields = Vec::new();
    for tok in tokens {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::format(off, format!("malformed layer field {tok:?}")))?;
        fields.push((k, v));
    }
    let get = |key: &str| -> Result<&str> {
        fields
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::format(off, format!("{kind} layer missing `{key}`")))
    };
    let allow = |keys: &[&str]| -> Result<()> {
        for (k, _) in &fields {
            if !keys.contains(k) {
                return Err(Error::format(off, format!("unknown {kind} field `{k}`")));
            }
        }
        Ok(())
    };
    let act = |s: &str| Activation::parse(s).ok_or_else(|| Error::format(off, format!("unknown activation {s:?}")));
    Ok(match kind {
        "conv" => {
            allow(&["in", "out", "k", "stride", "pad", "act"])?;
            LayerSpec::Conv(ConvSpec {
                in_channels: parse_usize(off, "in", get("in")?)?,
                out_channels: parse_usize(off, "out", get("out")?)?,
                kernel: parse_usize(off, "k", get("k")?)?,
                stride: parse_usize(off, "stride", get("stride")?)?,
                pad: parse_usize(off, "pad", get("pad")?)?,
                activation: act(get("act")?)?,
            })
        }
        "maxpool2" => {
            allow(&[])?;
            LayerSpec::MaxPool2
        }
        "pointwise" => {
            allow(&["act"])?;
            LayerSpec::Pointwise(act(get("act")?)?)
        }
        "detect" => {
            allow(&["grid", "anchors", "classes", "priors"])?;
            let priors = match fields.iter().find(|(k, _)| *k == "priors") {
                Some((_, v)) => AnchorPrior::parse_list(v).map_err(|m| Error::format(off, m))?,
                None => Vec::new(),
            };
            LayerSpec::DetectHead(HeadSpec {
                grid: parse_usize(off, "grid", get("grid")?)?,
                anchors: parse_usize(off, "anchors", get("anchors")?)?,
                classes: parse_usize(off, "classes", get("classes")?)?,
                priors,
            })
        }
        other => return Err(Error::format(off, format!("unknown layer kind {other:?}"))),
    })
}

pub fn from_bytes(bytes: &[u8]) -> Result<(NetworkDescriptor, Option<WeightStore>)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let (off, magic) = cur.line().map_err(|_| Error::format(0, "missing FNET v1 magic line"))?;
    if magic != MAGIC {
        return Err(Error::format(off, format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let (_, name) = cur.keyed("name")?;
    let (off, input) = cur.keyed("input")?;
    let dims: Vec<usize> = input
        .split(',')
        .map(|s| parse_usize(off, "input", s))
        .collect::<Result<_>>()?;
    let input: [usize; 3] = dims
        .try_into()
        .map_err(|_| Error::format(off, "input must have three extents"))?;
    let (off, n) = cur.keyed("layers")?;
    let n = parse_usize(off, "layers", n)?;
    let mut layers = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let (off, text) = cur.keyed("layer")?;
        layers.push(parse_layer(off, text)?);
    }
    let net = NetworkDescriptor::new(name, input, layers).map_err(|e| Error::format(off, e.to_string()))?;

    let (off, weights) = cur.keyed("weights")?;
    match weights {
        "none" => {
            if cur.pos != bytes.len() {
                return Err(Error::format(cur.pos, "trailing bytes after descriptor-only file"));
            }
            return Ok((net, None));
        }
        "dense" => {}
        other => return Err(Error::format(off, format!("weights must be `dense` or `none`, got {other:?}"))),
    }

    let convs: Vec<(usize, ConvSpec)> = net.conv_layers().map(|(i, c)| (i, c.clone())).collect();
    let (off, flags) = cur.keyed("masks")?;
    if flags.len() != convs.len() || !flags.bytes().all(|b| b == b'0' || b == b'1') {
        return Err(Error::format(
            off,
            format!("masks needs one 0/1 flag per conv layer ({}), got {flags:?}", convs.len()),
        ));
    }
    let (off, sentinel) = cur.line()?;
    if sentinel != "WEIGHTS" {
        return Err(Error::format(off, format!("expected WEIGHTS sentinel, found {sentinel:?}")));
    }

    let mut layer_weights: Vec<Option<ConvWeights>> = vec![None; net.layers().len()];
    for (i, conv) in &convs {
        let raw = cur.take(4 * (conv.kernel_len() + conv.out_channels), "weights")?;
        let mut values = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        let kernel: Vec<f32> = values.by_ref().take(conv.kernel_len()).collect();
        let bias: Vec<f32> = values.collect();
        let kernel = Tensor::new(conv.kernel_shape().to_vec(), kernel)?;
        layer_weights[*i] = Some(ConvWeights::new(kernel, bias));
    }

    let off = cur.pos;
    let sentinel = cur.take(6, "MASKS sentinel")?;
    if sentinel != b"MASKS\n" {
        return Err(Error::format(off, "expected MASKS sentinel"));
    }
    let mask_bits: usize = convs
        .iter()
        .zip(flags.bytes())
        .filter(|(_, f)| *f == b'1')
        .map(|((_, c), _)| c.kernel_len())
        .sum();
    let packed = cur.take(mask_bits.div_ceil(8), "mask bits")?;
    if cur.pos != bytes.len() {
        return Err(Error::format(cur.pos, "trailing bytes after mask section"));
    }
    let mut bits = packed.iter().flat_map(|b| (0..8).rev().map(move |k| (b >> k) & 1 == 1));
    for ((i, conv), flag) in convs.iter().zip(flags.bytes()) {
        if flag == b'1' {
            let mask: Vec<bool> = bits.by_ref().take(conv.kernel_len()).collect();
            let w = layer_weights[*i].as_mut().expect("filled above");
            if w.kernel().data().iter().zip(&mask).any(|(&v, &m)| !m && v != 0.0) {
                return Err(Error::format(off, format!("layer {i}: nonzero weight under a zero mask bit")));
            }
            w.set_mask(mask)?;
        }
    }
    Ok((net, Some(WeightStore::from_layers(layer_weights))))
}
