//! Binary portable pixmaps (P6, RGB) and graymaps (P5), 8-bit only.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::motion::Frame;

/// `frame_000042.ppm`
pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.ppm")
}

/// Encodes a frame; values are rounded to the nearest of 256 levels.
pub fn encode(frame: &Frame) -> Vec<u8> {
    let [c, h, w] = frame.shape();
    let magic = if c == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let data = frame.pixels().data();
    let plane = h * w;
    out.reserve(c * plane);
    for p in 0..plane {
        for ch in 0..c {
            out.push((data[ch * plane + p] * 255.0).round() as u8);
        }
    }
    out
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::InvalidArgument(format!("PNM header: expected a number at byte {start}")))
}

pub fn decode(bytes: &[u8], index: usize) -> Result<Frame> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(Error::InvalidArgument("not a binary P5/P6 file".into())),
    };
    let mut pos = 2;
    let w = header_token(bytes, &mut pos)?;
    let h = header_token(bytes, &mut pos)?;
    let maxval = header_token(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::InvalidArgument(format!("only maxval 255 is supported, got {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::InvalidArgument("image has a zero extent".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = w * h * channels;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::InvalidArgument(format!("raster truncated: need {n} bytes after offset {pos}")))?;
    let plane = w * h;
    let mut planar = vec![0u8; n];
    for p in 0..plane {
        for ch in 0..channels {
            planar[ch * plane + p] = raster[p * channels + ch];
        }
    }
    Frame::from_u8(index, [channels, h, w], &planar)
}

pub fn write_frame(dir: &Path, frame: &Frame) -> Result<PathBuf> {
    let path = dir.join(frame_file_name(frame.index()));
    std::fs::write(&path, encode(frame)).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_frame(path: &Path, index: usize) -> Result<Frame> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, index).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

/// Frame files of a directory (`frame_<n>.ppm`), sorted by `n`.
pub fn list_frames(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(num) = name.strip_prefix("frame_").and_then(|s| s.strip_suffix(".ppm")) else {
            continue;
        };
        if let Ok(index) = num.parse::<usize>() {
            frames.push((index, entry.path()));
        }
    }
    frames.sort();
    if frames.is_empty() {
        return Err(Error::InvalidArgument(format!("no frame_*.ppm files in {}", dir.display())));
    }
    Ok(frames)
}

/// Lazily reads a frame directory in index order.
pub fn read_frames(dir: &Path) -> Result<impl Iterator<Item = Result<Frame>>> {
    Ok(list_frames(dir)?
        .into_iter()
        .map(|(index, path)| read_frame(&path, index).map_err(|e| Error::at_frame(index, e))))
}
