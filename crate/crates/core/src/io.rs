//! Frame loading and depth-map output.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::sweep::DepthMap;

fn decode_error(path: &Path, reason: impl ToString) -> Error {
    Error::DecodeError {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Decodes a PNG or PGM file to intensities in `[0, 1]`. Color input is
/// converted with BT.601 luma weights.
pub fn load_image(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| decode_error(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        image::DynamicImage::ImageLuma8(g) => {
            g.into_raw().into_iter().map(|v| v as f32 / 255.0).collect()
        }
        image::DynamicImage::ImageLuma16(g) => g
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 65535.0)
            .collect(),
        other => other
            .to_rgb8()
            .pixels()
            .map(|p| {
                let [r, g, b] = p.0.map(|c| c as f32);
                ((0.299 * r + 0.587 * g + 0.114 * b) / 255.0).clamp(0.0, 1.0)
            })
            .collect(),
    };
    GrayImage::new(w, h, data)
}

fn is_frame_file(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "pgm")
    )
}

/// Lists the frame files of `input`: every PNG/PGM in a directory, or the
/// files of the parent directory whose names start with the given prefix
/// (`frames/img_` matches `frames/img_000.png`, ...). Sorted by file name.
pub fn frame_paths(input: &Path) -> Result<Vec<PathBuf>> {
    let (dir, prefix) = if input.is_dir() {
        (input.to_path_buf(), String::new())
    } else {
        let dir = input
            .parent()
            .filter(|d| !d.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let prefix = input
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        (dir.to_path_buf(), prefix)
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_frame_file(p))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(&prefix))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

/// Loads at least two equally sized frames; the first is the reference.
pub fn load_frames(input: &Path) -> Result<Vec<GrayImage>> {
    let paths = frame_paths(input)?;
    if paths.len() < 2 {
        return Err(Error::TooFewFrames(paths.len()));
    }
    let frames: Vec<GrayImage> = paths.iter().map(|p| load_image(p)).collect::<Result<_>>()?;
    let first = &frames[0];
    for (p, f) in paths.iter().zip(&frames).skip(1) {
        if !f.same_size(first) {
            return Err(Error::SizeMismatch(format!(
                "{} is {}x{}, reference is {}x{}",
                p.display(),
                f.width(),
                f.height(),
                first.width(),
                first.height()
            )));
        }
    }
    Ok(frames)
}

/// Writes an 8-bit grayscale PGM.
pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    image::GrayImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .ok_or_else(|| Error::SizeMismatch("frame buffer".into()))?
        .save(path)
        .map_err(|e| decode_error(path, e))
}

/// PFM bytes: one channel, little-endian (scale −1.0), rows bottom to top.
pub fn encode_pfm(width: usize, height: usize, data: &[f32]) -> Result<Vec<u8>> {
    if data.len() != width * height {
        return Err(Error::SizeMismatch(format!(
            "{} values for {width}x{height}",
            data.len()
        )));
    }
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    out.reserve(data.len() * 4);
    for row in data.chunks(width.max(1)).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses single-channel PFM of either endianness.
pub fn decode_pfm(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let bad = |m: &str| decode_error(Path::new("<pfm>"), m);
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields
            .push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    // Exactly one whitespace byte separates the header from the data.
    pos += 1;
    if fields[0] != "Pf" {
        return Err(bad("not a single-channel PFM"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f32 = fields[3].parse().map_err(|_| bad("bad scale"))?;
    let payload = bytes.get(pos..).ok_or_else(|| bad("missing data"))?;
    if payload.len() != width * height * 4 {
        return Err(bad("data length does not match header"));
    }
    let mut rows: Vec<Vec<f32>> = payload
        .chunks_exact(4 * width.max(1))
        .map(|row| {
            row.chunks_exact(4)
                .map(|b| {
                    let b = [b[0], b[1], b[2], b[3]];
                    if scale < 0.0 {
                        f32::from_le_bytes(b)
                    } else {
                        f32::from_be_bytes(b)
                    }
                })
                .collect()
        })
        .collect();
    rows.reverse();
    Ok((width, height, rows.concat()))
}

pub fn write_pfm(map: &DepthMap, path: &Path) -> Result<()> {
    fs::write(path, encode_pfm(map.width, map.height, &map.inverse_depth)?)?;
    Ok(())
}

/// Reads a depth map written by [`write_pfm`]; confidence is not stored and
/// comes back as zero.
pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(path)?;
    let (width, height, inverse_depth) = decode_pfm(&bytes).map_err(|e| match e {
        Error::DecodeError { reason, .. } => decode_error(path, reason),
        other => other,
    })?;
    Ok(DepthMap {
        width,
        height,
        confidence: vec![0.0; inverse_depth.len()],
        inverse_depth,
    })
}

// Viridis sampled at nine evenly spaced stops.
const VIRIDIS: [[f32; 3]; 9] = [
    [68.0, 1.0, 84.0],
    [71.0, 44.0, 122.0],
    [59.0, 81.0, 139.0],
    [44.0, 113.0, 142.0],
    [33.0, 144.0, 141.0],
    [39.0, 173.0, 129.0],
    [92.0, 200.0, 99.0],
    [170.0, 220.0, 50.0],
    [253.0, 231.0, 37.0],
];

/// Viridis color for `t` in `[0, 1]`.
pub fn colormap(t: f32) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f32;
    let i = (t.floor() as usize).min(VIRIDIS.len() - 2);
    let f = t - i as f32;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    [0, 1, 2].map(|c| (a[c] + f * (b[c] - a[c])).round() as u8)
}

/// Near = bright; invalid pixels are black.
pub fn write_preview(map: &DepthMap, path: &Path) -> Result<()> {
    let valid = map.inverse_depth.iter().copied().filter(|v| *v > 0.0);
    let (lo, hi) = valid.fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = Vec::with_capacity(map.inverse_depth.len() * 3);
    for &v in &map.inverse_depth {
        bytes.extend_from_slice(&if v > 0.0 {
            colormap((v - lo) / span)
        } else {
            [0, 0, 0]
        });
    }
    image::RgbImage::from_raw(map.width as u32, map.height as u32, bytes)
        .ok_or_else(|| Error::SizeMismatch("preview buffer".into()))?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| decode_error(path, e))
}
