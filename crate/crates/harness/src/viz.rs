//! Binary PGM/PPM renderers for scalar maps and class overlays.

use std::fs;
use std::path::Path;

use maco_core::domain::{ImageGrid, LabelGrid, GC, UNLABELED};

use crate::error::{HarnessError, Result};

/// Overlay colours by class code; background and unlabelled pixels show the image.
pub const PALETTE: [(u8, [u8; 3]); 6] = [
    (1, [230, 25, 75]),   // red
    (2, [60, 180, 75]),   // green
    (3, [0, 130, 200]),   // blue
    (4, [255, 225, 25]),  // yellow
    (5, [145, 30, 180]),  // purple
    (GC, [240, 50, 230]), // magenta
];

pub const OVERLAY_ALPHA: f64 = 0.5;

pub fn color_of(code: u8) -> Option<[u8; 3]> {
    PALETTE.iter().find(|(c, _)| *c == code).map(|(_, rgb)| *rgb)
}

/// P5 bytes for values in [0, 1], written as `round(v * 255)` after clamping.
pub fn encode_pgm(height: usize, width: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != height * width {
        return Err(HarnessError::Data(format!("{} values for a {height}x{width} map", values.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

fn normalized(img: &ImageGrid) -> Vec<f64> {
    let lo = img.data().iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let hi = img.data().iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let span = if hi > lo { hi - lo } else { 1.0 };
    img.data().iter().map(|&v| (v as f64 - lo) / span).collect()
}

/// P5 bytes of an image rescaled from its own min/max to 0..255.
pub fn encode_image_pgm(img: &ImageGrid) -> Result<Vec<u8>> {
    encode_pgm(img.height(), img.width(), &normalized(img))
}

/// P6 bytes: the grey image with labelled pixels blended toward their palette colour.
pub fn encode_overlay(img: &ImageGrid, labels: &LabelGrid) -> Result<Vec<u8>> {
    if (img.height(), img.width()) != labels.dims() {
        return Err(HarnessError::Data("overlay image and labels differ in size".into()));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    for (grey, &code) in normalized(img).iter().zip(labels.labels()) {
        let g = grey * 255.0;
        let rgb = match (code, color_of(code)) {
            (UNLABELED, _) | (_, None) => [g; 3],
            (_, Some(c)) => c.map(|v| (1.0 - OVERLAY_ALPHA) * g + OVERLAY_ALPHA * v as f64),
        };
        out.extend(rgb.map(|v| v.round().clamp(0.0, 255.0) as u8));
    }
    Ok(out)
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(fs::write(path, bytes)?)
}

/// Parsed binary PNM: magic, width, height, maxval and the raw payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Pnm {
    pub magic: String,
    pub width: usize,
    pub height: usize,
    pub maxval: usize,
    pub data: Vec<u8>,
}

pub fn parse_pnm(bytes: &[u8]) -> Result<Pnm> {
    let bad = |m: &str| HarnessError::Data(format!("pnm: {m}"));
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
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(bad("unsupported magic")),
    };
    let data = bytes.get(pos..).ok_or_else(|| bad("missing payload"))?.to_vec();
    if data.len() != width * height * channels {
        return Err(bad("payload size mismatch"));
    }
    Ok(Pnm { magic: fields[0].clone(), width, height, maxval, data })
}
