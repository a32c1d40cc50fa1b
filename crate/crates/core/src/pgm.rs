//! 8-bit binary PGM (P5) dumps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Min-max scale `values` to 0..=255; a constant image maps to 0.
pub fn encode(width: usize, height: usize, values: &[f32]) -> Result<Vec<u8>> {
    if values.len() != width * height || values.is_empty() {
        return Err(Error::Data(format!(
            "{} values for a {width}x{height} image",
            values.len()
        )));
    }
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn write(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    fs::write(path, encode(width, height, values)?)?;
    Ok(())
}

/// Place `tiles` (each `width x height`) side by side.
pub fn tile_horizontally(tiles: &[&[f32]], width: usize, height: usize) -> Vec<f32> {
    let n = tiles.len();
    let mut out = vec![0.0; n * width * height];
    for (i, tile) in tiles.iter().enumerate() {
        for y in 0..height {
            let dst = y * n * width + i * width;
            out[dst..dst + width].copy_from_slice(&tile[y * width..(y + 1) * width]);
        }
    }
    out
}
