//! Grayscale PNG panels: input | reconstruction | anomaly score | ground truth.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{CliError, Result};

const GAP: usize = 2;

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Composes the four columns into one 8-bit image. Intensities are clamped to
/// `[0, 1]`; the score column is scaled by its own maximum.
pub fn compose_panel(
    input: ArrayView2<f32>,
    rec: ArrayView2<f32>,
    score: ArrayView2<f32>,
    truth: ArrayView2<bool>,
) -> Result<Array2<u8>> {
    let (h, w) = input.dim();
    if rec.dim() != (h, w) || score.dim() != (h, w) || truth.dim() != (h, w) {
        return Err(CliError::Other("panel columns must share one shape".into()));
    }
    let smax = score.iter().fold(0f32, |m, &v| m.max(v));
    let mut out = Array2::<u8>::from_elem((h, 4 * w + 3 * GAP), 255);
    for i in 0..h {
        for j in 0..w {
            out[[i, j]] = to_u8(input[[i, j]]);
            out[[i, w + GAP + j]] = to_u8(rec[[i, j]]);
            out[[i, 2 * (w + GAP) + j]] = if smax > 0.0 { to_u8(score[[i, j]] / smax) } else { 0 };
            out[[i, 3 * (w + GAP) + j]] = if truth[[i, j]] { 255 } else { 0 };
        }
    }
    Ok(out)
}

pub fn write_png(path: &Path, img: &Array2<u8>) -> Result<()> {
    let (h, w) = img.dim();
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let data: Vec<u8> = img.iter().copied().collect();
    enc.write_header()
        .and_then(|mut wr| wr.write_image_data(&data))
        .map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}
