//! Images and tables written next to the arrays.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{CliError, Result};

/// 8-bit grayscale PNG of `image` (rows are depths), mapping `lo..hi` to
/// black..white; NaN is black.
pub fn gray_png(image: &Array2<f64>, lo: f64, hi: f64) -> Result<Vec<u8>> {
    let (h, w) = image.dim();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels: Vec<u8> = image
        .iter()
        .map(|v| if v.is_finite() { (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8 } else { 0 })
        .collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(&pixels).map_err(png_err)?;
    }
    Ok(out)
}

fn png_err(e: png::EncodingError) -> CliError {
    CliError::Validation(format!("png encoding: {e}"))
}

/// CSV with a header row taken from the record's field names.
pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Validation(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| CliError::Validation(format!("csv: {e}")))
}

/// One JSON document per line.
pub fn json_lines<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).map_err(|e| CliError::Validation(format!("json: {e}")))?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn pretty_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v).map_err(|e| CliError::Validation(format!("json: {e}")))?;
    out.push(b'\n');
    Ok(out)
}
