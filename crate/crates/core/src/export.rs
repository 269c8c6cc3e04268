//! Portable artifact writers: binary PPM images, binary PGM masks and XYZ
//! point-cloud text. Everything is viewable with stock tools and parseable
//! back in tests.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("buffer has {got} values, expected {want}")]
    Shape { got: usize, want: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ExportError>;

/// Maps a unit-range intensity to a byte, clamping out-of-range values.
fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn check_len(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(ExportError::Shape { got, want });
    }
    Ok(())
}

/// Writes a binary PPM (`P6`). `rgb` is planar `(3, h, w)` — the per-view
/// image layout — with intensities in `[0, 1]`.
pub fn write_ppm(path: &Path, rgb: &[f64], h: usize, w: usize) -> Result<()> {
    check_len(rgb.len(), 3 * h * w)?;
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let plane = h * w;
    let mut bytes = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            bytes.push(to_byte(rgb[c * plane + p]));
        }
    }
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

/// Writes a binary PGM (`P5`) from a row-major `(h, w)` buffer in `[0, 1]`.
pub fn write_pgm(path: &Path, gray: &[f64], h: usize, w: usize) -> Result<()> {
    check_len(gray.len(), h * w)?;
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = gray.iter().map(|&v| to_byte(v)).collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

/// Writes one `x y z` line per point.
pub fn write_xyz(path: &Path, points: &[[f64; 3]]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for p in points {
        writeln!(out, "{:.4} {:.4} {:.4}", p[0], p[1], p[2])?;
    }
    out.flush()?;
    Ok(())
}
