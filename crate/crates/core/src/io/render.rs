//! Binary PGM / PPM rendering of parameter maps.

use std::path::Path;

use crate::error::{Error, Result};

fn to_byte(t: f64) -> u8 {
    if t.is_nan() {
        return 0;
    }
    (t.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn check(len: usize, mask: &[bool], nx: usize, ny: usize) -> Result<()> {
    if len != nx * ny || mask.len() != nx * ny {
        return Err(Error::ShapeMismatch(format!("{len} values / {} mask for {nx}x{ny}", mask.len())));
    }
    Ok(())
}

/// P5 grayscale: `[lo, hi]` maps linearly to `0..=255`, clamped; masked-out pixels are 0.
pub fn render_gray(map: &[f64], mask: &[bool], nx: usize, ny: usize, lo: f64, hi: f64) -> Result<Vec<u8>> {
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::BadWindow { lo, hi });
    }
    check(map.len(), mask, nx, ny)?;
    let mut out = format!("P5\n{nx} {ny}\n255\n").into_bytes();
    out.extend(map.iter().zip(mask).map(|(v, m)| if *m { to_byte((v - lo) / (hi - lo)) } else { 0 }));
    Ok(out)
}

/// P6 colour from per-pixel RGB in `[0, 1]`; masked-out pixels are black.
pub fn render_dec(rgb: &[[f64; 3]], mask: &[bool], nx: usize, ny: usize) -> Result<Vec<u8>> {
    check(rgb.len(), mask, nx, ny)?;
    let mut out = format!("P6\n{nx} {ny}\n255\n").into_bytes();
    for (c, m) in rgb.iter().zip(mask) {
        if *m {
            out.extend(c.iter().map(|v| to_byte(*v)));
        } else {
            out.extend([0, 0, 0]);
        }
    }
    Ok(out)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(Error::at(path))
}
