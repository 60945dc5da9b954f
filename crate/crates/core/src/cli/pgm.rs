//! Binary greyscale PGM (P5) output.

use std::io::Write;
use std::path::Path;

use crate::error::{Result, WauError};

/// Min-max normalize to `0..=255`. A constant image maps to 128 everywhere.
pub fn normalize(values: &[f64]) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|&v| (255.0 * (v - lo) / (hi - lo)).round() as u8)
        .collect()
}

pub fn encode(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(WauError::dim("pgm", format!("{} pixels for {width}x{height}", pixels.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Normalize `values` (row-major `height x width`) and write them to `path`.
pub fn write(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let bytes = encode(width, height, &normalize(values))?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_is_mid_grey() {
        assert_eq!(normalize(&[0.3; 6]), vec![128; 6]);
    }

    #[test]
    fn range_maps_to_full_scale() {
        assert_eq!(normalize(&[1.0, 2.0, 3.0]), vec![0, 128, 255]);
    }

    #[test]
    fn header_layout() {
        let b = encode(3, 2, &[0, 1, 2, 3, 4, 5]).unwrap();
        assert_eq!(&b[..11], b"P5\n3 2\n255\n");
        assert_eq!(&b[11..], &[0, 1, 2, 3, 4, 5]);
        assert!(encode(2, 2, &[0]).is_err());
    }
}
