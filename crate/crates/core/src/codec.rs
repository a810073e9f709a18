//! Flat binary map format and PGM export.
//!
//! Binary maps are little-endian: `u32` dims (`H, W, D` for feature maps,
//! `H, W` for scalar maps) followed by row-major `f64` values.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numerics::{BinaryMask, FeatureMap, LabelMap, ScalarMap};

fn write_dims<W: Write>(w: &mut W, dims: &[usize]) -> Result<()> {
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf) as usize)
}

fn write_values<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_values<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn write_feature_map<W: Write>(w: &mut W, map: &FeatureMap) -> Result<()> {
    write_dims(w, &[map.height(), map.width(), map.depth()])?;
    write_values(w, map.data())
}

pub fn read_feature_map<R: Read>(r: &mut R) -> Result<FeatureMap> {
    let (h, wd, d) = (read_u32(r)?, read_u32(r)?, read_u32(r)?);
    let n = h
        .checked_mul(wd)
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(|| Error::Format("feature map dims overflow".into()))?;
    FeatureMap::new(h, wd, d, read_values(r, n)?)
}

pub fn write_scalar_map<W: Write>(w: &mut W, map: &ScalarMap) -> Result<()> {
    write_dims(w, &[map.height(), map.width()])?;
    write_values(w, map.data())
}

pub fn read_scalar_map<R: Read>(r: &mut R) -> Result<ScalarMap> {
    let (h, wd) = (read_u32(r)?, read_u32(r)?);
    let n = h
        .checked_mul(wd)
        .ok_or_else(|| Error::Format("scalar map dims overflow".into()))?;
    ScalarMap::new(h, wd, read_values(r, n)?)
}

/// Binary PGM (`P5`, maxval 255).
pub fn write_pgm<W: Write>(w: &mut W, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != height * width {
        return Err(Error::InvalidShape(format!(
            "pgm {height}x{width} with {} pixels",
            pixels.len()
        )));
    }
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(pixels)?;
    Ok(())
}

/// Reads a `P5` PGM with maxval ≤ 255, returning `(height, width, pixels)`.
pub fn read_pgm<R: Read>(r: &mut R) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated pgm header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::Format(format!("not a P5 pgm: {}", fields[0])));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad pgm field {s}")))
    };
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let body = &bytes[pos + 1..];
    if body.len() != width * height {
        return Err(Error::Format(format!(
            "pgm raster has {} bytes, expected {}",
            body.len(),
            width * height
        )));
    }
    Ok((height, width, body.to_vec()))
}

pub fn mask_to_pgm<W: Write>(w: &mut W, mask: &BinaryMask) -> Result<()> {
    let px: Vec<u8> = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_pgm(w, mask.height(), mask.width(), &px)
}

/// Label maps are spread over the grey range so classes are distinguishable.
pub fn labels_to_pgm<W: Write>(w: &mut W, labels: &LabelMap, class_count: usize) -> Result<()> {
    let step = 255 / class_count.max(1);
    let px: Vec<u8> = labels
        .data()
        .iter()
        .map(|&c| (c as usize * step).min(255) as u8)
        .collect();
    write_pgm(w, labels.height(), labels.width(), &px)
}

/// Activation values are scaled by 255 and clamped.
pub fn scalar_to_pgm<W: Write>(w: &mut W, map: &ScalarMap) -> Result<()> {
    let px: Vec<u8> = map
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    write_pgm(w, map.height(), map.width(), &px)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_map_layout_is_little_endian_dims_then_values() {
        let map = FeatureMap::new(1, 2, 1, vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_feature_map(&mut buf, &map).unwrap();
        assert_eq!(buf.len(), 12 + 16);
        assert_eq!(&buf[..12], &[1, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&buf[12..20], &1.0f64.to_le_bytes());
        assert_eq!(read_feature_map(&mut buf.as_slice()).unwrap(), map);
    }

    #[test]
    fn truncated_input_is_an_error() {
        let map = ScalarMap::filled(2, 2, 0.5);
        let mut buf = Vec::new();
        write_scalar_map(&mut buf, &map).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_scalar_map(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn pgm_header_and_body() {
        let mask = BinaryMask::new(2, 3, vec![true, false, false, false, true, true]).unwrap();
        let mut buf = Vec::new();
        mask_to_pgm(&mut buf, &mask).unwrap();
        assert!(buf.starts_with(b"P5\n3 2\n255\n"));
        let (h, w, px) = read_pgm(&mut buf.as_slice()).unwrap();
        assert_eq!((h, w), (2, 3));
        assert_eq!(px, vec![255, 0, 0, 0, 255, 255]);
    }
}
