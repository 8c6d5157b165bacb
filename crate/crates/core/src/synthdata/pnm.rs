use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;

use super::SynthError;

/// A decoded binary PGM (`P5`) or PPM (`P6`) image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub maxval: u16,
    /// Samples in `C×H×W` order.
    pub samples: Vec<u16>,
}

impl Pnm {
    /// Samples scaled to `[0, 1]` as a `C×H×W` tensor.
    pub fn to_tensor(&self) -> Result<Tensor, SynthError> {
        let m = self.maxval as f64;
        Ok(Tensor::new(
            &[self.channels, self.height, self.width],
            self.samples.iter().map(|&s| s as f64 / m).collect(),
        )?)
    }
}

fn encode(channels: usize, h: usize, w: usize, maxval: u16, planar: &[u16]) -> Vec<u8> {
    let magic = if channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n{maxval}\n").into_bytes();
    let plane = h * w;
    for px in 0..plane {
        for c in 0..channels {
            let s = planar[c * plane + px];
            if maxval > 255 {
                out.extend_from_slice(&s.to_be_bytes());
            } else {
                out.push(s as u8);
            }
        }
    }
    out
}

/// Writes a `C×H×W` image in `[0, 1]` (values clamped) as 16-bit PGM (C = 1)
/// or PPM (C = 3).
pub fn write_pnm(path: &Path, image: &Tensor) -> Result<(), SynthError> {
    let [c, h, w] = *image.shape() else {
        return Err(SynthError::Config(format!("expected C×H×W, got {:?}", image.shape())));
    };
    if c != 1 && c != 3 {
        return Err(SynthError::Config(format!("cannot store {c} channels as PGM/PPM")));
    }
    let samples: Vec<u16> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    fs::write(path, encode(c, h, w, u16::MAX, &samples))?;
    Ok(())
}

/// Writes a 0/1 mask as an 8-bit PGM with maxval 1.
pub fn write_mask_pgm(path: &Path, mask: &[u8], h: usize, w: usize) -> Result<(), SynthError> {
    let samples: Vec<u16> = mask.iter().map(|&m| m as u16).collect();
    fs::write(path, encode(1, h, w, 1, &samples))?;
    Ok(())
}

pub fn read_pnm(path: &Path) -> Result<Pnm, SynthError> {
    let bytes = fs::read(path)?;
    let fail = |reason: &str| SynthError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    };
    // Header: magic, width, height, maxval, separated by whitespace, then one
    // whitespace byte before the raster.
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
            return Err(fail("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| fail("non-ASCII header"))?);
    }
    pos += 1;
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(fail("not a binary PGM/PPM")),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| fail("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(fail("maxval out of range"));
    }
    let wide = maxval > 255;
    let plane = h * w;
    let expected = plane * channels * if wide { 2 } else { 1 };
    let raster = bytes
        .get(pos..)
        .filter(|r| r.len() == expected)
        .ok_or_else(|| fail("raster size mismatch"))?;
    let mut samples = vec![0u16; plane * channels];
    for px in 0..plane {
        for c in 0..channels {
            let i = px * channels + c;
            samples[c * plane + px] = if wide {
                u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]])
            } else {
                raster[i] as u16
            };
        }
    }
    Ok(Pnm {
        channels,
        height: h,
        width: w,
        maxval: maxval as u16,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_at_16_bit_precision() {
        let dir = tempfile::tempdir().unwrap();
        for c in [1, 3] {
            let data: Vec<f64> = (0..c * 4 * 5).map(|i| (i as f64 * 0.37).fract()).collect();
            let img = Tensor::new(&[c, 4, 5], data).unwrap();
            let path = dir.path().join(format!("img{c}.pnm"));
            write_pnm(&path, &img).unwrap();
            let back = read_pnm(&path).unwrap();
            assert_eq!((back.channels, back.height, back.width, back.maxval), (c, 4, 5, 65535));
            let t = back.to_tensor().unwrap();
            for (a, b) in t.data().iter().zip(img.data()) {
                assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
            }
        }
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.pgm");
        let mask = [0, 1, 1, 0, 0, 1];
        write_mask_pgm(&path, &mask, 2, 3).unwrap();
        let back = read_pnm(&path).unwrap();
        assert_eq!(back.maxval, 1);
        assert_eq!(back.samples, vec![0, 1, 1, 0, 0, 1]);
    }

    #[test]
    fn rejects_truncated_raster() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        fs::write(&path, b"P5\n2 2\n65535\n\x00\x01").unwrap();
        assert!(matches!(read_pnm(&path), Err(SynthError::Format { .. })));
    }
}
