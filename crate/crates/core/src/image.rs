//! 8-bit grayscale frames and binary PGM (P5) files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height} image with {} pixels",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, v: u8) -> Self {
        Self { width, height, pixels: vec![v; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64).collect()
    }

    /// `factor × factor` box-filter downsampling, as real values.
    pub fn downsample(&self, factor: usize) -> Result<(usize, usize, Vec<f64>)> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot downsample {}x{} by {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0u32;
                for dy in 0..factor {
                    for dx in 0..factor {
                        s += self.get(x * factor + dx, y * factor + dy) as u32;
                    }
                }
                out[y * w + x] = s as f64 * norm;
            }
        }
        Ok((w, h, out))
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("pgm", d);
        let mut pos = 0;
        let mut token = || -> Result<String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P5" {
            return Err(bad("not a binary PGM"));
        }
        let num = |s: String| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
        let w = num(token()?)?;
        let h = num(token()?)?;
        let maxval = num(token()?)?;
        if maxval != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        // exactly one whitespace byte separates header and raster
        let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
        if data.len() != w * h {
            return Err(bad(&format!("raster has {} bytes, expected {}", data.len(), w * h)));
        }
        GrayImage::new(w, h, data.to_vec())
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_pgm(&bytes).map_err(|e| match e {
            Error::Format { detail, .. } => Error::format(format!("pgm {}", path.display()), detail),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_and_comments() {
        let img = GrayImage::new(3, 2, vec![0, 10, 255, 7, 8, 9]).unwrap();
        assert_eq!(GrayImage::decode_pgm(&img.encode_pgm()).unwrap(), img);
        let mut with_comment = b"P5\n# made by hand\n3 2\n255\n".to_vec();
        with_comment.extend_from_slice(img.pixels());
        assert_eq!(GrayImage::decode_pgm(&with_comment).unwrap(), img);
        assert!(GrayImage::decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(GrayImage::decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn downsample_averages_blocks() {
        let img = GrayImage::new(4, 2, vec![0, 2, 4, 4, 2, 0, 4, 4]).unwrap();
        let (w, h, v) = img.downsample(2).unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(v, vec![1.0, 4.0]);
    }
}
