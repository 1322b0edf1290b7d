use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB image with `f64` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    /// 8-bit RGB PNG encoding.
    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        use image::ImageEncoder;
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out)
            .write_image(&self.to_rgb8(), self.width as u32, self.height as u32, image::ExtendedColorType::Rgb8)
            .map_err(|source| Error::Image {
                path: "<memory>".into(),
                source,
            })?;
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        fs::write(path, self.png_bytes()?).map_err(|e| Error::io(path, e))
    }

    /// Load a PNG; an alpha channel is composited over `background`.
    pub fn load_png(path: &Path, background: [f64; 3]) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .into_rgba8();
        let (w, h) = img.dimensions();
        let mut data = Vec::with_capacity(w as usize * h as usize * 3);
        for p in img.pixels() {
            let a = p[3] as f64 / 255.0;
            for c in 0..3 {
                data.push(p[c] as f64 / 255.0 * a + background[c] * (1.0 - a));
            }
        }
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data,
        })
    }

    /// `.npy` v1.0 dump as little-endian `f4` with shape `(H, W, 3)`.
    pub fn to_npy(&self) -> Vec<u8> {
        let dict = format!(
            "{{'descr': '<f4', 'fortran_order': False, 'shape': ({}, {}, 3), }}",
            self.height, self.width
        );
        // Header (magic 6 + version 2 + len 2 + dict + '\n') padded to 64 bytes.
        let unpadded = 10 + dict.len() + 1;
        let pad = (64 - unpadded % 64) % 64;
        let header = format!("{dict}{}\n", " ".repeat(pad));
        let mut out = Vec::with_capacity(10 + header.len() + self.data.len() * 4);
        out.extend_from_slice(b"\x93NUMPY\x01\x00");
        out.extend_from_slice(&(header.len() as u16).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn save_npy(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_npy()).map_err(|e| Error::io(path, e))
    }

    pub fn resized_box(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                let (x0, x1) = (x * self.width / width, ((x + 1) * self.width / width).max(x * self.width / width + 1));
                let (y0, y1) = (y * self.height / height, ((y + 1) * self.height / height).max(y * self.height / height + 1));
                let mut acc = [0.0; 3];
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        let p = self.pixel(xx, yy);
                        for c in 0..3 {
                            acc[c] += p[c];
                        }
                    }
                }
                let n = ((x1 - x0) * (y1 - y0)) as f64;
                out.set_pixel(x, y, acc.map(|v| v / n));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn npy_header_is_aligned() {
        let img = Image::filled(3, 2, [0.25, 0.5, 1.0]);
        let bytes = img.to_npy();
        assert_eq!(&bytes[..6], b"\x93NUMPY");
        let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + hlen) % 64, 0);
        assert_eq!(bytes.len(), 10 + hlen + 18 * 4);
        let first = f32::from_le_bytes(bytes[10 + hlen..14 + hlen].try_into().unwrap());
        assert_eq!(first, 0.25);
    }

    #[test]
    fn png_roundtrip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let mut img = Image::zeros(4, 3);
        img.set_pixel(2, 1, [1.0, 0.5, 0.0]);
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path, [0.0; 3]).unwrap();
        assert_eq!(back.width, 4);
        let p = back.pixel(2, 1);
        assert_eq!(p[0], 1.0);
        assert!((p[1] - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn box_downsample_averages() {
        let mut img = Image::zeros(2, 2);
        img.set_pixel(0, 0, [1.0, 1.0, 1.0]);
        let small = img.resized_box(1, 1);
        assert_eq!(small.pixel(0, 0), [0.25; 3]);
    }
}
