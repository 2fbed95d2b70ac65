//! RGB image buffer with float channels in [0,1], plus PNG round-tripping.
//!
//! The pipeline quantizes every frame through 8-bit as soon as it enters the
//! view set, so a resumed run that reloads checkpointed PNGs sees exactly the
//! same pixel data as the uninterrupted run.

use crate::error::EvoError;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    /// Row-major, `width * height` entries.
    pub data: Vec<[f32; 3]>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![[0.0; 3]; width * height] }
    }

    pub fn filled(width: usize, height: usize, color: [f32; 3]) -> Self {
        Self { width, height, data: vec![color; width * height] }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, c: [f32; 3]) {
        self.data[y * self.width + x] = c;
    }

    /// Bilinear sample at continuous pixel coordinates, clamped to the image.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> [f32; 3] {
        let u = u.clamp(0.0, (self.width - 1) as f64);
        let v = v.clamp(0.0, (self.height - 1) as f64);
        let x0 = u.floor() as usize;
        let y0 = v.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (u - x0 as f64) as f32;
        let fy = (v - y0 as f64) as f32;
        let mut out = [0.0f32; 3];
        for c in 0..3 {
            let top = self.pixel(x0, y0)[c] * (1.0 - fx) + self.pixel(x1, y0)[c] * fx;
            let bot = self.pixel(x0, y1)[c] * (1.0 - fx) + self.pixel(x1, y1)[c] * fx;
            out[c] = top * (1.0 - fy) + bot * fy;
        }
        out
    }

    /// Round-trip through 8-bit quantization in place.
    pub fn quantize_u8(&mut self) {
        for px in &mut self.data {
            for c in px.iter_mut() {
                let q = (c.clamp(0.0, 1.0) * 255.0).round() as u8;
                *c = q as f32 / 255.0;
            }
        }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 3);
        for px in &self.data {
            for c in px {
                out.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self, EvoError> {
        if bytes.len() != width * height * 3 {
            return Err(EvoError::Format(format!(
                "rgb byte length {} does not match {}x{}",
                bytes.len(),
                width,
                height
            )));
        }
        let data = bytes
            .chunks_exact(3)
            .map(|c| [c[0] as f32 / 255.0, c[1] as f32 / 255.0, c[2] as f32 / 255.0])
            .collect();
        Ok(Self { width, height, data })
    }

    pub fn save_png(&self, path: &Path) -> Result<(), EvoError> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_u8())
            .ok_or_else(|| EvoError::Format("image buffer size mismatch".into()))?;
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| EvoError::Format(format!("png encode {}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Self, EvoError> {
        let img = image::open(path)
            .map_err(|e| EvoError::Format(format!("png decode {}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_u8(w, h, img.as_raw())
    }

    /// Bilinear resample to a new size (pixel-center aligned).
    pub fn resize_bilinear(&self, width: usize, height: usize) -> ImageRgb {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = ImageRgb::new(width, height);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for y in 0..height {
            for x in 0..width {
                let u = (x as f64 + 0.5) * sx - 0.5;
                let v = (y as f64 + 0.5) * sy - 0.5;
                out.set_pixel(x, y, self.sample_bilinear(u, v));
            }
        }
        out
    }

    /// Mean absolute difference over all pixels and channels.
    pub fn mean_abs_diff(&self, other: &ImageRgb) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        let mut acc = 0.0f64;
        for (a, b) in self.data.iter().zip(&other.data) {
            for c in 0..3 {
                acc += (a[c] as f64 - b[c] as f64).abs();
            }
        }
        acc / (self.data.len() as f64 * 3.0)
    }

    /// PSNR in dB for dynamic range 1. Identical images give infinity.
    pub fn psnr(&self, other: &ImageRgb) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        let mut mse = 0.0f64;
        for (a, b) in self.data.iter().zip(&other.data) {
            for c in 0..3 {
                let d = a[c] as f64 - b[c] as f64;
                mse += d * d;
            }
        }
        mse /= self.data.len() as f64 * 3.0;
        if mse == 0.0 {
            f64::INFINITY
        } else {
            -10.0 * mse.log10()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_after_quantization() {
        let mut img = ImageRgb::new(5, 3);
        for (i, px) in img.data.iter_mut().enumerate() {
            *px = [(i as f32 * 0.07) % 1.0, 0.5, 1.0 - (i as f32 * 0.05) % 1.0];
        }
        img.quantize_u8();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        img.save_png(&path).unwrap();
        let back = ImageRgb::load_png(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let img = ImageRgb::filled(4, 4, [0.25, 0.5, 0.75]);
        assert!(img.psnr(&img).is_infinite());
    }

    #[test]
    fn bilinear_center_matches_pixel() {
        let mut img = ImageRgb::new(2, 2);
        img.set_pixel(1, 0, [1.0, 0.0, 0.0]);
        let s = img.sample_bilinear(1.0, 0.0);
        assert_eq!(s, [1.0, 0.0, 0.0]);
        let mid = img.sample_bilinear(0.5, 0.0);
        assert!((mid[0] - 0.5).abs() < 1e-6);
    }
}
