//! Grayscale image and patch grids, with 8-bit PNG/PGM load/store.
//!
//! All intensities are normalized to `[0, 1]`. File I/O maps `[0, 1]`
//! linearly onto `[0, 255]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major grayscale intensity grid with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    h: usize,
    w: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(h: usize, w: usize, fill: f64) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::InvalidParam(format!(
                "image dimensions must be positive, got {h}x{w}"
            )));
        }
        if !(0.0..=1.0).contains(&fill) {
            return Err(Error::InvalidParam(format!(
                "fill value {fill} outside [0, 1]"
            )));
        }
        Ok(Self {
            h,
            w,
            pixels: vec![fill; h * w],
        })
    }

    pub fn from_pixels(h: usize, w: usize, pixels: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || pixels.len() != h * w {
            return Err(Error::ShapeMismatch {
                expected: format!("{h}x{w} = {} pixels", h * w),
                got: format!("{} pixels", pixels.len()),
            });
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidParam(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self { h, w, pixels })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        debug_assert!((0.0..=1.0).contains(&v), "pixel {v} outside [0,1]");
        self.pixels[y * self.w + x] = v;
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    /// Quantize to row-major 8-bit samples.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_u8(h: usize, w: usize, data: &[u8]) -> Result<Self> {
        let pixels: Vec<f64> = data.iter().map(|&b| f64::from(b) / 255.0).collect();
        Self::from_pixels(h, w, pixels)
    }

    /// Store as 8-bit grayscale; the format follows the file extension
    /// (`.png` or `.pgm`).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf = image::GrayImage::from_raw(self.w as u32, self.h as u32, self.to_u8())
            .expect("buffer length matches dimensions");
        buf.save(path)
            .map_err(|e| Error::Parse {
                what: path.display().to_string(),
                msg: e.to_string(),
            })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::Parse {
                what: path.display().to_string(),
                msg: e.to_string(),
            })?
            .into_luma8();
        Self::from_u8(img.height() as usize, img.width() as usize, img.as_raw())
    }
}

/// How a patch's pixels came to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchMode {
    /// Rendered from a superposition of Gaussian spots.
    GaussianRendered,
    /// Every pixel optimized directly.
    PixelLevel,
}

/// Square intensity grid in `[0, 1]`, the perturbation applied to scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    side: usize,
    pixels: Vec<f64>,
    mode: PatchMode,
}

impl Patch {
    pub const DEFAULT_SIDE: usize = 300;

    pub fn new(side: usize, fill: f64, mode: PatchMode) -> Result<Self> {
        if side == 0 {
            return Err(Error::InvalidParam("patch side must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&fill) {
            return Err(Error::InvalidParam(format!(
                "fill value {fill} outside [0, 1]"
            )));
        }
        Ok(Self {
            side,
            pixels: vec![fill; side * side],
            mode,
        })
    }

    pub fn from_pixels(side: usize, pixels: Vec<f64>, mode: PatchMode) -> Result<Self> {
        if side == 0 || pixels.len() != side * side {
            return Err(Error::ShapeMismatch {
                expected: format!("{side}x{side} = {} pixels", side * side),
                got: format!("{} pixels", pixels.len()),
            });
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidParam(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self { side, pixels, mode })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn mode(&self) -> PatchMode {
        self.mode
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.side + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        debug_assert!((0.0..=1.0).contains(&v), "pixel {v} outside [0,1]");
        self.pixels[y * self.side + x] = v;
    }

    /// Bilinear sample at real coordinates `(x, y)` in pixel units.
    /// Returns `None` outside the patch support.
    #[inline]
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f64> {
        let n = self.side as f64;
        if x < 0.0 || y < 0.0 || x > n - 1.0 || y > n - 1.0 {
            return None;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.side - 1);
        let y1 = (y0 + 1).min(self.side - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
        let bot = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
        Some(top * (1.0 - fy) + bot * fy)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage {
            h: self.side,
            w: self.side,
            pixels: self.pixels.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_image().save(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dimensions() {
        assert!(GrayImage::new(0, 5, 0.5).is_err());
        assert!(GrayImage::new(5, 0, 0.5).is_err());
        assert!(Patch::new(0, 0.5, PatchMode::PixelLevel).is_err());
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(GrayImage::from_pixels(1, 2, vec![0.5, 1.2]).is_err());
        assert!(Patch::from_pixels(1, vec![-0.1], PatchMode::PixelLevel).is_err());
    }

    #[test]
    fn u8_roundtrip_is_exact_on_representable_values() {
        let vals: Vec<f64> = (0..=255).map(|b| f64::from(b) / 255.0).collect();
        let img = GrayImage::from_pixels(16, 16, vals.clone()).unwrap();
        let back = GrayImage::from_u8(16, 16, &img.to_u8()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut img = GrayImage::new(4, 6, 0.0).unwrap();
        img.set(2, 3, 1.0);
        img.set(0, 0, 100.0 / 255.0);
        img.save(&path).unwrap();
        let back = GrayImage::load(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn bilinear_sampling_interpolates() {
        let p = Patch::from_pixels(2, vec![0.0, 1.0, 0.0, 1.0], PatchMode::PixelLevel).unwrap();
        assert_eq!(p.sample_bilinear(0.5, 0.5), Some(0.5));
        assert_eq!(p.sample_bilinear(-0.1, 0.0), None);
        assert_eq!(p.sample_bilinear(0.0, 1.5), None);
    }
}
