use std::path::Path;

use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RGB image, row-major `H × W × 3`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// Binary mask, row-major `H × W`, values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Loads an RGB image and bilinearly resizes it to `size × size`.
    pub fn load(path: &Path, size: usize) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let img = if img.width() as usize != size || img.height() as usize != size {
            imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
        } else {
            img
        };
        Ok(Self {
            height: size,
            width: size,
            data: img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let raw = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions");
        img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Channel-first copy, `3 × H × W`.
    pub fn to_chw(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = self.data[p * 3 + c];
            }
        }
        out
    }
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::new(height, width);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(y, x) as u8;
            }
        }
        m
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Loads a single-channel mask (foreground = 255, any value > 127 counts) and
    /// resizes it to `size × size` with nearest-neighbour sampling.
    pub fn load(path: &Path, size: usize) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_luma8();
        let img = if img.width() as usize != size || img.height() as usize != size {
            imageops::resize(&img, size as u32, size as u32, FilterType::Nearest)
        } else {
            img
        };
        Ok(Self {
            height: size,
            width: size,
            data: img.as_raw().iter().map(|&v| (v > 127) as u8).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let raw = self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
        let img = GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions");
        img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Nearest-neighbour resize using pixel-center sampling.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Mask {
        Mask::from_fn(height, width, |y, x| {
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
            self.get(sy.min(self.height - 1), sx.min(self.width - 1))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::new(8, 8);
        img.set_pixel(3, 4, [1.0, 0.5, 0.0]);
        let m = Mask::from_fn(8, 8, |y, x| y > x);
        img.save(&dir.path().join("i.png")).unwrap();
        m.save(&dir.path().join("m.png")).unwrap();
        let back = Image::load(&dir.path().join("i.png"), 8).unwrap();
        let px = back.pixel(3, 4);
        assert!((px[0] - 1.0).abs() < 1e-6 && (px[1] - 128.0 / 255.0).abs() < 1e-6);
        assert_eq!(Mask::load(&dir.path().join("m.png"), 8).unwrap(), m);
    }

    #[test]
    fn nearest_resize_halves_blocks() {
        let m = Mask::from_fn(4, 4, |y, _| y < 2);
        let r = m.resize_nearest(2, 2);
        assert_eq!(r.data, vec![1, 1, 0, 0]);
    }
}
