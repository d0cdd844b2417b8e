//! Dense single- and multi-channel rasters shared by every stage.

use std::io::Cursor;
use std::path::Path;

use image::{ImageBuffer, ImageFormat, Luma};

use crate::error::{Error, Result};

/// A radiograph (real or synthetic), intensities normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("image dims must be >= 1, got {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Shape(format!(
                "intensity {} at ({}, {}) is outside [0, 1]",
                data[i],
                i / width,
                i % width
            )));
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image from arbitrary finite values by clamping them into `[0, 1]`.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    /// Encodes as a 16-bit grayscale PNG.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let raw: Vec<u16> = self.data.iter().map(|v| (v * 65535.0).round() as u16).collect();
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, raw)
                .ok_or_else(|| Error::Shape("image buffer size mismatch".into()))?;
        let mut out = Vec::new();
        buf.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)?;
        Ok(out)
    }

    /// Decodes any grayscale-convertible image. Intensities are divided by the
    /// full scale of `bits` (defaults to the container depth: 8 or 16).
    pub fn from_image_bytes(bytes: &[u8], bits: Option<u8>) -> Result<Self> {
        let img = image::load_from_memory(bytes)?;
        let container16 = matches!(
            img.color(),
            image::ColorType::L16 | image::ColorType::La16 | image::ColorType::Rgb16 | image::ColorType::Rgba16
        );
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data: Vec<f32> = if container16 {
            let full = bits.map(|b| ((1u32 << b) - 1) as f32).unwrap_or(65535.0);
            img.into_luma16().into_raw().into_iter().map(|v| (v as f32 / full).min(1.0)).collect()
        } else {
            let full = bits.map(|b| ((1u32 << b) - 1) as f32).unwrap_or(255.0);
            img.into_luma8().into_raw().into_iter().map(|v| (v as f32 / full).min(1.0)).collect()
        };
        Self::new(h, w, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_png_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, bits: Option<u8>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_image_bytes(&bytes, bits)
    }
}

/// Channel-major multi-channel grid of reals (`channels x height x width`).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Grid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "grid {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn plane(&self, channel: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn plane_mut(&mut self, channel: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[channel * n..(channel + 1) * n]
    }
}
