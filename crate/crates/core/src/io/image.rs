use crate::error::{Error, Result};

/// Planar 8-bit image, `C×H×W` row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::dim(format!(
                "{channels}×{height}×{width} image needs {} bytes, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: u8) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[u8] {
        let p = self.pixels();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> u8 {
        self.data[(c * self.height + i) * self.width + j]
    }

    /// Pixel `p` (row-major index) as a color tuple across channels.
    pub fn color(&self, p: usize) -> Vec<u8> {
        (0..self.channels).map(|c| self.data[c * self.pixels() + p]).collect()
    }

    /// Unit-scaled float view (`x / 255`).
    pub fn to_unit(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64 / 255.0).collect()
    }

    /// Inverse of [`Image::to_unit`], rounding half-up and clamping.
    pub fn from_unit(channels: usize, height: usize, width: usize, values: &[f64]) -> Result<Self> {
        Self::new(channels, height, width, values.iter().map(|&v| unit_to_u8(v)).collect())
    }
}

/// Maps `[0, 1]` to `0..=255`, rounding half-up.
pub fn unit_to_u8(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}
