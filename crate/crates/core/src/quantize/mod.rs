//! Classical color quantizers and the indexed-image type they produce.

mod median_cut;
mod octree;

pub use median_cut::median_cut;
pub use octree::octree_quantize;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::Image;

/// Largest palette an 8-bit indexed image can carry.
pub const MAX_COLORS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QuantMode {
    /// One palette of color tuples, one index per pixel.
    Joint,
    /// One palette per channel, one index per channel value.
    PerChannel,
}

impl QuantMode {
    pub fn code(self) -> u8 {
        match self {
            QuantMode::Joint => 0,
            QuantMode::PerChannel => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(QuantMode::Joint),
            1 => Some(QuantMode::PerChannel),
            _ => None,
        }
    }
}

impl fmt::Display for QuantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantMode::Joint => "joint",
            QuantMode::PerChannel => "per-channel",
        })
    }
}

impl FromStr for QuantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(QuantMode::Joint),
            "per-channel" | "per_channel" => Ok(QuantMode::PerChannel),
            other => Err(Error::Parameter(format!("unknown quantization mode {other:?}"))),
        }
    }
}

/// Palette plus indices.
///
/// Palette layout: per-channel mode stores `palette[c·K + k]`, joint mode
/// stores `palette[k·C + c]`. Indices are `C·H·W` planar in per-channel mode
/// and `H·W` in joint mode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedImage {
    pub mode: QuantMode,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub palette: Vec<u8>,
    pub indices: Vec<u8>,
}

impl QuantizedImage {
    pub fn new(
        mode: QuantMode,
        channels: usize,
        height: usize,
        width: usize,
        k: usize,
        palette: Vec<u8>,
        indices: Vec<u8>,
    ) -> Result<Self> {
        if k == 0 || k > MAX_COLORS {
            return Err(Error::Parameter(format!("K must be in 1..=256, got {k}")));
        }
        if channels == 0 {
            return Err(Error::dim("quantized image needs at least one channel"));
        }
        if palette.len() != channels * k {
            return Err(Error::dim(format!(
                "palette has {} entries, expected {}",
                palette.len(),
                channels * k
            )));
        }
        let planes = match mode {
            QuantMode::Joint => 1,
            QuantMode::PerChannel => channels,
        };
        if indices.len() != planes * height * width {
            return Err(Error::dim(format!(
                "index array has {} entries, expected {}",
                indices.len(),
                planes * height * width
            )));
        }
        if let Some(pos) = indices.iter().position(|&i| i as usize >= k) {
            return Err(Error::Contract(format!("index {} at {pos} is not below K={k}", indices[pos])));
        }
        Ok(Self {
            mode,
            channels,
            height,
            width,
            k,
            palette,
            indices,
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Number of index planes (1 in joint mode).
    pub fn planes(&self) -> usize {
        match self.mode {
            QuantMode::Joint => 1,
            QuantMode::PerChannel => self.channels,
        }
    }

    pub fn palette_value(&self, c: usize, k: usize) -> u8 {
        match self.mode {
            QuantMode::Joint => self.palette[k * self.channels + c],
            QuantMode::PerChannel => self.palette[c * self.k + k],
        }
    }

    /// Palette lookup for every pixel.
    pub fn reconstruct(&self) -> Image {
        let p = self.pixels();
        let mut data = vec![0u8; self.channels * p];
        for c in 0..self.channels {
            for i in 0..p {
                let idx = match self.mode {
                    QuantMode::Joint => self.indices[i],
                    QuantMode::PerChannel => self.indices[c * p + i],
                };
                data[c * p + i] = self.palette_value(c, idx as usize);
            }
        }
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// Mean squared error on the unit scale.
pub fn quantization_mse(original: &Image, quantized: &Image) -> Result<f64> {
    if (original.channels, original.height, original.width)
        != (quantized.channels, quantized.height, quantized.width)
    {
        return Err(Error::dim(format!(
            "shape {}×{}×{} vs {}×{}×{}",
            original.channels,
            original.height,
            original.width,
            quantized.channels,
            quantized.height,
            quantized.width
        )));
    }
    if original.data.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = original
        .data
        .iter()
        .zip(&quantized.data)
        .map(|(&a, &b)| {
            let d = (a as f64 - b as f64) / 255.0;
            d * d
        })
        .sum();
    Ok(sum / original.data.len() as f64)
}

/// Distinct color tuples across all channels.
pub fn unique_colors(image: &Image) -> usize {
    (0..image.pixels()).map(|p| image.color(p)).collect::<HashSet<_>>().len()
}

/// Distinct values in each channel plane.
pub fn unique_values_per_channel(image: &Image) -> Vec<usize> {
    (0..image.channels)
        .map(|c| {
            let mut seen = [false; 256];
            image.plane(c).iter().for_each(|&v| seen[v as usize] = true);
            seen.iter().filter(|&&s| s).count()
        })
        .collect()
}

/// Half-up rounded mean of integer samples.
pub(crate) fn rounded_mean(sum: u64, count: u64) -> u8 {
    ((2 * sum + count) / (2 * count)) as u8
}

/// Distinct color tuples with their pixel counts, sorted ascending.
pub(crate) fn color_histogram(colors: &[Vec<u8>]) -> (Vec<Vec<u8>>, Vec<u64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..colors.len()).collect();
    order.sort_by(|&a, &b| colors[a].cmp(&colors[b]));
    let mut distinct: Vec<Vec<u8>> = Vec::new();
    let mut counts: Vec<u64> = Vec::new();
    let mut slot = vec![0usize; colors.len()];
    for &p in &order {
        if distinct.last() != Some(&colors[p]) {
            distinct.push(colors[p].clone());
            counts.push(0);
        }
        *counts.last_mut().expect("pushed above") += 1;
        slot[p] = distinct.len() - 1;
    }
    (distinct, counts, slot)
}
