//! The palette network: a per-pixel bucket classifier whose hard assignments
//! and bucket means turn an image into a K-color-per-channel image.

mod losses;
mod train;

pub use losses::{
    align_loss, balance_loss, loss_align, loss_balance, loss_max_color, max_color_loss,
    palette_total_loss, reference_indices, total_loss, LossWeights,
};
pub use train::{fit_palette, PaletteStep};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::unit_to_u8;
use crate::nn::convnet::uniform;
use crate::nn::{Graph, OptimizerKind, Real, Tensor, Var};
use crate::quantize::{QuantMode, QuantizedImage, MAX_COLORS};

/// Denominator guard of the soft palette.
pub const SOFT_PALETTE_EPS: f64 = 1e-8;
/// Below this total probability mass an empty bucket takes the channel mean.
const EMPTY_MASS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PaletteConfig {
    pub k: usize,
    pub hidden: usize,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Used by SGD only.
    pub momentum: f64,
    /// Apply a softmax over buckets to the spatial mean before the balance loss.
    pub balance_softmax: bool,
}

impl Default for PaletteConfig {
    fn default() -> Self {
        Self {
            k: 64,
            hidden: 64,
            tau: 1.0,
            alpha: 1.0,
            beta: 1.0,
            gamma: 3.0,
            lr: 0.05,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            balance_softmax: false,
        }
    }
}

impl PaletteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > MAX_COLORS {
            return Err(Error::Config(format!("palette.k must be in 1..=256, got {}", self.k)));
        }
        if self.hidden == 0 {
            return Err(Error::Config("palette.hidden must be positive".into()));
        }
        if !(self.tau > 0.0) || !(self.lr > 0.0) {
            return Err(Error::Config("palette.tau and palette.lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("palette.momentum {} outside [0, 1)", self.momentum)));
        }
        self.weights().validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }
}

/// Two 1×1 convolutions with a ReLU between; the second has no bias.
#[derive(Clone, Debug, PartialEq)]
pub struct PaletteNetParams<T> {
    pub channels: usize,
    pub k: usize,
    pub hidden: usize,
    pub tau: f64,
    /// `hidden × C × 1 × 1`
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    /// `C·K × hidden × 1 × 1`
    pub w2: Tensor<T>,
}

impl<T: Real> PaletteNetParams<T> {
    pub fn random<R: Rng + ?Sized>(channels: usize, k: usize, hidden: usize, tau: f64, rng: &mut R) -> Result<Self> {
        Self::check(channels, k, hidden, tau)?;
        let b1 = 1.0 / (channels as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            channels,
            k,
            hidden,
            tau,
            w1: uniform(rng, &[hidden, channels, 1, 1], b1),
            b1: uniform(rng, &[hidden], b1),
            w2: uniform(rng, &[channels * k, hidden, 1, 1], b2),
        })
    }

    pub fn from_config<R: Rng + ?Sized>(channels: usize, cfg: &PaletteConfig, rng: &mut R) -> Result<Self> {
        Self::random(channels, cfg.k, cfg.hidden, cfg.tau, rng)
    }

    fn check(channels: usize, k: usize, hidden: usize, tau: f64) -> Result<()> {
        if channels == 0 || hidden == 0 || k == 0 || k > MAX_COLORS {
            return Err(Error::Config(format!(
                "palette net needs C, hidden > 0 and K in 1..=256 (C={channels}, hidden={hidden}, K={k})"
            )));
        }
        if !(tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        vec![&self.w1, &self.b1, &self.w2]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2]
    }

    pub fn cast<U: Real>(&self) -> PaletteNetParams<U> {
        PaletteNetParams {
            channels: self.channels,
            k: self.k,
            hidden: self.hidden,
            tau: self.tau,
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            w2: self.w2.cast(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> PaletteVars {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        PaletteVars {
            w1: leaf(&self.w1),
            b1: leaf(&self.b1),
            w2: leaf(&self.w2),
            channels: self.channels,
            k: self.k,
            tau: self.tau,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PaletteVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub channels: usize,
    pub k: usize,
    pub tau: f64,
}

impl PaletteVars {
    pub fn all(&self) -> Vec<Var> {
        vec![self.w1, self.b1, self.w2]
    }

    /// Probability map `N × C × K × (H·W)`, normalized over the bucket axis.
    pub fn prob_map<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::dim(format!("palette input {s:?} needs N×{}×H×W", self.channels)));
        }
        let h = g.conv2d(x, self.w1, Some(self.b1))?;
        let h = g.relu(h);
        let logits = g.conv2d(h, self.w2, None)?;
        let logits = g.reshape(logits, &[s[0], s[1], self.k, s[2] * s[3]])?;
        let logits = if self.tau == 1.0 { logits } else { g.scale(logits, 1.0 / self.tau) };
        g.softmax(logits, 2)
    }

    /// Records the color-condensed images: the forward value is the hard
    /// reconstruction and the gradient follows the soft reconstruction.
    pub fn condense<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Condensed<T>> {
        let m = self.prob_map(g, x)?;
        condense_with_map(g, x, m)
    }
}

/// Graph outputs of [`PaletteVars::condense`].
pub struct Condensed<T> {
    pub m: Var,
    pub soft_palette: Var,
    pub soft_reconstruction: Var,
    pub reconstruction: Var,
    /// `N × C × P` argmax bucket ids.
    pub hard_indices: Vec<u8>,
    /// `N × C × K` bucket means (empty buckets filled).
    pub hard_palette: Tensor<T>,
}

/// Soft palette and straight-through reconstruction for an already
/// recorded probability map `m` of `x`.
pub fn condense_with_map<T: Real>(g: &mut Graph<T>, x: Var, m: Var) -> Result<Condensed<T>> {
    let s = g.shape(x).to_vec();
    let ms = g.shape(m).to_vec();
    let (n, c, p) = (s[0], s[1], s[2] * s[3]);
    if ms.len() != 4 || ms[0] != n || ms[1] != c || ms[3] != p {
        return Err(Error::dim(format!("probability map {ms:?} does not match images {s:?}")));
    }
    let k = ms[2];
    let m3 = g.reshape(m, &[n * c, k, p])?;
    let x3 = g.reshape(x, &[n * c, p, 1])?;
    let num = g.bmm(m3, x3, false, false)?;
    let num = g.reshape(num, &[n * c, k])?;
    let mass = g.sum_axis(m3, 2)?;
    let den = g.add_scalar(mass, SOFT_PALETTE_EPS);
    let soft_palette = g.div(num, den)?;
    let pal3 = g.reshape(soft_palette, &[n * c, 1, k])?;
    let soft = g.bmm(pal3, m3, false, false)?;
    let soft = g.reshape(soft, &s)?;

    let hard_indices = argmax_buckets(g.value(m).data(), n * c, k, p);
    let hard_palette = hard_palette_from(
        g.value(x).data(),
        g.value(m).data(),
        g.value(soft_palette).data(),
        &hard_indices,
        n * c,
        k,
        p,
    );
    let mut hard = vec![T::zero(); n * c * p];
    for plane in 0..n * c {
        for px in 0..p {
            hard[plane * p + px] = hard_palette[plane * k + hard_indices[plane * p + px] as usize];
        }
    }
    let reconstruction = g.straight_through(soft, Tensor::new(s, hard)?)?;
    Ok(Condensed {
        m,
        soft_reconstruction: soft,
        soft_palette: g.reshape(soft_palette, &[n, c, k])?,
        reconstruction,
        hard_indices,
        hard_palette: Tensor::new(vec![n, c, k], hard_palette)?,
    })
}

/// Argmax over buckets of a `planes × K × P` map, ties to the lowest bucket.
pub(crate) fn argmax_buckets<T: Real>(m: &[T], planes: usize, k: usize, p: usize) -> Vec<u8> {
    let mut out = vec![0u8; planes * p];
    for plane in 0..planes {
        let base = plane * k * p;
        for px in 0..p {
            let mut best = 0;
            for kk in 1..k {
                if m[base + kk * p + px] > m[base + best * p + px] {
                    best = kk;
                }
            }
            out[plane * p + px] = best as u8;
        }
    }
    out
}

fn hard_palette_from<T: Real>(
    x: &[T],
    m: &[T],
    soft: &[T],
    idx: &[u8],
    planes: usize,
    k: usize,
    p: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); planes * k];
    for plane in 0..planes {
        let xs = &x[plane * p..(plane + 1) * p];
        let mut sums = vec![T::zero(); k];
        let mut counts = vec![0usize; k];
        for px in 0..p {
            let b = idx[plane * p + px] as usize;
            sums[b] += xs[px];
            counts[b] += 1;
        }
        let mean = xs.iter().copied().sum::<T>() / T::of(p.max(1) as f64);
        for b in 0..k {
            out[plane * k + b] = if counts[b] > 0 {
                sums[b] / T::of(counts[b] as f64)
            } else {
                let mass: T = (0..p).map(|px| m[plane * k * p + b * p + px]).sum();
                if mass.f64() > EMPTY_MASS {
                    soft[plane * k + b]
                } else {
                    mean
                }
            };
        }
    }
    out
}

/// A recorded probability map with its image geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap<T> {
    pub height: usize,
    pub width: usize,
    /// `N × C × K × (H·W)`
    pub values: Tensor<T>,
}

impl<T: Real> ProbabilityMap<T> {
    pub fn new(values: Tensor<T>, height: usize, width: usize) -> Result<Self> {
        let s = values.shape();
        if s.len() != 4 || s[3] != height * width {
            return Err(Error::dim(format!("probability map {s:?} for {height}×{width} images")));
        }
        Ok(Self { height, width, values })
    }

    pub fn images(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn k(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, n: usize, c: usize, k: usize, px: usize) -> T {
        let s = self.values.shape();
        self.values.data()[((n * s[1] + c) * s[2] + k) * s[3] + px]
    }

    /// `N × C × P` hard bucket ids.
    pub fn argmax(&self) -> Vec<u8> {
        argmax_buckets(self.values.data(), self.images() * self.channels(), self.k(), self.pixels())
    }

    /// Per image: mean over channels of the number of buckets that are the
    /// argmax of at least one pixel.
    pub fn active_buckets(&self) -> Vec<f64> {
        let (c, k, p) = (self.channels(), self.k(), self.pixels());
        let idx = self.argmax();
        (0..self.images())
            .map(|n| {
                let total: usize = (0..c)
                    .map(|ch| {
                        let mut used = vec![false; k];
                        let plane = &idx[(n * c + ch) * p..(n * c + ch + 1) * p];
                        plane.iter().for_each(|&b| used[b as usize] = true);
                        used.iter().filter(|&&u| u).count()
                    })
                    .sum();
                total as f64 / c as f64
            })
            .collect()
    }

    /// Largest deviation of a bucket sum from 1.
    pub fn normalization_error(&self) -> f64 {
        let (k, p) = (self.k(), self.pixels());
        let planes = self.images() * self.channels();
        let v = self.values.data();
        let mut worst = 0.0f64;
        for plane in 0..planes {
            for px in 0..p {
                let s: f64 = (0..k).map(|kk| v[plane * k * p + kk * p + px].f64()).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }
}

fn check_batch<T: Real>(params: &PaletteNetParams<T>, images: &Tensor<T>) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 || s[1] != params.channels {
        return Err(Error::dim(format!("images {s:?} need N×{}×H×W", params.channels)));
    }
    Ok(())
}

/// Untracked probability map of a batch `N × C × H × W`.
pub fn forward_prob_map<T: Real>(params: &PaletteNetParams<T>, images: &Tensor<T>) -> Result<ProbabilityMap<T>> {
    check_batch(params, images)?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let x = g.constant(images.clone());
    let m = vars.prob_map(&mut g, x)?;
    let s = images.shape();
    ProbabilityMap::new(g.value(m).clone(), s[2], s[3])
}

fn map_matches<T: Real>(images: &Tensor<T>, m: &ProbabilityMap<T>) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 || s[0] != m.images() || s[1] != m.channels() || s[2] != m.height || s[3] != m.width {
        return Err(Error::dim(format!(
            "images {s:?} vs probability map {:?}",
            m.values.shape()
        )));
    }
    Ok(())
}

fn condense_values<T: Real>(images: &Tensor<T>, m: &ProbabilityMap<T>) -> Result<(Condensed<T>, Graph<T>)> {
    map_matches(images, m)?;
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let mv = g.constant(m.values.clone());
    let out = condense_with_map(&mut g, x, mv)?;
    Ok((out, g))
}

/// Bucket means over the argmax members, `N × C × K`.
pub fn hard_palette<T: Real>(images: &Tensor<T>, m: &ProbabilityMap<T>) -> Result<Tensor<T>> {
    Ok(condense_values(images, m)?.0.hard_palette)
}

/// Probability-weighted bucket means, `N × C × K`.
pub fn soft_palette<T: Real>(images: &Tensor<T>, m: &ProbabilityMap<T>) -> Result<Tensor<T>> {
    let (out, g) = condense_values(images, m)?;
    Ok(g.value(out.soft_palette).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReconstructMode {
    Hard,
    Soft,
}

pub fn reconstruct<T: Real>(images: &Tensor<T>, m: &ProbabilityMap<T>, mode: ReconstructMode) -> Result<Tensor<T>> {
    let (out, g) = condense_values(images, m)?;
    Ok(match mode {
        ReconstructMode::Hard => g.value(out.reconstruction).clone(),
        ReconstructMode::Soft => g.value(out.soft_reconstruction).clone(),
    })
}

/// Hard-condenses unit-scale images into per-channel indexed images.
pub fn condense_images<T: Real>(params: &PaletteNetParams<T>, images: &Tensor<T>) -> Result<Vec<QuantizedImage>> {
    let m = forward_prob_map(params, images)?;
    let pal = hard_palette(images, &m)?;
    let idx = m.argmax();
    let s = images.shape();
    let (n, c, h, w, k) = (s[0], s[1], s[2], s[3], params.k);
    let p = h * w;
    (0..n)
        .map(|i| {
            let palette = pal.data()[i * c * k..(i + 1) * c * k].iter().map(|v| unit_to_u8(v.f64())).collect();
            let indices = idx[i * c * p..(i + 1) * c * p].to_vec();
            QuantizedImage::new(QuantMode::PerChannel, c, h, w, k, palette, indices)
        })
        .collect()
}
