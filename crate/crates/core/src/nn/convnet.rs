//! The evaluation/feature ConvNet: D blocks of
//! 3×3 conv → instance norm → ReLU → 2×2 average pool, then a linear head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::kernels::{self, ConvGeom};
use super::tensor::{matmul_into, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvNetConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub net_width: usize,
    pub classes: usize,
}

impl ConvNetConfig {
    /// ConvNet-D3 for 32×32 RGB inputs.
    pub fn d3(net_width: usize, classes: usize) -> Self {
        Self {
            channels: 3,
            height: 32,
            width: 32,
            depth: 3,
            net_width,
            classes,
        }
    }

    pub fn feature_dim(&self) -> usize {
        let shrink = 1usize << self.depth;
        self.net_width * (self.height / shrink) * (self.width / shrink)
    }

    fn validate(&self) -> Result<()> {
        let shrink = 1usize << self.depth;
        if self.depth == 0 || self.height % shrink != 0 || self.width % shrink != 0 {
            return Err(Error::dim(format!(
                "{}×{} input is not divisible by 2^{}",
                self.height, self.width, self.depth
            )));
        }
        if self.net_width == 0 || self.classes == 0 || self.channels == 0 {
            return Err(Error::Config("ConvNet sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Output {
    Features,
    Logits,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvNetParams<T> {
    pub config: ConvNetConfig,
    pub blocks: Vec<ConvBlock<T>>,
    pub fc_weight: Tensor<T>,
    pub fc_bias: Tensor<T>,
}

pub(crate) fn uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl<T: Real> ConvNetParams<T> {
    /// Fan-in scaled uniform initialization for conv and linear layers;
    /// unit scale and zero shift for the normalization layers.
    pub fn random<R: Rng + ?Sized>(config: ConvNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.depth);
        let mut cin = config.channels;
        for _ in 0..config.depth {
            let bound = 1.0 / ((cin * 9) as f64).sqrt();
            blocks.push(ConvBlock {
                weight: uniform(rng, &[config.net_width, cin, 3, 3], bound),
                bias: uniform(rng, &[config.net_width], bound),
                gamma: Tensor::full(&[config.net_width], T::one()),
                beta: Tensor::zeros(&[config.net_width]),
            });
            cin = config.net_width;
        }
        let f = config.feature_dim();
        let bound = 1.0 / (f as f64).sqrt();
        Ok(Self {
            config,
            blocks,
            fc_weight: uniform(rng, &[config.classes, f], bound),
            fc_bias: uniform(rng, &[config.classes], bound),
        })
    }

    pub fn zeros(config: ConvNetConfig) -> Result<Self> {
        config.validate()?;
        let mut cin = config.channels;
        let blocks = (0..config.depth)
            .map(|_| {
                let b = ConvBlock {
                    weight: Tensor::zeros(&[config.net_width, cin, 3, 3]),
                    bias: Tensor::zeros(&[config.net_width]),
                    gamma: Tensor::zeros(&[config.net_width]),
                    beta: Tensor::zeros(&[config.net_width]),
                };
                cin = config.net_width;
                b
            })
            .collect();
        Ok(Self {
            config,
            blocks,
            fc_weight: Tensor::zeros(&[config.classes, config.feature_dim()]),
            fc_bias: Tensor::zeros(&[config.classes]),
        })
    }

    /// All parameter tensors in a fixed order (matches [`ConvNetVars::all`]).
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([&b.weight, &b.bias, &b.gamma, &b.beta]);
        }
        out.push(&self.fc_weight);
        out.push(&self.fc_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend([&mut b.weight, &mut b.bias, &mut b.gamma, &mut b.beta]);
        }
        out.push(&mut self.fc_weight);
        out.push(&mut self.fc_bias);
        out
    }

    fn check_batch(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 4 || shape[1] != c.channels || shape[2] != c.height || shape[3] != c.width {
            return Err(Error::dim(format!(
                "batch {shape:?} does not match N×{}×{}×{}",
                c.channels, c.height, c.width
            )));
        }
        Ok(())
    }

    /// Registers the parameters on `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ConvNetVars {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let blocks = self
            .blocks
            .iter()
            .map(|b| [leaf(&b.weight), leaf(&b.bias), leaf(&b.gamma), leaf(&b.beta)])
            .collect();
        ConvNetVars {
            blocks,
            fc_weight: leaf(&self.fc_weight),
            fc_bias: leaf(&self.fc_bias),
        }
    }
}

/// Graph handles for a bound [`ConvNetParams`].
#[derive(Clone, Debug)]
pub struct ConvNetVars {
    blocks: Vec<[Var; 4]>,
    fc_weight: Var,
    fc_bias: Var,
}

impl ConvNetVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.blocks.iter().flatten().copied().collect();
        out.push(self.fc_weight);
        out.push(self.fc_bias);
        out
    }

    /// Flattened features (`N × feature_dim`) of a recorded forward pass.
    pub fn features<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for &[w, b, gamma, beta] in &self.blocks {
            h = g.conv2d(h, w, Some(b))?;
            h = g.instance_norm(h, gamma, beta)?;
            h = g.relu(h);
            h = g.avg_pool2(h)?;
        }
        let s = g.shape(h).to_vec();
        g.reshape(h, &[s[0], s[1] * s[2] * s[3]])
    }

    pub fn logits<T: Real>(&self, g: &mut Graph<T>, features: Var) -> Result<Var> {
        g.linear(features, self.fc_weight, Some(self.fc_bias))
    }
}

/// Untaped forward pass. `batch` is N×C×H×W; returns N×feature_dim or
/// N×classes.
pub fn forward_convnet<T: Real>(
    params: &ConvNetParams<T>,
    batch: &Tensor<T>,
    mode: Output,
) -> Result<Tensor<T>> {
    params.check_batch(batch.shape())?;
    let n = batch.shape()[0];
    let mut h = batch.data().to_vec();
    let (mut c, mut hh, mut ww) = (params.config.channels, params.config.height, params.config.width);
    for b in &params.blocks {
        let o = b.weight.shape()[0];
        let geom = ConvGeom { n, c, h: hh, w: ww, o, k: 3 };
        let conv = kernels::conv2d_forward(&h, b.weight.data(), Some(b.bias.data()), &geom);
        let (mut y, _, _) =
            kernels::instance_norm_forward(&conv, b.gamma.data(), b.beta.data(), n, o, hh * ww);
        y.iter_mut().for_each(|v| *v = v.max(T::zero()));
        h = kernels::avg_pool2_forward(&y, n * o, hh, ww);
        c = o;
        hh /= 2;
        ww /= 2;
    }
    let f = c * hh * ww;
    match mode {
        Output::Features => Tensor::new(vec![n, f], h),
        Output::Logits => {
            let k = params.config.classes;
            let mut out = vec![T::zero(); n * k];
            for r in 0..n {
                out[r * k..(r + 1) * k].copy_from_slice(params.fc_bias.data());
            }
            matmul_into(&h, false, params.fc_weight.data(), true, &mut out, n, f, k, true);
            Tensor::new(vec![n, k], out)
        }
    }
}
