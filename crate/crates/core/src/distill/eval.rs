use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{LabeledDataset, ZcaTransform};
use crate::nn::{forward_convnet, ConvNetConfig, ConvNetParams, Graph, Output, Sgd, Tensor};
use crate::quantize::QuantizedImage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    /// Number of freshly initialized networks; seeds are `seed..seed + seeds`.
    pub seeds: usize,
    pub seed: u64,
    pub net_width: usize,
    pub net_depth: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch: 256,
            seeds: 3,
            seed: 0,
            net_width: 64,
            net_depth: 3,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.seeds == 0 || self.net_width == 0 || self.net_depth == 0 {
            return Err(Error::Config("eval counts must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("eval.lr > 0, eval.weight_decay ≥ 0 and eval.momentum in [0, 1) required".into()));
        }
        Ok(())
    }

    pub fn net_config(&self, channels: usize, height: usize, width: usize, classes: usize) -> ConvNetConfig {
        ConvNetConfig {
            channels,
            height,
            width,
            depth: self.net_depth,
            net_width: self.net_width,
            classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Top-1 test accuracy per seed, in percent.
    pub accuracies: Vec<f64>,
    pub seeds: Vec<u64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl EvalResult {
    pub fn from_accuracies(accuracies: Vec<f64>, seeds: Vec<u64>) -> Self {
        let n = accuracies.len().max(1) as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let std = (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self {
            accuracies,
            seeds,
            mean,
            std,
        }
    }
}

/// Trains a fresh ConvNet with SGD, momentum, weight decay and per-step
/// cosine learning-rate decay.
pub fn train_classifier(
    x: &Tensor<f32>,
    y: &[usize],
    net_config: ConvNetConfig,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<ConvNetParams<f32>> {
    let n = y.len();
    if n == 0 {
        return Err(Error::Parameter("empty training set".into()));
    }
    let len = x.numel() / n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = ConvNetParams::<f32>::random(net_config, &mut rng)?;
    let shapes: Vec<Tensor<f32>> = net.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut opt = Sgd::new(&shapes, cfg.lr, cfg.momentum).with_weight_decay(cfg.weight_decay);
    let per_epoch = n.div_ceil(cfg.batch);
    let total = (cfg.epochs * per_epoch) as f64;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            opt.lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / total).cos());
            let mut data = Vec::with_capacity(chunk.len() * len);
            for &i in chunk {
                data.extend_from_slice(&x.data()[i * len..(i + 1) * len]);
            }
            let mut shape = x.shape().to_vec();
            shape[0] = chunk.len();
            let labels: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let mut g = Graph::new();
            let vars = net.bind(&mut g, true);
            let input = g.constant(Tensor::new(shape, data)?);
            let f = vars.features(&mut g, input)?;
            let logits = vars.logits(&mut g, f)?;
            let loss = g.cross_entropy(logits, &labels)?;
            if !g.value(loss).all_finite() {
                return Err(Error::Training {
                    step,
                    msg: "non-finite classifier loss".into(),
                });
            }
            let mut grads = g.backward(loss)?;
            let gs: Vec<Tensor<f32>> = vars
                .all()
                .into_iter()
                .zip(net.tensors())
                .map(|(v, t)| grads.take_or_zeros(v, t.shape()))
                .collect();
            opt.step_each(net.tensors_mut(), &gs)?;
            step += 1;
        }
    }
    Ok(net)
}

/// Top-1 accuracy in percent.
pub fn accuracy(net: &ConvNetParams<f32>, x: &Tensor<f32>, y: &[usize]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::Parameter("empty test set".into()));
    }
    let n = y.len();
    let mut correct = 0usize;
    for start in (0..n).step_by(500) {
        let end = (start + 500).min(n);
        let logits = forward_convnet(net, &x.slice_outer(start, end), Output::Logits)?;
        let k = logits.shape()[1];
        for (r, row) in logits.data().chunks_exact(k).enumerate() {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            correct += usize::from(best == y[start + r]);
        }
    }
    Ok(100.0 * correct as f64 / n as f64)
}

fn whitened_tensor(ds: &LabeledDataset, zca: Option<&ZcaTransform>) -> Result<Tensor<f32>> {
    let unit = ds.to_unit();
    let data = match zca {
        Some(z) => z.apply(&unit)?,
        None => unit,
    };
    Tensor::from_f64(&[ds.len(), ds.channels, ds.height, ds.width], &data)
}

/// Trains `cfg.seeds` fresh networks on `train` and tests each on `test`.
/// Both sets are whitened with `zca` when given.
pub fn evaluate(train: &LabeledDataset, test: &LabeledDataset, zca: Option<&ZcaTransform>, cfg: &EvalConfig) -> Result<EvalResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Parameter("empty synthetic set".into()));
    }
    if (train.channels, train.height, train.width) != (test.channels, test.height, test.width) {
        return Err(Error::dim("synthetic and test images differ in shape"));
    }
    let classes = train.class_count.max(test.class_count);
    let net_config = cfg.net_config(train.channels, train.height, train.width, classes);
    let x = whitened_tensor(train, zca)?;
    let tx = whitened_tensor(test, zca)?;
    let seeds: Vec<u64> = (0..cfg.seeds as u64).map(|i| cfg.seed + i).collect();
    let accs = seeds
        .par_iter()
        .map(|&s| {
            let net = train_classifier(&x, &train.labels, net_config, cfg, s)?;
            accuracy(&net, &tx, &test.labels)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(EvalResult::from_accuracies(accs, seeds))
}

/// [`evaluate`] on decoded indexed images.
pub fn evaluate_quantized(
    images: &[QuantizedImage],
    labels: &[usize],
    test: &LabeledDataset,
    zca: Option<&ZcaTransform>,
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    if images.is_empty() {
        return Err(Error::Parameter("empty synthetic set".into()));
    }
    let decoded: Vec<_> = images.iter().map(QuantizedImage::reconstruct).collect();
    let train = LabeledDataset::from_images(&decoded, labels.to_vec(), test.class_count)?;
    evaluate(&train, test, zca, cfg)
}
