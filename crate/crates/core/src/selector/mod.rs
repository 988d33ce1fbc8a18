//! Diversity-driven initialization: last-layer gradient similarity on
//! color-quantized images and greedy graph-cut selection.

mod graph_cut;

pub use graph_cut::{conditional_gain, graph_cut_value, greedy_select, greedy_select_from, SelectionConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::LabeledDataset;
use crate::nn::{forward_convnet, ConvNetConfig, ConvNetParams, Output, Real, Tensor};
use crate::quantize::{median_cut, QuantMode};

/// Cosine similarities over one class's images.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityKernel {
    pub n: usize,
    /// Row-major `n × n`.
    pub matrix: Vec<f64>,
    /// Dataset indices of the rows.
    pub universe: Vec<usize>,
}

impl SimilarityKernel {
    /// Wraps a precomputed symmetric matrix over `0..n`.
    pub fn from_matrix(n: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != n * n {
            return Err(Error::dim(format!("kernel has {} entries, expected {}", matrix.len(), n * n)));
        }
        Ok(Self {
            n,
            matrix,
            universe: (0..n).collect(),
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.n + j]
    }
}

/// Last-layer weight gradient of the cross-entropy loss for each image:
/// `(softmax(logits) − onehot(label)) ⊗ features`, flattened class-major.
pub fn gradient_features<T: Real>(net: &ConvNetParams<T>, images: &Tensor<T>, labels: &[usize]) -> Result<Vec<Vec<f64>>> {
    let classes = net.config.classes;
    if images.shape().first() != Some(&labels.len()) {
        return Err(Error::dim(format!("{} labels for batch {:?}", labels.len(), images.shape())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Parameter(format!("label {bad} out of range for {classes} classes")));
    }
    let feats = forward_convnet(net, images, Output::Features)?;
    let f = net.config.feature_dim();
    let mut out = Vec::with_capacity(labels.len());
    for (r, &label) in labels.iter().enumerate() {
        let row: Vec<f64> = feats.data()[r * f..(r + 1) * f].iter().map(|v| v.f64()).collect();
        let logits: Vec<f64> = (0..classes)
            .map(|c| {
                net.fc_bias.data()[c].f64()
                    + row.iter().zip(&net.fc_weight.data()[c * f..(c + 1) * f]).map(|(a, w)| a * w.f64()).sum::<f64>()
            })
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = exp.iter().sum();
        let mut g = Vec::with_capacity(classes * f);
        for c in 0..classes {
            let delta = exp[c] / z - if c == label { 1.0 } else { 0.0 };
            g.extend(row.iter().map(|v| delta * v));
        }
        out.push(g);
    }
    Ok(out)
}

/// Single-image form of [`gradient_features`]; `image` is `C × H × W`.
pub fn gradient_feature<T: Real>(net: &ConvNetParams<T>, image: &Tensor<T>, label: usize) -> Result<Vec<f64>> {
    let batch = Tensor::stack(std::slice::from_ref(image))?;
    Ok(gradient_features(net, &batch, &[label])?.remove(0))
}

/// Cosine similarity matrix. A zero vector has similarity 0 to every other
/// vector and 1 to itself.
pub fn similarity_kernel(features: &[Vec<f64>]) -> SimilarityKernel {
    let n = features.len();
    let norms: Vec<f64> = features.iter().map(|f| f.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut matrix = vec![0.0; n * n];
    for i in 0..n {
        matrix[i * n + i] = 1.0;
        for j in i + 1..n {
            let s = if norms[i] > 0.0 && norms[j] > 0.0 {
                let dot: f64 = features[i].iter().zip(&features[j]).map(|(a, b)| a * b).sum();
                (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            matrix[i * n + j] = s;
            matrix[j * n + i] = s;
        }
    }
    SimilarityKernel {
        n,
        matrix,
        universe: (0..n).collect(),
    }
}

/// How images are preprocessed before scoring.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionSource {
    /// Joint Median Cut with this many colors.
    Quantized(usize),
    Real,
}

const FEATURE_BATCH: usize = 128;

/// Per class, selects `ipc` dataset indices with greedy graph-cut selection
/// over gradient similarities under a freshly seeded random ConvNet.
pub fn select_init(
    dataset: &LabeledDataset,
    net_config: ConvNetConfig,
    source: SelectionSource,
    config: &SelectionConfig,
) -> Result<Vec<Vec<usize>>> {
    config.validate_basic()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let net = ConvNetParams::<f32>::random(net_config, &mut rng)?;
    let mut out = Vec::with_capacity(dataset.class_count);
    for (class, members) in dataset.class_indices().into_iter().enumerate() {
        if config.ipc > members.len() {
            return Err(Error::Parameter(format!(
                "ipc {} exceeds the {} images of class {class}",
                config.ipc,
                members.len()
            )));
        }
        let mut feats = Vec::with_capacity(members.len());
        for chunk in members.chunks(FEATURE_BATCH) {
            let mut data = Vec::with_capacity(chunk.len() * dataset.image_len());
            for &i in chunk {
                let img = dataset.image(i);
                let img = match source {
                    SelectionSource::Quantized(k) => median_cut(&img, k, QuantMode::Joint)?.reconstruct(),
                    SelectionSource::Real => img,
                };
                data.extend(img.to_unit());
            }
            let batch = Tensor::<f32>::from_f64(&[chunk.len(), dataset.channels, dataset.height, dataset.width], &data)?;
            feats.extend(gradient_features(&net, &batch, &vec![class; chunk.len()])?);
        }
        let mut kernel = similarity_kernel(&feats);
        kernel.universe = members;
        let class_cfg = SelectionConfig {
            seed: config.seed.wrapping_add(1 + class as u64),
            ..*config
        };
        let picked = greedy_select(&kernel, &class_cfg)?;
        out.push(picked.into_iter().map(|i| kernel.universe[i]).collect());
    }
    Ok(out)
}

/// Uniformly random `ipc` indices per class, seeded.
pub fn random_init(dataset: &LabeledDataset, ipc: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dataset
        .class_indices()
        .into_iter()
        .enumerate()
        .map(|(class, members)| {
            if ipc == 0 || ipc > members.len() {
                return Err(Error::Parameter(format!(
                    "ipc {ipc} not in 1..={} for class {class}",
                    members.len()
                )));
            }
            Ok(members.choose_multiple(&mut rng, ipc).copied().collect())
        })
        .collect()
}

#[cfg(test)]
mod tests;
