use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::set::SyntheticSet;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{zca_fit, LabeledDataset, ZcaTransform};
use crate::nn::{forward_convnet, ConvNetConfig, ConvNetParams, ConvNetVars, Graph, Optimizer, OptimizerKind, Output, Real, Tensor, Var};
use crate::palette::{align_loss, balance_loss, max_color_loss, reference_indices, PaletteNetParams, ProbabilityMap};
use crate::quantize::{unique_values_per_channel, MAX_COLORS};

/// RNG stream ids derived from the run seed.
const STREAM_NETS: u64 = 1;
const STREAM_REAL: u64 = 2;
const STREAM_PALETTE: u64 = 3;
const STREAM_SYNTHETIC: u64 = 4;

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Mean feature row of `rows` of `images` under `net`.
pub fn mean_features<T: Real>(net: &ConvNetParams<T>, images: &Tensor<T>, rows: &[usize]) -> Result<Vec<T>> {
    if rows.is_empty() {
        return Err(Error::Parameter("empty class batch".into()));
    }
    let len = images.numel() / images.shape()[0];
    let mut data = Vec::with_capacity(rows.len() * len);
    for &r in rows {
        data.extend_from_slice(&images.data()[r * len..(r + 1) * len]);
    }
    let mut shape = images.shape().to_vec();
    shape[0] = rows.len();
    let f = forward_convnet(net, &Tensor::new(shape, data)?, Output::Features)?;
    let d = f.shape()[1];
    let mut mean = vec![T::zero(); d];
    for row in f.data().chunks_exact(d) {
        mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
    }
    let inv = T::of(1.0 / rows.len() as f64);
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok(mean)
}

/// `Σ_c ‖mean_i feats[c, i] − real_means[c]‖²` for class-major `feats`
/// (`classes·per_class × F`) and `real_means` (`classes × F`).
pub fn class_mean_gap<T: Real>(g: &mut Graph<T>, feats: Var, classes: usize, real_means: Tensor<T>) -> Result<Var> {
    let s = g.shape(feats).to_vec();
    if classes == 0 || s.len() != 2 || s[0] % classes != 0 || s[0] == 0 {
        return Err(Error::dim(format!("features {s:?} do not split into {classes} classes")));
    }
    if real_means.shape() != [classes, s[1]] {
        return Err(Error::dim(format!("real means {:?} vs {classes}×{}", real_means.shape(), s[1])));
    }
    let f3 = g.reshape(feats, &[classes, s[0] / classes, s[1]])?;
    let syn = g.mean_axis(f3, 1)?;
    let real = g.constant(real_means);
    let diff = g.sub(syn, real)?;
    let sq = g.square(diff);
    Ok(g.sum(sq))
}

/// Numeric DM loss over per-class batches (`n_c × C × H × W` each).
pub fn dm_task_loss<T: Real>(real_by_class: &[Tensor<T>], synthetic_by_class: &[Tensor<T>], net: &ConvNetParams<T>) -> Result<f64> {
    if real_by_class.len() != synthetic_by_class.len() {
        return Err(Error::dim(format!(
            "{} real vs {} synthetic class batches",
            real_by_class.len(),
            synthetic_by_class.len()
        )));
    }
    let mut total = 0.0;
    for (r, s) in real_by_class.iter().zip(synthetic_by_class) {
        if r.shape().first().copied().unwrap_or(0) == 0 || s.shape().first().copied().unwrap_or(0) == 0 {
            return Err(Error::Parameter("empty class batch".into()));
        }
        let a = mean_features(net, r, &(0..r.shape()[0]).collect::<Vec<_>>())?;
        let b = mean_features(net, s, &(0..s.shape()[0]).collect::<Vec<_>>())?;
        total += a.iter().zip(&b).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum::<f64>();
    }
    Ok(total)
}

/// ZCA whitening as a fixed affine layer: `y = x·W + b`, `b = −μ·W`.
#[derive(Clone, Debug)]
pub struct ZcaLayer {
    pub transform: ZcaTransform,
    weight: Tensor<f32>,
    bias: Tensor<f32>,
}

impl ZcaLayer {
    pub fn new(transform: ZcaTransform) -> Result<Self> {
        let d = transform.dim;
        let w = &transform.whitening;
        let bias: Vec<f64> = (0..d).map(|j| -(0..d).map(|i| transform.mean[i] * w[i * d + j]).sum::<f64>()).collect();
        Ok(Self {
            weight: Tensor::from_f64(&[d, d], w)?,
            bias: Tensor::from_f64(&[d], &bias)?,
            transform,
        })
    }

    /// Records the layer on `x` (`N × C × H × W`).
    pub fn record(&self, g: &mut Graph<f32>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, &[s[0], self.transform.dim])?;
        let w = g.constant(self.weight.clone());
        let b = g.constant(self.bias.clone());
        let y = g.linear(flat, w, Some(b))?;
        g.reshape(y, &s)
    }

    /// Whitens a unit-scale batch.
    pub fn apply(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let data: Vec<f64> = x.data().iter().map(|v| v.f64()).collect();
        Tensor::from_f64(x.shape(), &self.transform.apply(&data)?)
    }
}

/// Real data split by class and whitened once, plus the fitted whitening.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub real_by_class: Vec<Tensor<f32>>,
    pub zca: Option<ZcaLayer>,
    pub net_config: ConvNetConfig,
}

impl Prepared {
    pub fn new(train: &LabeledDataset, cfg: &RunConfig) -> Result<Self> {
        let zca = if cfg.distill.zca {
            Some(ZcaLayer::new(zca_fit(train, cfg.distill.zca_eps)?)?)
        } else {
            None
        };
        let len = train.image_len();
        let shape = [train.channels, train.height, train.width];
        let real_by_class = train
            .class_indices()
            .into_iter()
            .map(|members| {
                let data: Vec<f32> = members
                    .iter()
                    .flat_map(|&i| train.image_bytes(i).iter().map(|&b| b as f32 / 255.0))
                    .collect();
                let t = Tensor::new(vec![members.len(), shape[0], shape[1], shape[2]], data)?;
                match &zca {
                    Some(z) if !members.is_empty() => z.apply(&t),
                    _ => Ok(t),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        debug_assert!(real_by_class.iter().all(|t| t.numel() % len == 0));
        Ok(Self {
            real_by_class,
            zca,
            net_config: ConvNetConfig {
                channels: train.channels,
                height: train.height,
                width: train.width,
                depth: cfg.distill.net_depth,
                net_width: cfg.distill.net_width,
                classes: train.class_count,
            },
        })
    }

    /// Whitens a unit-scale batch when whitening is enabled.
    pub fn whiten(&self, x: Tensor<f32>) -> Result<Tensor<f32>> {
        match &self.zca {
            Some(z) => z.apply(&x),
            None => Ok(x),
        }
    }
}

/// One logged outer iteration; losses are measured before the update.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub iter: usize,
    pub task_loss: f64,
    pub l_m: f64,
    pub l_b: f64,
    pub l_a: f64,
    pub active_buckets: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct DistillOutput {
    pub set: SyntheticSet,
    pub log: Vec<StepLog>,
}

fn gather_rows(t: &Tensor<f32>, rows: &[usize]) -> Result<Tensor<f32>> {
    let len = t.numel() / t.shape()[0];
    let mut data = Vec::with_capacity(rows.len() * len);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * len..(r + 1) * len]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(shape, data)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Runs DM distillation from the real images at `init` (dataset indices
/// per class). With `palette.k == 256` the palette branch is bypassed.
///
/// Wall-clock times are logged as 0 when `deterministic` is set.
pub fn distill_run(
    prepared: &Prepared,
    train: &LabeledDataset,
    init: &[Vec<usize>],
    cfg: &RunConfig,
    deterministic: bool,
) -> Result<DistillOutput> {
    cfg.validate()?;
    let dc = &cfg.distill;
    let pc = &cfg.palette;
    let mut set = SyntheticSet::from_indices(train, init)?;
    if set.classes != prepared.real_by_class.len() {
        return Err(Error::Contract(format!(
            "{} synthetic classes vs {} real classes",
            set.classes,
            prepared.real_by_class.len()
        )));
    }
    let channels = train.channels;
    let (h, w) = (train.height, train.width);
    if pc.k < MAX_COLORS {
        set.palette = Some(PaletteNetParams::from_config(channels, pc, &mut stream(dc.seed, STREAM_PALETTE))?);
    }
    let weights = pc.weights();
    let mut net_rng = stream(dc.seed, STREAM_NETS);
    let mut real_rng = stream(dc.seed, STREAM_REAL);
    let mut syn_rng = stream(dc.seed, STREAM_SYNTHETIC);
    let mut image_opt = Optimizer::new(OptimizerKind::Sgd, &[&set.images], dc.image_lr, dc.image_momentum);
    let mut palette_opt = set
        .palette
        .as_ref()
        .map(|p| Optimizer::new(pc.optimizer, &p.tensors(), pc.lr, pc.momentum));
    let start = Instant::now();
    let mut log = Vec::new();
    let per_class = dc.synthetic_batch.unwrap_or(set.ipc);

    for iter in 0..dc.iterations {
        let net = ConvNetParams::<f32>::random(prepared.net_config, &mut net_rng)?;
        let picks: Vec<Vec<usize>> = prepared
            .real_by_class
            .iter()
            .map(|r| {
                let n = r.shape()[0];
                sample(&mut real_rng, n, dc.real_batch.min(n)).into_vec()
            })
            .collect();
        let means: Vec<Vec<f32>> = prepared
            .real_by_class
            .par_iter()
            .zip(&picks)
            .map(|(r, rows)| mean_features(&net, r, rows))
            .collect::<Result<_>>()?;
        let fdim = means[0].len();
        let real_means = Tensor::new(vec![set.classes, fdim], means.concat())?;

        let rows: Vec<usize> = if per_class == set.ipc {
            (0..set.len()).collect()
        } else {
            (0..set.classes)
                .flat_map(|c| {
                    let mut r = sample(&mut syn_rng, set.ipc, per_class).into_vec();
                    r.sort_unstable();
                    r.into_iter().map(move |i| c * set.ipc + i).collect::<Vec<_>>()
                })
                .collect()
        };
        let sub = gather_rows(&set.images, &rows)?;

        let mut g = Graph::<f32>::new();
        let s = g.param(sub.clone());
        let mut aux: Option<(Var, Var, Var)> = None;
        let active;
        let (x, pal_vars) = match &set.palette {
            Some(p) => {
                let vars = p.bind(&mut g, true);
                let cond = vars.condense(&mut g, s)?;
                let map = ProbabilityMap::new(g.value(cond.m).clone(), h, w)?;
                active = mean(&map.active_buckets());
                // Auxiliary losses see S as a constant so they only train θc.
                let s_const = g.constant(sub.clone());
                let m2 = vars.prob_map(&mut g, s_const)?;
                let l_m = max_color_loss(&mut g, m2)?;
                let l_b = balance_loss(&mut g, m2, pc.balance_softmax)?;
                let l_a = align_loss(&mut g, m2, &reference_indices(&sub, pc.k)?)?;
                aux = Some((l_m, l_b, l_a));
                (cond.reconstruction, Some(vars))
            }
            None => {
                let imgs = set.to_images()?;
                active = mean(&imgs.iter().map(|im| mean(&unique_values_per_channel(im).iter().map(|&u| u as f64).collect::<Vec<_>>())).collect::<Vec<_>>());
                (s, None)
            }
        };
        let x = match &prepared.zca {
            Some(z) => z.record(&mut g, x)?,
            None => x,
        };
        let net_vars: ConvNetVars = net.bind(&mut g, false);
        let feats = net_vars.features(&mut g, x)?;
        let task = class_mean_gap(&mut g, feats, set.classes, real_means)?;
        let mut total = task;
        let mut vals = (0.0, 0.0, 0.0);
        if let Some((l_m, l_b, l_a)) = aux {
            for (term, coef) in [(l_m, weights.alpha), (l_b, weights.beta), (l_a, weights.gamma)] {
                if coef != 0.0 {
                    let scaled = g.scale(term, coef);
                    total = g.add(total, scaled)?;
                }
            }
            vals = (g.value(l_m).item().f64(), g.value(l_b).item().f64(), g.value(l_a).item().f64());
        }
        let task_value = g.value(task).item().f64();
        if !g.value(total).all_finite() {
            return Err(Error::Training {
                step: iter,
                msg: "non-finite distillation loss".into(),
            });
        }
        if iter % dc.log_every == 0 || iter + 1 == dc.iterations {
            log.push(StepLog {
                iter,
                task_loss: task_value,
                l_m: vals.0,
                l_b: vals.1,
                l_a: vals.2,
                active_buckets: active,
                wall_ms: if deterministic { 0 } else { start.elapsed().as_millis() as u64 },
            });
        }

        let mut grads = g.backward(total)?;
        let sub_grad = grads.take_or_zeros(s, sub.shape());
        let mut full = Tensor::<f32>::zeros(set.images.shape());
        let len = sub.numel() / rows.len();
        for (k, &r) in rows.iter().enumerate() {
            full.data_mut()[r * len..(r + 1) * len].copy_from_slice(&sub_grad.data()[k * len..(k + 1) * len]);
        }
        let map_err = |e: Error| match e {
            Error::Training { msg, .. } => Error::Training { step: iter, msg },
            e => e,
        };
        image_opt.step_each(vec![&mut set.images], &[full]).map_err(map_err)?;
        set.images.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        if let (Some(p), Some(vars), Some(opt)) = (set.palette.as_mut(), pal_vars, palette_opt.as_mut()) {
            let gs: Vec<Tensor<f32>> = vars
                .all()
                .into_iter()
                .zip(p.tensors())
                .map(|(v, t)| grads.take_or_zeros(v, t.shape()))
                .collect();
            opt.step_each(p.tensors_mut(), &gs).map_err(map_err)?;
        }
    }
    Ok(DistillOutput { set, log })
}
