use super::ProbabilityMap;
use crate::error::{Error, Result};
use crate::io::{unit_to_u8, Image};
use crate::nn::{Graph, Real, Var};
use crate::quantize::{median_cut, QuantMode};

/// Coefficients of the auxiliary palette losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 3.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!("loss weight {name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

fn map_dims<T: Real>(g: &Graph<T>, m: Var) -> Result<[usize; 4]> {
    match *g.shape(m) {
        [n, c, k, p] => Ok([n, c, k, p]),
        ref s => Err(Error::dim(format!("probability map {s:?} must be N×C×K×P"))),
    }
}

/// `−mean over (n, c, k)` of the per-bucket maximum probability.
pub fn max_color_loss<T: Real>(g: &mut Graph<T>, m: Var) -> Result<Var> {
    map_dims(g, m)?;
    let peak = g.max_axis(m, 3)?;
    let mean = g.mean(peak);
    Ok(g.scale(mean, -1.0))
}

/// `mean over (n, c, k)` of `P ln P`, with `P` the spatial mean of `m`.
pub fn balance_loss<T: Real>(g: &mut Graph<T>, m: Var, second_softmax: bool) -> Result<Var> {
    map_dims(g, m)?;
    let usage = g.mean_axis(m, 3)?;
    let usage = if second_softmax { g.softmax(usage, 2)? } else { usage };
    let ent = g.xlogx(usage);
    Ok(g.mean(ent))
}

/// Squared Frobenius distance between soft and reference co-assignment
/// matrices, averaged over `N·C·P²` entries.
pub fn align_loss<T: Real>(g: &mut Graph<T>, m: Var, reference: &[u32]) -> Result<Var> {
    let [n, c, k, p] = map_dims(g, m)?;
    if reference.len() != n * c * p {
        return Err(Error::dim(format!(
            "reference has {} ids, expected {}",
            reference.len(),
            n * c * p
        )));
    }
    let m3 = g.reshape(m, &[n * c, k, p])?;
    let d = g.coassign_distance(m3, reference)?;
    Ok(g.scale(d, 1.0 / (n * c * p * p) as f64))
}

/// `task + α·L_m + β·L_b + γ·L_a`.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    task: Var,
    l_m: Var,
    l_b: Var,
    l_a: Var,
    w: LossWeights,
) -> Result<Var> {
    w.validate()?;
    let mut total = task;
    for (term, coef) in [(l_m, w.alpha), (l_b, w.beta), (l_a, w.gamma)] {
        if coef != 0.0 {
            let scaled = g.scale(term, coef);
            total = g.add(total, scaled)?;
        }
    }
    Ok(total)
}

/// Scalar form of [`total_loss`].
pub fn palette_total_loss(task: f64, l_m: f64, l_b: f64, l_a: f64, w: LossWeights) -> Result<f64> {
    w.validate()?;
    Ok(task + w.alpha * l_m + w.beta * l_b + w.gamma * l_a)
}

/// Per-channel Median Cut bucket ids (`N × C × P`) of unit-scale images.
pub fn reference_indices<T: Real>(images: &crate::nn::Tensor<T>, k: usize) -> Result<Vec<u32>> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::dim(format!("images {s:?} must be N×C×H×W")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let len = c * h * w;
    let mut out = Vec::with_capacity(n * len);
    for i in 0..n {
        let bytes = images.data()[i * len..(i + 1) * len].iter().map(|v| unit_to_u8(v.f64())).collect();
        let q = median_cut(&Image::new(c, h, w, bytes)?, k, QuantMode::PerChannel)?;
        out.extend(q.indices.iter().map(|&b| b as u32));
    }
    Ok(out)
}

fn eval_on_map<T: Real>(m: &ProbabilityMap<T>, f: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(m.values.clone());
    let out = f(&mut g, v)?;
    Ok(g.value(out).item().f64())
}

pub fn loss_max_color<T: Real>(m: &ProbabilityMap<T>) -> Result<f64> {
    eval_on_map(m, |g, v| max_color_loss(g, v))
}

pub fn loss_balance<T: Real>(m: &ProbabilityMap<T>, second_softmax: bool) -> Result<f64> {
    eval_on_map(m, |g, v| balance_loss(g, v, second_softmax))
}

/// Errors with a config error when the reference uses ids beyond the map's K.
pub fn loss_align<T: Real>(m: &ProbabilityMap<T>, reference: &[u32]) -> Result<f64> {
    eval_on_map(m, |g, v| align_loss(g, v, reference))
}
