//! SGD with heavy-ball momentum, and Adam.

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Either optimizer behind one stepping interface.
#[derive(Clone, Debug)]
pub enum Optimizer<T> {
    Sgd(Sgd<T>),
    Adam(Adam<T>),
}

impl<T: Real> Optimizer<T> {
    /// `momentum` is ignored by Adam.
    pub fn new(kind: OptimizerKind, params: &[&Tensor<T>], lr: f64, momentum: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => {
                let owned: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
                Optimizer::Sgd(Sgd::new(&owned, lr, momentum))
            }
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(params, lr)),
        }
    }

    pub fn step_each(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>]) -> Result<()> {
        match self {
            Optimizer::Sgd(o) => o.step_each(params, grads),
            Optimizer::Adam(o) => o.step_each(params, grads),
        }
    }
}

/// One momentum step: `v ← μ·v + g`, `p ← p − lr·v`.
///
/// Returns `(new_params, new_velocity)`; inputs are left untouched.
pub fn sgd_step<T: Real>(
    params: &[Tensor<T>],
    grads: &[Tensor<T>],
    velocity: &[Tensor<T>],
    lr: f64,
    momentum: f64,
) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
    let mut p = params.to_vec();
    let mut v = velocity.to_vec();
    let mut opt = Sgd {
        lr,
        momentum,
        weight_decay: 0.0,
        velocity: std::mem::take(&mut v),
        step: 0,
    };
    opt.step(&mut p, grads)?;
    Ok((p, opt.velocity))
}

/// Stateful optimizer owning the velocity buffers of one parameter group.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
    step: usize,
}

impl<T: Real> Sgd<T> {
    pub fn new(params: &[Tensor<T>], lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay: 0.0,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        self.step_each(params.iter_mut().collect(), grads)
    }

    /// [`Sgd::step`] over parameters held in separate places.
    pub fn step_each(&mut self, mut params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>]) -> Result<()> {
        check_step(&params, grads, self.step)?;
        if params.len() != self.velocity.len() || params.iter().zip(&self.velocity).any(|(p, v)| p.shape() != v.shape()) {
            return Err(Error::dim("sgd velocity buffers do not match the parameters"));
        }
        let (lr, mu, wd) = (T::of(self.lr), T::of(self.momentum), T::of(self.weight_decay));
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mu * *vv + gv + wd * *pv;
                *pv -= lr * *vv;
            }
        }
        self.step += 1;
        Ok(())
    }
}

fn check_step<T: Real>(params: &[&mut Tensor<T>], grads: &[Tensor<T>], step: usize) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim(format!("optimizer got {} params and {} grads", params.len(), grads.len())));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params[i].shape() {
            return Err(Error::dim(format!(
                "optimizer shape mismatch on tensor {i}: {:?} vs {:?}",
                g.shape(),
                params[i].shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::Training {
                step,
                msg: format!("non-finite gradient in tensor {i}"),
            });
        }
    }
    Ok(())
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: usize,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &[&Tensor<T>], lr: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn step_each(&mut self, mut params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>]) -> Result<()> {
        check_step(&params, grads, self.step)?;
        if params.len() != self.first.len() {
            return Err(Error::dim(format!("adam has {} moment buffers for {} params", self.first.len(), params.len())));
        }
        let t = (self.step + 1) as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = T::of(1.0 / (1.0 - b1.powi(t)));
        let c2 = T::of(1.0 / (1.0 - b2.powi(t)));
        let (tb1, tb2, lr, eps) = (T::of(b1), T::of(b2), T::of(self.lr), T::of(self.eps));
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (self.first[i].data_mut(), self.second[i].data_mut());
            for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = tb1 * m[j] + (T::one() - tb1) * gv;
                v[j] = tb2 * v[j] + (T::one() - tb2) * gv * gv;
                *pv -= lr * (m[j] * c1) / ((v[j] * c2).sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}
