//! Tape-based reverse-mode differentiation over a fixed operator set.
//!
//! A [`Graph`] records every operation eagerly: values are computed as ops
//! are pushed, and [`Graph::backward`] replays the tape in reverse once.
//! The operator set is closed over what the palette network, the
//! distribution-matching loss and the evaluation ConvNet need.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::tensor::{matmul_into, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct AxisView {
    outer: usize,
    axis: usize,
    inner: usize,
}

impl AxisView {
    fn of(shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
        }
        Ok(Self {
            outer: shape[..axis].iter().product(),
            axis: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    XLogX(Var),
    Relu(Var),
    Reshape(Var),
    SumAll(Var),
    SumAxis(Var, AxisView),
    MaxAxis(Var, AxisView, Vec<usize>),
    Softmax(Var, AxisView),
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        fin: usize,
        fout: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        n: usize,
        c: usize,
        hw: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    AvgPool2 {
        x: Var,
        planes: usize,
        h: usize,
        w: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    StraightThrough(Var),
    Coassign {
        m: Var,
        reference: Vec<u32>,
        groups: usize,
        k: usize,
        p: usize,
        /// Per group: Mᵀ·H (k × k) followed by MᵀM (k × k).
        cache: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every leaf created with
/// [`Graph::param`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    /// Gradient for `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.grads.remove(&v).unwrap_or_else(|| Tensor::zeros(shape))
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// `x·ln x`, with the limit value 0 at `x = 0`.
    pub fn xlogx(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > T::zero() { v * v.ln() } else { T::zero() },
            Op::XLogX(x),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut out: Vec<usize> = shape.to_vec();
        out.remove(axis);
        if out.is_empty() {
            out.push(1);
        }
        out
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let view = AxisView::of(self.shape(x), axis)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); view.outer * view.inner];
        for o in 0..view.outer {
            for k in 0..view.axis {
                let base = (o * view.axis + k) * view.inner;
                for i in 0..view.inner {
                    out[o * view.inner + i] += src[base + i];
                }
            }
        }
        let shape = Self::reduced_shape(self.shape(x), axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis(x, view), rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.shape(x).get(axis).copied().unwrap_or(1) as f64;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n))
    }

    /// Maximum along `axis`; the gradient goes to the first maximal entry.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let view = AxisView::of(self.shape(x), axis)?;
        let src = self.value(x).data();
        let mut out = vec![T::neg_infinity(); view.outer * view.inner];
        let mut arg = vec![0usize; view.outer * view.inner];
        for o in 0..view.outer {
            for k in 0..view.axis {
                let base = (o * view.axis + k) * view.inner;
                for i in 0..view.inner {
                    let v = src[base + i];
                    let slot = o * view.inner + i;
                    if v > out[slot] {
                        out[slot] = v;
                        arg[slot] = k;
                    }
                }
            }
        }
        let shape = Self::reduced_shape(self.shape(x), axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxAxis(x, view, arg), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let view = AxisView::of(self.shape(x), axis)?;
        let y = kernels::softmax_axis(self.value(x).data(), view.outer, view.axis, view.inner);
        let t = Tensor::new(self.shape(x).to_vec(), y)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax(x, view), rg))
    }

    /// Batched matrix product on rank-3 operands, optionally transposing
    /// the trailing two axes of either side.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim(format!("bmm operands {sa:?} and {sb:?}")));
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(Error::dim(format!("bmm inner dims {k} vs {k2}")));
        }
        let batch = sa[0];
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                matmul_into(
                    &va[i * m * k..(i + 1) * m * k],
                    ta,
                    &vb[i * k * n..(i + 1) * k * n],
                    tb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                    false,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::Bmm {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// `y = x·wᵀ + b` with `x`: R×Fin, `w`: Fout×Fin, `b`: Fout.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::dim(format!("linear input {sx:?} with weight {sw:?}")));
        }
        let (rows, fin, fout) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(Error::dim(format!("linear bias {:?}, expected [{fout}]", self.shape(b))));
            }
        }
        let mut out = vec![T::zero(); rows * fout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in 0..rows {
                out[r * fout..(r + 1) * fout].copy_from_slice(bv);
            }
        }
        matmul_into(
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            rows,
            fin,
            fout,
            b.is_some(),
        );
        let rg = self.rg(x) || self.rg(w) || b.map_or(false, |b| self.rg(b));
        Ok(self.push(
            Tensor::new(vec![rows, fout], out)?,
            Op::Linear {
                x,
                w,
                b,
                rows,
                fin,
                fout,
            },
            rg,
        ))
    }

    /// Stride-1, same-padding convolution with an odd square kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(Error::dim(format!("conv2d input {sx:?} with weight {sw:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::dim(format!("conv2d bias {:?}", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            o: sw[0],
            k: sw[2],
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let rg = self.rg(x) || self.rg(w) || b.map_or(false, |b| self.rg(b));
        Ok(self.push(
            Tensor::new(vec![geom.n, geom.o, geom.h, geom.w], out)?,
            Op::Conv2d { x, w, b, geom },
            rg,
        ))
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || self.shape(gamma) != [sx[1]] || self.shape(beta) != [sx[1]] {
            return Err(Error::dim(format!("instance norm input {sx:?}")));
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let (y, xhat, inv_std) = kernels::instance_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            n,
            c,
            hw,
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(sx, y)?,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                n,
                c,
                hw,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || sx[2] % 2 != 0 || sx[3] % 2 != 0 {
            return Err(Error::dim(format!("avg pool input {sx:?} needs even H, W")));
        }
        let planes = sx[0] * sx[1];
        let out = kernels::avg_pool2_forward(self.value(x).data(), planes, sx[2], sx[3]);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![sx[0], sx[1], sx[2] / 2, sx[3] / 2], out)?,
            Op::AvgPool2 {
                x,
                planes,
                h: sx[2],
                w: sx[3],
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim(format!("cross entropy logits {s:?} for {} labels", labels.len())));
        }
        let classes = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Parameter(format!("label {bad} out of range for {classes} classes")));
        }
        let probs = kernels::softmax_axis(self.value(logits).data(), s[0], classes, 1);
        let tiny = T::min_positive_value();
        let nll = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -(probs[r * classes + l].max(tiny)).ln())
            .sum::<T>()
            / T::of(s[0] as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(nll),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Forward value is `hard`; the backward pass treats the node as the
    /// identity on `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor<T>) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(Error::dim(format!(
                "straight-through hard {:?} vs soft {:?}",
                hard.shape(),
                self.shape(soft)
            )));
        }
        let rg = self.rg(soft);
        Ok(self.push(hard, Op::StraightThrough(soft), rg))
    }

    /// Sum over groups of `‖M Mᵀ − H Hᵀ‖²_F`, where `m` is `groups × K × P`
    /// (each group holds `Mᵀ`, the bucket-by-pixel soft assignment) and `H`
    /// is the one-hot matrix of `reference` (`groups × P` bucket ids `< K`).
    ///
    /// Evaluated through `‖MᵀM‖² − 2‖MᵀH‖² + ‖HᵀH‖²`, which never forms the
    /// P×P co-assignment matrices.
    pub fn coassign_distance(&mut self, m: Var, reference: &[u32]) -> Result<Var> {
        let s = self.shape(m).to_vec();
        if s.len() != 3 {
            return Err(Error::dim(format!("co-assignment input {s:?} must be groups×K×P")));
        }
        let (groups, k, p) = (s[0], s[1], s[2]);
        if reference.len() != groups * p {
            return Err(Error::dim(format!(
                "reference has {} entries, expected {}",
                reference.len(),
                groups * p
            )));
        }
        if let Some(&bad) = reference.iter().find(|&&r| r as usize >= k) {
            return Err(Error::Config(format!("reference bucket {bad} not below K = {k}")));
        }
        let mv = self.value(m).data();
        let mut cache = vec![T::zero(); groups * 2 * k * k];
        let mut total = T::zero();
        for g in 0..groups {
            let mg = &mv[g * k * p..(g + 1) * k * p];
            let refs = &reference[g * p..(g + 1) * p];
            let (t, d) = cache[g * 2 * k * k..(g + 1) * 2 * k * k].split_at_mut(k * k);
            for kk in 0..k {
                let row = &mg[kk * p..(kk + 1) * p];
                for (px, &r) in refs.iter().enumerate() {
                    t[kk * k + r as usize] += row[px];
                }
            }
            matmul_into(mg, false, mg, true, d, k, p, k, false);
            let mut counts = vec![0usize; k];
            refs.iter().for_each(|&r| counts[r as usize] += 1);
            let hh: f64 = counts.iter().map(|&c| (c * c) as f64).sum();
            let dd = d.iter().map(|&v| v * v).sum::<T>();
            let tt = t.iter().map(|&v| v * v).sum::<T>();
            total += dd - T::of(2.0) * tt + T::of(hh);
        }
        let rg = self.rg(m);
        Ok(self.push(
            Tensor::scalar(total),
            Op::Coassign {
                m,
                reference: reference.to_vec(),
                groups,
                k,
                p,
                cache,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. A graph supports one backward
    /// pass; build a new graph for the next step.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Contract(
                "backward already ran on this graph; re-run the forward pass".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = HashMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let node = &self.nodes[idx];
            let mut send = |v: Var, contrib: Vec<T>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += *c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |v: Var| self.nodes[v.0].value.data();
            match &node.op {
                Op::Leaf => {
                    out.insert(Var(idx), Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Add(a, b) => {
                    send(*b, g.clone());
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.iter().map(|&x| -x).collect());
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    send(*a, g.iter().zip(vb).map(|(&x, &y)| x * y).collect());
                    send(*b, g.iter().zip(va).map(|(&x, &y)| x * y).collect());
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    send(*a, g.iter().zip(vb).map(|(&x, &y)| x / y).collect());
                    send(
                        *b,
                        g.iter()
                            .zip(va.iter().zip(vb))
                            .map(|(&x, (&p, &q))| -x * p / (q * q))
                            .collect(),
                    );
                }
                Op::Scale(x, s) => send(*x, g.iter().map(|&v| v * *s).collect()),
                Op::AddScalar(x) | Op::Reshape(x) | Op::StraightThrough(x) => send(*x, g),
                Op::Square(x) => {
                    let two = T::of(2.0);
                    send(*x, g.iter().zip(val(*x)).map(|(&d, &v)| two * v * d).collect());
                }
                Op::XLogX(x) => {
                    let tiny = T::min_positive_value();
                    send(
                        *x,
                        g.iter()
                            .zip(val(*x))
                            .map(|(&d, &v)| d * (v.max(tiny).ln() + T::one()))
                            .collect(),
                    );
                }
                Op::Relu(x) => send(
                    *x,
                    g.iter()
                        .zip(val(*x))
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect(),
                ),
                Op::SumAll(x) => {
                    let n = self.nodes[x.0].value.numel();
                    send(*x, vec![g[0]; n]);
                }
                Op::SumAxis(x, view) => {
                    let mut dx = vec![T::zero(); view.outer * view.axis * view.inner];
                    for o in 0..view.outer {
                        for k in 0..view.axis {
                            let base = (o * view.axis + k) * view.inner;
                            dx[base..base + view.inner]
                                .copy_from_slice(&g[o * view.inner..(o + 1) * view.inner]);
                        }
                    }
                    send(*x, dx);
                }
                Op::MaxAxis(x, view, arg) => {
                    let mut dx = vec![T::zero(); view.outer * view.axis * view.inner];
                    for o in 0..view.outer {
                        for i in 0..view.inner {
                            let slot = o * view.inner + i;
                            dx[(o * view.axis + arg[slot]) * view.inner + i] = g[slot];
                        }
                    }
                    send(*x, dx);
                }
                Op::Softmax(x, view) => {
                    let y = node.value.data();
                    let mut dx = vec![T::zero(); y.len()];
                    for o in 0..view.outer {
                        let base = o * view.axis * view.inner;
                        for i in 0..view.inner {
                            let mut dot = T::zero();
                            for k in 0..view.axis {
                                let j = base + k * view.inner + i;
                                dot += g[j] * y[j];
                            }
                            for k in 0..view.axis {
                                let j = base + k * view.inner + i;
                                dx[j] = y[j] * (g[j] - dot);
                            }
                        }
                    }
                    send(*x, dx);
                }
                &Op::Bmm {
                    a,
                    b,
                    ta,
                    tb,
                    batch,
                    m,
                    k,
                    n,
                } => {
                    let (va, vb) = (val(a), val(b));
                    if self.nodes[a.0].requires_grad {
                        let mut da = vec![T::zero(); batch * m * k];
                        for i in 0..batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let bi = &vb[i * k * n..(i + 1) * k * n];
                            let dai = &mut da[i * m * k..(i + 1) * m * k];
                            if ta {
                                matmul_into(bi, tb, gi, true, dai, k, n, m, false);
                            } else {
                                matmul_into(gi, false, bi, !tb, dai, m, n, k, false);
                            }
                        }
                        send(a, da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let mut db = vec![T::zero(); batch * k * n];
                        for i in 0..batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let ai = &va[i * m * k..(i + 1) * m * k];
                            let dbi = &mut db[i * k * n..(i + 1) * k * n];
                            if tb {
                                matmul_into(gi, true, ai, ta, dbi, n, m, k, false);
                            } else {
                                matmul_into(ai, !ta, gi, false, dbi, k, m, n, false);
                            }
                        }
                        send(b, db);
                    }
                }
                &Op::Linear {
                    x,
                    w,
                    b,
                    rows,
                    fin,
                    fout,
                } => {
                    if self.nodes[x.0].requires_grad {
                        let mut dx = vec![T::zero(); rows * fin];
                        matmul_into(&g, false, val(w), false, &mut dx, rows, fout, fin, false);
                        send(x, dx);
                    }
                    if self.nodes[w.0].requires_grad {
                        let mut dw = vec![T::zero(); fout * fin];
                        matmul_into(&g, true, val(x), false, &mut dw, fout, rows, fin, false);
                        send(w, dw);
                    }
                    if let Some(b) = b {
                        let mut db = vec![T::zero(); fout];
                        for r in 0..rows {
                            db.iter_mut()
                                .zip(&g[r * fout..(r + 1) * fout])
                                .for_each(|(a, &v)| *a += v);
                        }
                        send(b, db);
                    }
                }
                &Op::Conv2d { x, w, b, geom } => {
                    let grads_c = kernels::conv2d_backward(
                        val(x),
                        val(w),
                        &g,
                        &geom,
                        self.nodes[x.0].requires_grad,
                        self.nodes[w.0].requires_grad,
                        b.map_or(false, |b| self.nodes[b.0].requires_grad),
                    );
                    if let Some(dx) = grads_c.dx {
                        send(x, dx);
                    }
                    if let Some(dw) = grads_c.dweight {
                        send(w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, grads_c.dbias) {
                        send(b, db);
                    }
                }
                Op::InstanceNorm {
                    x,
                    gamma,
                    beta,
                    n,
                    c,
                    hw,
                    xhat,
                    inv_std,
                } => {
                    let (dx, dg, db) =
                        kernels::instance_norm_backward(&g, xhat, inv_std, val(*gamma), *n, *c, *hw);
                    send(*x, dx);
                    send(*gamma, dg);
                    send(*beta, db);
                }
                &Op::AvgPool2 { x, planes, h, w } => {
                    send(x, kernels::avg_pool2_backward(&g, planes, h, w));
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let rows = labels.len();
                    let classes = probs.len() / rows;
                    let scale = g[0] / T::of(rows as f64);
                    let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        dx[r * classes + l] -= scale;
                    }
                    send(*logits, dx);
                }
                Op::Coassign {
                    m,
                    reference,
                    groups,
                    k,
                    p,
                    cache,
                } => {
                    let (groups, k, p) = (*groups, *k, *p);
                    let mv = val(*m);
                    let four = T::of(4.0) * g[0];
                    let mut dm = vec![T::zero(); groups * k * p];
                    for gi in 0..groups {
                        let mg = &mv[gi * k * p..(gi + 1) * k * p];
                        let (t, d) = cache[gi * 2 * k * k..(gi + 1) * 2 * k * k].split_at(k * k);
                        let dmg = &mut dm[gi * k * p..(gi + 1) * k * p];
                        // 4·(MᵀM)·Mᵀ
                        matmul_into(d, false, mg, false, dmg, k, k, p, false);
                        let refs = &reference[gi * p..(gi + 1) * p];
                        for kk in 0..k {
                            let row = &mut dmg[kk * p..(kk + 1) * p];
                            for (px, &r) in refs.iter().enumerate() {
                                row[px] = four * (row[px] - t[kk * k + r as usize]);
                            }
                        }
                    }
                    send(*m, dm);
                }
            }
        }
        Ok(Gradients { grads: out })
    }
}
