//! Forward and backward kernels shared by the tape and the no-grad paths.

use super::tensor::{matmul_into, Real};

/// Instance-norm epsilon (same as the common GroupNorm default).
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
}

impl ConvGeom {
    fn pad(&self) -> usize {
        self.k / 2
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (h, w, k, pad) = (g.h as isize, g.w as isize, g.k, g.pad() as isize);
    let hw = g.hw();
    for c in 0..g.c {
        let plane = &x[c * hw..(c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let di = ki as isize - pad;
                let dj = kj as isize - pad;
                for oh in 0..h {
                    let ih = oh + di;
                    let out_row = &mut dst[(oh * w) as usize..((oh + 1) * w) as usize];
                    if ih < 0 || ih >= h {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[(ih * w) as usize..((ih + 1) * w) as usize];
                    for ow in 0..w {
                        let iw = ow + dj;
                        out_row[ow as usize] = if iw < 0 || iw >= w {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (h, w, k, pad) = (g.h as isize, g.w as isize, g.k, g.pad() as isize);
    let hw = g.hw();
    for c in 0..g.c {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * hw..(row + 1) * hw];
                let di = ki as isize - pad;
                let dj = kj as isize - pad;
                for oh in 0..h {
                    let ih = oh + di;
                    if ih < 0 || ih >= h {
                        continue;
                    }
                    for ow in 0..w {
                        let iw = ow + dj;
                        if iw >= 0 && iw < w {
                            plane[(ih * w + iw) as usize] += src[(oh * w + ow) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 "same" convolution. `x`: N×C×H×W, `weight`: O×C×k×k.
pub fn conv2d_forward<T: Real>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let hw = g.hw();
    let mut out = vec![T::zero(); g.n * g.o * hw];
    let mut col = if g.k == 1 {
        Vec::new()
    } else {
        vec![T::zero(); g.ckk() * hw]
    };
    for n in 0..g.n {
        let xn = &x[n * g.c * hw..(n + 1) * g.c * hw];
        let yn = &mut out[n * g.o * hw..(n + 1) * g.o * hw];
        if let Some(b) = bias {
            for (o, row) in yn.chunks_mut(hw).enumerate() {
                row.iter_mut().for_each(|v| *v = b[o]);
            }
        }
        let src: &[T] = if g.k == 1 {
            xn
        } else {
            im2col(xn, g, &mut col);
            &col
        };
        matmul_into(weight, false, src, false, yn, g.o, g.ckk(), hw, bias.is_some());
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dweight: Option<Vec<T>>,
    pub dbias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let hw = g.hw();
    let ckk = g.ckk();
    let mut dx = need_dx.then(|| vec![T::zero(); g.n * g.c * hw]);
    let mut dw = need_dw.then(|| vec![T::zero(); g.o * ckk]);
    let mut db = need_db.then(|| vec![T::zero(); g.o]);
    let mut col = vec![T::zero(); if g.k == 1 { 0 } else { ckk * hw }];
    let mut dcol = vec![T::zero(); if need_dx && g.k != 1 { ckk * hw } else { 0 }];
    for n in 0..g.n {
        let xn = &x[n * g.c * hw..(n + 1) * g.c * hw];
        let dyn_ = &dy[n * g.o * hw..(n + 1) * g.o * hw];
        if let Some(db) = db.as_mut() {
            for (o, row) in dyn_.chunks(hw).enumerate() {
                db[o] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if g.k == 1 {
                xn
            } else {
                im2col(xn, g, &mut col);
                &col
            };
            // dW (O×CKK) += dy (O×HW) · colᵀ (HW×CKK)
            matmul_into(dyn_, false, src, true, dw, g.o, hw, ckk, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * g.c * hw..(n + 1) * g.c * hw];
            if g.k == 1 {
                matmul_into(weight, true, dyn_, false, dxn, ckk, g.o, hw, true);
            } else {
                matmul_into(weight, true, dyn_, false, &mut dcol, ckk, g.o, hw, false);
                col2im_add(&dcol, g, dxn);
            }
        }
    }
    ConvGrads {
        dx,
        dweight: dw,
        dbias: db,
    }
}

/// Per-(sample, channel) normalization over the spatial plane, followed by
/// a per-channel affine map. Returns `(y, xhat, inv_std)`.
pub fn instance_norm_forward<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    n: usize,
    c: usize,
    hw: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let eps = T::of(INSTANCE_NORM_EPS);
    let inv_hw = T::one() / T::of(hw as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); n * c];
    for s in 0..n * c {
        let ch = s % c;
        let xs = &x[s * hw..(s + 1) * hw];
        let mean = xs.iter().copied().sum::<T>() * inv_hw;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_hw;
        let is = T::one() / (var + eps).sqrt();
        inv_std[s] = is;
        for i in 0..hw {
            let xh = (xs[i] - mean) * is;
            xhat[s * hw + i] = xh;
            y[s * hw + i] = gamma[ch] * xh + beta[ch];
        }
    }
    (y, xhat, inv_std)
}

/// Returns `(dx, dgamma, dbeta)`.
#[allow(clippy::too_many_arguments)]
pub fn instance_norm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    n: usize,
    c: usize,
    hw: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let hw_t = T::of(hw as f64);
    for s in 0..n * c {
        let ch = s % c;
        let dys = &dy[s * hw..(s + 1) * hw];
        let xhs = &xhat[s * hw..(s + 1) * hw];
        let mut sum_dxh = T::zero();
        let mut sum_dxh_xh = T::zero();
        for i in 0..hw {
            dgamma[ch] += dys[i] * xhs[i];
            dbeta[ch] += dys[i];
            let dxh = dys[i] * gamma[ch];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xhs[i];
        }
        let k = inv_std[s] / hw_t;
        for i in 0..hw {
            let dxh = dys[i] * gamma[ch];
            dx[s * hw + i] = k * (hw_t * dxh - sum_dxh - xhs[i] * sum_dxh_xh);
        }
    }
    (dx, dgamma, dbeta)
}

/// 2×2 average pooling with stride 2 over `planes` H×W planes.
pub fn avg_pool2_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let a = src[(2 * i) * w + 2 * j];
                let b = src[(2 * i) * w + 2 * j + 1];
                let c = src[(2 * i + 1) * w + 2 * j];
                let d = src[(2 * i + 1) * w + 2 * j + 1];
                dst[i * ow + j] = (a + b + c + d) * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Real>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let g = src[i * ow + j] * quarter;
                dst[(2 * i) * w + 2 * j] = g;
                dst[(2 * i) * w + 2 * j + 1] = g;
                dst[(2 * i + 1) * w + 2 * j] = g;
                dst[(2 * i + 1) * w + 2 * j + 1] = g;
            }
        }
    }
    dx
}

/// Softmax along the middle axis of an `(outer, axis, inner)` view.
pub fn softmax_axis<T: Real>(x: &[T], outer: usize, axis: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        let base = o * axis * inner;
        for i in 0..inner {
            let idx = |k: usize| base + k * inner + i;
            let mut mx = T::neg_infinity();
            for k in 0..axis {
                mx = mx.max(x[idx(k)]);
            }
            let mut total = T::zero();
            for k in 0..axis {
                let e = (x[idx(k)] - mx).exp();
                y[idx(k)] = e;
                total += e;
            }
            for k in 0..axis {
                y[idx(k)] /= total;
            }
        }
    }
    y
}
