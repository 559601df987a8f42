//! Differentiable tensor operations: forward kernels plus the reverse-mode
//! rules walked by [`Tensor::backward`].
//!
//! Each operation validates shapes up front, computes the forward value into
//! a fresh buffer, and records an [`Op`] node when gradients are being
//! tracked. Backward rules recompute cheap intermediates (means, norms,
//! softmax rows) from the saved operands rather than caching them.

use std::f64::consts::PI;
use std::rc::Rc;

use super::scalar::Scalar;
use super::tensor::{Tensor, TensorError};

fn matrix_dims<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(TensorError::NotAMatrix {
            op,
            shape: other.to_vec(),
        }),
    }
}

fn same_shape<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &'static str,
) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn phi<T: Scalar>(x: T) -> T {
    // Standard normal CDF via the error function.
    let half = T::from_f64(0.5);
    half * (T::one() + (x / T::from_f64(std::f64::consts::SQRT_2)).erf())
}

fn phi_pdf<T: Scalar>(x: T) -> T {
    let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * PI).sqrt());
    inv_sqrt_2pi * (-x * x * T::from_f64(0.5)).exp()
}

fn softplus_scalar<T: Scalar>(x: T) -> T {
    // max(x, 0) + ln(1 + exp(-|x|)) avoids overflow on both tails.
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Stable per-row softmax into `dst`.
fn softmax_row<T: Scalar>(src: &[T], dst: &mut [T]) {
    let max = src.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (d, &x) in dst.iter_mut().zip(src) {
        *d = (x - max).exp();
        sum = sum + *d;
    }
    for d in dst.iter_mut() {
        *d = *d / sum;
    }
}

/// Indices of the `m` largest entries, ties broken toward the lower index.
pub(super) fn top_m_indices<T: Scalar>(row: &[T], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| match row[b].partial_cmp(&row[a]) {
        Some(ord) if ord != std::cmp::Ordering::Equal => ord,
        _ => a.cmp(&b),
    });
    order.truncate(m);
    order
}

/// Bilinear sample positions with half-pixel centers (corner alignment off).
fn bilinear_axis(out_i: usize, in_extent: usize, out_extent: usize) -> (usize, usize, f64) {
    let scale = in_extent as f64 / out_extent as f64;
    let src = ((out_i as f64 + 0.5) * scale - 0.5).max(0.0);
    let lo = (src.floor() as usize).min(in_extent - 1);
    let hi = (lo + 1).min(in_extent - 1);
    (lo, hi, src - lo as f64)
}

pub(super) enum Op<T: Scalar> {
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    Div(Tensor<T>, Tensor<T>),
    AddBias {
        x: Tensor<T>,
        bias: Tensor<T>,
    },
    Scale {
        x: Tensor<T>,
        factor: T,
    },
    Matmul {
        a: Tensor<T>,
        b: Tensor<T>,
    },
    Transpose {
        x: Tensor<T>,
    },
    Reshape {
        x: Tensor<T>,
    },
    SoftmaxRows {
        x: Tensor<T>,
    },
    LayerNorm {
        x: Tensor<T>,
        gamma: Tensor<T>,
        beta: Tensor<T>,
        eps: T,
    },
    Gelu {
        x: Tensor<T>,
    },
    Softplus {
        x: Tensor<T>,
    },
    NormalCdf {
        x: Tensor<T>,
    },
    GatherRows {
        x: Tensor<T>,
        idx: Rc<Vec<usize>>,
    },
    ScatterRows {
        x: Tensor<T>,
        idx: Rc<Vec<usize>>,
    },
    ConcatRows {
        parts: Vec<Tensor<T>>,
    },
    SliceRows {
        x: Tensor<T>,
        start: usize,
    },
    ConcatCols {
        parts: Vec<Tensor<T>>,
    },
    SliceCols {
        x: Tensor<T>,
        start: usize,
    },
    RowScale {
        x: Tensor<T>,
        w: Tensor<T>,
    },
    ColSums {
        x: Tensor<T>,
    },
    SumAll {
        x: Tensor<T>,
    },
    CrossEntropyMasked {
        logits: Tensor<T>,
        targets: Rc<Vec<usize>>,
        ignore_index: usize,
        scored: usize,
    },
    TopMSoftmaxRows {
        x: Tensor<T>,
    },
    L2NormalizeRows {
        x: Tensor<T>,
        eps: T,
    },
    BilinearUpsample {
        x: Tensor<T>,
        out_h: usize,
        out_w: usize,
    },
    GatherColsPerRow {
        x: Tensor<T>,
        idx: Rc<Vec<usize>>,
        width: usize,
    },
    CvSquared {
        x: Tensor<T>,
    },
}

impl<T: Scalar> Op<T> {
    pub(super) fn parents(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
            Op::AddBias { x, bias } => vec![x, bias],
            Op::Scale { x, .. }
            | Op::Transpose { x }
            | Op::Reshape { x }
            | Op::SoftmaxRows { x }
            | Op::Gelu { x }
            | Op::Softplus { x }
            | Op::NormalCdf { x }
            | Op::GatherRows { x, .. }
            | Op::ScatterRows { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::ColSums { x }
            | Op::SumAll { x }
            | Op::TopMSoftmaxRows { x }
            | Op::L2NormalizeRows { x, .. }
            | Op::BilinearUpsample { x, .. }
            | Op::GatherColsPerRow { x, .. }
            | Op::CvSquared { x } => vec![x],
            Op::Matmul { a, b } => vec![a, b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::ConcatRows { parts } | Op::ConcatCols { parts } => parts.iter().collect(),
            Op::RowScale { x, w } => vec![x, w],
            Op::CrossEntropyMasked { logits, .. } => vec![logits],
        }
    }

    /// Pushes each tracked parent's gradient contribution through `sink`.
    pub(super) fn backprop(
        &self,
        node: &Tensor<T>,
        grad: &[T],
        sink: &mut dyn FnMut(&Tensor<T>, Vec<T>),
    ) {
        match self {
            Op::Add(a, b) => {
                if a.is_tracked() {
                    sink(a, grad.to_vec());
                }
                if b.is_tracked() {
                    sink(b, grad.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if a.is_tracked() {
                    sink(a, grad.to_vec());
                }
                if b.is_tracked() {
                    sink(b, grad.iter().map(|&g| -g).collect());
                }
            }
            Op::Mul(a, b) => {
                if a.is_tracked() {
                    let bd = b.data();
                    sink(a, grad.iter().zip(bd.iter()).map(|(&g, &v)| g * v).collect());
                }
                if b.is_tracked() {
                    let ad = a.data();
                    sink(b, grad.iter().zip(ad.iter()).map(|(&g, &v)| g * v).collect());
                }
            }
            Op::Div(a, b) => {
                let bd = b.data();
                if a.is_tracked() {
                    sink(a, grad.iter().zip(bd.iter()).map(|(&g, &v)| g / v).collect());
                }
                if b.is_tracked() {
                    let ad = a.data();
                    let contrib = grad
                        .iter()
                        .zip(ad.iter())
                        .zip(bd.iter())
                        .map(|((&g, &av), &bv)| -g * av / (bv * bv))
                        .collect();
                    sink(b, contrib);
                }
            }
            Op::AddBias { x, bias } => {
                let cols = bias.numel();
                if x.is_tracked() {
                    sink(x, grad.to_vec());
                }
                if bias.is_tracked() {
                    let mut db = vec![T::zero(); cols];
                    for row in grad.chunks_exact(cols) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d = *d + g;
                        }
                    }
                    sink(bias, db);
                }
            }
            Op::Scale { x, factor } => {
                if x.is_tracked() {
                    sink(x, grad.iter().map(|&g| g * *factor).collect());
                }
            }
            Op::Matmul { a, b } => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if a.is_tracked() {
                    // dA = dC · B^T
                    let bd = b.data();
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, grad, n, 1, &bd, 1, n, &mut da);
                    sink(a, da);
                }
                if b.is_tracked() {
                    // dB = A^T · dC
                    let ad = a.data();
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, &ad, 1, k, grad, n, 1, &mut db);
                    sink(b, db);
                }
            }
            Op::Transpose { x } => {
                if x.is_tracked() {
                    // node is [c, r]; grad transposed back to [r, c]
                    let (r, c) = (x.shape()[0], x.shape()[1]);
                    let mut dx = vec![T::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = grad[j * r + i];
                        }
                    }
                    sink(x, dx);
                }
            }
            Op::Reshape { x } => {
                if x.is_tracked() {
                    sink(x, grad.to_vec());
                }
            }
            Op::SoftmaxRows { x } => {
                if x.is_tracked() {
                    let cols = *node.shape().last().unwrap();
                    let y = node.data();
                    let mut dx = vec![T::zero(); y.len()];
                    for ((yr, gr), dr) in y
                        .chunks_exact(cols)
                        .zip(grad.chunks_exact(cols))
                        .zip(dx.chunks_exact_mut(cols))
                    {
                        let dot = yr
                            .iter()
                            .zip(gr)
                            .fold(T::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    sink(x, dx);
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (rows, cols) = (x.shape()[0], x.shape()[1]);
                let xd = x.data();
                let gd = gamma.data();
                let inv_cols = T::one() / T::from_f64(cols as f64);

                let mut dx = vec![T::zero(); rows * cols];
                let mut dgamma = vec![T::zero(); cols];
                let mut dbeta = vec![T::zero(); cols];
                for r in 0..rows {
                    let xr = &xd[r * cols..(r + 1) * cols];
                    let gr = &grad[r * cols..(r + 1) * cols];
                    let mean = xr.iter().fold(T::zero(), |a, &v| a + v) * inv_cols;
                    let var = xr
                        .iter()
                        .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                        * inv_cols;
                    let inv_std = T::one() / (var + *eps).sqrt();

                    // dgamma/dbeta accumulate over rows; dx̂ = dy * gamma.
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for c in 0..cols {
                        let xh = (xr[c] - mean) * inv_std;
                        dgamma[c] = dgamma[c] + gr[c] * xh;
                        dbeta[c] = dbeta[c] + gr[c];
                        let dxh = gr[c] * gd[c];
                        mean_dxh = mean_dxh + dxh;
                        mean_dxh_xh = mean_dxh_xh + dxh * xh;
                    }
                    mean_dxh = mean_dxh * inv_cols;
                    mean_dxh_xh = mean_dxh_xh * inv_cols;
                    for c in 0..cols {
                        let xh = (xr[c] - mean) * inv_std;
                        let dxh = gr[c] * gd[c];
                        dx[r * cols + c] = (dxh - mean_dxh - xh * mean_dxh_xh) * inv_std;
                    }
                }
                if x.is_tracked() {
                    sink(x, dx);
                }
                if gamma.is_tracked() {
                    sink(gamma, dgamma);
                }
                if beta.is_tracked() {
                    sink(beta, dbeta);
                }
            }
            Op::Gelu { x } => {
                if x.is_tracked() {
                    let xd = x.data();
                    let dx = grad
                        .iter()
                        .zip(xd.iter())
                        .map(|(&g, &v)| g * (phi(v) + v * phi_pdf(v)))
                        .collect();
                    sink(x, dx);
                }
            }
            Op::Softplus { x } => {
                if x.is_tracked() {
                    let xd = x.data();
                    let dx = grad
                        .iter()
                        .zip(xd.iter())
                        .map(|(&g, &v)| g * sigmoid(v))
                        .collect();
                    sink(x, dx);
                }
            }
            Op::NormalCdf { x } => {
                if x.is_tracked() {
                    let xd = x.data();
                    let dx = grad
                        .iter()
                        .zip(xd.iter())
                        .map(|(&g, &v)| g * phi_pdf(v))
                        .collect();
                    sink(x, dx);
                }
            }
            Op::GatherRows { x, idx } => {
                if x.is_tracked() {
                    let cols = x.shape()[1];
                    let mut dx = vec![T::zero(); x.numel()];
                    for (out_row, &src) in idx.iter().enumerate() {
                        let g = &grad[out_row * cols..(out_row + 1) * cols];
                        let d = &mut dx[src * cols..(src + 1) * cols];
                        for (dv, &gv) in d.iter_mut().zip(g) {
                            *dv = *dv + gv;
                        }
                    }
                    sink(x, dx);
                }
            }
            Op::ScatterRows { x, idx } => {
                if x.is_tracked() {
                    let cols = x.shape()[1];
                    let mut dx = vec![T::zero(); x.numel()];
                    for (in_row, &dst) in idx.iter().enumerate() {
                        let g = &grad[dst * cols..(dst + 1) * cols];
                        dx[in_row * cols..(in_row + 1) * cols].copy_from_slice(g);
                    }
                    sink(x, dx);
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let len = p.numel();
                    if p.is_tracked() {
                        sink(p, grad[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                if x.is_tracked() {
                    let cols = x.shape()[1];
                    let mut dx = vec![T::zero(); x.numel()];
                    dx[start * cols..start * cols + grad.len()].copy_from_slice(grad);
                    sink(x, dx);
                }
            }
            Op::ConcatCols { parts } => {
                let rows = node.shape()[0];
                let total_cols = node.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let cols = p.shape()[1];
                    if p.is_tracked() {
                        let mut dp = vec![T::zero(); rows * cols];
                        for r in 0..rows {
                            dp[r * cols..(r + 1) * cols]
                                .copy_from_slice(&grad[r * total_cols + offset..][..cols]);
                        }
                        sink(p, dp);
                    }
                    offset += cols;
                }
            }
            Op::SliceCols { x, start } => {
                if x.is_tracked() {
                    let (rows, cols) = (x.shape()[0], x.shape()[1]);
                    let out_cols = node.shape()[1];
                    let mut dx = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        dx[r * cols + start..r * cols + start + out_cols]
                            .copy_from_slice(&grad[r * out_cols..(r + 1) * out_cols]);
                    }
                    sink(x, dx);
                }
            }
            Op::RowScale { x, w } => {
                let cols = x.shape()[1];
                let wd = w.data();
                if x.is_tracked() {
                    let dx = grad
                        .chunks_exact(cols)
                        .zip(wd.iter())
                        .flat_map(|(gr, &wv)| gr.iter().map(move |&g| g * wv))
                        .collect();
                    sink(x, dx);
                }
                if w.is_tracked() {
                    let xd = x.data();
                    let dw = grad
                        .chunks_exact(cols)
                        .zip(xd.chunks_exact(cols))
                        .map(|(gr, xr)| {
                            gr.iter()
                                .zip(xr)
                                .fold(T::zero(), |acc, (&g, &v)| acc + g * v)
                        })
                        .collect();
                    sink(w, dw);
                }
            }
            Op::ColSums { x } => {
                if x.is_tracked() {
                    let rows = x.shape()[0];
                    let mut dx = Vec::with_capacity(rows * grad.len());
                    for _ in 0..rows {
                        dx.extend_from_slice(grad);
                    }
                    sink(x, dx);
                }
            }
            Op::SumAll { x } => {
                if x.is_tracked() {
                    sink(x, vec![grad[0]; x.numel()]);
                }
            }
            Op::CrossEntropyMasked {
                logits,
                targets,
                ignore_index,
                scored,
            } => {
                if logits.is_tracked() {
                    let cols = logits.shape()[1];
                    let ld = logits.data();
                    let g = grad[0] / T::from_f64(*scored as f64);
                    let mut dx = vec![T::zero(); ld.len()];
                    let mut probs = vec![T::zero(); cols];
                    for (p, &t) in targets.iter().enumerate() {
                        if t == *ignore_index {
                            continue;
                        }
                        softmax_row(&ld[p * cols..(p + 1) * cols], &mut probs);
                        let d = &mut dx[p * cols..(p + 1) * cols];
                        for (c, dv) in d.iter_mut().enumerate() {
                            let indicator = if c == t { T::one() } else { T::zero() };
                            *dv = (probs[c] - indicator) * g;
                        }
                    }
                    sink(logits, dx);
                }
            }
            Op::TopMSoftmaxRows { x } => {
                if x.is_tracked() {
                    // Unselected entries have y = 0, which zeroes their grad.
                    let cols = x.shape()[1];
                    let y = node.data();
                    let mut dx = vec![T::zero(); y.len()];
                    for ((yr, gr), dr) in y
                        .chunks_exact(cols)
                        .zip(grad.chunks_exact(cols))
                        .zip(dx.chunks_exact_mut(cols))
                    {
                        let dot = yr
                            .iter()
                            .zip(gr)
                            .fold(T::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    sink(x, dx);
                }
            }
            Op::L2NormalizeRows { x, eps } => {
                if x.is_tracked() {
                    let cols = x.shape()[1];
                    let xd = x.data();
                    let mut dx = vec![T::zero(); xd.len()];
                    for ((xr, gr), dr) in xd
                        .chunks_exact(cols)
                        .zip(grad.chunks_exact(cols))
                        .zip(dx.chunks_exact_mut(cols))
                    {
                        let sq = xr.iter().fold(T::zero(), |a, &v| a + v * v);
                        let norm = (sq + *eps).sqrt();
                        let dot = xr
                            .iter()
                            .zip(gr)
                            .fold(T::zero(), |a, (&xv, &gv)| a + xv * gv);
                        let n3 = norm * norm * norm;
                        for ((d, &xv), &gv) in dr.iter_mut().zip(xr).zip(gr) {
                            *d = gv / norm - xv * dot / n3;
                        }
                    }
                    sink(x, dx);
                }
            }
            Op::BilinearUpsample { x, out_h, out_w } => {
                if x.is_tracked() {
                    let (in_h, in_w, ch) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                    let mut dx = vec![T::zero(); x.numel()];
                    for oy in 0..*out_h {
                        let (y0, y1, fy) = bilinear_axis(oy, in_h, *out_h);
                        for ox in 0..*out_w {
                            let (x0, x1, fx) = bilinear_axis(ox, in_w, *out_w);
                            let w00 = T::from_f64((1.0 - fy) * (1.0 - fx));
                            let w01 = T::from_f64((1.0 - fy) * fx);
                            let w10 = T::from_f64(fy * (1.0 - fx));
                            let w11 = T::from_f64(fy * fx);
                            let g = &grad[(oy * out_w + ox) * ch..][..ch];
                            for (c, &gv) in g.iter().enumerate() {
                                dx[(y0 * in_w + x0) * ch + c] =
                                    dx[(y0 * in_w + x0) * ch + c] + gv * w00;
                                dx[(y0 * in_w + x1) * ch + c] =
                                    dx[(y0 * in_w + x1) * ch + c] + gv * w01;
                                dx[(y1 * in_w + x0) * ch + c] =
                                    dx[(y1 * in_w + x0) * ch + c] + gv * w10;
                                dx[(y1 * in_w + x1) * ch + c] =
                                    dx[(y1 * in_w + x1) * ch + c] + gv * w11;
                            }
                        }
                    }
                    sink(x, dx);
                }
            }
            Op::GatherColsPerRow { x, idx, width } => {
                if x.is_tracked() {
                    let cols = x.shape()[1];
                    let mut dx = vec![T::zero(); x.numel()];
                    for r in 0..x.shape()[0] {
                        for k in 0..*width {
                            let src = idx[r * width + k];
                            dx[r * cols + src] = dx[r * cols + src] + grad[r * width + k];
                        }
                    }
                    sink(x, dx);
                }
            }
            Op::CvSquared { x } => {
                if x.is_tracked() {
                    let xd = x.data();
                    let n = T::from_f64(xd.len() as f64);
                    let s1 = xd.iter().fold(T::zero(), |a, &v| a + v);
                    let s2 = xd.iter().fold(T::zero(), |a, &v| a + v * v);
                    if xd.len() <= 1 || s1 == T::zero() {
                        sink(x, vec![T::zero(); xd.len()]);
                    } else {
                        let two = T::from_f64(2.0);
                        let s1_cubed = s1 * s1 * s1;
                        let dx = xd
                            .iter()
                            .map(|&v| grad[0] * two * n * (v * s1 - s2) / s1_cubed)
                            .collect();
                        sink(x, dx);
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        same_shape(self, other, "add")?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        same_shape(self, other, "sub")?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        same_shape(self, other, "mul")?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        same_shape(self, other, "div")?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a / b)
            .collect();
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::Div(self.clone(), other.clone()),
        ))
    }

    /// Adds a length-`C` bias vector to every row of an `[R, C]` matrix.
    pub fn add_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (_, cols) = matrix_dims(self, "add_bias")?;
        if bias.shape() != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let bd = bias.data();
        let data = self
            .data()
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(bd.iter()).map(|(&a, &b)| a + b))
            .collect();
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::AddBias {
                x: self.clone(),
                bias: bias.clone(),
            },
        ))
    }

    pub fn scale(&self, factor: T) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v * factor).collect();
        Tensor::result(
            data,
            self.shape().to_vec(),
            Op::Scale {
                x: self.clone(),
                factor,
            },
        )
    }

    /// Matrix product `[M, K] · [K, N] -> [M, N]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (m, k) = matrix_dims(self, "matmul")?;
        let (k2, n) = matrix_dims(other, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, &self.data(), k, 1, &other.data(), n, 1, &mut out);
        Ok(Tensor::result(
            out,
            vec![m, n],
            Op::Matmul {
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    pub fn transpose(&self) -> Result<Tensor<T>, TensorError> {
        let (r, c) = matrix_dims(self, "transpose")?;
        let xd = self.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        drop(xd);
        Ok(Tensor::result(
            out,
            vec![c, r],
            Op::Transpose { x: self.clone() },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>, TensorError> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::LengthMismatch {
                op: "reshape",
                len: self.numel(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor::result(
            self.to_vec(),
            shape.to_vec(),
            Op::Reshape { x: self.clone() },
        ))
    }

    /// Row-wise stable softmax of an `[R, C]` matrix.
    pub fn softmax_rows(&self) -> Result<Tensor<T>, TensorError> {
        let (_, cols) = matrix_dims(self, "softmax_rows")?;
        let xd = self.data();
        if xd.iter().any(|v| v.is_nan()) {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let mut out = vec![T::zero(); xd.len()];
        for (src, dst) in xd.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
            softmax_row(src, dst);
        }
        drop(xd);
        Ok(Tensor::result(
            out,
            self.shape().to_vec(),
            Op::SoftmaxRows { x: self.clone() },
        ))
    }

    /// Per-row normalization to mean 0 / variance 1 followed by the affine
    /// map `gamma * x̂ + beta`.
    pub fn layer_norm(
        &self,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        eps: T,
    ) -> Result<Tensor<T>, TensorError> {
        let (rows, cols) = matrix_dims(self, "layer_norm")?;
        if gamma.shape() != [cols] || beta.shape() != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let xd = self.data();
        let gd = gamma.data();
        let bd = beta.data();
        let inv_cols = T::one() / T::from_f64(cols as f64);
        let mut out = vec![T::zero(); rows * cols];
        for (xr, or) in xd.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
            let mean = xr.iter().fold(T::zero(), |a, &v| a + v) * inv_cols;
            let var = xr
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                * inv_cols;
            let inv_std = T::one() / (var + eps).sqrt();
            for (c, o) in or.iter_mut().enumerate() {
                *o = (xr[c] - mean) * inv_std * gd[c] + bd[c];
            }
        }
        drop((xd, gd, bd));
        Ok(Tensor::result(
            out,
            self.shape().to_vec(),
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                eps,
            },
        ))
    }

    /// Exact-CDF GELU: `x · Φ(x)`.
    pub fn gelu(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v * phi(v)).collect();
        Tensor::result(data, self.shape().to_vec(), Op::Gelu { x: self.clone() })
    }

    /// `ln(1 + exp(x))`, numerically stable on both tails.
    pub fn softplus(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&v| softplus_scalar(v)).collect();
        Tensor::result(
            data,
            self.shape().to_vec(),
            Op::Softplus { x: self.clone() },
        )
    }

    /// Standard normal CDF `Φ(x)` applied elementwise.
    pub fn normal_cdf(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&v| phi(v)).collect();
        Tensor::result(
            data,
            self.shape().to_vec(),
            Op::NormalCdf { x: self.clone() },
        )
    }

    /// Selects rows by index; backward scatters gradients to the source rows
    /// and leaves every other row at exactly zero.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor<T>, TensorError> {
        let (rows, cols) = matrix_dims(self, "gather_rows")?;
        for &i in idx {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
        }
        let xd = self.data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&xd[i * cols..(i + 1) * cols]);
        }
        drop(xd);
        Ok(Tensor::result(
            out,
            vec![idx.len(), cols],
            Op::GatherRows {
                x: self.clone(),
                idx: Rc::new(idx.to_vec()),
            },
        ))
    }

    /// Inverse of [`gather_rows`]: writes row `i` of `self` into row
    /// `idx[i]` of an `[n_rows, C]` zero matrix, adding on duplicates.
    pub fn scatter_rows(&self, idx: &[usize], n_rows: usize) -> Result<Tensor<T>, TensorError> {
        let (rows, cols) = matrix_dims(self, "scatter_rows")?;
        if idx.len() != rows {
            return Err(TensorError::Invalid {
                op: "scatter_rows",
                msg: format!("{} indices for {} rows", idx.len(), rows),
            });
        }
        for &i in idx {
            if i >= n_rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "scatter_rows",
                    index: i,
                    bound: n_rows,
                });
            }
        }
        let xd = self.data();
        let mut out = vec![T::zero(); n_rows * cols];
        for (r, &dst) in idx.iter().enumerate() {
            let src = &xd[r * cols..(r + 1) * cols];
            let d = &mut out[dst * cols..(dst + 1) * cols];
            for (o, &v) in d.iter_mut().zip(src) {
                *o = *o + v;
            }
        }
        drop(xd);
        Ok(Tensor::result(
            out,
            vec![n_rows, cols],
            Op::ScatterRows {
                x: self.clone(),
                idx: Rc::new(idx.to_vec()),
            },
        ))
    }

    pub fn concat_rows(parts: &[Tensor<T>]) -> Result<Tensor<T>, TensorError> {
        let (_, cols) = matrix_dims(&parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = matrix_dims(p, "concat_rows")?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(&p.data());
        }
        Ok(Tensor::result(
            data,
            vec![rows, cols],
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor<T>, TensorError> {
        let (rows, cols) = matrix_dims(self, "slice_rows")?;
        if start > end || end > rows {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                bound: rows,
            });
        }
        let data = self.data()[start * cols..end * cols].to_vec();
        Ok(Tensor::result(
            data,
            vec![end - start, cols],
            Op::SliceRows {
                x: self.clone(),
                start,
            },
        ))
    }

    pub fn concat_cols(parts: &[Tensor<T>]) -> Result<Tensor<T>, TensorError> {
        let (rows, _) = matrix_dims(&parts[0], "concat_cols")?;
        let mut total_cols = 0;
        for p in parts {
            let (r, c) = matrix_dims(p, "concat_cols")?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            total_cols += c;
        }
        let mut data = vec![T::zero(); rows * total_cols];
        let mut offset = 0;
        for p in parts {
            let cols = p.shape()[1];
            let pd = p.data();
            for r in 0..rows {
                data[r * total_cols + offset..r * total_cols + offset + cols]
                    .copy_from_slice(&pd[r * cols..(r + 1) * cols]);
            }
            offset += cols;
        }
        Ok(Tensor::result(
            data,
            vec![rows, total_cols],
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor<T>, TensorError> {
        let (rows, cols) = matrix_dims(self, "slice_cols")?;
        if start > end || end > cols {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                bound: cols,
            });
        }
        let out_cols = end - start;
        let xd = self.data();
        let mut data = Vec::with_capacity(rows * out_cols);
        for r in 0..rows {
            data.extend_from_slice(&xd[r * cols + start..r * cols + end]);
        }
        drop(xd);
        Ok(Tensor::result(
            data,
            vec![rows, out_cols],
            Op::SliceCols {
                x: self.clone(),
                start,
            },
        ))
    }

    /// Multiplies row `r` of an `[R, C]` matrix by `w[r]`.
    pub fn row_scale(&self, w: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (rows, cols) = matrix_dims(self, "row_scale")?;
        if w.shape() != [rows] {
            return Err(TensorError::ShapeMismatch {
                op: "row_scale",
                lhs: self.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let wd = w.data();
        let data = self
            .data()
            .chunks_exact(cols)
            .zip(wd.iter())
            .flat_map(|(row, &wv)| row.iter().map(move |&v| v * wv))
            .collect();
        drop(wd);
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::RowScale {
                x: self.clone(),
                w: w.clone(),
            },
        ))
    }

    /// Column sums of an `[R, C]` matrix, a length-`C` vector.
    pub fn col_sums(&self) -> Result<Tensor<T>, TensorError> {
        let (_, cols) = matrix_dims(self, "col_sums")?;
        let mut out = vec![T::zero(); cols];
        for row in self.data().chunks_exact(cols) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        Ok(Tensor::result(
            out,
            vec![cols],
            Op::ColSums { x: self.clone() },
        ))
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&self) -> Tensor<T> {
        let s = self.data().iter().fold(T::zero(), |a, &v| a + v);
        Tensor::result(vec![s], vec![1], Op::SumAll { x: self.clone() })
    }

    /// Mean negative log-softmax probability over non-ignored pixels.
    pub fn cross_entropy_masked(
        &self,
        targets: &[usize],
        ignore_index: usize,
    ) -> Result<Tensor<T>, TensorError> {
        let (rows, cols) = matrix_dims(self, "cross_entropy_masked")?;
        if targets.len() != rows {
            return Err(TensorError::Invalid {
                op: "cross_entropy_masked",
                msg: format!("{} targets for {} rows", targets.len(), rows),
            });
        }
        let xd = self.data();
        if xd.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                op: "cross_entropy_masked",
            });
        }
        let mut total = T::zero();
        let mut scored = 0usize;
        for (p, &t) in targets.iter().enumerate() {
            if t == ignore_index {
                continue;
            }
            if t >= cols {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy_masked",
                    index: t,
                    bound: cols,
                });
            }
            let row = &xd[p * cols..(p + 1) * cols];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row
                .iter()
                .fold(T::zero(), |a, &v| a + (v - max).exp())
                .ln()
                + max;
            total = total + lse - row[t];
            scored += 1;
        }
        drop(xd);
        if scored == 0 {
            return Err(TensorError::EmptyTarget);
        }
        let loss = total / T::from_f64(scored as f64);
        Ok(Tensor::result(
            vec![loss],
            vec![1],
            Op::CrossEntropyMasked {
                logits: self.clone(),
                targets: Rc::new(targets.to_vec()),
                ignore_index,
                scored,
            },
        ))
    }

    /// Per-row softmax restricted to the top `m` entries; everything else is
    /// exactly zero. Ranking ties break toward the lower index.
    pub fn top_m_softmax_rows(&self, m: usize) -> Result<Tensor<T>, TensorError> {
        let (_, cols) = matrix_dims(self, "top_m_softmax_rows")?;
        if m < 1 || m > cols {
            return Err(TensorError::InvalidTopM { m, n: cols });
        }
        let xd = self.data();
        let mut out = vec![T::zero(); xd.len()];
        for (row, or) in xd.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
            let selected = top_m_indices(row, m);
            let max = selected
                .iter()
                .map(|&i| row[i])
                .fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for &i in &selected {
                let e = (row[i] - max).exp();
                or[i] = e;
                sum = sum + e;
            }
            for &i in &selected {
                or[i] = or[i] / sum;
            }
        }
        drop(xd);
        Ok(Tensor::result(
            out,
            self.shape().to_vec(),
            Op::TopMSoftmaxRows { x: self.clone() },
        ))
    }

    /// Scales each row to unit L2 norm, with `eps` inside the square root to
    /// keep the map smooth near zero rows.
    pub fn l2_normalize_rows(&self, eps: T) -> Result<Tensor<T>, TensorError> {
        let (_, cols) = matrix_dims(self, "l2_normalize_rows")?;
        let data = self
            .data()
            .chunks_exact(cols)
            .flat_map(|row| {
                let norm = (row.iter().fold(T::zero(), |a, &v| a + v * v) + eps).sqrt();
                row.iter().map(move |&v| v / norm)
            })
            .collect();
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::L2NormalizeRows {
                x: self.clone(),
                eps,
            },
        ))
    }

    /// Bilinear upsampling of an `[H, W, C]` tensor with half-pixel centers
    /// (corner-aligned sampling disabled).
    pub fn bilinear_upsample(&self, out_h: usize, out_w: usize) -> Result<Tensor<T>, TensorError> {
        let [in_h, in_w, ch] = *self.shape() else {
            return Err(TensorError::NotAMatrix {
                op: "bilinear_upsample",
                shape: self.shape().to_vec(),
            });
        };
        let xd = self.data();
        let mut out = vec![T::zero(); out_h * out_w * ch];
        for oy in 0..out_h {
            let (y0, y1, fy) = bilinear_axis(oy, in_h, out_h);
            for ox in 0..out_w {
                let (x0, x1, fx) = bilinear_axis(ox, in_w, out_w);
                let w00 = T::from_f64((1.0 - fy) * (1.0 - fx));
                let w01 = T::from_f64((1.0 - fy) * fx);
                let w10 = T::from_f64(fy * (1.0 - fx));
                let w11 = T::from_f64(fy * fx);
                let o = &mut out[(oy * out_w + ox) * ch..][..ch];
                for (c, ov) in o.iter_mut().enumerate() {
                    *ov = xd[(y0 * in_w + x0) * ch + c] * w00
                        + xd[(y0 * in_w + x1) * ch + c] * w01
                        + xd[(y1 * in_w + x0) * ch + c] * w10
                        + xd[(y1 * in_w + x1) * ch + c] * w11;
                }
            }
        }
        drop(xd);
        Ok(Tensor::result(
            out,
            vec![out_h, out_w, ch],
            Op::BilinearUpsample {
                x: self.clone(),
                out_h,
                out_w,
            },
        ))
    }

    /// `out[r, k] = self[r, idx[r*width + k]]`: per-row column selection.
    pub fn gather_cols_per_row(
        &self,
        idx: &[usize],
        width: usize,
    ) -> Result<Tensor<T>, TensorError> {
        let (rows, cols) = matrix_dims(self, "gather_cols_per_row")?;
        if idx.len() != rows * width {
            return Err(TensorError::Invalid {
                op: "gather_cols_per_row",
                msg: format!("{} indices for {} rows x {} width", idx.len(), rows, width),
            });
        }
        for &i in idx {
            if i >= cols {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_cols_per_row",
                    index: i,
                    bound: cols,
                });
            }
        }
        let xd = self.data();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for k in 0..width {
                out.push(xd[r * cols + idx[r * width + k]]);
            }
        }
        drop(xd);
        Ok(Tensor::result(
            out,
            vec![rows, width],
            Op::GatherColsPerRow {
                x: self.clone(),
                idx: Rc::new(idx.to_vec()),
                width,
            },
        ))
    }

    /// Squared coefficient of variation of the flattened values
    /// (population variance over squared mean). Zero for fewer than two
    /// elements or a zero mean.
    pub fn cv_squared(&self) -> Tensor<T> {
        let xd = self.data();
        let value = if xd.len() <= 1 {
            T::zero()
        } else {
            let n = T::from_f64(xd.len() as f64);
            let s1 = xd.iter().fold(T::zero(), |a, &v| a + v);
            let s2 = xd.iter().fold(T::zero(), |a, &v| a + v * v);
            if s1 == T::zero() {
                T::zero()
            } else {
                n * s2 / (s1 * s1) - T::one()
            }
        };
        drop(xd);
        Tensor::result(vec![value], vec![1], Op::CvSquared { x: self.clone() })
    }
}
