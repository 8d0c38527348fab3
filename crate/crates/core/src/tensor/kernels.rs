//! Forward kernels shared by the graph ops and by callers working on plain
//! tensors.

use super::Tensor;
use crate::error::{Error, Result};

/// `out[r, n] = sum_k x[r, k] * w[k, n]`, `x` viewed as `(rows, k)`.
pub(crate) fn matmul_rows(x: &[f64], w: &[f64], rows: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        let xr = &x[r * k..(r + 1) * k];
        let or = &mut out[r * n..(r + 1) * n];
        for (kk, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wr = &w[kk * n..(kk + 1) * n];
            for (o, &wv) in or.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
    }
    out
}

/// In-place numerically stable softmax of one row.
pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Usage(format!(
            "softmax axis {axis} out of range for shape {shape:?}"
        )));
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.data().to_vec();
    let mut buf = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = out[base + j * inner];
            }
            softmax_row(&mut buf);
            for (j, b) in buf.iter().enumerate() {
                out[base + j * inner] = *b;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Attention probabilities and output for one (batch, head) slice.
///
/// `q` is `(lq, dh)`, `k`/`v` are `(lk, dh)` given as strided accessors.
/// Masked keys receive exactly zero weight. A query whose keys are all masked
/// gets an all-zero weight row, so its output is zero.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_head(
    q: impl Fn(usize, usize) -> f64,
    k: impl Fn(usize, usize) -> f64,
    v: impl Fn(usize, usize) -> f64,
    key_valid: &[bool],
    lq: usize,
    dh: usize,
    probs: &mut [f64],
    out: &mut [f64],
) {
    let lk = key_valid.len();
    let scale = 1.0 / (dh as f64).sqrt();
    for i in 0..lq {
        let p = &mut probs[i * lk..(i + 1) * lk];
        for (j, pj) in p.iter_mut().enumerate() {
            *pj = if key_valid[j] {
                let mut s = 0.0;
                for c in 0..dh {
                    s += q(i, c) * k(j, c);
                }
                s * scale
            } else {
                f64::NEG_INFINITY
            };
        }
        softmax_row(p);
        let o = &mut out[i * dh..(i + 1) * dh];
        o.iter_mut().for_each(|x| *x = 0.0);
        for (j, &pj) in p.iter().enumerate() {
            if pj == 0.0 {
                continue;
            }
            for (c, oc) in o.iter_mut().enumerate() {
                *oc += pj * v(j, c);
            }
        }
    }
}

/// Scaled dot-product attention over `(..., L, d_h)` tensors.
///
/// `key_mask` has shape `(..., L_k)` (true = attend). Returns the output
/// `(..., L_q, d_h)` and the attention weights `(..., L_q, L_k)`.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor, key_mask: &[bool]) -> Result<(Tensor, Tensor)> {
    let qs = q.shape();
    let ks = k.shape();
    if qs.len() < 2 || ks.len() != qs.len() || v.shape() != ks {
        return Err(Error::Usage(format!(
            "attention shapes q={qs:?} k={ks:?} v={:?}",
            v.shape()
        )));
    }
    let r = qs.len();
    let (lq, dh, lk) = (qs[r - 2], qs[r - 1], ks[r - 2]);
    if ks[r - 1] != dh || qs[..r - 2] != ks[..r - 2] {
        return Err(Error::Usage("attention head dims disagree".into()));
    }
    let batch: usize = qs[..r - 2].iter().product();
    if key_mask.len() != batch * lk {
        return Err(Error::Usage(format!(
            "key mask has {} entries, expected {}",
            key_mask.len(),
            batch * lk
        )));
    }
    let mut out = vec![0.0; batch * lq * dh];
    let mut probs = vec![0.0; batch * lq * lk];
    for b in 0..batch {
        let qd = &q.data()[b * lq * dh..];
        let kd = &k.data()[b * lk * dh..];
        let vd = &v.data()[b * lk * dh..];
        attend_head(
            |i, c| qd[i * dh + c],
            |j, c| kd[j * dh + c],
            |j, c| vd[j * dh + c],
            &key_mask[b * lk..(b + 1) * lk],
            lq,
            dh,
            &mut probs[b * lq * lk..(b + 1) * lq * lk],
            &mut out[b * lq * dh..(b + 1) * lq * dh],
        );
    }
    let mut oshape = qs.to_vec();
    oshape[r - 1] = dh;
    let mut pshape = qs[..r - 1].to_vec();
    pshape.push(lk);
    Ok((Tensor::new(oshape, out)?, Tensor::new(pshape, probs)?))
}
