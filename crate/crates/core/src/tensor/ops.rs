//! Forward kernels and their adjoints.
//!
//! Every function here is pure: the tape in `tape.rs` calls the forward
//! kernel, keeps whatever the adjoint needs, and calls the matching
//! `*_backward` on the way back. Row-parallel kernels compute each output row
//! with the same sequential loop regardless of how rows are partitioned, so
//! results do not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Below this many multiply-adds a kernel stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn for_each_row<T: Scalar>(
    out: &mut [T],
    width: usize,
    work: usize,
    f: impl Fn(usize, &mut [T]) + Sync + Send,
) {
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    } else {
        out.chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
}

/// `c[p×r] = a[p×q] · b[q×r]`
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], p: usize, q: usize, r: usize) -> Vec<T> {
    let mut c = vec![T::zero(); p * r];
    for_each_row(&mut c, r, p * q * r, |i, row| {
        for k in 0..q {
            axpy(a[i * q + k], &b[k * r..(k + 1) * r], row);
        }
    });
    c
}

/// `c[p×r] = a[p×q] · b[r×q]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], p: usize, q: usize, r: usize) -> Vec<T> {
    let mut c = vec![T::zero(); p * r];
    for_each_row(&mut c, r, p * q * r, |i, row| {
        let ai = &a[i * q..(i + 1) * q];
        for (j, cij) in row.iter_mut().enumerate() {
            *cij = dot(ai, &b[j * q..(j + 1) * q]);
        }
    });
    c
}

/// `c[q×r] = a[p×q]ᵀ · b[p×r]`
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], p: usize, q: usize, r: usize) -> Vec<T> {
    let mut c = vec![T::zero(); q * r];
    for_each_row(&mut c, r, p * q * r, |k, row| {
        for i in 0..p {
            axpy(a[i * q + k], &b[i * r..(i + 1) * r], row);
        }
    });
    c
}

fn with_last_dim(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    match s.last_mut() {
        Some(d) => *d = last,
        None => s.push(last),
    }
    s
}

/// `a[…×q] · b[q×r] → […×r]`; leading axes of `a` are treated as rows.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() < 1 || b.rank() != 2 || a.last_dim() != b.shape()[0] {
        return Err(Error::shape(format!(
            "matmul: {:?} × {:?} has mismatched inner dimensions",
            a.shape(),
            b.shape()
        )));
    }
    let (p, q, r) = (a.rows(), a.last_dim(), b.shape()[1]);
    let c = gemm_nn(a.data(), b.data(), p, q, r);
    Ok(Tensor::from_parts(with_last_dim(a.shape(), r), c))
}

pub fn matmul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, g: &[T]) -> (Vec<T>, Vec<T>) {
    let (p, q, r) = (a.rows(), a.last_dim(), b.shape()[1]);
    (gemm_nt(g, b.data(), p, r, q), gemm_tn(a.data(), g, p, q, r))
}

/// Dense layer `x · wᵀ + bias` with `w` stored `[out × in]`.
pub fn linear<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if w.rank() != 2 || x.last_dim() != w.shape()[1] {
        return Err(Error::shape(format!(
            "linear: input {:?} does not match weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (p, q, r) = (x.rows(), x.last_dim(), w.shape()[0]);
    let mut y = gemm_nt(x.data(), w.data(), p, q, r);
    if let Some(b) = bias {
        if b.shape() != [r] {
            return Err(Error::shape(format!(
                "linear: bias {:?} should be [{r}]",
                b.shape()
            )));
        }
        for row in y.chunks_mut(r) {
            for (yi, &bi) in row.iter_mut().zip(b.data()) {
                *yi += bi;
            }
        }
    }
    Ok(Tensor::from_parts(with_last_dim(x.shape(), r), y))
}

/// Returns `(dx, dw, dbias)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (p, q, r) = (x.rows(), x.last_dim(), w.shape()[0]);
    let gx = gemm_nn(g, w.data(), p, r, q);
    let gw = gemm_tn(g, x.data(), p, r, q);
    let mut gb = vec![T::zero(); r];
    for row in g.chunks(r) {
        for (a, &b) in gb.iter_mut().zip(row) {
            *a += b;
        }
    }
    (gx, gw, gb)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 {
        return Err(Error::shape(format!(
            "transpose expects a matrix, got {:?}",
            a.shape()
        )));
    }
    let (p, q) = (a.shape()[0], a.shape()[1]);
    Ok(Tensor::from_parts(
        vec![q, p],
        transpose_raw(a.data(), p, q),
    ))
}

pub(crate) fn transpose_raw<T: Scalar>(a: &[T], p: usize, q: usize) -> Vec<T> {
    let mut out = vec![T::zero(); p * q];
    for i in 0..p {
        for j in 0..q {
            out[j * p + i] = a[i * q + j];
        }
    }
    out
}

fn check_suffix<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
        return Err(Error::shape(format!(
            "{op}: {sb:?} does not broadcast against {sa:?}"
        )));
    }
    Ok(())
}

/// `a + b`, where `b`'s shape is a suffix of `a`'s (bias rows, positional tables).
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_suffix("add", a, b)?;
    let n = b.numel();
    let data = a
        .data()
        .chunks(n)
        .flat_map(|chunk| chunk.iter().zip(b.data()).map(|(&x, &y)| x + y))
        .collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

/// Sums `g` over the broadcast leading axes down to `n` trailing elements.
pub fn reduce_to_suffix<T: Scalar>(g: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for chunk in g.chunks(n) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

/// Elementwise product with the same suffix broadcasting as [`add`].
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_suffix("mul", a, b)?;
    let n = b.numel();
    let data = a
        .data()
        .chunks(n)
        .flat_map(|chunk| chunk.iter().zip(b.data()).map(|(&x, &y)| x * y))
        .collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn mul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, g: &[T]) -> (Vec<T>, Vec<T>) {
    let n = b.numel();
    let ga = g
        .chunks(n)
        .flat_map(|chunk| chunk.iter().zip(b.data()).map(|(&x, &y)| x * y))
        .collect();
    let mut gb = vec![T::zero(); n];
    for (gc, ac) in g.chunks(n).zip(a.data().chunks(n)) {
        for ((o, &gv), &av) in gb.iter_mut().zip(gc).zip(ac) {
            *o += gv * av;
        }
    }
    (ga, gb)
}

/// Per-row statistics saved by [`layer_norm`] for its adjoint.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Normalizes over the last axis, then applies `gamma`, `beta`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let d = x.last_dim();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(format!(
            "layer_norm: gamma {:?} / beta {:?} do not match last axis {d}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if !(eps > T::zero()) {
        return Err(Error::config("layer_norm: eps must be positive"));
    }
    let rows = x.rows();
    let inv_d = T::one() / T::lit(d as f64);
    let mut y = vec![T::zero(); x.numel()];
    let mut stats = NormStats {
        mean: Vec::with_capacity(rows),
        rstd: Vec::with_capacity(rows),
    };
    for (xr, yr) in x.data().chunks(d).zip(y.chunks_mut(d)) {
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        for (i, (o, &v)) in yr.iter_mut().zip(xr).enumerate() {
            *o = (v - mean) * rstd * gamma.data()[i] + beta.data()[i];
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), y), stats))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &NormStats<T>,
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = x.last_dim();
    let inv_d = T::one() / T::lit(d as f64);
    let mut gx = vec![T::zero(); x.numel()];
    let mut ggamma = vec![T::zero(); d];
    let mut gbeta = vec![T::zero(); d];
    let mut xhat = vec![T::zero(); d];
    let mut gxhat = vec![T::zero(); d];
    for (r, ((xr, gr), gxr)) in x
        .data()
        .chunks(d)
        .zip(g.chunks(d))
        .zip(gx.chunks_mut(d))
        .enumerate()
    {
        let (mean, rstd) = (stats.mean[r], stats.rstd[r]);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for i in 0..d {
            xhat[i] = (xr[i] - mean) * rstd;
            gxhat[i] = gr[i] * gamma.data()[i];
            ggamma[i] += gr[i] * xhat[i];
            gbeta[i] += gr[i];
            sum_g += gxhat[i];
            sum_gx += gxhat[i] * xhat[i];
        }
        let mean_g = sum_g * inv_d;
        let mean_gx = sum_gx * inv_d;
        for i in 0..d {
            gxr[i] = rstd * (gxhat[i] - mean_g - xhat[i] * mean_gx);
        }
    }
    (gx, ggamma, gbeta)
}

/// Softmax probabilities saved by [`attention`], laid out `[batch, heads, T, T]`.
#[derive(Clone, Debug)]
pub struct AttentionProbs<T> {
    pub probs: Vec<T>,
}

fn attention_dims<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<(usize, usize, usize)> {
    if q.shape() != k.shape() || q.shape() != v.shape() || q.rank() < 2 {
        return Err(Error::shape(format!(
            "attention: q {:?}, k {:?}, v {:?} must share a [..., T, d] shape",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let d = q.last_dim();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::config(format!(
            "attention: width {d} is not divisible by {heads} heads"
        )));
    }
    let t = q.shape()[q.rank() - 2];
    let batch = q.numel() / (t * d);
    Ok((batch, t, d))
}

/// Multi-head scaled dot-product attention over `[..., T, d]` inputs; head
/// `h` reads columns `h·d_h .. (h+1)·d_h`.
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, AttentionProbs<T>)> {
    let (batch, t, d) = attention_dims(q, k, v, heads)?;
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut out = vec![T::zero(); q.numel()];
    let mut probs = vec![T::zero(); batch * heads * t * t];
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    for b in 0..batch {
        let base = b * t * d;
        for h in 0..heads {
            let col = h * dh;
            let pbase = (b * heads + h) * t * t;
            for i in 0..t {
                let qi = &qd[base + i * d + col..base + i * d + col + dh];
                let row = &mut probs[pbase + i * t..pbase + (i + 1) * t];
                let mut max = T::neg_infinity();
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qi, &kd[base + j * d + col..base + j * d + col + dh]) * scale;
                    max = max.max(*s);
                }
                let mut sum = T::zero();
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in row.iter_mut() {
                    *s /= sum;
                }
                let oi = &mut out[base + i * d + col..base + i * d + col + dh];
                for (j, &p) in row.iter().enumerate() {
                    axpy(p, &vd[base + j * d + col..base + j * d + col + dh], oi);
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(q.shape().to_vec(), out),
        AttentionProbs { probs },
    ))
}

/// Returns `(dq, dk, dv)`.
pub fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    saved: &AttentionProbs<T>,
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = q.last_dim();
    let t = q.shape()[q.rank() - 2];
    let batch = q.numel() / (t * d);
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut gq = vec![T::zero(); q.numel()];
    let mut gk = vec![T::zero(); q.numel()];
    let mut gv = vec![T::zero(); q.numel()];
    let mut gs = vec![T::zero(); t];
    for b in 0..batch {
        let base = b * t * d;
        for h in 0..heads {
            let col = h * dh;
            let pbase = (b * heads + h) * t * t;
            for i in 0..t {
                let p = &saved.probs[pbase + i * t..pbase + (i + 1) * t];
                let go = &g[base + i * d + col..base + i * d + col + dh];
                // dP_ij = gO_i · V_j, then softmax adjoint.
                let mut weighted = T::zero();
                for j in 0..t {
                    let dp = dot(go, &vd[base + j * d + col..base + j * d + col + dh]);
                    gs[j] = dp;
                    weighted += dp * p[j];
                }
                for j in 0..t {
                    gs[j] = p[j] * (gs[j] - weighted) * scale;
                }
                for j in 0..t {
                    axpy(
                        p[j],
                        go,
                        &mut gv[base + j * d + col..base + j * d + col + dh],
                    );
                    axpy(
                        gs[j],
                        &kd[base + j * d + col..base + j * d + col + dh],
                        &mut gq[base + i * d + col..base + i * d + col + dh],
                    );
                    axpy(
                        gs[j],
                        &qd[base + i * d + col..base + i * d + col + dh],
                        &mut gk[base + j * d + col..base + j * d + col + dh],
                    );
                }
            }
        }
    }
    (gq, gk, gv)
}

/// Fixed activations for the MLP baseline mixer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Gelu,
    Silu,
}

impl Activation {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    pub fn deriv(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Silu => "silu",
        }
    }
}

pub fn activation<T: Scalar>(x: &Tensor<T>, act: Activation) -> Tensor<T> {
    x.map(|v| T::lit(act.eval(v.to_f64_lossless())))
}

pub fn activation_backward<T: Scalar>(x: &Tensor<T>, act: Activation, g: &[T]) -> Vec<T> {
    x.data()
        .iter()
        .zip(g)
        .map(|(&v, &gv)| gv * T::lit(act.deriv(v.to_f64_lossless())))
        .collect()
}

/// Mean over the second-to-last axis: `[..., T, D] → [..., D]`.
pub fn mean_tokens<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 2 {
        return Err(Error::shape(format!(
            "mean_tokens expects rank ≥ 2, got {:?}",
            x.shape()
        )));
    }
    let d = x.last_dim();
    let t = x.shape()[x.rank() - 2];
    let inv = T::one() / T::lit(t as f64);
    let outer = x.numel() / (t * d);
    let mut out = vec![T::zero(); outer * d];
    for (o, block) in out.chunks_mut(d).zip(x.data().chunks(t * d)) {
        for row in block.chunks(d) {
            for (a, &v) in o.iter_mut().zip(row) {
                *a += v;
            }
        }
        for a in o.iter_mut() {
            *a *= inv;
        }
    }
    let mut shape = x.shape()[..x.rank() - 2].to_vec();
    shape.push(d);
    Ok(Tensor::from_parts(shape, out))
}

pub fn mean_tokens_backward<T: Scalar>(x: &Tensor<T>, g: &[T]) -> Vec<T> {
    let d = x.last_dim();
    let t = x.shape()[x.rank() - 2];
    let inv = T::one() / T::lit(t as f64);
    let mut gx = Vec::with_capacity(x.numel());
    for go in g.chunks(d) {
        for _ in 0..t {
            gx.extend(go.iter().map(|&v| v * inv));
        }
    }
    gx
}

pub fn mean<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = T::lit(x.numel() as f64);
    Tensor::scalar(x.data().iter().copied().sum::<T>() / n)
}

pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "mse: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = T::lit(pred.numel() as f64);
    let s: T = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(Tensor::scalar(s / n))
}

pub fn mse_backward<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, g: T) -> Vec<T> {
    let scale = T::lit(2.0) * g / T::lit(pred.numel() as f64);
    pred.data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) * scale)
        .collect()
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`; also
/// returns the softmax for the adjoint.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(Tensor<T>, Vec<T>)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::shape(format!(
            "cross_entropy: logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let c = logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::shape(format!(
            "cross_entropy: label {bad} out of range for {c} classes"
        )));
    }
    let mut probs = vec![T::zero(); logits.numel()];
    let mut loss = T::zero();
    for ((row, p), &label) in logits.data().chunks(c).zip(probs.chunks_mut(c)).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (pi, &z) in p.iter_mut().zip(row) {
            *pi = (z - max).exp();
            sum += *pi;
        }
        for pi in p.iter_mut() {
            *pi /= sum;
        }
        loss += sum.ln() + max - row[label];
    }
    Ok((Tensor::scalar(loss / T::lit(labels.len() as f64)), probs))
}

pub fn cross_entropy_backward<T: Scalar>(probs: &[T], labels: &[usize], g: T) -> Vec<T> {
    let c = probs.len() / labels.len();
    let scale = g / T::lit(labels.len() as f64);
    let mut out: Vec<T> = probs.iter().map(|&p| p * scale).collect();
    for (b, &label) in labels.iter().enumerate() {
        out[b * c + label] -= scale;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let col = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(matmul(&eye, &col).unwrap().data(), &[3.0, 4.0]);
        let c = matmul(&t(&[1, 1], &[2.0]), &t(&[1, 1], &[3.0])).unwrap();
        assert_eq!(c.data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::randn([3, 4], 1.0, &mut rng).unwrap();
        let b = Tensor::<f64>::randn([4, 2], 1.0, &mut rng).unwrap();
        let c = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.at(&[i, k]) * b.at(&[k, j]);
                }
                assert!((c.at(&[i, j]) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f64>::zeros([2, 3]).unwrap();
        let b = Tensor::<f64>::zeros([2, 2]).unwrap();
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = t(&[1, 4], &[5.0; 4]);
        let ones = t(&[4], &[1.0; 4]);
        let zeros = t(&[4], &[0.0; 4]);
        let (y, _) = layer_norm(&x, &ones, &zeros, 1e-5).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_keeps_normalized_row() {
        let x = t(&[2], &[1.0, -1.0]);
        let (y, _) = layer_norm(&x, &t(&[2], &[1.0, 1.0]), &t(&[2], &[0.0, 0.0]), 1e-15).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && (y.data()[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_random_rows_have_unit_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn([5, 16], 3.0, &mut rng)
            .unwrap()
            .map(|v| v + 2.0);
        let (y, _) = layer_norm(
            &x,
            &Tensor::full([16], 1.0).unwrap(),
            &Tensor::zeros([16]).unwrap(),
            1e-12,
        )
        .unwrap();
        for row in y.data().chunks(16) {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_single_token_returns_value() {
        let q = t(&[1, 4], &[0.3, -1.0, 2.0, 0.5]);
        let v = t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let (o, _) = attention(&q, &q, &v, 2).unwrap();
        assert_eq!(o.data(), v.data());
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let q = t(&[3, 2], &[1.0, 2.0, -1.0, 0.0, 0.5, 0.5]);
        let k = t(&[3, 2], &[0.2, 0.7, 0.2, 0.7, 0.2, 0.7]);
        let v = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]);
        let (o, p) = attention(&q, &k, &v, 1).unwrap();
        for row in o.data().chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-12 && (row[1] - 5.0).abs() < 1e-12);
        }
        for row in p.probs.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let q = Tensor::<f64>::zeros([2, 6]).unwrap();
        assert!(matches!(attention(&q, &q, &q, 4), Err(Error::Config(_))));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::<f64>::zeros([2, 4]).unwrap();
        let (loss, _) = cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((loss.data()[0] - 4f64.ln()).abs() < 1e-12);
    }
}
