//! Row-wise kernels shared by the inference and training paths.

use super::scalar::{gemm, View};
use super::Scalar;

pub const LN_EPS: f64 = 1e-5;

/// Layer norm over rows of width `d`; records per-row mean and 1/std.
pub fn layernorm<F: Scalar>(x: &[F], g: &[F], b: &[F], d: usize, out: &mut [F], mean: &mut [F], rstd: &mut [F]) {
    let inv_d = F::of(1.0 / d as f64);
    let eps = F::of(LN_EPS);
    for (r, (xr, or)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let mu = xr.iter().copied().sum::<F>() * inv_d;
        let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        for i in 0..d {
            or[i] = (xr[i] - mu) * rs * g[i] + b[i];
        }
        mean[r] = mu;
        rstd[r] = rs;
    }
}

/// Accumulates `dx += ∂/∂x`, `dg`, `db` for `layernorm`.
#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward<F: Scalar>(
    dy: &[F],
    x: &[F],
    g: &[F],
    mean: &[F],
    rstd: &[F],
    d: usize,
    dx: &mut [F],
    dg: &mut [F],
    db: &mut [F],
) {
    let inv_d = F::of(1.0 / d as f64);
    let mut xhat = vec![F::zero(); d];
    let mut dxhat = vec![F::zero(); d];
    for r in 0..mean.len() {
        let (xr, dyr) = (&x[r * d..(r + 1) * d], &dy[r * d..(r + 1) * d]);
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for i in 0..d {
            xhat[i] = (xr[i] - mean[r]) * rstd[r];
            dxhat[i] = dyr[i] * g[i];
            dg[i] += dyr[i] * xhat[i];
            db[i] += dyr[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xhat[i];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            dxr[i] += rstd[r] * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

// libm tanh goes through expm1 and dominated the MLP cost
fn tanh<F: Scalar>(z: F) -> F {
    let two = F::of(2.0);
    F::one() - two / ((two * z).exp() + F::one())
}

pub fn gelu<F: Scalar>(x: F) -> F {
    let (c, a, half) = (F::of(GELU_C), F::of(GELU_A), F::of(0.5));
    half * x * (F::one() + tanh(c * (x + a * x * x * x)))
}

pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let (c, a, half) = (F::of(GELU_C), F::of(GELU_A), F::of(0.5));
    let t = tanh(c * (x + a * x * x * x));
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * a * x * x)
}

/// `y[r] += bias` for every row.
pub fn add_bias<F: Scalar>(y: &mut [F], bias: &[F]) {
    for row in y.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += *b;
        }
    }
}

/// `acc += Σ_rows y`.
pub fn col_sum<F: Scalar>(y: &[F], acc: &mut [F]) {
    for row in y.chunks_exact(acc.len()) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += *v;
        }
    }
}

/// In-place scaled softmax over `row[..allowed]`, zeroing the rest.
pub fn causal_softmax_row<F: Scalar>(row: &mut [F], allowed: usize, scale: F) {
    let mut max = F::neg_infinity();
    for v in &mut row[..allowed] {
        *v *= scale;
        if *v > max {
            max = *v;
        }
    }
    let mut sum = F::zero();
    for v in &mut row[..allowed] {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = F::one() / sum;
    for v in &mut row[..allowed] {
        *v *= inv;
    }
    for v in &mut row[allowed..] {
        *v = F::zero();
    }
}

/// Causal multi-head attention for `m` queries at absolute positions
/// `p0..p0+m` over `len` keys.
///
/// `q`, `k`, `v` are row-major with the given row strides; head `h` reads
/// columns `h*hd..(h+1)*hd`. Probabilities for head `h` land in
/// `probs[h*m*len..]` and the merged head outputs in `y` (`m × d`).
#[allow(clippy::too_many_arguments)]
pub fn attention<F: Scalar>(
    q: (&[F], usize),
    k: (&[F], usize),
    v: (&[F], usize),
    m: usize,
    len: usize,
    p0: usize,
    n_heads: usize,
    hd: usize,
    probs: &mut [F],
    y: &mut [F],
) {
    let d = n_heads * hd;
    let scale = F::of(1.0 / (hd as f64).sqrt());
    for h in 0..n_heads {
        let ph = &mut probs[h * m * len..(h + 1) * m * len];
        let qh = View::strided(&q.0[h * hd..], m, hd, q.1);
        let kh = View::strided(&k.0[h * hd..], len, hd, k.1);
        gemm(qh, kh.t(), F::zero(), ph, len);
        for i in 0..m {
            causal_softmax_row(&mut ph[i * len..(i + 1) * len], p0 + i + 1, scale);
        }
        let vh = View::strided(&v.0[h * hd..], len, hd, v.1);
        gemm(View::rm(ph, m, len), vh, F::zero(), &mut y[h * hd..], d);
    }
}
