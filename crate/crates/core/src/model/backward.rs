//! Training forward pass with stored activations and its exact backward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{add_bias, attention, col_sum, gelu, gelu_grad, layernorm, layernorm_backward};
use super::scalar::{gemm, View};
use super::{ModelParams, Scalar};
use crate::error::{Error, Result};
use crate::vocab::TokenId;

struct LayerCache<F> {
    x_in: Vec<F>,
    ln1: Vec<F>,
    ln1_mean: Vec<F>,
    ln1_rstd: Vec<F>,
    qkv: Vec<F>,
    probs: Vec<F>,
    y: Vec<F>,
    drop_attn: Option<Vec<F>>,
    x_mid: Vec<F>,
    ln2: Vec<F>,
    ln2_mean: Vec<F>,
    ln2_rstd: Vec<F>,
    fc: Vec<F>,
    act: Vec<F>,
    drop_mlp: Option<Vec<F>>,
}

struct ForwardCache<F> {
    layers: Vec<LayerCache<F>>,
    drop_emb: Option<Vec<F>>,
    x_final: Vec<F>,
    lnf: Vec<F>,
    lnf_mean: Vec<F>,
    lnf_rstd: Vec<F>,
}

/// Inverted-dropout keep mask: 0 or 1/(1-p).
fn dropout_mask<F: Scalar>(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<F> {
    let keep = F::of(1.0 / (1.0 - p));
    (0..n).map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep }).collect()
}

fn apply<F: Scalar>(x: &mut [F], mask: &Option<Vec<F>>) {
    if let Some(m) = mask {
        x.iter_mut().zip(m).for_each(|(x, m)| *x *= *m);
    }
}

fn forward_cached<F: Scalar>(params: &ModelParams<F>, ids: &[TokenId], dropout_seed: Option<u64>) -> ForwardCache<F> {
    let cfg = &params.config;
    let (d, ff, nh, hd) = (cfg.d_model, cfg.d_ff(), cfg.n_heads, cfg.head_dim());
    let t = ids.len();
    let layout = params.layout();
    let w = &params.data;
    let p = cfg.dropout;
    let mut rng = dropout_seed.filter(|_| p > 0.0).map(ChaCha8Rng::seed_from_u64);
    let mut mask = |n: usize| rng.as_mut().map(|r| dropout_mask::<F>(r, n, p));

    let mut x = vec![F::zero(); t * d];
    for (i, &tok) in ids.iter().enumerate() {
        let te = &w[layout.wte.start + tok as usize * d..][..d];
        let pe = &w[layout.wpe.start + i * d..][..d];
        for j in 0..d {
            x[i * d + j] = te[j] + pe[j];
        }
    }
    let drop_emb = mask(t * d);
    apply(&mut x, &drop_emb);

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lo in &layout.layers {
        let x_in = x.clone();
        let mut ln1 = vec![F::zero(); t * d];
        let (mut ln1_mean, mut ln1_rstd) = (vec![F::zero(); t], vec![F::zero(); t]);
        layernorm(&x, &w[lo.ln1_g.clone()], &w[lo.ln1_b.clone()], d, &mut ln1, &mut ln1_mean, &mut ln1_rstd);
        let mut qkv = vec![F::zero(); t * 3 * d];
        gemm(View::rm(&ln1, t, d), View::rm(&w[lo.w_qkv.clone()], d, 3 * d), F::zero(), &mut qkv, 3 * d);
        add_bias(&mut qkv, &w[lo.b_qkv.clone()]);
        let mut probs = vec![F::zero(); nh * t * t];
        let mut y = vec![F::zero(); t * d];
        attention((&qkv, 3 * d), (&qkv[d..], 3 * d), (&qkv[2 * d..], 3 * d), t, t, 0, nh, hd, &mut probs, &mut y);

        let mut out = vec![F::zero(); t * d];
        gemm(View::rm(&y, t, d), View::rm(&w[lo.w_o.clone()], d, d), F::zero(), &mut out, d);
        add_bias(&mut out, &w[lo.b_o.clone()]);
        let drop_attn = mask(t * d);
        apply(&mut out, &drop_attn);
        x.iter_mut().zip(&out).for_each(|(x, o)| *x += *o);
        let x_mid = x.clone();

        let mut ln2 = vec![F::zero(); t * d];
        let (mut ln2_mean, mut ln2_rstd) = (vec![F::zero(); t], vec![F::zero(); t]);
        layernorm(&x, &w[lo.ln2_g.clone()], &w[lo.ln2_b.clone()], d, &mut ln2, &mut ln2_mean, &mut ln2_rstd);
        let mut fc = vec![F::zero(); t * ff];
        gemm(View::rm(&ln2, t, d), View::rm(&w[lo.w_fc.clone()], d, ff), F::zero(), &mut fc, ff);
        add_bias(&mut fc, &w[lo.b_fc.clone()]);
        let act: Vec<F> = fc.iter().map(|&v| gelu(v)).collect();
        gemm(View::rm(&act, t, ff), View::rm(&w[lo.w_proj.clone()], ff, d), F::zero(), &mut out, d);
        add_bias(&mut out, &w[lo.b_proj.clone()]);
        let drop_mlp = mask(t * d);
        apply(&mut out, &drop_mlp);
        x.iter_mut().zip(&out).for_each(|(x, o)| *x += *o);

        layers.push(LayerCache {
            x_in,
            ln1,
            ln1_mean,
            ln1_rstd,
            qkv,
            probs,
            y,
            drop_attn,
            x_mid,
            ln2,
            ln2_mean,
            ln2_rstd,
            fc,
            act,
            drop_mlp,
        });
    }

    let mut lnf = vec![F::zero(); t * d];
    let (mut lnf_mean, mut lnf_rstd) = (vec![F::zero(); t], vec![F::zero(); t]);
    layernorm(&x, &w[layout.lnf_g.clone()], &w[layout.lnf_b.clone()], d, &mut lnf, &mut lnf_mean, &mut lnf_rstd);
    ForwardCache {
        layers,
        drop_emb,
        x_final: x,
        lnf,
        lnf_mean,
        lnf_rstd,
    }
}

/// Summed negative log-likelihood over masked positions and their count.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NllSum {
    pub sum: f64,
    pub count: usize,
}

fn validate<F: Scalar>(params: &ModelParams<F>, inputs: &[TokenId], targets: &[TokenId], mask: &[bool]) -> Result<()> {
    let cfg = &params.config;
    if inputs.is_empty() || inputs.len() != targets.len() || inputs.len() != mask.len() {
        return Err(Error::Shape(format!(
            "inputs {}, targets {}, mask {} must be equal and non-empty",
            inputs.len(),
            targets.len(),
            mask.len()
        )));
    }
    if inputs.len() > cfg.max_seq_len {
        return Err(Error::Shape(format!("length {} exceeds max_seq_len {}", inputs.len(), cfg.max_seq_len)));
    }
    if let Some(&bad) = inputs.iter().chain(targets).find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id: bad,
            size: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Masked next-token NLL of one sequence; with `grad`, also accumulates the
/// gradient of the summed NLL into it.
pub fn sequence_loss<F: Scalar>(
    params: &ModelParams<F>,
    inputs: &[TokenId],
    targets: &[TokenId],
    mask: &[bool],
    grad: Option<&mut [F]>,
    dropout_seed: Option<u64>,
) -> Result<NllSum> {
    validate(params, inputs, targets, mask)?;
    let cfg = &params.config;
    let (d, v) = (cfg.d_model, cfg.vocab_size);
    let rows: Vec<usize> = (0..inputs.len()).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return Ok(NllSum::default());
    }
    let cache = forward_cached(params, inputs, dropout_seed);
    let layout = params.layout();
    let w = &params.data;
    let wte = &w[layout.wte.clone()];

    let r = rows.len();
    let mut xr = Vec::with_capacity(r * d);
    for &i in &rows {
        xr.extend_from_slice(&cache.lnf[i * d..(i + 1) * d]);
    }
    let mut logits = vec![F::zero(); r * v];
    gemm(View::rm(&xr, r, d), View::rm(wte, v, d).t(), F::zero(), &mut logits, v);

    let mut total = 0.0;
    for (k, &i) in rows.iter().enumerate() {
        let row = &mut logits[k * v..(k + 1) * v];
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        let target = targets[i] as usize;
        total += -(row[target] / sum).f64().ln();
        // row becomes dL/dlogits = softmax - onehot
        let inv = F::one() / sum;
        row.iter_mut().for_each(|x| *x *= inv);
        row[target] -= F::one();
    }
    let result = NllSum { sum: total, count: r };
    let Some(grad) = grad else {
        return Ok(result);
    };
    backward(params, &cache, inputs, &rows, &xr, &logits, grad);
    Ok(result)
}

fn backward<F: Scalar>(params: &ModelParams<F>, cache: &ForwardCache<F>, ids: &[TokenId], rows: &[usize], xr: &[F], dlogits: &[F], grad: &mut [F]) {
    let cfg = &params.config;
    let (d, ff, nh, hd, v) = (cfg.d_model, cfg.d_ff(), cfg.n_heads, cfg.head_dim(), cfg.vocab_size);
    let t = ids.len();
    let r = rows.len();
    let layout = params.layout();
    let w = &params.data;

    // tied output projection
    let mut dxr = vec![F::zero(); r * d];
    gemm(View::rm(dlogits, r, v), View::rm(&w[layout.wte.clone()], v, d), F::zero(), &mut dxr, d);
    gemm(View::rm(dlogits, r, v).t(), View::rm(xr, r, d), F::one(), &mut grad[layout.wte.clone()], d);

    let mut dlnf = vec![F::zero(); t * d];
    for (k, &i) in rows.iter().enumerate() {
        dlnf[i * d..(i + 1) * d].copy_from_slice(&dxr[k * d..(k + 1) * d]);
    }
    let mut dx = vec![F::zero(); t * d];
    {
        let (dg, db) = split2(grad, &layout.lnf_g, &layout.lnf_b);
        layernorm_backward(&dlnf, &cache.x_final, &w[layout.lnf_g.clone()], &cache.lnf_mean, &cache.lnf_rstd, d, &mut dx, dg, db);
    }

    let scale = F::of(1.0 / (hd as f64).sqrt());
    let mut dout = vec![F::zero(); t * d];
    let mut dact = vec![F::zero(); t * ff];
    let mut dln = vec![F::zero(); t * d];
    let mut dy = vec![F::zero(); t * d];
    let mut dqkv = vec![F::zero(); t * 3 * d];
    let mut dp = vec![F::zero(); t * t];

    for (lo, lc) in layout.layers.iter().zip(&cache.layers).rev() {
        // MLP residual branch
        dout.copy_from_slice(&dx);
        apply(&mut dout, &lc.drop_mlp);
        col_sum(&dout, &mut grad[lo.b_proj.clone()]);
        gemm(View::rm(&lc.act, t, ff).t(), View::rm(&dout, t, d), F::one(), &mut grad[lo.w_proj.clone()], d);
        gemm(View::rm(&dout, t, d), View::rm(&w[lo.w_proj.clone()], ff, d).t(), F::zero(), &mut dact, ff);
        for (g, &f) in dact.iter_mut().zip(&lc.fc) {
            *g *= gelu_grad(f);
        }
        col_sum(&dact, &mut grad[lo.b_fc.clone()]);
        gemm(View::rm(&lc.ln2, t, d).t(), View::rm(&dact, t, ff), F::one(), &mut grad[lo.w_fc.clone()], ff);
        gemm(View::rm(&dact, t, ff), View::rm(&w[lo.w_fc.clone()], d, ff).t(), F::zero(), &mut dln, d);
        {
            let (dg, db) = split2(grad, &lo.ln2_g, &lo.ln2_b);
            layernorm_backward(&dln, &lc.x_mid, &w[lo.ln2_g.clone()], &lc.ln2_mean, &lc.ln2_rstd, d, &mut dx, dg, db);
        }

        // attention residual branch
        dout.copy_from_slice(&dx);
        apply(&mut dout, &lc.drop_attn);
        col_sum(&dout, &mut grad[lo.b_o.clone()]);
        gemm(View::rm(&lc.y, t, d).t(), View::rm(&dout, t, d), F::one(), &mut grad[lo.w_o.clone()], d);
        gemm(View::rm(&dout, t, d), View::rm(&w[lo.w_o.clone()], d, d).t(), F::zero(), &mut dy, d);

        let qkv = &lc.qkv;
        for h in 0..nh {
            let ph = &lc.probs[h * t * t..(h + 1) * t * t];
            let dyh = View::strided(&dy[h * hd..], t, hd, d);
            let vh = View::strided(&qkv[2 * d + h * hd..], t, hd, 3 * d);
            let kh = View::strided(&qkv[d + h * hd..], t, hd, 3 * d);
            let qh = View::strided(&qkv[h * hd..], t, hd, 3 * d);
            // dV = Pᵀ dY
            gemm(View::rm(ph, t, t).t(), dyh, F::zero(), &mut dqkv[2 * d + h * hd..], 3 * d);
            // dP = dY Vᵀ, then softmax backward into dS
            gemm(dyh, vh.t(), F::zero(), &mut dp, t);
            for i in 0..t {
                let prow = &ph[i * t..(i + 1) * t];
                let drow = &mut dp[i * t..(i + 1) * t];
                let dot: F = prow[..=i].iter().zip(&drow[..=i]).map(|(p, g)| *p * *g).sum();
                for j in 0..=i {
                    drow[j] = prow[j] * (drow[j] - dot) * scale;
                }
                drow[i + 1..].fill(F::zero());
            }
            // dQ = dS K, dK = dSᵀ Q
            gemm(View::rm(&dp, t, t), kh, F::zero(), &mut dqkv[h * hd..], 3 * d);
            gemm(View::rm(&dp, t, t).t(), qh, F::zero(), &mut dqkv[d + h * hd..], 3 * d);
        }
        col_sum(&dqkv, &mut grad[lo.b_qkv.clone()]);
        gemm(View::rm(&lc.ln1, t, d).t(), View::rm(&dqkv, t, 3 * d), F::one(), &mut grad[lo.w_qkv.clone()], 3 * d);
        gemm(View::rm(&dqkv, t, 3 * d), View::rm(&w[lo.w_qkv.clone()], d, 3 * d).t(), F::zero(), &mut dln, d);
        {
            let (dg, db) = split2(grad, &lo.ln1_g, &lo.ln1_b);
            layernorm_backward(&dln, &lc.x_in, &w[lo.ln1_g.clone()], &lc.ln1_mean, &lc.ln1_rstd, d, &mut dx, dg, db);
        }
    }

    apply(&mut dx, &cache.drop_emb);
    for (i, &tok) in ids.iter().enumerate() {
        let src = &dx[i * d..(i + 1) * d];
        let te = layout.wte.start + tok as usize * d;
        for j in 0..d {
            grad[te + j] += src[j];
        }
        let pe = layout.wpe.start + i * d;
        for j in 0..d {
            grad[pe + j] += src[j];
        }
    }
}

/// Two disjoint mutable sub-slices; `a` must precede `b`.
fn split2<'a, F>(buf: &'a mut [F], a: &std::ops::Range<usize>, b: &std::ops::Range<usize>) -> (&'a mut [F], &'a mut [F]) {
    assert!(a.end <= b.start);
    let (lo, hi) = buf.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}
