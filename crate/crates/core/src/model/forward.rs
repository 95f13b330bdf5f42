//! Inference-time forward pass with an incremental key/value cache.

use super::ops::{add_bias, attention, gelu, layernorm};
use super::scalar::{gemm, View};
use super::{ModelParams, Scalar};
use crate::error::{Error, Result};
use crate::vocab::TokenId;

/// Per-layer keys and values of every position fed so far.
#[derive(Debug, Clone)]
pub struct KvCache<F> {
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    tokens: Vec<TokenId>,
    d: usize,
}

impl<F: Scalar> KvCache<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        let n = params.config.n_layers;
        KvCache {
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            tokens: Vec::new(),
            d: params.config.d_model,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token ids fed so far.
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// Forget every position from `len` onwards.
    pub fn truncate(&mut self, len: usize) {
        if len >= self.len() {
            return;
        }
        self.tokens.truncate(len);
        for (k, v) in self.keys.iter_mut().zip(&mut self.values) {
            k.truncate(len * self.d);
            v.truncate(len * self.d);
        }
    }
}

/// Raw attention probabilities captured while extending a cache:
/// `maps[layer][head]` is `rows × cols`, row `i` being the new query at
/// position `first_row + i` over keys `0..cols`.
#[derive(Debug, Clone)]
pub struct AttentionCapture<F> {
    pub first_row: usize,
    pub rows: usize,
    pub cols: usize,
    pub maps: Vec<Vec<Vec<F>>>,
}

#[derive(Debug, Clone)]
pub struct ExtendOutput<F> {
    /// Logits of every new position (`new × vocab`) or only the last.
    pub logits: Vec<F>,
    pub attention: Option<AttentionCapture<F>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ExtendOptions {
    pub all_logits: bool,
    pub capture_attention: bool,
}

/// Feed `ids` after the cached positions.
pub fn extend<F: Scalar>(params: &ModelParams<F>, cache: &mut KvCache<F>, ids: &[TokenId], opts: ExtendOptions) -> Result<ExtendOutput<F>> {
    let cfg = &params.config;
    let (d, ff, nh, hd, vocab) = (cfg.d_model, cfg.d_ff(), cfg.n_heads, cfg.head_dim(), cfg.vocab_size);
    let p0 = cache.len();
    let m = ids.len();
    if m == 0 {
        return Err(Error::Shape("extend needs at least one token".into()));
    }
    if p0 + m > cfg.max_seq_len {
        return Err(Error::Shape(format!("sequence length {} exceeds max_seq_len {}", p0 + m, cfg.max_seq_len)));
    }
    if let Some(&bad) = ids.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::TokenOutOfRange { id: bad, size: vocab });
    }
    let layout = params.layout();
    let w = &params.data;
    let len = p0 + m;

    let mut x = vec![F::zero(); m * d];
    for (i, &t) in ids.iter().enumerate() {
        let te = &w[layout.wte.start + t as usize * d..][..d];
        let pe = &w[layout.wpe.start + (p0 + i) * d..][..d];
        for j in 0..d {
            x[i * d + j] = te[j] + pe[j];
        }
    }

    let mut capture = opts.capture_attention.then(|| AttentionCapture {
        first_row: p0,
        rows: m,
        cols: len,
        maps: Vec::with_capacity(cfg.n_layers),
    });

    let mut a = vec![F::zero(); m * d];
    let mut mean = vec![F::zero(); m];
    let mut rstd = vec![F::zero(); m];
    let mut qkv = vec![F::zero(); m * 3 * d];
    let mut y = vec![F::zero(); m * d];
    let mut probs = vec![F::zero(); nh * m * len];
    let mut hidden = vec![F::zero(); m * ff];
    let mut out = vec![F::zero(); m * d];

    for (l, lo) in layout.layers.iter().enumerate() {
        layernorm(&x, &w[lo.ln1_g.clone()], &w[lo.ln1_b.clone()], d, &mut a, &mut mean, &mut rstd);
        gemm(View::rm(&a, m, d), View::rm(&w[lo.w_qkv.clone()], d, 3 * d), F::zero(), &mut qkv, 3 * d);
        add_bias(&mut qkv, &w[lo.b_qkv.clone()]);

        let (keys, values) = (&mut cache.keys[l], &mut cache.values[l]);
        for row in qkv.chunks_exact(3 * d) {
            keys.extend_from_slice(&row[d..2 * d]);
            values.extend_from_slice(&row[2 * d..]);
        }
        attention((&qkv, 3 * d), (&keys[..], d), (&values[..], d), m, len, p0, nh, hd, &mut probs, &mut y);
        if let Some(c) = capture.as_mut() {
            c.maps.push(probs.chunks_exact(m * len).map(<[F]>::to_vec).collect());
        }

        gemm(View::rm(&y, m, d), View::rm(&w[lo.w_o.clone()], d, d), F::zero(), &mut out, d);
        add_bias(&mut out, &w[lo.b_o.clone()]);
        x.iter_mut().zip(&out).for_each(|(x, o)| *x += *o);

        layernorm(&x, &w[lo.ln2_g.clone()], &w[lo.ln2_b.clone()], d, &mut a, &mut mean, &mut rstd);
        gemm(View::rm(&a, m, d), View::rm(&w[lo.w_fc.clone()], d, ff), F::zero(), &mut hidden, ff);
        add_bias(&mut hidden, &w[lo.b_fc.clone()]);
        hidden.iter_mut().for_each(|h| *h = gelu(*h));
        gemm(View::rm(&hidden, m, ff), View::rm(&w[lo.w_proj.clone()], ff, d), F::zero(), &mut out, d);
        add_bias(&mut out, &w[lo.b_proj.clone()]);
        x.iter_mut().zip(&out).for_each(|(x, o)| *x += *o);
    }
    cache.tokens.extend_from_slice(ids);

    let rows = if opts.all_logits { 0..m } else { m - 1..m };
    let r = rows.len();
    let xs = &x[rows.start * d..rows.end * d];
    let mut xf = vec![F::zero(); r * d];
    layernorm(xs, &w[layout.lnf_g.clone()], &w[layout.lnf_b.clone()], d, &mut xf, &mut mean[..r], &mut rstd[..r]);
    let mut logits = vec![F::zero(); r * vocab];
    gemm(View::rm(&xf, r, d), View::rm(&w[layout.wte.clone()], vocab, d).t(), F::zero(), &mut logits, vocab);

    Ok(ExtendOutput {
        logits,
        attention: capture,
    })
}

/// `[B × T × V]` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<F> {
    pub batch: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub data: Vec<F>,
}

impl<F> Logits<F> {
    pub fn row(&self, b: usize, t: usize) -> &[F] {
        let start = (b * self.seq_len + t) * self.vocab;
        &self.data[start..start + self.vocab]
    }
}

/// Full causal forward over a rectangular batch of token ids.
pub fn forward<F: Scalar>(params: &ModelParams<F>, ids: &[Vec<TokenId>]) -> Result<Logits<F>> {
    let seq_len = ids.first().map_or(0, Vec::len);
    if seq_len == 0 || ids.iter().any(|r| r.len() != seq_len) {
        return Err(Error::Shape("forward expects a non-empty rectangular batch".into()));
    }
    let vocab = params.config.vocab_size;
    let mut data = Vec::with_capacity(ids.len() * seq_len * vocab);
    for row in ids {
        let mut cache = KvCache::new(params);
        let out = extend(
            params,
            &mut cache,
            row,
            ExtendOptions {
                all_logits: true,
                capture_attention: false,
            },
        )?;
        data.extend(out.logits);
    }
    Ok(Logits {
        batch: ids.len(),
        seq_len,
        vocab,
        data,
    })
}

/// Attention probabilities of every layer and head for one sequence,
/// `[layer][head]` each `T × T`.
pub fn attention_maps<F: Scalar>(params: &ModelParams<F>, ids: &[TokenId]) -> Result<Vec<Vec<Vec<F>>>> {
    let mut cache = KvCache::new(params);
    let out = extend(
        params,
        &mut cache,
        ids,
        ExtendOptions {
            all_logits: false,
            capture_attention: true,
        },
    )?;
    Ok(out.attention.expect("requested").maps)
}
