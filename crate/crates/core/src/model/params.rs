use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl ModelConfig {
    /// 2 layers, 4 heads, width 128, context 512.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 128,
            max_seq_len: 512,
            vocab_size,
            dropout: 0.0,
        }
    }

    /// 12 layers, 8 heads, width 512, context 4096.
    pub fn base(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 12,
            n_heads: 8,
            d_model: 512,
            max_seq_len: 4096,
            vocab_size,
            dropout: 0.1,
        }
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.vocab_size == 0 {
            return Err(Error::Config(format!("degenerate model config {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}

/// Offsets of one decoder block's tensors inside the flat parameter vector.
#[derive(Debug, Clone)]
pub struct LayerOffsets {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub w_qkv: Range<usize>,
    pub b_qkv: Range<usize>,
    pub w_o: Range<usize>,
    pub b_o: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w_fc: Range<usize>,
    pub b_fc: Range<usize>,
    pub w_proj: Range<usize>,
    pub b_proj: Range<usize>,
}

/// Layout of every tensor in one flat buffer; gradients and optimizer
/// moments share it.
#[derive(Debug, Clone)]
pub struct Layout {
    pub wte: Range<usize>,
    pub wpe: Range<usize>,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub total: usize,
    /// `(name, shape, range)` in storage order.
    pub tensors: Vec<(String, Vec<usize>, Range<usize>)>,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let ff = cfg.d_ff();
        let mut tensors = Vec::new();
        let mut cursor = 0;
        let mut take = |name: String, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            let r = cursor..cursor + len;
            cursor += len;
            tensors.push((name, shape, r.clone()));
            r
        };
        let wte = take("wte".into(), vec![cfg.vocab_size, d]);
        let wpe = take("wpe".into(), vec![cfg.max_seq_len, d]);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("h{l}.{s}");
            layers.push(LayerOffsets {
                ln1_g: take(p("ln1.g"), vec![d]),
                ln1_b: take(p("ln1.b"), vec![d]),
                w_qkv: take(p("attn.w_qkv"), vec![d, 3 * d]),
                b_qkv: take(p("attn.b_qkv"), vec![3 * d]),
                w_o: take(p("attn.w_o"), vec![d, d]),
                b_o: take(p("attn.b_o"), vec![d]),
                ln2_g: take(p("ln2.g"), vec![d]),
                ln2_b: take(p("ln2.b"), vec![d]),
                w_fc: take(p("mlp.w_fc"), vec![d, ff]),
                b_fc: take(p("mlp.b_fc"), vec![ff]),
                w_proj: take(p("mlp.w_proj"), vec![ff, d]),
                b_proj: take(p("mlp.b_proj"), vec![d]),
            });
        }
        let lnf_g = take("ln_f.g".into(), vec![d]);
        let lnf_b = take("ln_f.b".into(), vec![d]);
        Layout {
            wte,
            wpe,
            layers,
            lnf_g,
            lnf_b,
            total: cursor,
            tensors,
        }
    }
}

/// All learnable tensors of the decoder, stored in one flat buffer.
/// The output projection is tied to `wte`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub data: Vec<F>,
}

impl<F: Scalar> ModelParams<F> {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let n = Layout::new(&config).total;
        Ok(ModelParams {
            config,
            data: vec![F::zero(); n],
        })
    }

    /// Normal(0, 0.02) weights, residual projections scaled by 1/sqrt(2L),
    /// unit layer-norm gains, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let layout = p.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let resid_std = std / (2.0 * p.config.n_layers as f64).sqrt();
        let mut fill = |data: &mut [F], r: &Range<usize>, sd: f64| {
            let dist = Normal::new(0.0, sd).unwrap();
            for x in &mut data[r.clone()] {
                *x = F::of(dist.sample(&mut rng));
            }
        };
        fill(&mut p.data, &layout.wte, std);
        fill(&mut p.data, &layout.wpe, std / 2.0);
        for l in &layout.layers {
            fill(&mut p.data, &l.w_qkv, std);
            fill(&mut p.data, &l.w_o, resid_std);
            fill(&mut p.data, &l.w_fc, std);
            fill(&mut p.data, &l.w_proj, resid_std);
            for g in [&l.ln1_g, &l.ln2_g] {
                p.data[g.clone()].fill(F::one());
            }
        }
        p.data[layout.lnf_g.clone()].fill(F::one());
        Ok(p)
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            data: self.data.iter().map(|x| G::of(x.f64())).collect(),
        }
    }
}
