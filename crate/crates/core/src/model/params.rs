//! Flat parameter storage with named, shaped views.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::vocab::TokenId;

use super::config::{ModelConfig, Precision};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_in: usize,
    pub b_in: usize,
    pub w_out: usize,
    pub b_out: usize,
}

/// Where each tensor lives inside the flat buffer.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
    pub(crate) tok_emb: usize,
    pub(crate) pos_emb: usize,
    pub(crate) layers: Vec<LayerOffsets>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    pub(crate) head_w: Option<usize>,
    pub(crate) head_b: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let v = cfg.vocab_size();
        let f = cfg.ffn_dim();
        let mut entries = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>| -> usize {
            let len = shape.iter().product();
            let offset = total;
            entries.push(ParamEntry {
                name,
                shape,
                offset,
                len,
            });
            total += len;
            offset
        };
        let tok_emb = push("tok_emb".into(), vec![v, d]);
        let pos_emb = push("pos_emb".into(), vec![cfg.max_len, d]);
        let mut layers = Vec::new();
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerOffsets {
                ln1_g: push(p("ln1.g"), vec![d]),
                ln1_b: push(p("ln1.b"), vec![d]),
                w_qkv: push(p("attn.w_qkv"), vec![d, 3 * d]),
                b_qkv: push(p("attn.b_qkv"), vec![3 * d]),
                w_o: push(p("attn.w_o"), vec![d, d]),
                b_o: push(p("attn.b_o"), vec![d]),
                ln2_g: push(p("ln2.g"), vec![d]),
                ln2_b: push(p("ln2.b"), vec![d]),
                w_in: push(p("mlp.w_in"), vec![d, f]),
                b_in: push(p("mlp.b_in"), vec![f]),
                w_out: push(p("mlp.w_out"), vec![f, d]),
                b_out: push(p("mlp.b_out"), vec![d]),
            });
        }
        let lnf_g = push("ln_f.g".into(), vec![d]);
        let lnf_b = push("ln_f.b".into(), vec![d]);
        let head_w = (!cfg.tie_output).then(|| push("head.w".into(), vec![d, v]));
        let head_b = push("head.b".into(), vec![v]);
        Self {
            entries,
            total,
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
        }
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Trainable parameters of the mask predictor.
#[derive(Debug, Clone)]
pub struct DenoiserParams {
    pub layout: Arc<ParamLayout>,
    pub data: Vec<f64>,
    pub precision: Precision,
}

impl PartialEq for DenoiserParams {
    fn eq(&self, other: &Self) -> bool {
        self.precision == other.precision && self.layout.entries == other.layout.entries && self.data == other.data
    }
}

impl DenoiserParams {
    /// GPT-2 style initialization: N(0, 0.02) weights, residual projections
    /// scaled by 1/sqrt(2 n_layers), unit layer-norm gains, zero biases.
    pub fn init(cfg: &ModelConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let layout = Arc::new(ParamLayout::new(cfg));
        let mut data = vec![0.0; layout.total];
        let std = 0.02;
        let resid_std = std / (2.0 * cfg.n_layers as f64).sqrt();
        for e in &layout.entries {
            let slot = &mut data[e.offset..e.offset + e.len];
            let name = e.name.as_str();
            if name.ends_with(".g") {
                slot.fill(1.0);
            } else if e.shape.len() == 2 {
                let s = if name.ends_with("attn.w_o") || name.ends_with("mlp.w_out") {
                    resid_std
                } else {
                    std
                };
                for x in slot.iter_mut() {
                    *x = s * rng.normal();
                }
            }
        }
        let mut p = Self {
            layout,
            data,
            precision: cfg.precision,
        };
        p.round_to_precision();
        Ok(p)
    }

    pub fn zeros_like(cfg: &ModelConfig) -> Self {
        let layout = Arc::new(ParamLayout::new(cfg));
        let data = vec![0.0; layout.total];
        Self {
            layout,
            data,
            precision: cfg.precision,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.entry(name).map(|e| &self.data[e.offset..e.offset + e.len])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let e = self.layout.entry(name)?.clone();
        Some(&mut self.data[e.offset..e.offset + e.len])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Stored weights are rounded to f32 when the model runs in single precision.
    pub fn round_to_precision(&mut self) {
        if self.precision == Precision::Single {
            for x in &mut self.data {
                *x = *x as f32 as f64;
            }
        }
    }

    pub(crate) fn round_to_precision_at(&mut self, i: usize) {
        if self.precision == Precision::Single {
            self.data[i] = self.data[i] as f32 as f64;
        }
    }

    /// Zeroes the output projection so every position predicts the uniform
    /// distribution over the vocabulary.
    pub fn make_uniform(&mut self) {
        if let Some(w) = self.layout.head_w {
            let n = self.layout.entry("head.w").map(|e| e.len).unwrap_or(0);
            self.data[w..w + n].fill(0.0);
        } else {
            // tied output: zero the final norm gain and bias instead
            let d = self.layout.entry("ln_f.g").map(|e| e.len).unwrap_or(0);
            let (g, b) = (self.layout.lnf_g, self.layout.lnf_b);
            self.data[g..g + d].fill(0.0);
            self.data[b..b + d].fill(0.0);
        }
        let hb = self.layout.head_b;
        let n = self.layout.entry("head.b").map(|e| e.len).unwrap_or(0);
        self.data[hb..hb + n].fill(0.0);
    }

    /// Adds `delta` to the output bias of `token`. Large values force or
    /// forbid a token at every position.
    pub fn bias_token(&mut self, token: TokenId, delta: f64) {
        self.data[self.layout.head_b + token as usize] += delta;
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Gradient buffer with the same layout as [`DenoiserParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub data: Vec<f64>,
}

impl Gradients {
    pub fn zeros(n: usize) -> Self {
        Self { data: vec![0.0; n] }
    }

    pub fn zeros_for(params: &DenoiserParams) -> Self {
        Self::zeros(params.len())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    pub fn scale(&mut self, s: f64) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, s: f64) -> Result<()> {
        if other.data.len() != self.data.len() {
            return Err(Error::InvalidInput("gradient shapes differ".into()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Rescales in place so the global L2 norm is at most `max_norm`; returns
    /// the norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n > max_norm && n.is_finite() {
            self.scale(max_norm / n);
        }
        n
    }
}
