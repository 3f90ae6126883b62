//! Transformer forward pass and its exact reverse-mode derivative.

use crate::error::{Error, Result};
use crate::vocab::TokenId;

use super::config::{AttentionMode, ModelConfig};
use super::linalg::{
    add_row_bias, col_sum_into, gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, log_softmax, NormCache,
};
use super::params::{DenoiserParams, Gradients};

/// Per-position categorical logits, row-major `len x vocab`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsGrid {
    pub len: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl LogitsGrid {
    pub fn row(&self, pos: usize) -> &[f64] {
        &self.data[pos * self.vocab..(pos + 1) * self.vocab]
    }

    pub fn log_probs(&self, pos: usize) -> Vec<f64> {
        log_softmax(self.row(pos))
    }

    pub fn log_prob(&self, pos: usize, token: TokenId) -> f64 {
        self.log_probs(pos)[token as usize]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Exclusive key limit per query position: position `i` attends to keys `0..limit[i]`.
///
/// Under block-causal attention the prompt (`prefix_len` positions) is fused
/// with the first block, so a single block reduces to full attention.
pub fn attention_limits(mode: AttentionMode, len: usize, prefix_len: usize) -> Vec<usize> {
    match mode {
        AttentionMode::Bidirectional => vec![len; len],
        AttentionMode::BlockCausal { block_len } => (0..len)
            .map(|i| {
                let block = i.saturating_sub(prefix_len) / block_len;
                (prefix_len + (block + 1) * block_len).min(len)
            })
            .collect(),
    }
}

struct LayerCache {
    x_in: Vec<f64>,
    ln1: NormCache,
    ln1_out: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    attn: Vec<f64>,
    ln2: NormCache,
    ln2_out: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

/// Activations retained for the backward pass.
pub struct ForwardCache {
    ids: Vec<TokenId>,
    limits: Vec<usize>,
    layers: Vec<LayerCache>,
    lnf: NormCache,
    lnf_out: Vec<f64>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Logits for every position of `ids`; the first `prefix_len` positions are
/// the prompt.
pub fn forward(params: &DenoiserParams, cfg: &ModelConfig, ids: &[TokenId], prefix_len: usize) -> Result<LogitsGrid> {
    run(params, cfg, ids, prefix_len, false).map(|(l, _)| l)
}

/// Like [`forward`] but also returns the activation cache for [`backward`].
pub fn forward_train(
    params: &DenoiserParams,
    cfg: &ModelConfig,
    ids: &[TokenId],
    prefix_len: usize,
) -> Result<(LogitsGrid, ForwardCache)> {
    run(params, cfg, ids, prefix_len, true).map(|(l, c)| (l, c.expect("cache requested")))
}

fn run(
    params: &DenoiserParams,
    cfg: &ModelConfig,
    ids: &[TokenId],
    prefix_len: usize,
    keep: bool,
) -> Result<(LogitsGrid, Option<ForwardCache>)> {
    let len = ids.len();
    let d = cfg.d_model;
    let v = cfg.vocab_size();
    let f = cfg.ffn_dim();
    let nh = cfg.n_heads;
    let dh = cfg.head_dim();
    if len > cfg.max_len {
        return Err(Error::Domain(format!(
            "sequence length {len} exceeds max_len {}",
            cfg.max_len
        )));
    }
    if let Some(t) = ids.iter().find(|&&t| t as usize >= v) {
        return Err(Error::InvalidInput(format!("token id {t} outside vocabulary")));
    }
    let p = &params.data;
    let lay = &params.layout;
    let limits = attention_limits(cfg.attention, len, prefix_len);

    let mut x = vec![0.0; len * d];
    for (i, &tok) in ids.iter().enumerate() {
        let te = &p[lay.tok_emb + tok as usize * d..][..d];
        let pe = &p[lay.pos_emb + i * d..][..d];
        for k in 0..d {
            x[i * d + k] = te[k] + pe[k];
        }
    }

    let scale = 1.0 / (dh as f64).sqrt();
    let mut layers = Vec::with_capacity(if keep { cfg.n_layers } else { 0 });
    for lo in &lay.layers {
        let mut ln1_out = vec![0.0; len * d];
        let ln1 = layer_norm(&x, &p[lo.ln1_g..][..d], &p[lo.ln1_b..][..d], &mut ln1_out);
        let mut qkv = vec![0.0; len * 3 * d];
        gemm(len, d, 3 * d, &ln1_out, false, &p[lo.w_qkv..], false, &mut qkv, 0.0);
        add_row_bias(&mut qkv, &p[lo.b_qkv..][..3 * d]);

        let mut probs = vec![0.0; nh * len * len];
        let mut attn = vec![0.0; len * d];
        for h in 0..nh {
            for i in 0..len {
                let q = &qkv[i * 3 * d + h * dh..][..dh];
                let row = &mut probs[(h * len + i) * len..][..len];
                let lim = limits[i];
                let mut max = f64::NEG_INFINITY;
                for j in 0..lim {
                    let k = &qkv[j * 3 * d + d + h * dh..][..dh];
                    let s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                    row[j] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for r in row[..lim].iter_mut() {
                    *r = (*r - max).exp();
                    z += *r;
                }
                let out = &mut attn[i * d + h * dh..][..dh];
                for j in 0..lim {
                    row[j] /= z;
                    let vv = &qkv[j * 3 * d + 2 * d + h * dh..][..dh];
                    for (o, val) in out.iter_mut().zip(vv) {
                        *o += row[j] * val;
                    }
                }
            }
        }
        let mut hres = x.clone();
        gemm(len, d, d, &attn, false, &p[lo.w_o..], false, &mut hres, 1.0);
        add_row_bias(&mut hres, &p[lo.b_o..][..d]);

        let mut ln2_out = vec![0.0; len * d];
        let ln2 = layer_norm(&hres, &p[lo.ln2_g..][..d], &p[lo.ln2_b..][..d], &mut ln2_out);
        let mut pre = vec![0.0; len * f];
        gemm(len, d, f, &ln2_out, false, &p[lo.w_in..], false, &mut pre, 0.0);
        add_row_bias(&mut pre, &p[lo.b_in..][..f]);
        let act: Vec<f64> = pre.iter().map(|&z| gelu(z)).collect();
        let mut out = hres;
        gemm(len, f, d, &act, false, &p[lo.w_out..], false, &mut out, 1.0);
        add_row_bias(&mut out, &p[lo.b_out..][..d]);

        let x_in = std::mem::replace(&mut x, out);
        if keep {
            layers.push(LayerCache {
                x_in,
                ln1,
                ln1_out,
                qkv,
                probs,
                attn,
                ln2,
                ln2_out,
                pre,
                act,
            });
        }
    }

    let mut lnf_out = vec![0.0; len * d];
    let lnf = layer_norm(&x, &p[lay.lnf_g..][..d], &p[lay.lnf_b..][..d], &mut lnf_out);
    let mut logits = vec![0.0; len * v];
    match lay.head_w {
        Some(w) => gemm(len, d, v, &lnf_out, false, &p[w..], false, &mut logits, 0.0),
        None => gemm(len, d, v, &lnf_out, false, &p[lay.tok_emb..], true, &mut logits, 0.0),
    }
    add_row_bias(&mut logits, &p[lay.head_b..][..v]);

    let grid = LogitsGrid {
        len,
        vocab: v,
        data: logits,
    };
    let cache = keep.then(|| ForwardCache {
        ids: ids.to_vec(),
        limits,
        layers,
        lnf,
        lnf_out,
    });
    Ok((grid, cache))
}

/// Accumulates into `grads` the derivative of a scalar objective whose
/// gradient with respect to the logits is `dlogits` (row-major `len x vocab`).
pub fn backward(
    params: &DenoiserParams,
    cfg: &ModelConfig,
    cache: &ForwardCache,
    dlogits: &[f64],
    grads: &mut Gradients,
) {
    let len = cache.ids.len();
    if len == 0 {
        return;
    }
    let d = cfg.d_model;
    let v = cfg.vocab_size();
    let f = cfg.ffn_dim();
    let nh = cfg.n_heads;
    let dh = cfg.head_dim();
    let p = &params.data;
    let lay = &params.layout;
    let g = &mut grads.data;
    assert_eq!(dlogits.len(), len * v);

    col_sum_into(dlogits, &mut g[lay.head_b..lay.head_b + v]);
    let mut dx = vec![0.0; len * d];
    match lay.head_w {
        Some(w) => {
            gemm(
                d,
                len,
                v,
                &cache.lnf_out,
                true,
                dlogits,
                false,
                &mut g[w..w + d * v],
                1.0,
            );
            gemm(len, v, d, dlogits, false, &p[w..], true, &mut dx, 0.0);
        }
        None => {
            let te = lay.tok_emb;
            gemm(
                v,
                len,
                d,
                dlogits,
                true,
                &cache.lnf_out,
                false,
                &mut g[te..te + v * d],
                1.0,
            );
            gemm(len, v, d, dlogits, false, &p[te..], false, &mut dx, 0.0);
        }
    }
    let (gf, bf) = split_pair(g, lay.lnf_g, lay.lnf_b, d);
    let mut dx = layer_norm_backward(&dx, &cache.lnf, &p[lay.lnf_g..][..d], gf, bf);

    let scale = 1.0 / (dh as f64).sqrt();
    for (lo, lc) in lay.layers.iter().zip(&cache.layers).rev() {
        // mlp branch
        let mut dh_res = dx.clone();
        col_sum_into(&dx, &mut g[lo.b_out..lo.b_out + d]);
        gemm(
            f,
            len,
            d,
            &lc.act,
            true,
            &dx,
            false,
            &mut g[lo.w_out..lo.w_out + f * d],
            1.0,
        );
        let mut dpre = vec![0.0; len * f];
        gemm(len, d, f, &dx, false, &p[lo.w_out..], true, &mut dpre, 0.0);
        for (dz, &z) in dpre.iter_mut().zip(&lc.pre) {
            *dz *= gelu_grad(z);
        }
        col_sum_into(&dpre, &mut g[lo.b_in..lo.b_in + f]);
        gemm(
            d,
            len,
            f,
            &lc.ln2_out,
            true,
            &dpre,
            false,
            &mut g[lo.w_in..lo.w_in + d * f],
            1.0,
        );
        let mut dln2 = vec![0.0; len * d];
        gemm(len, f, d, &dpre, false, &p[lo.w_in..], true, &mut dln2, 0.0);
        let (g2, b2) = split_pair(g, lo.ln2_g, lo.ln2_b, d);
        let back = layer_norm_backward(&dln2, &lc.ln2, &p[lo.ln2_g..][..d], g2, b2);
        for (a, b) in dh_res.iter_mut().zip(&back) {
            *a += b;
        }

        // attention branch
        let mut dx_next = dh_res.clone();
        col_sum_into(&dh_res, &mut g[lo.b_o..lo.b_o + d]);
        gemm(
            d,
            len,
            d,
            &lc.attn,
            true,
            &dh_res,
            false,
            &mut g[lo.w_o..lo.w_o + d * d],
            1.0,
        );
        let mut dattn = vec![0.0; len * d];
        gemm(len, d, d, &dh_res, false, &p[lo.w_o..], true, &mut dattn, 0.0);

        let mut dqkv = vec![0.0; len * 3 * d];
        let mut dp = vec![0.0; len];
        for h in 0..nh {
            for i in 0..len {
                let lim = cache.limits[i];
                let row = &lc.probs[(h * len + i) * len..][..len];
                let dout = &dattn[i * d + h * dh..][..dh];
                let mut dot = 0.0;
                for j in 0..lim {
                    let vv = &lc.qkv[j * 3 * d + 2 * d + h * dh..][..dh];
                    dp[j] = dout.iter().zip(vv).map(|(a, b)| a * b).sum();
                    dot += row[j] * dp[j];
                    let dv = &mut dqkv[j * 3 * d + 2 * d + h * dh..][..dh];
                    for (a, b) in dv.iter_mut().zip(dout) {
                        *a += row[j] * b;
                    }
                }
                for j in 0..lim {
                    let ds = row[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        let qi = lc.qkv[i * 3 * d + h * dh + c];
                        let kj = lc.qkv[j * 3 * d + d + h * dh + c];
                        dqkv[i * 3 * d + h * dh + c] += ds * kj;
                        dqkv[j * 3 * d + d + h * dh + c] += ds * qi;
                    }
                }
            }
        }
        col_sum_into(&dqkv, &mut g[lo.b_qkv..lo.b_qkv + 3 * d]);
        gemm(
            d,
            len,
            3 * d,
            &lc.ln1_out,
            true,
            &dqkv,
            false,
            &mut g[lo.w_qkv..lo.w_qkv + d * 3 * d],
            1.0,
        );
        let mut dln1 = vec![0.0; len * d];
        gemm(len, 3 * d, d, &dqkv, false, &p[lo.w_qkv..], true, &mut dln1, 0.0);
        let (g1, b1) = split_pair(g, lo.ln1_g, lo.ln1_b, d);
        let back = layer_norm_backward(&dln1, &lc.ln1, &p[lo.ln1_g..][..d], g1, b1);
        for (a, b) in dx_next.iter_mut().zip(&back) {
            *a += b;
        }
        let _ = &lc.x_in;
        dx = dx_next;
    }

    for (i, &tok) in cache.ids.iter().enumerate() {
        let row = &dx[i * d..(i + 1) * d];
        let te = lay.tok_emb + tok as usize * d;
        let pe = lay.pos_emb + i * d;
        for k in 0..d {
            g[te + k] += row[k];
            g[pe + k] += row[k];
        }
    }
}

/// Disjoint mutable views of two `len`-long tensors at offsets `a < b`.
fn split_pair(g: &mut [f64], a: usize, b: usize, len: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + len <= b);
    let (lo, hi) = g.split_at_mut(b);
    (&mut lo[a..a + len], &mut hi[..len])
}
