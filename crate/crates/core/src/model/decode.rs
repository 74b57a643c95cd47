//! Incremental decoding in plain f64 arithmetic: per-layer KV caches (full,
//! sliding-window, cumulative-average, linear-recurrent), plus the sparse,
//! chunked, and weighted-memory attention forms.
//!
//! This path is deliberately independent of the autodiff tape; the
//! equivalence tests pit it against the batched training forward.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::model::config::{CacheKind, FfnKind, ModelConfig, NormKind, NormPlace, PosKind};
use crate::model::forward::NORM_EPS;
use crate::model::params::ModelParams;
use crate::model::positional::{alibi_slope, t5_bucket, RotaryParams};
use crate::tensor::{act_forward, softmax_into, ActKind, Tensor};

/// Default linear-attention kernel φ(x) = elu(x) + 1; strictly positive, so
/// the normalizer q'·ν can never vanish.
pub fn elu_plus_one(x: f64) -> f64 {
    if x >= 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

/// One key/value group's decode-time memory.
#[derive(Debug, Clone)]
pub enum GroupCache {
    /// Every past (position, key, value), in arrival order.
    Full { keys: Vec<Vec<f64>>, values: Vec<Vec<f64>>, positions: Vec<usize> },
    /// The most recent `n_ctx` entries.
    Window { n_ctx: usize, entries: VecDeque<(usize, Vec<f64>, Vec<f64>)> },
    /// Running averages k̄, v̄ over all history plus the entry count.
    Cumulative { kbar: Vec<f64>, vbar: Vec<f64>, count: usize },
    /// Kernelized sums μ = Σ φ(k)ᵀv (row-major d_h×d_h) and ν = Σ φ(k).
    Linear { mu: Vec<f64>, nu: Vec<f64> },
}

impl GroupCache {
    fn new(kind: &CacheKind, dh: usize) -> Self {
        match kind {
            CacheKind::Full => {
                GroupCache::Full { keys: Vec::new(), values: Vec::new(), positions: Vec::new() }
            }
            CacheKind::Window { n_ctx } => {
                GroupCache::Window { n_ctx: *n_ctx, entries: VecDeque::new() }
            }
            CacheKind::Cumulative => {
                GroupCache::Cumulative { kbar: vec![0.0; dh], vbar: vec![0.0; dh], count: 0 }
            }
            CacheKind::Linear => {
                GroupCache::Linear { mu: vec![0.0; dh * dh], nu: vec![0.0; dh] }
            }
        }
    }

    /// Absorb the new pair, then leave the cache ready to be attended over
    /// (the current token always sees itself).
    fn push(&mut self, pos: usize, k: Vec<f64>, v: Vec<f64>, kernel: fn(f64) -> f64) {
        match self {
            GroupCache::Full { keys, values, positions } => {
                keys.push(k);
                values.push(v);
                positions.push(pos);
            }
            GroupCache::Window { n_ctx, entries } => {
                entries.push_back((pos, k, v));
                while entries.len() > *n_ctx {
                    entries.pop_front();
                }
            }
            GroupCache::Cumulative { kbar, vbar, count } => {
                cumulative_update(kbar, vbar, count, &k, &v);
            }
            GroupCache::Linear { mu, nu } => {
                let phi_k: Vec<f64> = k.iter().map(|&x| kernel(x)).collect();
                linear_update(mu, nu, &phi_k, &v);
            }
        }
    }
}

/// Mem_i = ((k_i, v_i) + i·Mem_{i−1}) / (i+1): the running unweighted mean.
pub fn cumulative_update(
    kbar: &mut [f64],
    vbar: &mut [f64],
    count: &mut usize,
    k: &[f64],
    v: &[f64],
) {
    let i = *count as f64;
    for (m, &x) in kbar.iter_mut().zip(k) {
        *m = (x + i * *m) / (i + 1.0);
    }
    for (m, &x) in vbar.iter_mut().zip(v) {
        *m = (x + i * *m) / (i + 1.0);
    }
    *count += 1;
}

/// μ += φ(k)ᵀ·v (outer product), ν += φ(k).
pub fn linear_update(mu: &mut [f64], nu: &mut [f64], phi_k: &[f64], v: &[f64]) {
    let dh = nu.len();
    for r in 0..dh {
        for c in 0..dh {
            mu[r * dh + c] += phi_k[r] * v[c];
        }
    }
    for (n, &x) in nu.iter_mut().zip(phi_k) {
        *n += x;
    }
}

/// Per-layer memory: one cache per key/value group.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub groups: Vec<GroupCache>,
}

/// Mutable decoding state: position counter plus per-layer caches.
#[derive(Debug, Clone)]
pub struct DecodeState {
    pub pos: usize,
    pub layers: Vec<LayerCache>,
    /// Kernel for the linear cache; φ(x) = elu(x)+1 by default.
    pub kernel: fn(f64) -> f64,
}

impl DecodeState {
    pub fn new(config: &ModelConfig) -> Self {
        let dh = config.d_head();
        let layers = (0..config.n_layer)
            .map(|_| LayerCache {
                groups: (0..config.n_kv_head)
                    .map(|_| GroupCache::new(&config.cache_kind, dh))
                    .collect(),
            })
            .collect();
        DecodeState { pos: 0, layers, kernel: elu_plus_one }
    }

    pub fn with_kernel(mut self, kernel: fn(f64) -> f64) -> Self {
        self.kernel = kernel;
        self
    }
}

/// Output of one decode step.
pub struct StepOut {
    /// Next-token scores, length |V|.
    pub logits: Vec<f64>,
    /// Top-layer hidden state, length d.
    pub hidden: Vec<f64>,
}

fn affine(x: &[f64], w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let (d_in, d_out) = w.rows_cols();
    debug_assert_eq!(x.len(), d_in);
    let wd = w.data();
    let mut y = match b {
        Some(bias) => bias.data().to_vec(),
        None => vec![0.0; d_out],
    };
    for (r, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        let row = &wd[r * d_out..(r + 1) * d_out];
        for (yv, &wv) in y.iter_mut().zip(row) {
            *yv += xv * wv;
        }
    }
    y
}

fn norm_row(x: &[f64], kind: NormKind, gain: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let n = x.len() as f64;
    let sigma = match kind {
        NormKind::Layer => {
            let mu = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            return x
                .iter()
                .zip(gain)
                .enumerate()
                .map(|(i, (v, g))| {
                    g * (v - mu) / (var.sqrt() + NORM_EPS) + bias.map_or(0.0, |b| b[i])
                })
                .collect();
        }
        NormKind::Rms => (x.iter().map(|v| v * v).sum::<f64>() / n).sqrt(),
    };
    x.iter()
        .zip(gain)
        .enumerate()
        .map(|(i, (v, g))| g * v / (sigma + NORM_EPS) + bias.map_or(0.0, |b| b[i]))
        .collect()
}

/// Softmax attention of one query over explicit key/value rows with an
/// additive per-key bias.
fn attend_rows<'a>(
    q: &[f64],
    keys: impl Iterator<Item = &'a Vec<f64>>,
    values: &[&'a Vec<f64>],
    rescale: bool,
    bias: impl Fn(usize) -> f64,
) -> Vec<f64> {
    let scale = if rescale { 1.0 / (q.len() as f64).sqrt() } else { 1.0 };
    let scores: Vec<f64> = keys
        .enumerate()
        .map(|(idx, k)| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale + bias(idx))
        .collect();
    let mut alpha = vec![0.0; scores.len()];
    softmax_into(&scores, &mut alpha);
    let dh = q.len();
    let mut out = vec![0.0; dh];
    for (a, v) in alpha.iter().zip(values) {
        for (o, &x) in out.iter_mut().zip(v.iter()) {
            *o += a * x;
        }
    }
    out
}

enum StepPos {
    Plain,
    Rope(RotaryParams),
    T5 { n_buckets: usize, dist_max: usize },
    Alibi,
}

/// Consume one token: update every layer's cache and return the next-token
/// logits. With the full cache this reproduces the batched forward's last
/// row; the other caches trade exactness for bounded state.
pub fn decode_step(
    params: &ModelParams,
    state: &mut DecodeState,
    token: usize,
) -> Result<StepOut> {
    let cfg = &params.config;
    if token >= cfg.vocab_size {
        return Err(Error::TokenRange { id: token, vocab: cfg.vocab_size });
    }
    let pos = state.pos;
    if let Some(cap) = super::forward::pos_capacity(cfg) {
        if pos >= cap {
            return Err(Error::Contract {
                op: "decode_step",
                detail: format!("position {pos} exceeds positional capacity {cap}"),
            });
        }
    }
    let d = cfg.d;
    let dh = cfg.d_head();
    let step_pos = match &cfg.pos_kind {
        PosKind::Learned => StepPos::Plain,
        PosKind::Alibi => StepPos::Alibi,
        PosKind::T5Bias { n_buckets, dist_max } => {
            StepPos::T5 { n_buckets: *n_buckets, dist_max: *dist_max }
        }
        PosKind::Rope { base, scaling } => {
            let mut rp = RotaryParams::new(*base, dh)?;
            rp.scaling = scaling.clone();
            StepPos::Rope(rp)
        }
    };

    let tok_table = params.by_name("embed.tok");
    let mut x = tok_table.data()[token * d..(token + 1) * d].to_vec();
    if matches!(cfg.pos_kind, PosKind::Learned) {
        let pos_table = params.by_name("embed.pos").data();
        for (xv, pv) in x.iter_mut().zip(&pos_table[pos * d..(pos + 1) * d]) {
            *xv += pv;
        }
    }

    let bias_of = |name: String| -> Option<&Tensor> {
        if cfg.use_bias {
            Some(params.by_name(&name))
        } else {
            None
        }
    };
    let rotate = |v: Vec<f64>, rp: &RotaryParams| -> Vec<f64> {
        let p = rp.position(pos);
        let thetas = rp.thetas();
        let mut out = v;
        for (k, theta) in thetas.iter().enumerate() {
            let (sin, cos) = (p * theta).sin_cos();
            let (a, b) = (out[2 * k], out[2 * k + 1]);
            out[2 * k] = a * cos - b * sin;
            out[2 * k + 1] = a * sin + b * cos;
        }
        out
    };

    for l in 0..cfg.n_layer {
        // Attention sub-layer on the raw input.
        for g in 0..cfg.n_kv_head {
            let mut k = affine(
                &x,
                params.by_name(&format!("layers.{l}.attn.wk.{g}")),
                bias_of(format!("layers.{l}.attn.bk.{g}")),
            );
            if let StepPos::Rope(rp) = &step_pos {
                k = rotate(k, rp);
            }
            let v = affine(
                &x,
                params.by_name(&format!("layers.{l}.attn.wv.{g}")),
                bias_of(format!("layers.{l}.attn.bv.{g}")),
            );
            state.layers[l].groups[g].push(pos, k, v, state.kernel);
        }

        let rescale = !matches!(step_pos, StepPos::T5 { .. });
        let t5_table = match &step_pos {
            StepPos::T5 { .. } => Some(params.by_name("pos.t5_table").data()),
            _ => None,
        };
        let mut merged_in = Vec::with_capacity(d);
        for j in 0..cfg.n_head {
            let mut q = affine(
                &x,
                params.by_name(&format!("layers.{l}.attn.wq.{j}")),
                bias_of(format!("layers.{l}.attn.bq.{j}")),
            );
            if let StepPos::Rope(rp) = &step_pos {
                q = rotate(q, rp);
            }
            let head_out = match &state.layers[l].groups[cfg.kv_group(j)] {
                GroupCache::Full { keys, values, positions } => {
                    let vals: Vec<&Vec<f64>> = values.iter().collect();
                    attend_rows(&q, keys.iter(), &vals, rescale, |idx| {
                        key_bias(&step_pos, t5_table, cfg.n_head, j, pos, positions[idx])
                    })
                }
                GroupCache::Window { entries, .. } => {
                    let vals: Vec<&Vec<f64>> = entries.iter().map(|(_, _, v)| v).collect();
                    let positions: Vec<usize> = entries.iter().map(|(p, _, _)| *p).collect();
                    attend_rows(&q, entries.iter().map(|(_, k, _)| k), &vals, rescale, |idx| {
                        key_bias(&step_pos, t5_table, cfg.n_head, j, pos, positions[idx])
                    })
                }
                // One averaged candidate: the softmax over a single entry is
                // 1, so the head output is v̄ itself.
                GroupCache::Cumulative { vbar, .. } => vbar.clone(),
                GroupCache::Linear { mu, nu } => {
                    let phi_q: Vec<f64> = q.iter().map(|&v| (state.kernel)(v)).collect();
                    let denom: f64 = phi_q.iter().zip(nu.iter()).map(|(a, b)| a * b).sum();
                    let mut out = vec![0.0; dh];
                    for (r, &pq) in phi_q.iter().enumerate() {
                        for c in 0..dh {
                            out[c] += pq * mu[r * dh + c];
                        }
                    }
                    for o in out.iter_mut() {
                        *o /= denom;
                        if !o.is_finite() {
                            return Err(Error::NonFinite { op: "linear_attention" });
                        }
                    }
                    out
                }
            };
            merged_in.extend(head_out);
        }
        let att = affine(
            &merged_in,
            params.by_name(&format!("layers.{l}.attn.w_head")),
            bias_of(format!("layers.{l}.attn.b_head")),
        );
        x = residual_row(&x, &att, params, l, "norm1");

        let ffn = ffn_row(&x, params, l);
        x = residual_row(&x, &ffn, params, l, "norm2");
    }

    let logits = affine(&x, params.by_name("out.w"), None);
    state.pos += 1;
    Ok(StepOut { logits, hidden: x })
}

fn key_bias(
    step_pos: &StepPos,
    t5_table: Option<&[f64]>,
    n_head: usize,
    head: usize,
    q_pos: usize,
    k_pos: usize,
) -> f64 {
    match step_pos {
        StepPos::T5 { n_buckets, dist_max } => {
            let bucket = t5_bucket(q_pos - k_pos, *n_buckets, *dist_max);
            t5_table.expect("table loaded for t5 runs")[bucket * n_head + head]
        }
        StepPos::Alibi => -alibi_slope(head + 1) * (q_pos - k_pos) as f64,
        _ => 0.0,
    }
}

fn residual_row(x: &[f64], f: &[f64], params: &ModelParams, layer: usize, which: &str) -> Vec<f64> {
    let cfg = &params.config;
    let gain = params.by_name(&format!("layers.{layer}.{which}.gain")).data();
    let bias = if cfg.use_bias {
        Some(params.by_name(&format!("layers.{layer}.{which}.bias")).data())
    } else {
        None
    };
    match cfg.norm_place {
        NormPlace::Post => {
            let sum: Vec<f64> = f.iter().zip(x).map(|(a, b)| a + b).collect();
            norm_row(&sum, cfg.norm_kind, gain, bias)
        }
        NormPlace::Pre => {
            let n = norm_row(f, cfg.norm_kind, gain, bias);
            n.iter().zip(x).map(|(a, b)| a + b).collect()
        }
    }
}

fn ffn_row(x: &[f64], params: &ModelParams, layer: usize) -> Vec<f64> {
    let cfg = &params.config;
    let p = |n: &str| format!("layers.{layer}.ffn.{n}");
    let bias_of = |name: String| -> Option<&Tensor> {
        if cfg.use_bias {
            Some(params.by_name(&name))
        } else {
            None
        }
    };
    let h = match cfg.ffn_kind {
        FfnKind::Relu | FfnKind::Gelu => {
            let act = if cfg.ffn_kind == FfnKind::Relu { ActKind::Relu } else { ActKind::Gelu };
            let mut h = affine(x, params.by_name(&p("w_h")), bias_of(p("b_h")));
            for v in h.iter_mut() {
                *v = act_forward(*v, act);
            }
            h
        }
        FfnKind::Geglu | FfnKind::Swiglu => {
            let act = if cfg.ffn_kind == FfnKind::Geglu {
                ActKind::Gelu
            } else {
                ActKind::Swish(1.0)
            };
            let a = affine(x, params.by_name(&p("w1")), bias_of(p("b1")));
            let b = affine(x, params.by_name(&p("w2")), bias_of(p("b2")));
            a.iter().zip(&b).map(|(av, bv)| act_forward(*av, act) * bv).collect()
        }
    };
    affine(&h, params.by_name(&p("w_f")), bias_of(p("b_f")))
}

/// Softmax attention restricted to the index set `allowed`; weights outside
/// the set are exactly 0, and inside it they can only grow relative to the
/// unrestricted softmax. Returns the full-length weight vector.
pub fn sparse_attention_weights(
    q: &[f64],
    keys: &[f64],
    width: usize,
    allowed: &[usize],
    rescale: bool,
) -> Result<Vec<f64>> {
    let n = keys.len() / width;
    if allowed.is_empty() {
        return Err(Error::Contract { op: "sparse_attention", detail: "empty index set".into() });
    }
    if let Some(&bad) = allowed.iter().find(|&&j| j >= n) {
        return Err(Error::Contract {
            op: "sparse_attention",
            detail: format!("index {bad} outside 0..{n}"),
        });
    }
    let scale = if rescale { 1.0 / (width as f64).sqrt() } else { 1.0 };
    let scores: Vec<f64> = allowed
        .iter()
        .map(|&j| {
            q.iter().zip(&keys[j * width..(j + 1) * width]).map(|(a, b)| a * b).sum::<f64>()
                * scale
        })
        .collect();
    let mut local = vec![0.0; scores.len()];
    softmax_into(&scores, &mut local);
    let mut weights = vec![0.0; n];
    for (&j, &w) in allowed.iter().zip(&local) {
        weights[j] += w;
    }
    Ok(weights)
}

/// Output of attention restricted to `allowed`: Σ_{j∈G} α'_{i,j}·v_j.
pub fn sparse_attention(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    width: usize,
    allowed: &[usize],
    rescale: bool,
) -> Result<Vec<f64>> {
    let weights = sparse_attention_weights(q, keys, width, allowed, rescale)?;
    let mut out = vec![0.0; width];
    for (j, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (o, &v) in out.iter_mut().zip(&values[j * width..(j + 1) * width]) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Attention computed chunk by chunk: each chunk contributes a max-rebased
/// exponential sum and value-weighted sum, combined under the global max.
/// `bounds` are cumulative chunk ends, strictly increasing and covering all
/// keys in order.
pub fn chunked_attention(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    width: usize,
    bounds: &[usize],
    rescale: bool,
) -> Result<Vec<f64>> {
    let n = keys.len() / width;
    if bounds.is_empty() || *bounds.last().unwrap() != n {
        return Err(Error::Contract {
            op: "chunked_attention",
            detail: format!("bounds must cover all {n} keys"),
        });
    }
    if bounds.windows(2).any(|w| w[0] >= w[1]) || bounds[0] == 0 {
        return Err(Error::Contract {
            op: "chunked_attention",
            detail: "chunk bounds must be strictly increasing and non-empty".into(),
        });
    }
    let scale = if rescale { 1.0 / (width as f64).sqrt() } else { 1.0 };
    // Per chunk: (local max, Σ e^{s−max}, Σ e^{s−max}·v).
    let mut parts: Vec<(f64, f64, Vec<f64>)> = Vec::with_capacity(bounds.len());
    let mut start = 0;
    for &end in bounds {
        let scores: Vec<f64> = (start..end)
            .map(|j| {
                q.iter().zip(&keys[j * width..(j + 1) * width]).map(|(a, b)| a * b).sum::<f64>()
                    * scale
            })
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        let mut z = vec![0.0; width];
        for (local, j) in (start..end).enumerate() {
            let e = (scores[local] - m).exp();
            s += e;
            for (zv, &v) in z.iter_mut().zip(&values[j * width..(j + 1) * width]) {
                *zv += e * v;
            }
        }
        parts.push((m, s, z));
        start = end;
    }
    let global = parts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    let mut out = vec![0.0; width];
    for (m, s, z) in parts {
        let rebase = (m - global).exp();
        denom += s * rebase;
        for (o, zv) in out.iter_mut().zip(z) {
            *o += zv * rebase;
        }
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
    Ok(out)
}

/// Weighted moving average over a window of (k, v) pairs: Mem = Σ β_j(k_j,v_j)
/// with caller weights normalized to sum 1, oldest first. Weights must be
/// positive and nondecreasing (recent pairs matter at least as much); `None`
/// means uniform, which reduces to the plain window mean.
pub fn weighted_average_memory(
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    weights: Option<&[f64]>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if keys.is_empty() || keys.len() != values.len() {
        return Err(Error::Contract {
            op: "weighted_average_memory",
            detail: format!("{} keys vs {} values", keys.len(), values.len()),
        });
    }
    let n = keys.len();
    let uniform = vec![1.0; n];
    let w = weights.unwrap_or(&uniform);
    if w.len() != n {
        return Err(Error::Contract {
            op: "weighted_average_memory",
            detail: format!("{} weights for {n} pairs", w.len()),
        });
    }
    if w.iter().any(|&x| x <= 0.0) || w.windows(2).any(|p| p[0] > p[1]) {
        return Err(Error::Contract {
            op: "weighted_average_memory",
            detail: "weights must be positive and nondecreasing toward the newest pair".into(),
        });
    }
    let total: f64 = w.iter().sum();
    let dh = keys[0].len();
    let mut kbar = vec![0.0; dh];
    let mut vbar = vec![0.0; dh];
    for ((k, v), &wj) in keys.iter().zip(values).zip(w) {
        let b = wj / total;
        for (m, &x) in kbar.iter_mut().zip(k) {
            *m += b * x;
        }
        for (m, &x) in vbar.iter_mut().zip(v) {
            *m += b * x;
        }
    }
    Ok((kbar, vbar))
}
