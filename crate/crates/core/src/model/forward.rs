//! Batched forward pass on the autodiff tape: grouped-head attention with
//! the configured positional scheme, FFN variants, and pre/post-norm
//! residual wiring. Incremental decoding lives in `decode`; this path is the
//! training-time reference the decoder is checked against.

use crate::error::{Error, Result};
use crate::model::config::{FfnKind, ModelConfig, NormKind, NormPlace, PosKind, RopeScaling};
use crate::model::params::{ModelParams, ParamVars};
use crate::model::positional::{alibi_bias, t5_bucket, RotaryParams};
use crate::tensor::{ActKind, Tape, Tensor, Var, GATHER_ZERO, NEG_SENTINEL};

/// Denominator guard added to the norm's σ, shared by both norm kinds.
pub const NORM_EPS: f64 = 1e-5;

/// Optional forward-pass variations.
#[derive(Default)]
pub struct ForwardOpts<'a> {
    /// Replaces the causal mask with an arbitrary additive one (0 = may
    /// attend, −1e9 = blocked); used for permuted-order and bidirectional
    /// objectives. Must be m×m for an m-row input.
    pub attn_mask_override: Option<&'a Tensor>,
    /// Per-layer trainable prefix rows (one [n_p × d] var per layer). Each
    /// layer's input gains these rows up front and its output is sliced back
    /// to the real positions.
    pub layer_prefixes: Option<&'a [Var]>,
}

/// Results of one batched forward.
pub struct ForwardOut {
    /// [m × vocab] next-token scores; no bias on the output projection.
    pub logits: Var,
    /// [m × d] top-layer hidden states, for scalar heads and datastores.
    pub hidden: Var,
}

/// Additive m×m causal mask: 0 at or below the diagonal, −1e9 above, so that
/// masked weights underflow to exactly 0 after the softmax.
pub fn causal_mask(m: usize) -> Tensor {
    let mut data = vec![0.0; m * m];
    for i in 0..m {
        for j in i + 1..m {
            data[i * m + j] = NEG_SENTINEL;
        }
    }
    Tensor::new(vec![m, m], data).expect("mask entries are finite")
}

/// Single-head attention: softmax(q·kᵀ [·1/√d_h] + bias + mask)·v.
/// `rescale` off omits the 1/√d_h factor (the trained-bias convention).
pub fn qkv_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    rescale: bool,
    bias: Option<Var>,
    mask: Option<Var>,
) -> Result<Var> {
    let dh = tape.value(q).rows_cols().1;
    let mut scores = tape.matmul_tb(q, k)?;
    if rescale {
        scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    }
    if let Some(b) = bias {
        scores = tape.add(scores, b)?;
    }
    if let Some(m) = mask {
        scores = tape.add(scores, m)?;
    }
    let weights = tape.softmax_rows(scores)?;
    tape.matmul(weights, v)
}

/// Positional machinery resolved once per forward.
enum PosSignal {
    Plain,
    Rope { rp: RotaryParams },
    T5 { n_buckets: usize, dist_max: usize },
    Alibi,
}

impl PosSignal {
    fn from_config(config: &ModelConfig) -> Result<Self> {
        Ok(match &config.pos_kind {
            PosKind::Learned => PosSignal::Plain,
            PosKind::Alibi => PosSignal::Alibi,
            PosKind::T5Bias { n_buckets, dist_max } => {
                PosSignal::T5 { n_buckets: *n_buckets, dist_max: *dist_max }
            }
            PosKind::Rope { base, scaling } => {
                let mut rp = RotaryParams::new(*base, config.d_head())?;
                rp.scaling = scaling.clone();
                PosSignal::Rope { rp }
            }
        })
    }
}

/// Longest sequence the positional scheme can represent. Learned tables and
/// unscaled rotations stop at max_len; linear rotary interpolation extends
/// capacity to its target length; base-scaled rotation is unbounded (the
/// stretched spectrum defines every position).
pub(crate) fn pos_capacity(config: &ModelConfig) -> Option<usize> {
    match &config.pos_kind {
        PosKind::Rope { scaling: RopeScaling::Linear { target_len, .. }, .. } => {
            Some(config.max_len.max(*target_len))
        }
        PosKind::Rope { scaling: RopeScaling::BaseScaled { .. }, .. } => None,
        _ => Some(config.max_len),
    }
}

fn param(pv: &ParamVars, params: &ModelParams, name: &str) -> Var {
    pv.get(params, name)
}

fn maybe_add_row(
    tape: &mut Tape,
    x: Var,
    params: &ModelParams,
    pv: &ParamVars,
    name: &str,
) -> Result<Var> {
    if params.config.use_bias {
        tape.add_row(x, param(pv, params, name))
    } else {
        Ok(x)
    }
}

/// Norm with the configured kind; β is the zero vector when biases are off.
fn norm(
    tape: &mut Tape,
    x: Var,
    params: &ModelParams,
    pv: &ParamVars,
    layer: usize,
    which: &str,
    zero_bias: Var,
) -> Result<Var> {
    let gain = param(pv, params, &format!("layers.{layer}.{which}.gain"));
    let bias = if params.config.use_bias {
        param(pv, params, &format!("layers.{layer}.{which}.bias"))
    } else {
        zero_bias
    };
    match params.config.norm_kind {
        NormKind::Layer => tape.layer_norm(x, gain, bias, NORM_EPS),
        NormKind::Rms => tape.rms_norm(x, gain, bias, NORM_EPS),
    }
}

/// Residual wrapper around a sub-layer output `f` of input `x`:
/// post-norm is `LNorm(f + x)`, pre-norm is `LNorm(f) + x`. In both the
/// sub-layer consumed the raw input.
fn residual(
    tape: &mut Tape,
    x: Var,
    f: Var,
    params: &ModelParams,
    pv: &ParamVars,
    layer: usize,
    which: &str,
    zero_bias: Var,
) -> Result<Var> {
    match params.config.norm_place {
        NormPlace::Post => {
            let s = tape.add(f, x)?;
            norm(tape, s, params, pv, layer, which, zero_bias)
        }
        NormPlace::Pre => {
            let n = norm(tape, f, params, pv, layer, which, zero_bias)?;
            tape.add(n, x)
        }
    }
}

/// Grouped-head attention sub-layer over `m` rows whose absolute positions
/// are their row indices. K/V are computed once per group and shared by the
/// query heads mapped onto it.
fn attention_sublayer(
    tape: &mut Tape,
    x: Var,
    params: &ModelParams,
    pv: &ParamVars,
    layer: usize,
    sig: &PosSignal,
    mask: Var,
) -> Result<Var> {
    let cfg = &params.config;
    let m = tape.value(x).rows_cols().0;
    let rope: Option<(Vec<f64>, Vec<f64>)> = match sig {
        PosSignal::Rope { rp } => {
            let positions: Vec<f64> = (0..m).map(|t| rp.position(t)).collect();
            Some((positions, rp.thetas()))
        }
        _ => None,
    };

    let mut kv: Vec<(Var, Var)> = Vec::with_capacity(cfg.n_kv_head);
    for g in 0..cfg.n_kv_head {
        let wk = param(pv, params, &format!("layers.{layer}.attn.wk.{g}"));
        let mut k = tape.matmul(x, wk)?;
        k = maybe_add_row(tape, k, params, pv, &format!("layers.{layer}.attn.bk.{g}"))?;
        if let Some((positions, thetas)) = &rope {
            k = tape.rope_rows(k, positions, thetas)?;
        }
        let wv = param(pv, params, &format!("layers.{layer}.attn.wv.{g}"));
        let mut v = tape.matmul(x, wv)?;
        v = maybe_add_row(tape, v, params, pv, &format!("layers.{layer}.attn.bv.{g}"))?;
        kv.push((k, v));
    }

    let rescale = !matches!(sig, PosSignal::T5 { .. });
    let mut heads = Vec::with_capacity(cfg.n_head);
    for j in 0..cfg.n_head {
        let wq = param(pv, params, &format!("layers.{layer}.attn.wq.{j}"));
        let mut q = tape.matmul(x, wq)?;
        q = maybe_add_row(tape, q, params, pv, &format!("layers.{layer}.attn.bq.{j}"))?;
        if let Some((positions, thetas)) = &rope {
            q = tape.rope_rows(q, positions, thetas)?;
        }
        let (k, v) = kv[cfg.kv_group(j)];
        let bias = match sig {
            PosSignal::T5 { n_buckets, dist_max } => {
                // Flat gather indices into the [(n_b+1) × n_head] table;
                // future keys contribute a hard 0 (the mask blocks them).
                let table = param(pv, params, "pos.t5_table");
                let mut idx = vec![GATHER_ZERO; m * m];
                for i in 0..m {
                    for jj in 0..=i {
                        idx[i * m + jj] = t5_bucket(i - jj, *n_buckets, *dist_max) * cfg.n_head + j;
                    }
                }
                Some(tape.gather_scalars(table, &idx, &[m, m])?)
            }
            PosSignal::Alibi => {
                let mut data = vec![0.0; m * m];
                for i in 0..m {
                    for jj in 0..=i {
                        data[i * m + jj] = alibi_bias(i, jj, j + 1, cfg.n_head)?;
                    }
                }
                Some(tape.leaf(Tensor::new(vec![m, m], data)?))
            }
            _ => None,
        };
        heads.push(qkv_attention(tape, q, k, v, rescale, bias, Some(mask))?);
    }

    let cat = tape.concat_cols(&heads)?;
    let merged = tape.matmul(cat, param(pv, params, &format!("layers.{layer}.attn.w_head")))?;
    maybe_add_row(tape, merged, params, pv, &format!("layers.{layer}.attn.b_head"))
}

/// FFN sub-layer: plain `act(x·W_h + b_h)·W_f + b_f`, or the gated variants
/// `[act(x·W_1 + b_1) ⊙ (x·W_2 + b_2)]·W_f + b_f`.
fn ffn_sublayer(
    tape: &mut Tape,
    x: Var,
    params: &ModelParams,
    pv: &ParamVars,
    layer: usize,
) -> Result<Var> {
    let p = |n: &str| format!("layers.{layer}.ffn.{n}");
    let h = match params.config.ffn_kind {
        FfnKind::Relu | FfnKind::Gelu => {
            let act = if params.config.ffn_kind == FfnKind::Relu {
                ActKind::Relu
            } else {
                ActKind::Gelu
            };
            let mut h = tape.matmul(x, param(pv, params, &p("w_h")))?;
            h = maybe_add_row(tape, h, params, pv, &p("b_h"))?;
            tape.activation(h, act)?
        }
        FfnKind::Geglu | FfnKind::Swiglu => {
            let act = if params.config.ffn_kind == FfnKind::Geglu {
                ActKind::Gelu
            } else {
                ActKind::Swish(1.0)
            };
            let mut a = tape.matmul(x, param(pv, params, &p("w1")))?;
            a = maybe_add_row(tape, a, params, pv, &p("b1"))?;
            let a = tape.activation(a, act)?;
            let mut b = tape.matmul(x, param(pv, params, &p("w2")))?;
            b = maybe_add_row(tape, b, params, pv, &p("b2"))?;
            tape.mul(a, b)?
        }
    };
    let out = tape.matmul(h, param(pv, params, &p("w_f")))?;
    maybe_add_row(tape, out, params, pv, &p("b_f"))
}

/// One decoder block: attention and FFN sub-layers under the configured
/// residual/norm wiring.
#[allow(clippy::too_many_arguments)]
fn block(
    tape: &mut Tape,
    x: Var,
    params: &ModelParams,
    pv: &ParamVars,
    layer: usize,
    sig: &PosSignal,
    mask: Var,
    zero_bias: Var,
) -> Result<Var> {
    let att = attention_sublayer(tape, x, params, pv, layer, sig, mask)?;
    let x = residual(tape, x, att, params, pv, layer, "norm1", zero_bias)?;
    let ffn = ffn_sublayer(tape, x, params, pv, layer)?;
    residual(tape, x, ffn, params, pv, layer, "norm2", zero_bias)
}

/// Forward from raw token ids: embeds (plus learned positions when
/// configured) and runs the block stack. See `forward_embeddings`.
pub fn forward_tokens(
    tape: &mut Tape,
    params: &ModelParams,
    pv: &ParamVars,
    tokens: &[usize],
    opts: &ForwardOpts,
) -> Result<ForwardOut> {
    let cfg = &params.config;
    if tokens.is_empty() {
        return Err(Error::Contract { op: "forward", detail: "empty token sequence".into() });
    }
    for &t in tokens {
        if t >= cfg.vocab_size {
            return Err(Error::TokenRange { id: t, vocab: cfg.vocab_size });
        }
    }
    let tok_table = param(pv, params, "embed.tok");
    let mut emb = tape.embed(tok_table, tokens)?;
    if matches!(cfg.pos_kind, PosKind::Learned) {
        let positions: Vec<usize> = (0..tokens.len()).collect();
        if tokens.len() > cfg.max_len {
            return Err(Error::Contract {
                op: "forward",
                detail: format!(
                    "no trained position embedding beyond {} (sequence length {})",
                    cfg.max_len,
                    tokens.len()
                ),
            });
        }
        let pos_table = param(pv, params, "embed.pos");
        let pos = tape.embed(pos_table, &positions)?;
        emb = tape.add(emb, pos)?;
    }
    forward_embeddings(tape, params, pv, emb, opts)
}

/// Forward from an [m × d] embedding matrix already on the tape. Row index is
/// absolute position for every positional scheme. Sequences longer than the
/// positional capacity are rejected; rotary interpolation raises the cap.
pub fn forward_embeddings(
    tape: &mut Tape,
    params: &ModelParams,
    pv: &ParamVars,
    emb: Var,
    opts: &ForwardOpts,
) -> Result<ForwardOut> {
    let cfg = &params.config;
    let m = tape.value(emb).rows_cols().0;
    if let Some(cap) = pos_capacity(cfg) {
        if m > cap {
            return Err(Error::Contract {
                op: "forward",
                detail: format!("sequence length {m} exceeds positional capacity {cap}"),
            });
        }
    }
    let sig = PosSignal::from_config(cfg)?;
    if let Some(prefixes) = opts.layer_prefixes {
        if prefixes.len() != cfg.n_layer {
            return Err(Error::Contract {
                op: "forward",
                detail: format!(
                    "expected one prefix per layer ({}), got {}",
                    cfg.n_layer,
                    prefixes.len()
                ),
            });
        }
        if opts.attn_mask_override.is_some() {
            return Err(Error::Contract {
                op: "forward",
                detail: "attention-mask override cannot be combined with layer prefixes".into(),
            });
        }
    }
    let zero_bias = tape.leaf(Tensor::zeros(&[cfg.d]));

    // Mask leaves, one per distinct row count in play.
    let base_mask = match opts.attn_mask_override {
        Some(t) => {
            if t.rows_cols() != (m, m) {
                return Err(Error::Shape {
                    op: "forward",
                    detail: format!("mask override {:?} for {m} rows", t.shape()),
                });
            }
            tape.leaf(t.clone())
        }
        None => tape.leaf(causal_mask(m)),
    };

    let mut x = emb;
    for l in 0..cfg.n_layer {
        match opts.layer_prefixes {
            Some(prefixes) => {
                let n_p = tape.value(prefixes[l]).rows_cols().0;
                let widened = tape.concat_rows(&[prefixes[l], x])?;
                let mask = tape.leaf(causal_mask(n_p + m));
                let full = block(tape, widened, params, pv, l, &sig, mask, zero_bias)?;
                x = tape.slice(full, n_p, m)?;
            }
            None => {
                x = block(tape, x, params, pv, l, &sig, base_mask, zero_bias)?;
            }
        }
    }

    let logits = tape.matmul(x, param(pv, params, "out.w"))?;
    Ok(ForwardOut { logits, hidden: x })
}
