use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm function selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Layer,
    Rms,
}

/// Placement of the norm relative to the residual block:
/// post is `LNorm(F(input) + input)`, pre is `LNorm(F(input)) + input`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlace {
    Pre,
    Post,
}

/// FFN sub-layer flavor. The gated kinds gate an up-projection with a second
/// affine branch: `σ(h·W_1 + b_1) ⊙ (h·W_2 + b_2)` followed by the
/// down-projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    Relu,
    Gelu,
    Geglu,
    Swiglu,
}

/// Positional scheme. `Learned` adds trained absolute embeddings (hard error
/// beyond `max_len`); the other three act inside attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PosKind {
    Learned,
    T5Bias { n_buckets: usize, dist_max: usize },
    Alibi,
    Rope { base: f64, scaling: RopeScaling },
}

/// Rotary position rescaling for running past the trained length:
/// linear compresses positions by trained/target; base scaling multiplies the
/// rotary base by a precomputed factor λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RopeScaling {
    None,
    Linear { trained_len: usize, target_len: usize },
    BaseScaled { factor: f64 },
}

/// KV-cache variant used by incremental decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CacheKind {
    Full,
    Window { n_ctx: usize },
    Cumulative,
    Linear,
}

/// The full architectural knob set for the decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden size d.
    pub d: usize,
    /// Layer count.
    pub n_layer: usize,
    /// Query-head count τ.
    pub n_head: usize,
    /// Key/value-head count; equal to `n_head` for standard multi-head
    /// attention, 1 for multi-query attention.
    pub n_kv_head: usize,
    /// FFN hidden size.
    pub d_ffn: usize,
    pub vocab_size: usize,
    /// Maximum trained sequence length.
    pub max_len: usize,
    pub norm_kind: NormKind,
    pub norm_place: NormPlace,
    pub ffn_kind: FfnKind,
    /// When false, every affine bias (QKV/merge projections, FFN, norm β)
    /// is removed. The output projection W^o never carries a bias.
    pub use_bias: bool,
    pub pos_kind: PosKind,
    pub cache_kind: CacheKind,
}

impl ModelConfig {
    /// A small trainable default: handy base for tests and experiments.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            d: 32,
            n_layer: 2,
            n_head: 4,
            n_kv_head: 4,
            d_ffn: 64,
            vocab_size,
            max_len: 64,
            norm_kind: NormKind::Layer,
            norm_place: NormPlace::Pre,
            ffn_kind: FfnKind::Gelu,
            use_bias: true,
            pos_kind: PosKind::Learned,
            cache_kind: CacheKind::Full,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d / self.n_head
    }

    /// K/V group for query head j: g(j) = floor(j·n_g/τ), contiguous blocks.
    pub fn kv_group(&self, head: usize) -> usize {
        head * self.n_kv_head / self.n_head
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d == 0 || self.n_layer == 0 || self.vocab_size == 0 || self.max_len == 0 {
            return fail("d, n_layer, vocab_size, max_len must be positive".into());
        }
        if self.n_head == 0 || self.d % self.n_head != 0 {
            return fail(format!("d = {} must be divisible by n_head = {}", self.d, self.n_head));
        }
        if self.n_kv_head == 0 || self.n_head % self.n_kv_head != 0 {
            return fail(format!(
                "n_head = {} must be divisible by n_kv_head = {}",
                self.n_head, self.n_kv_head
            ));
        }
        if self.d_ffn < self.d {
            return fail(format!("d_ffn = {} must be at least d = {}", self.d_ffn, self.d));
        }
        match &self.pos_kind {
            PosKind::Rope { base, .. } => {
                if self.d_head() % 2 != 0 {
                    return fail(format!("rotary positions need an even head dim, got {}", self.d_head()));
                }
                if *base <= 1.0 {
                    return fail(format!("rotary base must exceed 1, got {base}"));
                }
            }
            PosKind::T5Bias { n_buckets, dist_max } => {
                if *n_buckets < 2 || *dist_max < 2 {
                    return fail("t5 bias needs n_buckets ≥ 2 and dist_max ≥ 2".into());
                }
            }
            _ => {}
        }
        if let CacheKind::Window { n_ctx } = self.cache_kind {
            if n_ctx == 0 {
                return fail("window cache needs n_ctx ≥ 1".into());
            }
        }
        Ok(())
    }
}
