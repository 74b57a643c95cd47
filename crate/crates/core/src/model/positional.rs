//! Relative and rotary positional schemes: T5 bucketed biases, ALiBi linear
//! biases, and rotary embeddings with position interpolation.

use crate::error::{Error, Result};
use crate::model::config::RopeScaling;

/// Bucket id in [0, n_buckets] for a nonnegative query-key offset.
///
/// Offsets below (n_buckets+1)/2 map to themselves; from there the bucket
/// grows logarithmically up to `dist_max`; anything beyond lands in the last
/// bucket. The defining expression `(n_b+1)/2 + ⌊logterm⌋` is half-integral
/// for even n_b, so the final value is floored to obtain an integer id.
pub fn t5_bucket(offset: usize, n_buckets: usize, dist_max: usize) -> usize {
    let half = (n_buckets as f64 + 1.0) / 2.0;
    let x = offset as f64;
    if x < half {
        return offset;
    }
    let logterm = ((x.ln() - half.ln()) / ((dist_max as f64).ln() - half.ln()) * half).floor();
    let id = (half + logterm).floor() as usize;
    id.min(n_buckets)
}

/// Bias for query position i attending key position j: the learned table
/// entry at bucket b(i−j). Depends only on the offset, never on absolute
/// position. The table has n_buckets+1 entries.
pub fn t5_bias(i: usize, j: usize, table: &[f64], n_buckets: usize, dist_max: usize) -> Result<f64> {
    if j > i {
        return Err(Error::Contract { op: "t5_bias", detail: format!("future key: i={i} < j={j}") });
    }
    if table.len() != n_buckets + 1 {
        return Err(Error::Shape {
            op: "t5_bias",
            detail: format!("table has {} entries, want {}", table.len(), n_buckets + 1),
        });
    }
    Ok(table[t5_bucket(i - j, n_buckets, dist_max)])
}

/// ALiBi slope for 1-based head index k: β_k = 1/2^{8/k}.
pub fn alibi_slope(k: usize) -> f64 {
    1.0 / 2f64.powf(8.0 / k as f64)
}

/// ALiBi bias −β_k·(i−j) for head k ∈ [1, n_head].
pub fn alibi_bias(i: usize, j: usize, k: usize, n_head: usize) -> Result<f64> {
    if j > i {
        return Err(Error::Contract { op: "alibi_bias", detail: format!("future key: i={i} < j={j}") });
    }
    if k == 0 || k > n_head {
        return Err(Error::Contract {
            op: "alibi_bias",
            detail: format!("head index {k} outside 1..={n_head}"),
        });
    }
    Ok(-alibi_slope(k) * (i - j) as f64)
}

/// Rotary embedding parameters: per-pair angles θ_k = base^{−2(k−1)/d} for
/// k = 1..d/2, plus the active interpolation mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RotaryParams {
    pub base: f64,
    pub dim: usize,
    pub scaling: RopeScaling,
}

pub const ROPE_DEFAULT_BASE: f64 = 10000.0;

impl RotaryParams {
    pub fn new(base: f64, dim: usize) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::Config(format!("rotary dimension must be positive and even, got {dim}")));
        }
        if base <= 1.0 {
            return Err(Error::Config(format!("rotary base must exceed 1, got {base}")));
        }
        Ok(RotaryParams { base, dim, scaling: RopeScaling::None })
    }

    /// Base after any base-scaling interpolation.
    pub fn effective_base(&self) -> f64 {
        match self.scaling {
            RopeScaling::BaseScaled { factor } => self.base * factor,
            _ => self.base,
        }
    }

    /// θ_1 = 1 and θ strictly decreases in k.
    pub fn thetas(&self) -> Vec<f64> {
        let b = self.effective_base();
        let d = self.dim as f64;
        (1..=self.dim / 2).map(|k| b.powf(-2.0 * (k as f64 - 1.0) / d)).collect()
    }

    /// Rotation position for integer position t after any linear rescaling.
    pub fn position(&self, t: usize) -> f64 {
        match self.scaling {
            RopeScaling::Linear { trained_len, target_len } => {
                t as f64 * trained_len as f64 / target_len as f64
            }
            _ => t as f64,
        }
    }
}

/// Rotate adjacent pairs of `x` by angle position·θ_k. Pair magnitudes are
/// preserved; position 0 is the identity.
pub fn rope_apply(x: &[f64], t: usize, params: &RotaryParams) -> Result<Vec<f64>> {
    if x.len() != params.dim {
        return Err(Error::Shape {
            op: "rope_apply",
            detail: format!("input length {} vs rotary dim {}", x.len(), params.dim),
        });
    }
    let pos = params.position(t);
    let thetas = params.thetas();
    let mut out = vec![0.0; x.len()];
    for (k, &theta) in thetas.iter().enumerate() {
        let (sin, cos) = (pos * theta).sin_cos();
        let (a, b) = (x[2 * k], x[2 * k + 1]);
        out[2 * k] = a * cos - b * sin;
        out[2 * k + 1] = a * sin + b * cos;
    }
    Ok(out)
}

/// Interpolation mode for extending a trained context of m_l to m > m_l.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpolationMode {
    /// Compress positions: every point in [0, m] maps into [0, m_l].
    Linear,
    /// Multiply the base by λ = (m/m_l)^{d/(d−2)}, stretching the angle
    /// spectrum non-uniformly (the last pair's period scales by m/m_l).
    BaseScaled,
}

/// Returns rescaled parameters and a flag that is true when m ≤ m_l (no-op
/// with warning: there is nothing to extend).
pub fn rope_interpolate(
    params: &RotaryParams,
    trained_len: usize,
    target_len: usize,
    mode: InterpolationMode,
) -> Result<(RotaryParams, bool)> {
    if trained_len == 0 {
        return Err(Error::Contract { op: "rope_interpolate", detail: "trained length must be ≥ 1".into() });
    }
    if target_len <= trained_len {
        return Ok((params.clone(), true));
    }
    let mut out = params.clone();
    out.scaling = match mode {
        InterpolationMode::Linear => RopeScaling::Linear { trained_len, target_len },
        InterpolationMode::BaseScaled => {
            let d = params.dim as f64;
            let factor = (target_len as f64 / trained_len as f64).powf(d / (d - 2.0));
            RopeScaling::BaseScaled { factor }
        }
    };
    Ok((out, false))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_is_identity_below_half() {
        assert_eq!(t5_bucket(0, 32, 1024), 0);
        assert_eq!(t5_bucket(5, 32, 1024), 5);
        assert_eq!(t5_bucket(16, 32, 1024), 16);
    }

    #[test]
    fn bucket_beyond_dist_max_is_last() {
        assert_eq!(t5_bucket(2000, 32, 1024), 32);
        assert_eq!(t5_bucket(1_000_000, 32, 1024), 32);
    }

    #[test]
    fn bucket_is_monotone_nondecreasing() {
        let mut prev = 0;
        for x in 0..5000 {
            let b = t5_bucket(x, 32, 1024);
            assert!(b >= prev && b <= 32);
            prev = b;
        }
    }

    #[test]
    fn t5_bias_depends_only_on_offset() {
        let table: Vec<f64> = (0..33).map(|i| i as f64 * 0.1).collect();
        let a = t5_bias(7, 4, &table, 32, 1024).unwrap();
        let b = t5_bias(103, 100, &table, 32, 1024).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn offsets_in_one_log_bucket_share_bias() {
        // Offsets 600 and 610 land in the same logarithmic bucket.
        assert_eq!(t5_bucket(600, 32, 1024), t5_bucket(610, 32, 1024));
        assert!(t5_bucket(600, 32, 1024) > 16);
    }

    #[test]
    fn t5_bias_rejects_future_keys() {
        let table = vec![0.0; 33];
        assert!(t5_bias(3, 5, &table, 32, 1024).is_err());
    }

    #[test]
    fn alibi_slopes_match_closed_form() {
        assert_eq!(alibi_slope(8), 0.5);
        assert_eq!(alibi_slope(1), 1.0 / 256.0);
        assert_eq!(alibi_bias(5, 5, 3, 8).unwrap(), 0.0);
        assert_eq!(alibi_bias(7, 3, 8, 8).unwrap(), -2.0);
    }

    #[test]
    fn rotary_first_angle_is_one_and_decreasing() {
        let p = RotaryParams::new(ROPE_DEFAULT_BASE, 16).unwrap();
        let th = p.thetas();
        assert_eq!(th[0], 1.0);
        for w in th.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn rope_zero_position_is_identity() {
        let p = RotaryParams::new(ROPE_DEFAULT_BASE, 4).unwrap();
        let x = [0.3, -0.8, 1.1, 2.0];
        assert_eq!(rope_apply(&x, 0, &p).unwrap(), x);
    }

    #[test]
    fn rope_preserves_pair_magnitudes() {
        let p = RotaryParams::new(ROPE_DEFAULT_BASE, 6).unwrap();
        let x = [0.3, -0.8, 1.1, 2.0, -0.4, 0.9];
        let y = rope_apply(&x, 57, &p).unwrap();
        for k in 0..3 {
            let n0 = (x[2 * k].powi(2) + x[2 * k + 1].powi(2)).sqrt();
            let n1 = (y[2 * k].powi(2) + y[2 * k + 1].powi(2)).sqrt();
            assert!((n0 - n1).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_odd_dimension_rejected() {
        assert!(RotaryParams::new(ROPE_DEFAULT_BASE, 5).is_err());
    }

    #[test]
    fn interpolation_noop_warns_when_not_longer() {
        let p = RotaryParams::new(ROPE_DEFAULT_BASE, 8).unwrap();
        let (q, warned) = rope_interpolate(&p, 64, 64, InterpolationMode::Linear).unwrap();
        assert!(warned);
        assert_eq!(p, q);
    }

    #[test]
    fn linear_interpolation_compresses_positions() {
        let p = RotaryParams::new(ROPE_DEFAULT_BASE, 8).unwrap();
        let (q, warned) = rope_interpolate(&p, 64, 256, InterpolationMode::Linear).unwrap();
        assert!(!warned);
        // The angle at the target length equals the unscaled angle at the trained length.
        assert_eq!(q.position(256), 64.0);
    }

    #[test]
    fn base_scaling_stretches_last_pair_period_by_length_ratio() {
        let dim = 16;
        let p = RotaryParams::new(ROPE_DEFAULT_BASE, dim).unwrap();
        let (m_l, m) = (128, 512);
        let (q, _) = rope_interpolate(&p, m_l, m, InterpolationMode::BaseScaled).unwrap();
        let d = dim as f64;
        // Last pair's rotation period is 2π·b^{(d−2)/d}; after scaling the base
        // by λ = (m/m_l)^{d/(d−2)} it must grow by exactly m/m_l.
        let period = |b: f64| 2.0 * std::f64::consts::PI * b.powf((d - 2.0) / d);
        let ratio = period(q.effective_base()) / period(p.effective_base());
        assert!((ratio - m as f64 / m_l as f64).abs() < 1e-9);
    }
}
