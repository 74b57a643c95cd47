//! Central finite-difference gradient checking.
//!
//! Every differentiable op is validated against this oracle, which knows
//! nothing about the tape: it re-evaluates a scalar function at `x ± step`
//! component by component.

/// Default central-difference step for f64 checks.
pub const FD_STEP: f64 = 1e-5;

/// Gradient magnitudes below this count as zero-scale when normalizing the
/// error, so finite-difference noise on vanishing entries cannot dominate.
pub const FD_FLOOR: f64 = 1e-6;

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + step;
        let fp = f(&xs);
        xs[i] = orig - step;
        let fm = f(&xs);
        xs[i] = orig;
        g[i] = (fp - fm) / (2.0 * step);
    }
    g
}

/// Max elementwise relative error |ad − fd| / max(|ad|, |fd|, floor).
pub fn max_rel_err(ad: &[f64], fd: &[f64]) -> f64 {
    assert_eq!(ad.len(), fd.len(), "gradient length mismatch");
    ad.iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(FD_FLOOR))
        .fold(0.0, f64::max)
}
