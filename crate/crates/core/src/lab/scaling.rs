//! Power-law fits for loss-versus-size measurements, plus the two published
//! closed forms used as fixed reference curves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One measurement: x is the size variable (parameters or tokens).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub x: f64,
    pub loss: f64,
}

impl ScalingPoint {
    pub fn validate(&self) -> Result<()> {
        if !(self.x > 0.0) || !(self.loss > 0.0) {
            return Err(Error::Contract {
                op: "scaling_point",
                detail: format!("need x > 0 and loss > 0, got ({}, {})", self.x, self.loss),
            });
        }
        Ok(())
    }
}

/// Fitted L(x) = a·x^b + ε∞ (ε∞ absent for the pure power law).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLawFit {
    pub a: f64,
    pub b: f64,
    pub eps_inf: Option<f64>,
    /// Root-mean-square error of log(loss − ε∞) against the fitted line.
    pub residual: f64,
}

/// Closed-form least squares of ln(loss − eps) = ln a + b ln x.
/// Returns (a, b, rms residual in log space).
fn log_space_fit(points: &[ScalingPoint], eps: f64) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.x.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| (p.loss - eps).ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = sxy / sxx;
    let ln_a = my - b * mx;
    let sse: f64 =
        xs.iter().zip(&ys).map(|(x, y)| (ln_a + b * x - y).powi(2)).sum();
    (ln_a.exp(), b, (sse / n).sqrt())
}

/// Least-squares power-law fit. The pure form is a log-space line; the
/// irreducible-error form scans ε∞ by golden-section search over
/// [0, min loss), refitting the line at each candidate.
pub fn fit_power_law(points: &[ScalingPoint], with_irreducible: bool) -> Result<PowerLawFit> {
    let need = if with_irreducible { 4 } else { 3 };
    if points.len() < need {
        return Err(Error::Contract {
            op: "fit_power_law",
            detail: format!("need at least {need} points, got {}", points.len()),
        });
    }
    for p in points {
        p.validate()?;
    }
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            if points[i].x == points[j].x {
                return Err(Error::Contract {
                    op: "fit_power_law",
                    detail: format!("duplicate size value {}", points[i].x),
                });
            }
        }
    }

    if !with_irreducible {
        let (a, b, residual) = log_space_fit(points, 0.0);
        return Ok(PowerLawFit { a, b, eps_inf: None, residual });
    }

    let min_loss = points.iter().map(|p| p.loss).fold(f64::INFINITY, f64::min);
    let objective = |eps: f64| log_space_fit(points, eps).2;
    // Golden-section search; the noiseless objective has a unique zero at
    // the planted ε∞ and is well-behaved for mildly noisy data.
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (0.0, min_loss * (1.0 - 1e-9));
    let (mut c, mut d) = (hi - phi * (hi - lo), lo + phi * (hi - lo));
    let (mut fc, mut fd) = (objective(c), objective(d));
    for _ in 0..200 {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - phi * (hi - lo);
            fc = objective(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + phi * (hi - lo);
            fd = objective(d);
        }
    }
    let eps = 0.5 * (lo + hi);
    let (a, b, residual) = log_space_fit(points, eps);
    Ok(PowerLawFit { a, b, eps_inf: Some(eps), residual })
}

/// Published pre-training curve in parameters: (N / 8.8e13)^(−0.076).
pub fn kaplan_param_loss(n: f64) -> f64 {
    (n / 8.8e13).powf(-0.076)
}

/// Published compute-optimal curve: 406.4/N^0.34 + 410.7/D^0.28 + 1.69.
/// Requires N, D > 0.
pub fn chinchilla_eval(n: f64, d: f64) -> f64 {
    406.4 / n.powf(0.34) + 410.7 / d.powf(0.28) + 1.69
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_pure_power_law_recovers_exactly() {
        let points: Vec<ScalingPoint> = (1..=20)
            .map(|i| {
                let x = (i as f64) * 100.0;
                ScalingPoint { x, loss: 2.0 * x.powf(-0.5) }
            })
            .collect();
        let fit = fit_power_law(&points, false).unwrap();
        assert!((fit.a - 2.0).abs() < 1e-9);
        assert!((fit.b + 0.5).abs() < 1e-12);
        assert!(fit.residual < 1e-12);
        assert!(fit.eps_inf.is_none());
    }

    #[test]
    fn planted_irreducible_term_recovers_within_tolerance() {
        let points: Vec<ScalingPoint> = (1..=20)
            .map(|i| {
                let x = (i as f64) * 100.0;
                ScalingPoint { x, loss: 2.0 * x.powf(-0.5) + 0.1 }
            })
            .collect();
        let fit = fit_power_law(&points, true).unwrap();
        assert!((fit.a - 2.0).abs() < 1e-6, "a = {}", fit.a);
        assert!((fit.b + 0.5).abs() < 1e-6, "b = {}", fit.b);
        assert!((fit.eps_inf.unwrap() - 0.1).abs() < 1e-6, "eps = {:?}", fit.eps_inf);
    }

    #[test]
    fn fit_rejects_degenerate_inputs() {
        let p = |x: f64, l: f64| ScalingPoint { x, loss: l };
        assert!(fit_power_law(&[p(1.0, 1.0), p(2.0, 0.5)], false).is_err());
        assert!(fit_power_law(&[p(1.0, 1.0), p(2.0, 0.5), p(3.0, 0.4)], true).is_err());
        assert!(
            fit_power_law(&[p(1.0, 1.0), p(1.0, 0.5), p(3.0, 0.4)], false).is_err(),
            "duplicate x"
        );
        assert!(fit_power_law(&[p(-1.0, 1.0), p(2.0, 0.5), p(3.0, 0.4)], false).is_err());
        assert!(fit_power_law(&[p(1.0, 0.0), p(2.0, 0.5), p(3.0, 0.4)], false).is_err());
    }

    #[test]
    fn kaplan_curve_is_one_at_the_normalization_point() {
        assert_eq!(kaplan_param_loss(8.8e13), 1.0);
        assert!(kaplan_param_loss(1e9) > 1.0, "smaller models sit above the floor");
    }

    #[test]
    fn chinchilla_limit_and_spot_value() {
        assert!((chinchilla_eval(1e300, 1e300) - 1.69).abs() < 1e-12);

        // Independent arithmetic for the spot value at N = D = 1e9.
        let expected = 406.4 * (-0.34 * 1e9f64.ln()).exp()
            + 410.7 * (-0.28 * 1e9f64.ln()).exp()
            + 1.69;
        assert!((chinchilla_eval(1e9, 1e9) - expected).abs() < 1e-12);

        // Monotone decreasing in each argument.
        assert!(chinchilla_eval(2e9, 1e9) < chinchilla_eval(1e9, 1e9));
        assert!(chinchilla_eval(1e9, 2e9) < chinchilla_eval(1e9, 1e9));
    }
}
