//! The multimodal ring target: eight equal Gaussian modes on a circle.
//!
//! Each mode is an isotropic bivariate Gaussian with covariance `0.5 * I`
//! centered at radius 10; the unnormalized density is the *sum* of the eight
//! component densities, so the true normalizer is exactly 8 and
//! `log Z = ln 8`. The density is evaluated with differentiable, overflow-safe
//! log-sum-exp so annealing factors stay finite (never `-inf`, never NaN) even
//! for positions far outside the ring.

use crate::autodiff::Value;
use crate::error::Result;

/// ln 8: the exact log normalizer of the ring density.
pub const RING_LOG_Z: f64 = 2.0794415416798357;

/// Number of mixture modes.
pub const RING_MODES: usize = 8;

/// Radius of the circle the modes sit on.
pub const RING_RADIUS: f64 = 10.0;

/// Per-axis variance of each mode.
pub const RING_MODE_VAR: f64 = 0.5;

/// Mode centers, equally spaced on the circle.
pub fn ring_modes() -> Vec<[f64; 2]> {
    (0..RING_MODES)
        .map(|i| {
            let angle = 2.0 * std::f64::consts::PI * i as f64 / RING_MODES as f64;
            [RING_RADIUS * angle.cos(), RING_RADIUS * angle.sin()]
        })
        .collect()
}

/// Stable log(exp(a) + exp(b)) on values: `a + softplus(b - a)`.
fn log_add_exp(a: &Value, b: &Value) -> Result<Value> {
    a.add(&b.sub(a)?.softplus())
}

/// Unnormalized log density of positions `x` of shape `[.., 2]`, reduced over
/// the trailing coordinate dim.
pub fn log_ring_density(x: &Value) -> Result<Value> {
    // log N(x; m, 0.5 I) = -|x - m|^2 - ln(pi), since 2 * pi * 0.5 = pi.
    let ln_pi = std::f64::consts::PI.ln();
    let mut total: Option<Value> = None;
    for m in ring_modes() {
        let diff = x.sub(&Value::vector(vec![m[0], m[1]]))?;
        let sq = diff.mul(&diff)?;
        let comp = sq.sum_axis(sq.rank() - 1).neg().sub(&Value::scalar(ln_pi))?;
        total = Some(match total {
            None => comp,
            Some(acc) => log_add_exp(&acc, &comp)?,
        });
    }
    Ok(total.expect("at least one mode"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{backward, Parameter, Tape};
    use crate::tensor::TensorData;

    #[test]
    fn ring_density_normalizes_to_eight() {
        // 2-D trapezoid quadrature over [-14, 14]^2.
        let n = 560usize;
        let (lo, hi) = (-14.0, 14.0);
        let h = (hi - lo) / n as f64;
        let mut coords = Vec::with_capacity((n + 1) * (n + 1) * 2);
        let mut trap = Vec::with_capacity((n + 1) * (n + 1));
        for i in 0..=n {
            for j in 0..=n {
                coords.push(lo + i as f64 * h);
                coords.push(lo + j as f64 * h);
                let wi = if i == 0 || i == n { 0.5 } else { 1.0 };
                let wj = if j == 0 || j == n { 0.5 } else { 1.0 };
                trap.push(wi * wj);
            }
        }
        let x = Value::from_shape_vec(vec![(n + 1) * (n + 1), 2], coords);
        let lp = log_ring_density(&x).unwrap();
        let z: f64 = lp
            .data()
            .data()
            .iter()
            .zip(&trap)
            .map(|(&l, &w)| w * l.exp())
            .sum::<f64>()
            * h
            * h;
        assert!((z - 8.0).abs() < 1e-3, "integral {z}");
        assert!((z.ln() - RING_LOG_Z).abs() < 2e-4);
    }

    #[test]
    fn far_field_stays_finite() {
        let x = Value::from_shape_vec(vec![2, 2], vec![30.0, 30.0, -40.0, 5.0]);
        let lp = log_ring_density(&x).unwrap();
        for &l in lp.data().data() {
            assert!(l.is_finite(), "log density {l}");
            assert!(l < -100.0);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let p = Parameter::new("pos", TensorData::new(vec![1, 2], vec![3.0, -4.5]));
        let tape = Tape::new();
        let lp = log_ring_density(&p.to_value(Some(&tape))).unwrap().sum_all();
        backward(&lp).unwrap();
        let analytic = p.grad().to_vec();
        let numeric = crate::autodiff::central_difference(
            &[p.clone()],
            || Ok(log_ring_density(&p.to_value(None))?.sum_all().item()),
            1e-5,
        )
        .unwrap();
        for (a, n) in analytic.iter().zip(&numeric[0]) {
            assert!((a - n).abs() / n.abs().max(1.0) < 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn mode_centers_score_identically_and_highest() {
        let modes = ring_modes();
        let coords: Vec<f64> = modes.iter().flat_map(|m| [m[0], m[1]]).collect();
        let x = Value::from_shape_vec(vec![8, 2], coords);
        let lp = log_ring_density(&x).unwrap();
        let vals = lp.data().data().to_vec();
        for &v in &vals {
            assert!((v - vals[0]).abs() < 1e-9);
        }
        let origin = log_ring_density(&Value::from_shape_vec(vec![1, 2], vec![0.0, 0.0])).unwrap();
        assert!(origin.data().data()[0] < vals[0]);
    }
}
