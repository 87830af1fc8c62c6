//! Training losses and the analysis utilities around them: the combined
//! MSE/exponential (CME) loss, the Lambert W function, the closed-form
//! optimal prediction of the single-sample CME loss, and safe-set IoU.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("non-finite value in loss inputs")]
    NonFinite,
    #[error("shape mismatch: {0} vs {1}")]
    Shape(usize, usize),
    #[error("lambert_w requires z >= 0 on this branch, got {0}")]
    Domain(f64),
    #[error("gamma must lie in (0, 1], got {0}")]
    Gamma(f64),
}

/// Mean of `gamma (v - vhat)^2 + (1 - gamma) exp(-v vhat)` over all nodes.
pub fn cme_loss(vhat: &[f64], v: &[f64], gamma: f64) -> Result<f64, LossError> {
    if vhat.len() != v.len() {
        return Err(LossError::Shape(vhat.len(), v.len()));
    }
    let mut acc = 0.0;
    for (&p, &t) in vhat.iter().zip(v) {
        if !p.is_finite() || !t.is_finite() {
            return Err(LossError::NonFinite);
        }
        let e = t - p;
        acc += gamma * e * e + (1.0 - gamma) * (-t * p).exp();
    }
    Ok(acc / v.len() as f64)
}

/// CME loss together with d(loss)/d(vhat) per node (mean convention).
pub fn cme_loss_and_grad(
    vhat: &[f64],
    v: &[f64],
    gamma: f64,
    grad: &mut Vec<f64>,
) -> Result<f64, LossError> {
    if vhat.len() != v.len() {
        return Err(LossError::Shape(vhat.len(), v.len()));
    }
    let n = v.len() as f64;
    grad.clear();
    grad.reserve(v.len());
    let mut acc = 0.0;
    for (&p, &t) in vhat.iter().zip(v) {
        if !p.is_finite() || !t.is_finite() {
            return Err(LossError::NonFinite);
        }
        let e = t - p;
        let ex = (-t * p).exp();
        acc += gamma * e * e + (1.0 - gamma) * ex;
        grad.push((-2.0 * gamma * e - (1.0 - gamma) * t * ex) / n);
    }
    Ok(acc / n)
}

/// Principal-branch Lambert W for z >= 0, via Halley iteration from
/// log(1 + z). Residual |w e^w - z| converges below 1e-12 on this range.
pub fn lambert_w(z: f64) -> Result<f64, LossError> {
    if !z.is_finite() || z < 0.0 {
        return Err(LossError::Domain(z));
    }
    if z == 0.0 {
        return Ok(0.0);
    }
    let mut w = z.ln_1p();
    for _ in 0..50 {
        let ew = w.exp();
        let f = w * ew - z;
        if f.abs() <= 1e-13 * (1.0 + z) {
            break;
        }
        // Halley step: f' = e^w (1 + w), f'' = e^w (2 + w).
        let denom = ew * (w + 1.0) - (w + 2.0) * f / (2.0 * w + 2.0);
        w -= f / denom;
    }
    Ok(w)
}

/// Unique minimizer of the single-sample CME loss
/// `gamma (y - yhat)^2 + (1 - gamma) exp(-y yhat)`:
/// `yhat* = y + W((1 - gamma) y^2 / (2 gamma e^{y^2})) / y`, continuous at
/// y = 0 with value 0. `gamma = 0` is rejected (no finite minimizer at 0).
pub fn cme_optimal_prediction(y: f64, gamma: f64) -> Result<f64, LossError> {
    if !(0.0..=1.0).contains(&gamma) || gamma == 0.0 {
        return Err(LossError::Gamma(gamma));
    }
    if y == 0.0 {
        return Ok(0.0);
    }
    let z = (1.0 - gamma) * y * y / (2.0 * gamma * (y * y).exp());
    Ok(y + lambert_w(z)? / y)
}

/// Intersection-over-union of the zero-superlevel (safe) sets of two fields
/// sampled on the same grid. Both sets empty counts as perfect agreement.
pub fn iou(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        let sa = x >= 0.0;
        let sb = y >= 0.0;
        if sa && sb {
            inter += 1;
        }
        if sa || sb {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cme_reduces_to_mse_at_gamma_one() {
        let vhat = [0.5, -1.0, 2.0];
        let v = [1.0, -0.5, 2.5];
        let mse: f64 = vhat.iter().zip(&v).map(|(p, t)| (t - p) * (t - p)).sum::<f64>() / 3.0;
        assert!((cme_loss(&vhat, &v, 1.0).unwrap() - mse).abs() < 1e-15);
    }

    #[test]
    fn cme_direct_substitution() {
        // gamma = 0.5, v = 1, vhat = -1: 0.5 * 4 + 0.5 * e.
        let l = cme_loss(&[-1.0], &[1.0], 0.5).unwrap();
        assert!((l - (2.0 + 0.5 * std::f64::consts::E)).abs() < 1e-12);
    }

    #[test]
    fn cme_vanishes_for_large_agreeing_values() {
        let v = [5.0, -6.0, 7.0];
        let l = cme_loss(&v, &v, 0.1).unwrap();
        assert!(l < 1e-9);
    }

    #[test]
    fn cme_rejects_nan() {
        assert_eq!(cme_loss(&[f64::NAN], &[0.0], 0.5), Err(LossError::NonFinite));
    }

    #[test]
    fn cme_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.gen_range(1..6);
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let vhat: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let gamma = rng.gen_range(0.05..1.0);
            let mut grad = Vec::new();
            cme_loss_and_grad(&vhat, &v, gamma, &mut grad).unwrap();
            let h = 1e-6;
            for i in 0..n {
                let mut up = vhat.clone();
                up[i] += h;
                let mut dn = vhat.clone();
                dn[i] -= h;
                let fd = (cme_loss(&up, &v, gamma).unwrap() - cme_loss(&dn, &v, gamma).unwrap())
                    / (2.0 * h);
                assert!((grad[i] - fd).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn lambert_w_known_points() {
        assert_eq!(lambert_w(0.0).unwrap(), 0.0);
        assert!((lambert_w(std::f64::consts::E).unwrap() - 1.0).abs() < 1e-12);
        assert!(lambert_w(-0.5).is_err());
    }

    #[test]
    fn lambert_w_defining_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..2000 {
            let z = rng.gen_range(0.0..10.0);
            let w = lambert_w(z).unwrap();
            assert!((w * w.exp() - z).abs() <= 1e-12, "z = {z}");
        }
    }

    /// 1-D convex minimization oracle for the single-sample CME loss.
    fn golden_section_min(y: f64, gamma: f64) -> f64 {
        let f = |yh: f64| gamma * (y - yh) * (y - yh) + (1.0 - gamma) * (-y * yh).exp();
        let (mut a, mut b) = (y.min(0.0) - 30.0, y.max(0.0) + 30.0);
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        let (mut c, mut d) = (b - phi * (b - a), a + phi * (b - a));
        for _ in 0..200 {
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
            c = b - phi * (b - a);
            d = a + phi * (b - a);
            if (b - a).abs() < 1e-10 {
                break;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn optimal_prediction_matches_convex_minimization() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..300 {
            let mut y: f64 = rng.gen_range(-3.0..3.0);
            if y.abs() < 1e-3 {
                y = 0.5;
            }
            let gamma = rng.gen_range(0.05..=1.0);
            let closed = cme_optimal_prediction(y, gamma).unwrap();
            let oracle = golden_section_min(y, gamma);
            assert!((closed - oracle).abs() <= 1e-6, "y={y} gamma={gamma}: {closed} vs {oracle}");
            assert_eq!(closed.signum(), y.signum());
        }
    }

    #[test]
    fn optimal_prediction_limits() {
        assert_eq!(cme_optimal_prediction(0.0, 0.3).unwrap(), 0.0);
        for y in [-2.0, -0.3, 0.7, 2.5] {
            assert_eq!(cme_optimal_prediction(y, 1.0).unwrap(), y);
        }
        assert!(cme_optimal_prediction(1.0, 0.0).is_err());
    }

    #[test]
    fn single_sample_cme_is_convex() {
        // Second differences of the 1-D loss stay non-negative.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let y: f64 = rng.gen_range(-3.0..3.0);
            let gamma: f64 = rng.gen_range(0.05..1.0);
            let f = |yh: f64| gamma * (y - yh) * (y - yh) + (1.0 - gamma) * (-y * yh).exp();
            let h = 0.05;
            for i in -60..60 {
                let x = i as f64 * 0.1;
                let second = f(x - h) - 2.0 * f(x) + f(x + h);
                assert!(second >= -1e-9, "y={y} gamma={gamma} x={x}: {second}");
            }
        }
    }

    #[test]
    fn iou_cases() {
        assert_eq!(iou(&[1.0, -1.0, 0.5], &[1.0, -1.0, 0.5]), 1.0);
        assert_eq!(iou(&[1.0, -1.0], &[-1.0, 1.0]), 0.0);
        // A's safe set is a strict half of B's.
        assert_eq!(iou(&[1.0, 1.0, -1.0, -1.0], &[1.0, 1.0, 1.0, 1.0]), 0.5);
        // Both empty.
        assert_eq!(iou(&[-1.0, -2.0], &[-3.0, -4.0]), 1.0);
    }
}
