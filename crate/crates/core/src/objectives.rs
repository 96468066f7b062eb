//! Loss terms of the fairness-aware objective.
//!
//! Every term has a plain-value form operating on slices and, where it sits
//! on the training path, a graph form recording the same computation on a
//! [`Graph`].

use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Clamping epsilon applied to recognizer outputs before taking logs.
pub const BCE_EPS: f64 = 1e-7;

/// Loss weights `(μ_r, μ_f, μ_s)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub reweighted: f64,
    pub fairness: f64,
    pub self_supervised: f64,
}

impl LossWeights {
    pub const fn new(reweighted: f64, fairness: f64, self_supervised: f64) -> Self {
        Self {
            reweighted,
            fairness,
            self_supervised,
        }
    }

    /// Plain MAE: `(1, 0, 0)`.
    pub const WARMUP: Self = Self::new(1.0, 0.0, 0.0);

    pub fn validate(&self) -> Result<()> {
        let all = [self.reweighted, self.fairness, self.self_supervised];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(alloc::format!(
                "loss weights must be finite and nonnegative, got {all:?}"
            )));
        }
        Ok(())
    }
}

/// Value of each loss term together with the weights used to combine them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub reweighted: f64,
    pub fairness: f64,
    pub self_supervised: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// `total = μ_r·l_r + μ_f·l_f + μ_s·l_s`.
pub fn combine(reweighted: f64, fairness: f64, self_supervised: f64, weights: LossWeights) -> LossBreakdown {
    LossBreakdown {
        reweighted,
        fairness,
        self_supervised,
        total: weights.reweighted * reweighted
            + weights.fairness * fairness
            + weights.self_supervised * self_supervised,
        weights,
    }
}

/// Mean absolute error of each row over the horizon.
pub fn per_sample_mae(pred: &Matrix, truth: &Matrix) -> Result<Vec<f64>> {
    if pred.shape() != truth.shape() {
        return Err(Error::Shape {
            op: "per_sample_mae",
            expected: truth.shape(),
            found: pred.shape(),
        });
    }
    let h = pred.cols() as f64;
    Ok((0..pred.rows())
        .map(|r| {
            pred.row(r)
                .iter()
                .zip(truth.row(r))
                .map(|(p, t)| libm::fabs(p - t))
                .sum::<f64>()
                / h
        })
        .collect())
}

/// `λ_i = 1 + e_i / Σ_j e_j`; all ones when the errors sum to zero.
pub fn cost_sensitive_weights(errors: &[f64]) -> Vec<f64> {
    let total: f64 = errors.iter().sum();
    if total <= 0.0 {
        return alloc::vec![1.0; errors.len()];
    }
    errors.iter().map(|e| 1.0 + e / total).collect()
}

/// `(1/M)·Σ λ_i·e_i`.
pub fn reweighted_loss(errors: &[f64], weights: &[f64]) -> f64 {
    debug_assert_eq!(errors.len(), weights.len());
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().zip(weights).map(|(e, l)| e * l).sum::<f64>() / errors.len() as f64
}

/// Population variance of the per-sample errors.
pub fn fairness_loss(errors: &[f64]) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    let m = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / m;
    errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / m
}

/// `−mean[ω·z·ln p + (1−z)·ln(1−p)]`, `p = clamp(ẑ, ε, 1−ε)`.
pub fn weighted_bce_value(z_hat: &[f64], z: &[f64], omega: f64, eps: f64) -> f64 {
    debug_assert_eq!(z_hat.len(), z.len());
    if z.is_empty() {
        return 0.0;
    }
    let sum: f64 = z_hat
        .iter()
        .zip(z)
        .map(|(&p, &label)| {
            let p = p.clamp(eps, 1.0 - eps);
            omega * label * libm::log(p) + (1.0 - label) * libm::log(1.0 - p)
        })
        .sum();
    -sum / z.len() as f64
}

pub fn weighted_bce(z_hat: &[f64], z: &[f64], omega: f64) -> f64 {
    weighted_bce_value(z_hat, z, omega, BCE_EPS)
}

/// Per-sample MAE recorded on the graph, as an `M × 1` column.
pub fn per_sample_mae_var(g: &mut Graph, pred: Var, truth: Var) -> Result<Var> {
    let diff = g.sub(pred, truth)?;
    let abs = g.abs(diff);
    Ok(g.row_mean(abs))
}

/// `(1/M)·Σ λ_i·e_i` with `λ` held constant.
pub fn reweighted_loss_var(g: &mut Graph, errors: Var, lambda: &[f64]) -> Result<Var> {
    let l = g.constant(Matrix::column(lambda));
    let weighted = g.mul(errors, l)?;
    Ok(g.mean_all(weighted))
}

/// Population variance of the error column.
pub fn fairness_loss_var(g: &mut Graph, errors: Var) -> Result<Var> {
    let mean = g.mean_all(errors);
    let centered = g.sub_scalar(errors, mean)?;
    let sq = g.mul(centered, centered)?;
    Ok(g.mean_all(sq))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn per_sample_mae_examples() {
        let p = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        let t = Matrix::from_rows(&[[0.0, 2.0]]).unwrap();
        assert_eq!(per_sample_mae(&p, &t).unwrap(), [1.0]);
        assert_eq!(per_sample_mae(&t, &t).unwrap(), [0.0]);
        // |c|-homogeneous
        let e = per_sample_mae(&p.scale(-3.0), &t.scale(-3.0)).unwrap();
        assert!(close(e[0], 3.0, 1e-12));
        assert!(per_sample_mae(&p, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn cost_sensitive_examples() {
        assert_eq!(cost_sensitive_weights(&[1.0, 3.0]), [1.25, 1.75]);
        assert_eq!(cost_sensitive_weights(&[2.0]), [2.0]);
        let w = cost_sensitive_weights(&[0.7; 4]);
        assert!(w.iter().all(|v| close(*v, 1.25, 1e-12)));
        assert_eq!(cost_sensitive_weights(&[0.0, 0.0]), [1.0, 1.0]);
    }

    #[test]
    fn reweighted_examples() {
        let e = [1.0, 3.0];
        assert!(close(reweighted_loss(&e, &cost_sensitive_weights(&e)), 3.25, 1e-12));
        let c = [2.0; 5];
        assert!(close(reweighted_loss(&c, &cost_sensitive_weights(&c)), 2.0 * 1.2, 1e-12));
        let z = [0.0; 3];
        assert_eq!(reweighted_loss(&z, &cost_sensitive_weights(&z)), 0.0);
    }

    #[test]
    fn fairness_examples() {
        assert_eq!(fairness_loss(&[1.0, 1.0, 1.0]), 0.0);
        assert_eq!(fairness_loss(&[0.0, 2.0]), 1.0);
        assert_eq!(fairness_loss(&[0.0, 0.0, 3.0, 3.0]), 2.25);
    }

    #[test]
    fn bce_examples() {
        let ln2 = core::f64::consts::LN_2;
        assert!(close(weighted_bce(&[0.5], &[1.0], 4.0), 4.0 * ln2, 1e-12));
        assert!(close(weighted_bce(&[0.5], &[0.0], 4.0), ln2, 1e-12));
        assert!(weighted_bce(&[1.0 - 1e-12], &[1.0], 4.0) < 1e-6);
        // clamped at the boundaries
        assert!(weighted_bce(&[0.0], &[1.0], 4.0).is_finite());
        assert!(weighted_bce(&[1.0], &[0.0], 4.0).is_finite());
    }

    #[test]
    fn combine_examples() {
        let b = combine(1.0, 2.0, 3.0, LossWeights::new(1.0, 0.5, 0.1));
        assert!(close(b.total, 2.3, 1e-12));
        assert_eq!(combine(0.0, 0.0, 0.0, LossWeights::new(1.0, 0.5, 0.1)).total, 0.0);
        let e = [0.5, 1.5, 4.0];
        let mean = e.iter().sum::<f64>() / 3.0;
        let b = combine(reweighted_loss(&e, &[1.0; 3]), fairness_loss(&e), 0.7, LossWeights::WARMUP);
        assert!(close(b.total, mean, 1e-12));
        assert!(LossWeights::new(1.0, -0.1, 0.0).validate().is_err());
    }

    #[test]
    fn graph_forms_match_values() {
        let mut g = Graph::new();
        let p = g.constant(Matrix::from_rows(&[[1.0, 2.0], [0.0, 5.0], [3.0, 3.0]]).unwrap());
        let t = g.constant(Matrix::from_rows(&[[0.0, 0.0], [1.0, 1.0], [3.0, 2.0]]).unwrap());
        let e = per_sample_mae_var(&mut g, p, t).unwrap();
        let ev = g.value(e).as_slice().to_vec();
        assert_eq!(ev, [1.5, 2.5, 0.5]);
        let lam = cost_sensitive_weights(&ev);
        let lr = reweighted_loss_var(&mut g, e, &lam).unwrap();
        let lf = fairness_loss_var(&mut g, e).unwrap();
        assert!(close(g.scalar(lr), reweighted_loss(&ev, &lam), 1e-12));
        assert!(close(g.scalar(lf), fairness_loss(&ev), 1e-12));
    }
}
