//! Accuracy and fairness metrics.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Targets with `|y| ≤` this are excluded from MAPE.
pub const MAPE_EPS: f64 = 1e-3;
/// Share of samples in each tail of the subgroup breakdown.
pub const SUBGROUP_FRACTION: f64 = 0.3;

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn population_variance(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

fn check_shapes(op: &'static str, pred: &Matrix, truth: &Matrix) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(Error::Shape {
            op,
            expected: truth.shape(),
            found: pred.shape(),
        });
    }
    Ok(())
}

/// Streaming sums over `(prediction, target)` pairs. Merging two
/// accumulators equals accumulating their inputs in one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorAccumulator {
    pub mape_eps: f64,
    pub count: usize,
    pub abs_sum: f64,
    pub sq_sum: f64,
    pub ape_count: usize,
    pub ape_sum: f64,
}

impl Default for ErrorAccumulator {
    fn default() -> Self {
        Self::new(MAPE_EPS)
    }
}

impl ErrorAccumulator {
    pub fn new(mape_eps: f64) -> Self {
        Self {
            mape_eps,
            count: 0,
            abs_sum: 0.0,
            sq_sum: 0.0,
            ape_count: 0,
            ape_sum: 0.0,
        }
    }

    pub fn push(&mut self, pred: f64, truth: f64) {
        let e = pred - truth;
        self.count += 1;
        self.abs_sum += libm::fabs(e);
        self.sq_sum += e * e;
        if libm::fabs(truth) > self.mape_eps {
            self.ape_count += 1;
            self.ape_sum += libm::fabs(e / truth);
        }
    }

    pub fn merge(&mut self, other: &Self) {
        self.count += other.count;
        self.abs_sum += other.abs_sum;
        self.sq_sum += other.sq_sum;
        self.ape_count += other.ape_count;
        self.ape_sum += other.ape_sum;
    }

    pub fn metrics(&self) -> AccuracyMetrics {
        let n = self.count.max(1) as f64;
        AccuracyMetrics {
            mae: self.abs_sum / n,
            rmse: libm::sqrt(self.sq_sum / n),
            mape: if self.ape_count == 0 {
                f64::NAN
            } else {
                100.0 * self.ape_sum / self.ape_count as f64
            },
        }
    }
}

/// MAE and RMSE in data units, MAPE in percent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AccuracyMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
}

fn check_step(pred: &Matrix, k: usize) -> Result<()> {
    if k == 0 || k > pred.cols() {
        return Err(Error::Config(alloc::format!(
            "horizon step {k} outside 1..={}",
            pred.cols()
        )));
    }
    Ok(())
}

/// Accuracy of the forecast at horizon step `k` (1-based).
pub fn accuracy_at(pred: &Matrix, truth: &Matrix, k: usize, mape_eps: f64) -> Result<AccuracyMetrics> {
    check_shapes("accuracy_at", pred, truth)?;
    check_step(pred, k)?;
    let mut acc = ErrorAccumulator::new(mape_eps);
    for i in 0..pred.rows() {
        acc.push(pred[(i, k - 1)], truth[(i, k - 1)]);
    }
    Ok(acc.metrics())
}

/// Accuracy over every step of the horizon.
pub fn accuracy_all(pred: &Matrix, truth: &Matrix, mape_eps: f64) -> Result<AccuracyMetrics> {
    check_shapes("accuracy_all", pred, truth)?;
    let mut acc = ErrorAccumulator::new(mape_eps);
    for (p, t) in pred.as_slice().iter().zip(truth.as_slice()) {
        acc.push(*p, *t);
    }
    Ok(acc.metrics())
}

/// Per-sample MAPE in percent over the horizon; `NaN` when every target
/// is near zero.
pub fn per_sample_mape(pred: &Matrix, truth: &Matrix, mape_eps: f64) -> Result<Vec<f64>> {
    check_shapes("per_sample_mape", pred, truth)?;
    Ok((0..pred.rows())
        .map(|i| {
            let mut acc = ErrorAccumulator::new(mape_eps);
            for (p, t) in pred.row(i).iter().zip(truth.row(i)) {
                acc.push(*p, *t);
            }
            acc.metrics().mape
        })
        .collect())
}

/// Absolute errors and percentage errors (`NaN` where masked) at step `k`.
pub fn step_errors(pred: &Matrix, truth: &Matrix, k: usize, mape_eps: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    check_shapes("step_errors", pred, truth)?;
    check_step(pred, k)?;
    let mut abs = Vec::with_capacity(pred.rows());
    let mut ape = Vec::with_capacity(pred.rows());
    for i in 0..pred.rows() {
        let (p, t) = (pred[(i, k - 1)], truth[(i, k - 1)]);
        abs.push(libm::fabs(p - t));
        ape.push(if libm::fabs(t) > mape_eps {
            100.0 * libm::fabs((p - t) / t)
        } else {
            f64::NAN
        });
    }
    Ok((abs, ape))
}

/// Variance of per-sample MAE and MAPE across samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FairnessMetrics {
    pub mae_var: f64,
    pub mape_var: f64,
}

pub fn fairness_metrics(sample_mae: &[f64], sample_mape: &[f64]) -> FairnessMetrics {
    let finite: Vec<f64> = sample_mape.iter().copied().filter(|v| v.is_finite()).collect();
    FairnessMetrics {
        mae_var: population_variance(sample_mae),
        mape_var: population_variance(&finite),
    }
}

/// Mean and variance of one tail of the error distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupStats {
    pub mean: f64,
    pub var: f64,
    pub count: usize,
}

impl GroupStats {
    fn of(v: &[f64]) -> Self {
        Self {
            mean: mean(v),
            var: population_variance(v),
            count: v.len(),
        }
    }
}

/// Stats of the best and worst `⌊fraction·M⌋` samples (at least one).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubgroupBreakdown {
    pub easy: GroupStats,
    pub challenging: GroupStats,
}

pub fn subgroup_breakdown(errors: &[f64], fraction: f64) -> Option<SubgroupBreakdown> {
    if errors.is_empty() {
        return None;
    }
    let size = (libm::floor(fraction * errors.len() as f64 + 1e-9) as usize).clamp(1, errors.len());
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(SubgroupBreakdown {
        easy: GroupStats::of(&sorted[..size]),
        challenging: GroupStats::of(&sorted[sorted.len() - size..]),
    })
}

/// `mae_fair / mae_base`; `None` when the base MAE is not positive.
pub fn delta_ratio(mae_fair: f64, mae_base: f64) -> Option<f64> {
    (mae_base > 0.0).then(|| mae_fair / mae_base)
}

/// Relative change `(new − old) / |old|`; negative means a reduction.
pub fn relative_change(old: f64, new: f64) -> f64 {
    if old == 0.0 {
        return if new == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (new - old) / libm::fabs(old)
}

/// Mean error per node over samples of that node.
pub fn per_node_mean(errors: &[f64], node_index: &[usize], num_nodes: usize) -> Vec<f64> {
    let mut sums = alloc::vec![0.0; num_nodes];
    let mut counts = alloc::vec![0usize; num_nodes];
    for (e, &n) in errors.iter().zip(node_index) {
        if n < num_nodes && e.is_finite() {
            sums[n] += e;
            counts[n] += 1;
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_examples() {
        assert_eq!(population_variance(&[1.0, 2.0, 3.0, 4.0]), 1.25);
        assert_eq!(population_variance(&[7.0]), 0.0);
    }

    #[test]
    fn mape_masks_near_zero() {
        let pred = Matrix::from_rows(&[[2.0], [5.0]]).unwrap();
        let truth = Matrix::from_rows(&[[1.0], [0.0]]).unwrap();
        let m = accuracy_at(&pred, &truth, 1, MAPE_EPS).unwrap();
        assert_eq!(m.mape, 100.0);
        assert_eq!(m.mae, 3.0);
        assert!((m.rmse - libm::sqrt(13.0)).abs() < 1e-12);
    }

    #[test]
    fn subgroup_sizes() {
        let e: Vec<f64> = (1..=10).map(f64::from).collect();
        let s = subgroup_breakdown(&e, 0.3).unwrap();
        assert_eq!(s.easy.count, 3);
        assert_eq!(s.easy.mean, 2.0);
        assert_eq!(s.challenging.mean, 9.0);
        assert_eq!(subgroup_breakdown(&[4.0, 1.0], 0.3).unwrap().easy.count, 1);
    }

    #[test]
    fn merge_matches_single_pass() {
        let pairs = [(1.0, 2.0), (3.0, 0.0), (-1.0, -4.0), (2.5, 2.0)];
        let mut all = ErrorAccumulator::default();
        let (mut a, mut b) = (ErrorAccumulator::default(), ErrorAccumulator::default());
        for (i, &(p, t)) in pairs.iter().enumerate() {
            all.push(p, t);
            if i < 2 { a.push(p, t) } else { b.push(p, t) }
        }
        a.merge(&b);
        assert_eq!(a, all);
    }
}
