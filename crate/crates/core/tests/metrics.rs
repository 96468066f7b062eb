//! Evaluation metrics on a hand-built fixture, plus algebraic properties.

use fairstg_core::metrics::{
    accuracy_all, accuracy_at, delta_ratio, fairness_metrics, mean, per_node_mean, per_sample_mape,
    relative_change, step_errors, subgroup_breakdown, ErrorAccumulator, MAPE_EPS,
};
use fairstg_core::objectives::{fairness_loss, per_sample_mae};
use fairstg_core::tensor::Matrix;
use proptest::prelude::*;

const TOL: f64 = 1e-9;

fn fixture() -> (Matrix, Matrix) {
    let truth = Matrix::from_vec(
        4,
        3,
        vec![10.0, 20.0, 40.0, 5.0, 0.0, 10.0, 100.0, 50.0, 25.0, 1.0, 2.0, 4.0],
    )
    .unwrap();
    let pred = Matrix::from_vec(
        4,
        3,
        vec![11.0, 18.0, 40.0, 5.0, 1.0, 12.0, 90.0, 55.0, 25.0, 1.5, 2.0, 3.0],
    )
    .unwrap();
    (pred, truth)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * b.abs().max(1.0)
}

#[test]
fn overall_accuracy_matches_hand_values() {
    let (p, t) = fixture();
    let m = accuracy_all(&p, &t, MAPE_EPS).unwrap();
    assert!(close(m.mae, 22.5 / 12.0));
    assert!(close(m.rmse, (136.25f64 / 12.0).sqrt()));
    // eleven unmasked percentage errors summing to 135
    assert!(close(m.mape, 135.0 / 11.0));
}

#[test]
fn horizon_step_metrics_use_that_step_only() {
    let (p, t) = fixture();
    let h1 = accuracy_at(&p, &t, 1, MAPE_EPS).unwrap();
    assert!(close(h1.mae, 2.875));
    assert!(close(h1.rmse, 25.3125f64.sqrt()));
    assert!(close(h1.mape, 17.5));
    let h2 = accuracy_at(&p, &t, 2, MAPE_EPS).unwrap();
    assert!(close(h2.mae, 2.0));
    assert!(close(h2.mape, 20.0 / 3.0));
    let (abs, ape) = step_errors(&p, &t, 2, MAPE_EPS).unwrap();
    assert_eq!(abs, vec![2.0, 1.0, 5.0, 0.0]);
    assert!(ape[1].is_nan());
    assert!(accuracy_at(&p, &t, 0, MAPE_EPS).is_err());
    assert!(accuracy_at(&p, &t, 4, MAPE_EPS).is_err());
}

#[test]
fn fairness_metrics_match_hand_values() {
    let (p, t) = fixture();
    let mae = per_sample_mae(&p, &t).unwrap();
    assert_eq!(mae, vec![1.0, 1.0, 5.0, 0.5]);
    let mape = per_sample_mape(&p, &t, MAPE_EPS).unwrap();
    for (a, b) in mape.iter().zip([20.0 / 3.0, 10.0, 20.0 / 3.0, 25.0]) {
        assert!(close(*a, b));
    }
    let f = fairness_metrics(&mae, &mape);
    assert!(close(f.mae_var, 3.296875));
    assert!(close(f.mape_var, 33100.0 / 576.0));
    assert_eq!(f.mae_var, fairness_loss(&mae));
}

#[test]
fn subgroups_match_hand_values() {
    let e = [1.0, 1.0, 5.0, 0.5];
    let half = subgroup_breakdown(&e, 0.5).unwrap();
    assert_eq!((half.easy.count, half.challenging.count), (2, 2));
    assert!(close(half.easy.mean, 0.75) && close(half.easy.var, 0.0625));
    assert!(close(half.challenging.mean, 3.0) && close(half.challenging.var, 4.0));
    let tail = subgroup_breakdown(&e, 0.3).unwrap();
    assert_eq!(tail.easy.mean, 0.5);
    assert_eq!(tail.challenging.mean, 5.0);
    assert!(subgroup_breakdown(&[], 0.3).is_none());
}

#[test]
fn delta_and_relative_change() {
    assert!(close(delta_ratio(2.0, 1.6).unwrap(), 1.25));
    assert_eq!(delta_ratio(1.0, 0.0), None);
    assert!(close(relative_change(4.0, 3.0), -0.25));
    assert_eq!(relative_change(0.0, 0.0), 0.0);
}

#[test]
fn fully_masked_mape_is_nan() {
    let z = Matrix::zeros(2, 2);
    assert!(accuracy_all(&z, &z, MAPE_EPS).unwrap().mape.is_nan());
    assert!(per_sample_mape(&z, &z, MAPE_EPS).unwrap().iter().all(|v| v.is_nan()));
}

#[test]
fn per_node_means_skip_missing() {
    let v = per_node_mean(&[1.0, 3.0, f64::NAN, 4.0], &[0, 0, 1, 2], 4);
    assert_eq!(v[0], 2.0);
    assert!(v[1].is_nan());
    assert_eq!(v[2], 4.0);
    assert!(v[3].is_nan());
}

fn samples() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..40).prop_flat_map(|m| {
        (
            prop::collection::vec(-50.0f64..50.0, m * 3),
            prop::collection::vec(-50.0f64..50.0, m * 3),
        )
    })
}

proptest! {
    #[test]
    fn fairness_metric_equals_fairness_loss(e in prop::collection::vec(0.0f64..30.0, 1..100)) {
        prop_assert!((fairness_metrics(&e, &e).mae_var - fairness_loss(&e)).abs() <= 1e-9);
    }

    #[test]
    fn metrics_are_permutation_invariant((p, t) in samples(), seed in any::<u64>()) {
        let m = p.len() / 3;
        let pm = Matrix::from_vec(m, 3, p.clone()).unwrap();
        let tm = Matrix::from_vec(m, 3, t.clone()).unwrap();
        let mut order: Vec<usize> = (0..m).collect();
        // deterministic shuffle from the seed
        order.sort_by_key(|i| (*i as u64).wrapping_mul(seed | 1).rotate_left(17));
        let perm = |x: &[f64]| -> Matrix {
            Matrix::from_vec(m, 3, order.iter().flat_map(|&i| x[3 * i..3 * i + 3].to_vec()).collect()).unwrap()
        };
        let (pp, tp) = (perm(&p), perm(&t));
        let a = accuracy_all(&pm, &tm, MAPE_EPS).unwrap();
        let b = accuracy_all(&pp, &tp, MAPE_EPS).unwrap();
        prop_assert!((a.mae - b.mae).abs() < 1e-9 && (a.rmse - b.rmse).abs() < 1e-9);
        let ea = per_sample_mae(&pm, &tm).unwrap();
        let eb = per_sample_mae(&pp, &tp).unwrap();
        prop_assert!((fairness_loss(&ea) - fairness_loss(&eb)).abs() < 1e-9);
        let (sa, sb) = (subgroup_breakdown(&ea, 0.3).unwrap(), subgroup_breakdown(&eb, 0.3).unwrap());
        prop_assert!((sa.challenging.mean - sb.challenging.mean).abs() < 1e-9);
    }

    #[test]
    fn subgroup_means_bracket_the_overall_mean(e in prop::collection::vec(0.0f64..30.0, 1..200), f in 0.05f64..0.5) {
        let s = subgroup_breakdown(&e, f).unwrap();
        let m = mean(&e);
        prop_assert!(s.easy.mean <= m + 1e-9 && m <= s.challenging.mean + 1e-9);
    }

    #[test]
    fn accumulator_merge_is_associative(pairs in prop::collection::vec((-20.0f64..20.0, -20.0f64..20.0), 0..60), a in 0usize..60, b in 0usize..60) {
        let (i, j) = (a.min(b).min(pairs.len()), a.max(b).min(pairs.len()));
        let part = |r: &[(f64, f64)]| {
            let mut acc = ErrorAccumulator::default();
            r.iter().for_each(|(p, t)| acc.push(*p, *t));
            acc
        };
        let (x, y, z) = (part(&pairs[..i]), part(&pairs[i..j]), part(&pairs[j..]));
        let mut left = x.clone();
        left.merge(&y);
        left.merge(&z);
        let mut right = y.clone();
        right.merge(&z);
        let mut right_total = x.clone();
        right_total.merge(&right);
        let whole = part(&pairs).metrics();
        for m in [left.metrics(), right_total.metrics()] {
            prop_assert!((m.mae - whole.mae).abs() < 1e-9 || (m.mae.is_nan() && whole.mae.is_nan()));
            prop_assert!((m.rmse - whole.rmse).abs() < 1e-9 || (m.rmse.is_nan() && whole.rmse.is_nan()));
        }
    }
}
