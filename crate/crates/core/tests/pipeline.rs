//! Windowing, splitting, normalization and batching.

use fairstg_core::data::{
    batches_by_start, make_windows, split_starts, split_windows, MissingPolicy, NormalizationState, RawDataset,
    SplitRatios, WindowedSeries,
};
use fairstg_core::tensor::Matrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset(n: usize, t: usize, seed: u64) -> RawDataset {
    let values = (0..n * t)
        .map(|k| ((k as u64).wrapping_mul(seed | 1) % 97) as f64 + 1.0)
        .collect();
    RawDataset::new(
        Matrix::from_vec(n, t, values).unwrap(),
        (0..t as i64).map(|s| 600 * s).collect(),
        (0..n).map(|i| format!("n{i}")).collect(),
        MissingPolicy::Error,
    )
    .unwrap()
}

proptest! {
    #[test]
    fn splits_are_chronological_and_disjoint(n in 1usize..6, t in 40usize..200, w in 1usize..8, h in 1usize..8) {
        let windows = make_windows(n, t, w, h).unwrap();
        let starts = t - w - h + 1;
        prop_assert_eq!(windows.len(), n * starts);
        let bounds = split_starts(starts, SplitRatios::default()).unwrap();
        let [tr, va, te] = split_windows(&windows, &bounds);
        prop_assert_eq!(tr.len() + va.len() + te.len(), windows.len());
        let max_tr = tr.iter().map(|x| x.start).max().unwrap();
        let min_va = va.iter().map(|x| x.start).min().unwrap();
        let max_va = va.iter().map(|x| x.start).max().unwrap();
        let min_te = te.iter().map(|x| x.start).min().unwrap();
        prop_assert!(max_tr < min_va && max_va < min_te);
        prop_assert_eq!(bounds.train_end, (0.7 * starts as f64 + 1e-9).floor() as usize);
    }

    #[test]
    fn normalization_round_trips(v in prop::collection::vec(-1e3f64..1e3, 2..50), x in -1e4f64..1e4) {
        prop_assume!(v.iter().any(|a| (a - v[0]).abs() > 1e-3));
        let s = NormalizationState::fit(&v).unwrap();
        prop_assert!((s.invert(s.apply(x)) - x).abs() <= 1e-9 * x.abs().max(1.0));
        let z: Vec<f64> = v.iter().map(|a| s.apply(*a)).collect();
        let m = z.iter().sum::<f64>() / z.len() as f64;
        prop_assert!(m.abs() < 1e-9);
    }

    #[test]
    fn batches_hold_each_window_once(n in 1usize..5, starts in 1usize..30, spb in 1usize..7, seed in any::<u64>()) {
        let windows = make_windows(n, starts + 3, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batches = batches_by_start(&windows, spb, Some(&mut rng));
        let mut seen: Vec<_> = batches.iter().flatten().copied().collect();
        seen.sort();
        let mut want = windows.clone();
        want.sort();
        prop_assert_eq!(seen, want);
        for b in &batches {
            prop_assert_eq!(b.len() % n, 0);
            prop_assert!(b.len() <= spb * n);
        }
    }
}

#[test]
fn normalization_ignores_validation_and_test_values() {
    let (n, t, w, h) = (3, 120, 12, 12);
    let a = dataset(n, t, 5);
    let mut b = a.clone();
    let starts = t - w - h + 1;
    let bounds = split_starts(starts, SplitRatios::default()).unwrap();
    let last_train_step = bounds.train_end - 1 + w + h;
    for i in 0..n {
        for s in last_train_step..t {
            b.values[(i, s)] += 1000.0;
        }
    }
    let sa = WindowedSeries::fit(&a, w, h, &bounds).unwrap();
    let sb = WindowedSeries::fit(&b, w, h, &bounds).unwrap();
    assert_eq!(sa.norm, sb.norm);
    b.values[(0, last_train_step - 1)] += 1000.0;
    assert_ne!(WindowedSeries::fit(&b, w, h, &bounds).unwrap().norm, sa.norm);
}

#[test]
fn batch_inputs_are_normalized_and_targets_raw() {
    let ds = dataset(2, 40, 3);
    let bounds = split_starts(40 - 5 + 1, SplitRatios::default()).unwrap();
    let series = WindowedSeries::fit(&ds, 3, 2, &bounds).unwrap();
    let windows = make_windows(2, 40, 3, 2).unwrap();
    let batch = series.batch(&windows[5..6]);
    let wi = windows[5];
    for c in 0..3 {
        let raw = ds.values[(wi.node, wi.start + c)];
        assert!((batch.inputs[(0, c)] - series.norm.apply(raw)).abs() < 1e-12);
    }
    assert_eq!(batch.targets.row(0), &ds.values.row(wi.node)[wi.start + 3..wi.start + 5]);
}

#[test]
fn forward_fill_repairs_gaps_and_error_policy_rejects_them() {
    let v = Matrix::from_vec(1, 5, vec![f64::NAN, 2.0, f64::NAN, 4.0, f64::NAN]).unwrap();
    let ts: Vec<i64> = (0..5).collect();
    let ids = vec!["a".to_string()];
    let ds = RawDataset::new(v.clone(), ts.clone(), ids.clone(), MissingPolicy::ForwardFill).unwrap();
    assert_eq!(ds.values.row(0), &[2.0, 2.0, 2.0, 4.0, 4.0]);
    assert!(RawDataset::new(v, ts.clone(), ids.clone(), MissingPolicy::Error).is_err());
    let irregular = vec![0, 1, 3, 4, 5];
    assert!(RawDataset::new(Matrix::zeros(1, 5), irregular, ids, MissingPolicy::Error).is_err());
}

#[test]
fn too_short_series_is_an_empty_dataset() {
    assert!(make_windows(2, 10, 6, 5).is_err());
    assert!(split_starts(2, SplitRatios::default()).is_err());
}
