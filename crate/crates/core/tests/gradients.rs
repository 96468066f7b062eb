//! Reverse-mode gradients of the full training objective against central
//! finite differences, on a 4-node instance with two window starts.

use fairstg_core::autograd::Graph;
use fairstg_core::data::{make_windows, MissingPolicy, RawDataset, SplitBounds, WindowedSeries};
use fairstg_core::model::{FairStg, ModelConfig};
use fairstg_core::objectives::LossWeights;
use fairstg_core::params::ParamStore;
use fairstg_core::tensor::Matrix;
use fairstg_core::trainer::{objective, objective_with, Frozen, StepSettings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NODES: usize = 4;
const W: usize = 12;
const H: usize = 12;
const STEP: f64 = 1e-4;
const REL_TOL: f64 = 1e-4;
/// Components where both gradients are below this are compared absolutely.
const FLOOR: f64 = 1e-7;

struct Toy {
    model: FairStg,
    store: ParamStore,
    series: WindowedSeries,
    batch: fairstg_core::data::SampleBatch,
}

fn toy(seed: u64) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = W + H + 1;
    let values = Matrix::from_vec(
        NODES,
        t,
        (0..NODES * t).map(|_| rng.gen_range(20.0..60.0)).collect(),
    )
    .unwrap();
    let ds = RawDataset::new(
        values,
        (0..t as i64).map(|s| 1_700_000_000 + 300 * s).collect(),
        (0..NODES).map(|i| format!("s{i}")).collect(),
        MissingPolicy::Error,
    )
    .unwrap();
    let windows = make_windows(NODES, t, W, H).unwrap();
    assert_eq!(windows.len(), 2 * NODES);
    let bounds = SplitBounds {
        train_end: 2,
        val_end: 2,
        num_starts: 2,
    };
    let series = WindowedSeries::fit(&ds, W, H, &bounds).unwrap();
    let batch = series.batch(&windows);

    let config = ModelConfig {
        window: W,
        horizon: H,
        num_nodes: NODES,
        repr_dim: 8,
        temporal_channels: 4,
        head_hidden: 6,
        recognizer_hidden: 5,
        recognizer_embed_dim: 3,
        key_dim: 4,
        gate_hidden: 3,
        ..ModelConfig::default()
    };
    let mut store = ParamStore::new();
    let model = FairStg::new(config, &mut store, &mut rng).unwrap();
    // move zero-initialized biases away from zero so their gradients are generic
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).as_mut_slice() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    Toy {
        model,
        store,
        series,
        batch,
    }
}

fn full_settings() -> StepSettings {
    StepSettings {
        weights: LossWeights::new(1.0, 0.5, 0.1),
        reweight: true,
        recognize: true,
        enhance: true,
        easy_fraction: 0.5,
        omega: 4.0,
        k_c: 2,
    }
}

fn loss_at(toy: &Toy, store: &ParamStore, settings: &StepSettings, frozen: &Frozen) -> f64 {
    let mut g = Graph::new();
    let obj = objective_with(&mut g, &toy.model, store, &toy.batch, &toy.series.norm, settings, frozen).unwrap();
    g.scalar(obj.total)
}

fn close(analytic: f64, numeric: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    scale < FLOOR || (analytic - numeric).abs() <= REL_TOL * scale
}

/// Checks every scalar of every parameter whose name starts with one of
/// `namespaces`; returns the number of components compared.
fn check(toy: &Toy, settings: &StepSettings, namespaces: &[&str]) -> usize {
    let mut g = Graph::new();
    let obj = objective(&mut g, &toy.model, &toy.store, &toy.batch, &toy.series.norm, settings).unwrap();
    let frozen = obj.frozen();
    let grads = g.backward(obj.total);
    let mut compared = 0;
    let mut failures = Vec::new();
    for (id, name, value) in toy.store.iter() {
        if !namespaces.iter().any(|ns| name.starts_with(ns)) {
            continue;
        }
        let zero = Matrix::zeros(value.rows(), value.cols());
        let analytic = grads.param(id).unwrap_or(&zero).clone();
        for k in 0..value.len() {
            let at = |offset: f64| {
                let mut shifted = toy.store.clone();
                shifted.get_mut(id).as_mut_slice()[k] += offset;
                loss_at(toy, &shifted, settings, &frozen)
            };
            // five-point central stencil
            let numeric = (at(-2.0 * STEP) - 8.0 * at(-STEP) + 8.0 * at(STEP) - at(2.0 * STEP)) / (12.0 * STEP);
            let a = analytic.as_slice()[k];
            if !close(a, numeric) {
                failures.push(format!("{name}[{k}]: analytic {a:e} numeric {numeric:e}"));
            }
            compared += 1;
        }
    }
    assert!(failures.is_empty(), "{} mismatches:\n{}", failures.len(), failures.join("\n"));
    compared
}

#[test]
fn toy_instance_has_both_difficulty_classes() {
    let toy = toy(3);
    let mut g = Graph::new();
    let obj = objective(&mut g, &toy.model, &toy.store, &toy.batch, &toy.series.norm, &full_settings()).unwrap();
    assert_eq!(obj.labels.iter().filter(|&&e| e).count(), 4);
    assert_eq!(obj.compensatory.entries.len(), 4);
    assert!(obj.breakdown.self_supervised > 0.0 && obj.breakdown.fairness > 0.0);
}

#[test]
fn backbone_gradients_match_finite_differences() {
    let toy = toy(3);
    assert!(check(&toy, &full_settings(), &["backbone."]) > 0);
}

#[test]
fn head_gradients_match_finite_differences() {
    let toy = toy(3);
    assert!(check(&toy, &full_settings(), &["head."]) > 0);
}

#[test]
fn recognizer_gradients_match_finite_differences() {
    let toy = toy(3);
    assert!(check(&toy, &full_settings(), &["recognizer."]) > 0);
}

#[test]
fn gate_gradients_match_finite_differences() {
    let toy = toy(3);
    assert!(check(&toy, &full_settings(), &["enhancement."]) > 0);
}

#[test]
fn warmup_objective_gradients_match_finite_differences() {
    let toy = toy(5);
    assert!(check(&toy, &StepSettings::warmup(), &["backbone.", "head."]) > 0);
}

#[test]
fn variance_and_bce_terms_alone_match_finite_differences() {
    let toy = toy(7);
    let settings = StepSettings {
        weights: LossWeights::new(0.0, 1.0, 1.0),
        ..full_settings()
    };
    assert!(check(&toy, &settings, &["backbone.tconv1", "recognizer.layer2", "enhancement.wq", "head.fc1"]) > 0);
}
