//! Structural invariants of the adjacency, retrieval and mixing steps.

use fairstg_core::adjacency::{adaptive_adjacency, gaussian_adjacency, row_normalized, topk_adjacency};
use fairstg_core::autograd::Graph;
use fairstg_core::enhancement::{
    aggregate_compensatory, enhance, mix_representations, retrieve_compensatory, similarity_matrix, CompensatorySet,
    GateConfig, MixupGate,
};
use fairstg_core::params::ParamStore;
use fairstg_core::tensor::Matrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize, range: std::ops::Range<f64>) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(range, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn rows_and_mask() -> impl Strategy<Value = (Matrix, Vec<bool>)> {
    (2usize..=64, 1usize..6).prop_flat_map(|(m, d)| (matrix(m, d, -3.0..3.0), prop::collection::vec(any::<bool>(), m)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    // tanh rounds to exactly 1.0 in f64 once its argument passes about 19,
    // so embeddings stay in a range where the open bound is representable
    #[test]
    fn adaptive_adjacency_is_one_directional((e1, e2) in (1usize..12, 1usize..6)
        .prop_flat_map(|(n, d)| (matrix(n, d, -1.0..1.0), matrix(n, d, -1.0..1.0))))
    {
        let a = adaptive_adjacency(&e1, &e2).unwrap();
        let n = a.rows();
        for i in 0..n {
            prop_assert_eq!(a[(i, i)], 0.0);
            for j in 0..n {
                prop_assert!(a[(i, j)] >= 0.0 && a[(i, j)] < 1.0);
                if i != j {
                    prop_assert_eq!(a[(i, j)] * a[(j, i)], 0.0);
                }
            }
        }
    }

    #[test]
    fn similarity_only_points_at_other_easy_rows((x, easy) in rows_and_mask()) {
        let s = similarity_matrix(&x, &easy);
        for i in 0..x.rows() {
            for j in 0..x.rows() {
                if i == j || !easy[j] {
                    prop_assert_eq!(s[(i, j)], 0.0);
                } else {
                    prop_assert!((s[(i, j)] - cos(x.row(i), x.row(j))).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn retrieval_equals_brute_force_sort((x, easy) in rows_and_mask(), k_c in 1usize..8) {
        let s = similarity_matrix(&x, &easy);
        for i in 0..x.rows() {
            let got = retrieve_compensatory(&s, i, &easy, k_c);
            let mut all: Vec<(f64, usize)> = (0..x.rows())
                .filter(|&j| j != i && easy[j])
                .map(|j| (cos(x.row(i), x.row(j)), j))
                .collect();
            // descending similarity, ascending index on ties
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<usize> = all.iter().take(k_c).map(|p| p.1).collect();
            prop_assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                // near-equal cosines may legitimately swap
                prop_assert!(g == w || (cos(x.row(i), x.row(*g)) - cos(x.row(i), x.row(*w))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mixing_is_convex(x in prop::collection::vec(-5.0f64..5.0, 1..10), shift in -3.0f64..3.0, alpha in 0.0f64..0.5) {
        let u: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let mixed = mix_representations(&x, &u, alpha);
        for ((m, a), b) in mixed.iter().zip(&x).zip(&u) {
            prop_assert!(*m >= a.min(*b) - 1e-12 && *m <= a.max(*b) + 1e-12);
            prop_assert!((m - ((1.0 - alpha) * a + alpha * b)).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_values_lie_in_open_half_interval((x, easy) in rows_and_mask(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let gate = MixupGate::new(GateConfig { repr_dim: x.cols(), key_dim: 4, hidden: 3 }, &mut store, &mut rng).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let enh = enhance(&mut g, &store, &gate, xv, &easy, 3).unwrap();
        let out = g.value(enh.x_com).clone();
        match enh.gate {
            None => prop_assert_eq!(out, x),
            Some(a) => {
                let alpha = g.value(a).clone();
                let lists = enh.compensatory.pooling_lists(x.rows());
                for i in 0..x.rows() {
                    prop_assert!(alpha[(i, 0)] > 0.0 && alpha[(i, 0)] < 0.5);
                    if easy[i] {
                        prop_assert_eq!(out.row(i), x.row(i));
                    } else {
                        let u = aggregate_compensatory(&x, &lists[i]);
                        let want = mix_representations(x.row(i), &u, alpha[(i, 0)]);
                        for (o, w) in out.row(i).iter().zip(&want) {
                            prop_assert!((o - w).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn retrieval_needs_both_classes() {
    let x = Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
    assert!(CompensatorySet::build(&x, &[true, true, true], 2).is_empty());
    assert!(CompensatorySet::build(&x, &[false, false, false], 2).is_empty());
    let set = CompensatorySet::build(&x, &[true, false, true], 5);
    assert_eq!(set.entries, vec![(1, vec![2, 0])]);
}

#[test]
fn gaussian_kernel_thresholds_and_keeps_self_loops() {
    let d = Matrix::from_vec(3, 3, vec![0.0, 1.0, f64::INFINITY, 1.0, 0.0, 3.0, f64::INFINITY, 3.0, 0.0]).unwrap();
    let w = gaussian_adjacency(&d, 2.0, 0.1).unwrap();
    assert_eq!(w[(0, 0)], 1.0);
    assert!((w[(0, 1)] - (-0.25f64).exp()).abs() < 1e-12);
    assert_eq!(w[(0, 2)], 0.0);
    // exp(−9/4) ≈ 0.105 survives a 0.1 threshold
    assert!((w[(1, 2)] - (-2.25f64).exp()).abs() < 1e-12);
    let n = row_normalized(&w);
    for i in 0..3 {
        assert!((n.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn topk_keeps_most_similar_neighbors() {
    let h = Matrix::from_vec(4, 3, vec![1.0, 0.0, 0.0, 0.9, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let t = topk_adjacency(&h, 0.3).unwrap();
    assert_eq!(t.zero_norm_nodes, vec![3]);
    assert!(t.weights[(0, 1)] > 0.0);
    assert_eq!(t.weights[(0, 2)], 0.0);
    assert_eq!(t.weights.row(0).iter().filter(|v| **v > 0.0).count(), 1);
}
