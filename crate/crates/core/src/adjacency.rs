//! Fixed and learnable adjacency construction.

use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// How the spatial graph of a model is obtained.
#[derive(Clone, Debug, PartialEq)]
pub enum AdjacencySpec {
    /// Precomputed nonnegative `N × N` weights.
    Fixed(Matrix),
    /// Learned from a pair of node embeddings of width `embed_dim`.
    Adaptive { embed_dim: usize },
}

impl AdjacencySpec {
    pub fn fixed(weights: Matrix) -> Result<Self> {
        if weights.rows() != weights.cols() {
            return Err(Error::Shape {
                op: "AdjacencySpec::fixed",
                expected: (weights.rows(), weights.rows()),
                found: weights.shape(),
            });
        }
        if weights.as_slice().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Validation(
                "fixed adjacency weights must be finite and nonnegative".into(),
            ));
        }
        Ok(Self::Fixed(weights))
    }

    pub fn is_adaptive(&self) -> bool {
        matches!(self, Self::Adaptive { .. })
    }
}

/// `ReLU(tanh(E1·E2ᵀ − E2·E1ᵀ))`.
///
/// The pre-activation is skew-symmetric, so at most one of `A[i][j]` and
/// `A[j][i]` is positive.
pub fn adaptive_adjacency(e1: &Matrix, e2: &Matrix) -> Result<Matrix> {
    if e1.shape() != e2.shape() {
        return Err(Error::Shape {
            op: "adaptive_adjacency",
            expected: e1.shape(),
            found: e2.shape(),
        });
    }
    let a = e1.matmul(&e2.transpose())?;
    let b = e2.matmul(&e1.transpose())?;
    a.zip_map(&b, |x, y| {
        let t = libm::tanh(x - y);
        if t > 0.0 {
            t
        } else {
            0.0
        }
    })
}

/// Graph form of [`adaptive_adjacency`].
pub fn adaptive_adjacency_var(g: &mut Graph, e1: Var, e2: Var) -> Result<Var> {
    let (s1, s2) = (g.value(e1).shape(), g.value(e2).shape());
    if s1 != s2 {
        return Err(Error::Shape {
            op: "adaptive_adjacency",
            expected: s1,
            found: s2,
        });
    }
    let e2t = g.transpose(e2);
    let e1t = g.transpose(e1);
    let a = g.matmul(e1, e2t)?;
    let b = g.matmul(e2, e1t)?;
    let skew = g.sub(a, b)?;
    let t = g.tanh(skew);
    Ok(g.relu(t))
}

/// Thresholded Gaussian kernel over pairwise distances.
///
/// `W_ij = exp(−d_ij²/σ²)` when that is at least `threshold`, else 0, and
/// `W_ii = 1`. Non-finite distances (unknown pairs) give weight 0.
pub fn gaussian_adjacency(distances: &Matrix, sigma: f64, threshold: f64) -> Result<Matrix> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(alloc::format!("sigma must be positive, got {sigma}")));
    }
    let n = distances.rows();
    if distances.cols() != n {
        return Err(Error::Shape {
            op: "gaussian_adjacency",
            expected: (n, n),
            found: distances.shape(),
        });
    }
    if distances.as_slice().iter().any(|d| *d < 0.0) {
        return Err(Error::Validation("distances must be nonnegative".into()));
    }
    let s2 = sigma * sigma;
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            w[(i, j)] = if i == j {
                1.0
            } else {
                let d = distances[(i, j)];
                let v = if d.is_finite() { libm::exp(-d * d / s2) } else { 0.0 };
                if v >= threshold {
                    v
                } else {
                    0.0
                }
            };
        }
    }
    Ok(w)
}

/// Euclidean distance matrix from `N × 2` coordinates.
pub fn coordinate_distances(coords: &Matrix) -> Matrix {
    let n = coords.rows();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let s: f64 = coords
                .row(i)
                .iter()
                .zip(coords.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[(i, j)] = libm::sqrt(s);
        }
    }
    d
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = libm::sqrt(a.iter().map(|v| v * v).sum());
    let nb = libm::sqrt(b.iter().map(|v| v * v).sum());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Outcome of [`topk_adjacency`]; `zero_norm_nodes` lists nodes whose
/// history is identically zero (their similarities are all 0).
#[derive(Clone, Debug, PartialEq)]
pub struct TopKAdjacency {
    pub weights: Matrix,
    pub zero_norm_nodes: Vec<usize>,
}

/// Keeps, for each node, its `⌈k_fraction·(N−1)⌉` most cosine-similar other
/// nodes. `history` is `N × T'`; ties resolve to the lower index.
pub fn topk_adjacency(history: &Matrix, k_fraction: f64) -> Result<TopKAdjacency> {
    if !(k_fraction > 0.0 && k_fraction <= 1.0) {
        return Err(Error::Parameter(alloc::format!(
            "k_fraction must lie in (0, 1], got {k_fraction}"
        )));
    }
    if history.cols() < 2 {
        return Err(Error::Parameter("top-k adjacency needs at least 2 time steps".into()));
    }
    let n = history.rows();
    let keep = libm::ceil(k_fraction * n.saturating_sub(1) as f64) as usize;
    let zero_norm_nodes = (0..n)
        .filter(|&i| history.row(i).iter().all(|v| *v == 0.0))
        .collect();
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        let mut sims: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (j, cosine(history.row(i), history.row(j))))
            .collect();
        sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(j, s) in sims.iter().take(keep) {
            // negative similarities would break nonnegativity
            w[(i, j)] = s.max(0.0);
        }
    }
    Ok(TopKAdjacency {
        weights: w,
        zero_norm_nodes,
    })
}

/// Divides each row by its sum; all-zero rows stay zero.
pub fn row_normalized(w: &Matrix) -> Matrix {
    let mut out = w.clone();
    for r in 0..out.rows() {
        let s: f64 = out.row(r).iter().sum();
        if s > 0.0 {
            out.row_mut(r).iter_mut().for_each(|v| *v /= s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_embeddings_give_zero() {
        let e = Matrix::from_rows(&[[0.3, -1.0], [2.0, 0.5], [0.1, 0.1]]).unwrap();
        let a = adaptive_adjacency(&e, &e).unwrap();
        assert!(a.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_node_hand_case() {
        let e1 = Matrix::from_rows(&[[1.0], [0.0]]).unwrap();
        let e2 = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        let a = adaptive_adjacency(&e1, &e2).unwrap();
        assert_eq!(a[(0, 0)], 0.0);
        assert!((a[(0, 1)] - 0.761_594_155_955_764_9).abs() < 1e-12);
        assert_eq!(a[(1, 0)], 0.0);
        assert_eq!(a[(1, 1)], 0.0);
        assert!(adaptive_adjacency(&e1, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn gaussian_examples() {
        let d = Matrix::from_rows(&[[0.0, 2.0, 1e6], [2.0, 0.0, 0.0], [1e6, 0.0, 0.0]]).unwrap();
        let w = gaussian_adjacency(&d, 2.0, 0.0).unwrap();
        assert_eq!(w[(0, 0)], 1.0);
        assert!((w[(0, 1)] - libm::exp(-1.0)).abs() < 1e-12);
        assert!((w[(0, 1)] - 0.3679).abs() < 1e-4);
        assert_eq!(w[(1, 2)], 1.0);
        let w = gaussian_adjacency(&d, 2.0, 0.1).unwrap();
        assert_eq!(w[(0, 2)], 0.0);
        assert!(gaussian_adjacency(&d, 0.0, 0.1).is_err());
        assert!(gaussian_adjacency(&d, -1.0, 0.1).is_err());
    }

    #[test]
    fn topk_examples() {
        let h = Matrix::from_rows(&[[1.0, 2.0, 3.0], [3.0, 1.0, 0.0]]).unwrap();
        let t = topk_adjacency(&h, 0.2).unwrap();
        assert!(t.weights[(0, 1)] > 0.0 && t.weights[(1, 0)] > 0.0);

        let same = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]).unwrap();
        let t = topk_adjacency(&same, 0.2).unwrap();
        for i in 0..5 {
            let kept: Vec<f64> = t.weights.row(i).iter().copied().filter(|v| *v > 0.0).collect();
            assert_eq!(kept.len(), 1);
            assert!((kept[0] - 1.0).abs() < 1e-12);
        }
        assert!(topk_adjacency(&same, 0.0).is_err());
        assert!(topk_adjacency(&Matrix::zeros(2, 1), 0.5).is_err());

        let z = Matrix::from_rows(&[[0.0, 0.0], [1.0, 2.0]]).unwrap();
        let t = topk_adjacency(&z, 1.0).unwrap();
        assert_eq!(t.zero_norm_nodes, [0]);
        assert_eq!(t.weights[(1, 0)], 0.0);
    }

    #[test]
    fn row_normalization() {
        let w = Matrix::from_rows(&[[1.0, 3.0], [0.0, 0.0]]).unwrap();
        let n = row_normalized(&w);
        assert_eq!(n.row(0), &[0.25, 0.75]);
        assert_eq!(n.row(1), &[0.0, 0.0]);
    }
}
