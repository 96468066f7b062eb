//! Collaborative feature enhancement.
//!
//! Each challenging sample borrows from the `k_c` easy samples of the same
//! batch whose representations are most cosine-similar. Their mean-pooled
//! representation is blended in with a learned gate `α′ ∈ (0, 0.5)`, so the
//! sample's own representation always keeps the larger share.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::adjacency::cosine;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

pub const DEFAULT_K_C: usize = 5;

/// `S_ij = cos(x_i, x_j)` for `i ≠ j` with `j` easy, else 0.
pub fn similarity_matrix(x_st: &Matrix, easy: &[bool]) -> Matrix {
    let m = x_st.rows();
    debug_assert_eq!(easy.len(), m);
    let norms: Vec<f64> = (0..m)
        .map(|i| libm::sqrt(x_st.row(i).iter().map(|v| v * v).sum()))
        .collect();
    let mut s = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            if i == j || !easy[j] || norms[i] == 0.0 || norms[j] == 0.0 {
                continue;
            }
            s[(i, j)] = cosine(x_st.row(i), x_st.row(j));
        }
    }
    s
}

/// The `k_c` easy samples most similar to `i`, best first; ties go to the
/// lower index. Returns every easy sample when there are fewer than `k_c`.
pub fn retrieve_compensatory(s: &Matrix, i: usize, easy: &[bool], k_c: usize) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..easy.len()).filter(|&j| easy[j] && j != i).collect();
    let row = s.row(i);
    candidates.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    candidates.truncate(k_c);
    candidates
}

/// Elementwise mean of the given rows.
pub fn aggregate_compensatory(x_st: &Matrix, neighbors: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; x_st.cols()];
    if neighbors.is_empty() {
        return out;
    }
    for &j in neighbors {
        for (o, v) in out.iter_mut().zip(x_st.row(j)) {
            *o += v;
        }
    }
    let k = neighbors.len() as f64;
    out.iter_mut().for_each(|o| *o /= k);
    out
}

/// `(1 − α′)·x + α′·u`.
pub fn mix_representations(x: &[f64], u: &[f64], alpha: f64) -> Vec<f64> {
    x.iter().zip(u).map(|(a, b)| (1.0 - alpha) * a + alpha * b).collect()
}

/// Retrieval result for one batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CompensatorySet {
    /// `(challenging row, neighbor rows)` pairs.
    pub entries: Vec<(usize, Vec<usize>)>,
}

impl CompensatorySet {
    /// Retrieves compensatory neighbors for every challenging row. Empty
    /// when either side of the partition is empty.
    pub fn build(x_st: &Matrix, easy: &[bool], k_c: usize) -> Self {
        let any_easy = easy.iter().any(|&e| e);
        let any_hard = easy.iter().any(|&e| !e);
        if !any_easy || !any_hard || k_c == 0 {
            return Self::default();
        }
        let s = similarity_matrix(x_st, easy);
        let entries = (0..easy.len())
            .filter(|&i| !easy[i])
            .map(|i| (i, retrieve_compensatory(&s, i, easy, k_c)))
            .collect();
        Self { entries }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index lists for pooling: neighbors for challenging rows, the row
    /// itself for everything else.
    pub fn pooling_lists(&self, m: usize) -> Vec<Vec<usize>> {
        let mut lists: Vec<Vec<usize>> = (0..m).map(|i| vec![i]).collect();
        for (i, nbrs) in &self.entries {
            lists[*i] = nbrs.clone();
        }
        lists
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateConfig {
    pub repr_dim: usize,
    pub key_dim: usize,
    pub hidden: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            repr_dim: 64,
            key_dim: 32,
            hidden: 16,
        }
    }
}

/// Attention gate producing `α′ = 0.5·sigmoid(MLP(α ⊙ K))` with
/// `Q = x·W_q`, `K = u·W_k` and `α = softmax(Q ⊙ K / √d_k)` over the key axis.
#[derive(Clone, Debug)]
pub struct MixupGate {
    config: GateConfig,
    wq: ParamId,
    wk: ParamId,
    mlp: [(ParamId, ParamId); 2],
}

impl MixupGate {
    pub fn new<R: Rng>(config: GateConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if config.key_dim == 0 || config.hidden == 0 {
            return Err(Error::Config("gate widths must be positive".into()));
        }
        let GateConfig {
            repr_dim: d,
            key_dim: dk,
            hidden,
        } = config;
        let wq = store.add_glorot("enhancement.wq", d, dk, rng);
        let wk = store.add_glorot("enhancement.wk", d, dk, rng);
        let dims = [dk, hidden, 1];
        let mut layer = |i: usize| {
            (
                store.add_glorot(&format!("enhancement.mlp{i}.weight"), dims[i], dims[i + 1], rng),
                store.add_zeros(&format!("enhancement.mlp{i}.bias"), 1, dims[i + 1]),
            )
        };
        let mlp = [layer(0), layer(1)];
        Ok(Self { config, wq, wk, mlp })
    }

    pub fn config(&self) -> &GateConfig {
        &self.config
    }

    pub fn query_weight(&self) -> ParamId {
        self.wq
    }

    pub fn final_layer(&self) -> (ParamId, ParamId) {
        self.mlp[1]
    }

    /// `α′` for every row, as an `M × 1` column in `(0, 0.5)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, u: Var) -> Result<Var> {
        let (wq, wk) = (g.param(store, self.wq), g.param(store, self.wk));
        let q = g.matmul(x, wq)?;
        let k = g.matmul(u, wk)?;
        let qk = g.mul(q, k)?;
        let scaled = g.scale(qk, 1.0 / libm::sqrt(self.config.key_dim as f64));
        let alpha = g.softmax_rows(scaled);
        let attended = g.mul(alpha, k)?;
        let (w0, b0) = (g.param(store, self.mlp[0].0), g.param(store, self.mlp[0].1));
        let (w1, b1) = (g.param(store, self.mlp[1].0), g.param(store, self.mlp[1].1));
        let h = g.matmul(attended, w0)?;
        let h = g.add_row(h, b0)?;
        let h = g.relu(h);
        let s = g.matmul(h, w1)?;
        let s = g.add_row(s, b1)?;
        let sig = g.sigmoid(s);
        Ok(g.scale(sig, 0.5))
    }
}

/// Output of [`enhance`].
pub struct Enhanced {
    /// `M × d` mixed representation; equals the input on easy rows.
    pub x_com: Var,
    /// Gate values of challenging rows, `None` when nothing was mixed.
    pub gate: Option<Var>,
    pub compensatory: CompensatorySet,
}

fn check_mask(m: usize, easy: &[bool]) -> Result<()> {
    if easy.len() != m {
        return Err(Error::Shape {
            op: "enhance",
            expected: (m, 1),
            found: (easy.len(), 1),
        });
    }
    Ok(())
}

/// Mixes compensatory representations into the challenging rows of `x_st`.
pub fn enhance(
    g: &mut Graph,
    store: &ParamStore,
    gate: &MixupGate,
    x_st: Var,
    easy: &[bool],
    k_c: usize,
) -> Result<Enhanced> {
    check_mask(g.value(x_st).rows(), easy)?;
    let compensatory = CompensatorySet::build(g.value(x_st), easy, k_c);
    enhance_with(g, store, gate, x_st, easy, compensatory)
}

/// [`enhance`] with a precomputed retrieval result.
pub fn enhance_with(
    g: &mut Graph,
    store: &ParamStore,
    gate: &MixupGate,
    x_st: Var,
    easy: &[bool],
    compensatory: CompensatorySet,
) -> Result<Enhanced> {
    let m = g.value(x_st).rows();
    check_mask(m, easy)?;
    if compensatory.is_empty() {
        return Ok(Enhanced {
            x_com: x_st,
            gate: None,
            compensatory,
        });
    }
    let u = g.gather_mean(x_st, compensatory.pooling_lists(m))?;
    let alpha = gate.forward(g, store, x_st, u)?;
    let mask: Vec<f64> = easy.iter().map(|&e| if e { 0.0 } else { 1.0 }).collect();
    let mask = g.constant(Matrix::column(&mask));
    let alpha_masked = g.mul(alpha, mask)?;
    let delta = g.sub(u, x_st)?;
    let step = g.mul_col(delta, alpha_masked)?;
    let x_com = g.add(x_st, step)?;
    Ok(Enhanced {
        x_com,
        gate: Some(alpha),
        compensatory,
    })
}
