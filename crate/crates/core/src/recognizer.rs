//! Self-supervised difficulty recognizer.
//!
//! Training labels come from ranking per-sample errors inside a batch: the
//! `⌈K·M⌉` smallest errors are easy (`z = 1`), the rest challenging
//! (`z = 0`). The recognizer learns to predict these labels from the
//! extractor representation, calendar/node context and window statistics.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::adjacency::AdjacencySpec;
use crate::autograd::{Graph, GroupLayout, Var};
use crate::backbone::GraphSource;
use crate::data::{NormalizationState, SampleBatch, WEEKDAYS};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

/// Default share of samples labelled easy.
pub const EASY_FRACTION: f64 = 0.2;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// `⌈K·M⌉`, at least one when `K > 0`.
pub fn easy_count(m: usize, k: f64) -> usize {
    if m == 0 || k <= 0.0 {
        return 0;
    }
    (libm::ceil(k * m as f64 - 1e-9) as usize).clamp(1, m)
}

/// Labels the `⌈K·M⌉` smallest errors as easy (`true`). Ties go to the
/// lower sample index.
pub fn partition_easy_challenging(errors: &[f64], k: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| errors[a].total_cmp(&errors[b]).then(a.cmp(&b)));
    let mut z = vec![false; errors.len()];
    for &i in order.iter().take(easy_count(errors.len(), k)) {
        z[i] = true;
    }
    z
}

/// Predicted easy set: `ẑ_i ≥ threshold`.
pub fn classify(z_hat: &[f64], threshold: f64) -> Vec<bool> {
    z_hat.iter().map(|&p| p >= threshold).collect()
}

/// Share of samples whose thresholded prediction matches the label.
pub fn recognizer_accuracy(z_hat: &[f64], z: &[bool], threshold: f64) -> f64 {
    if z.is_empty() {
        return 0.0;
    }
    let hits = classify(z_hat, threshold)
        .iter()
        .zip(z)
        .filter(|(a, b)| a == b)
        .count();
    hits as f64 / z.len() as f64
}

pub fn labels_as_f64(z: &[bool]) -> Vec<f64> {
    z.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RecognizerArch {
    /// Three graph layers over a learned adjacency.
    #[default]
    Gcn3,
    /// Three pointwise layers, no graph mixing.
    Linear3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecognizerConfig {
    pub arch: RecognizerArch,
    pub num_nodes: usize,
    pub repr_dim: usize,
    pub hidden: usize,
    pub weekday_dim: usize,
    pub node_dim: usize,
    pub adjacency_embed_dim: usize,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        Self {
            arch: RecognizerArch::Gcn3,
            num_nodes: 1,
            repr_dim: 64,
            hidden: 32,
            weekday_dim: 4,
            node_dim: 4,
            adjacency_embed_dim: 10,
        }
    }
}

impl RecognizerConfig {
    /// Width of `c_i = [x_st; e_i; μ; σ²]`, with `e_i` = time of day plus
    /// weekday and node embeddings.
    pub fn input_dim(&self) -> usize {
        self.repr_dim + 1 + self.weekday_dim + self.node_dim + 2
    }
}

#[derive(Clone, Debug)]
pub struct Recognizer {
    config: RecognizerConfig,
    weekday_emb: ParamId,
    node_emb: ParamId,
    layers: [(ParamId, ParamId); 3],
    graph: Option<GraphSource>,
}

impl Recognizer {
    pub fn new<R: Rng>(config: RecognizerConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if config.hidden == 0 {
            return Err(Error::Config("recognizer hidden width must be positive".into()));
        }
        // index WEEKDAYS / num_nodes is reserved for unseen categories
        let weekday_emb = store.add_uniform("recognizer.weekday_emb", WEEKDAYS + 1, config.weekday_dim, 0.5, rng);
        let node_emb = store.add_uniform("recognizer.node_emb", config.num_nodes + 1, config.node_dim, 0.5, rng);
        let dims = [config.input_dim(), config.hidden, config.hidden, 1];
        let mut layer = |i: usize| {
            (
                store.add_glorot(&format!("recognizer.layer{i}.weight"), dims[i], dims[i + 1], rng),
                store.add_zeros(&format!("recognizer.layer{i}.bias"), 1, dims[i + 1]),
            )
        };
        let layers = [layer(0), layer(1), layer(2)];
        let graph = match config.arch {
            RecognizerArch::Gcn3 => Some(GraphSource::build(
                &AdjacencySpec::Adaptive {
                    embed_dim: config.adjacency_embed_dim,
                },
                config.num_nodes,
                "recognizer",
                store,
                rng,
            )?),
            RecognizerArch::Linear3 => None,
        };
        Ok(Self {
            config,
            weekday_emb,
            node_emb,
            layers,
            graph,
        })
    }

    pub fn config(&self) -> &RecognizerConfig {
        &self.config
    }

    pub fn final_layer(&self) -> (ParamId, ParamId) {
        self.layers[2]
    }

    /// Assembles `C = [x_st; e; μ; σ²]` for every row of the batch.
    ///
    /// The window statistics are brought to the normalized scale (`μ` is
    /// z-scored, `σ²` divided by the training variance).
    pub fn context(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_st: Var,
        batch: &SampleBatch,
        norm: &NormalizationState,
    ) -> Result<Var> {
        let unknown_day = WEEKDAYS;
        let unknown_node = self.config.num_nodes;
        let days: Vec<Vec<usize>> = batch
            .weekday
            .iter()
            .map(|&d| vec![if d < WEEKDAYS { d } else { unknown_day }])
            .collect();
        let nodes: Vec<Vec<usize>> = batch
            .node_index
            .iter()
            .map(|&n| vec![if n < self.config.num_nodes { n } else { unknown_node }])
            .collect();
        let wtab = g.param(store, self.weekday_emb);
        let ntab = g.param(store, self.node_emb);
        let wemb = g.gather_mean(wtab, days)?;
        let nemb = g.gather_mean(ntab, nodes)?;
        let tod = g.constant(Matrix::column(&batch.time_of_day));
        let mut stats = Matrix::zeros(batch.len(), 2);
        for i in 0..batch.len() {
            stats[(i, 0)] = norm.apply(batch.stats_mean[i]);
            stats[(i, 1)] = batch.stats_var[i] / (norm.std * norm.std);
        }
        let stats = g.constant(stats);
        g.concat_cols(&[x_st, tod, wemb, nemb, stats])
    }

    /// `ẑ ∈ (0, 1)^M` as an `M × 1` column.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, context: Var, layout: &Rc<GroupLayout>) -> Result<Var> {
        let width = g.value(context).cols();
        if width != self.config.input_dim() {
            return Err(Error::Shape {
                op: "Recognizer::forward",
                expected: (g.value(context).rows(), self.config.input_dim()),
                found: (g.value(context).rows(), width),
            });
        }
        let adj = match &self.graph {
            Some(src) => Some(src.adjacency(g, store)?),
            None => None,
        };
        let mut h = context;
        for (i, &(wid, bid)) in self.layers.iter().enumerate() {
            let mixed = match adj {
                Some(a) => g.graph_mix(h, a, Rc::clone(layout))?,
                None => h,
            };
            let (w, b) = (g.param(store, wid), g.param(store, bid));
            let lin = g.matmul(mixed, w)?;
            let lin = g.add_row(lin, b)?;
            h = if i + 1 < self.layers.len() { g.relu(lin) } else { lin };
        }
        Ok(g.sigmoid(h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_examples() {
        let z = partition_easy_challenging(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.2);
        assert_eq!(z, [true, false, false, false, false]);
        let z = partition_easy_challenging(&[2.0; 5], 0.2);
        assert_eq!(z, [true, false, false, false, false]);
        let z = partition_easy_challenging(&[3.0, 1.0, 2.0], 1.0);
        assert!(z.iter().all(|&b| b));
        // small batches still get one easy sample
        assert_eq!(partition_easy_challenging(&[5.0, 4.0], 0.2), [false, true]);
        assert_eq!(easy_count(15, 0.2), 3);
        assert_eq!(easy_count(60, 0.2), 12);
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify(&[0.9, 0.1], 0.5), [true, false]);
        assert_eq!(classify(&[0.5, 0.5], 0.5), [true, true]);
        assert_eq!(classify(&[0.9, 0.99], 1.0), [false, false]);
    }

    #[test]
    fn accuracy_examples() {
        let z = [true, false, true];
        assert_eq!(recognizer_accuracy(&[0.9, 0.1, 0.8], &z, 0.5), 1.0);
        assert_eq!(recognizer_accuracy(&[0.1, 0.9, 0.2], &z, 0.5), 0.0);
    }
}
