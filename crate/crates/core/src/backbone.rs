//! Spatiotemporal feature extraction and the forecasting head.

use alloc::format;
use alloc::rc::Rc;

use rand::Rng;

use crate::adjacency::{adaptive_adjacency_var, row_normalized, AdjacencySpec};
use crate::autograd::{ConvShape, Graph, GroupLayout, Var};
use crate::data::{NormalizationState, SampleBatch};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// A learnable map from a batch of windows to an `M × d` representation.
///
/// Implementations register their parameters in a [`ParamStore`] at
/// construction and record their forward pass on a [`Graph`]. Rows of the
/// output follow the rows of the batch.
pub trait Extractor {
    /// Width `d` of the produced representation.
    fn repr_dim(&self) -> usize;

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &SampleBatch,
        layout: &Rc<GroupLayout>,
    ) -> Result<Var>;
}

/// Either a learned pair of node embeddings or a constant weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub enum GraphSource {
    Adaptive { e1: ParamId, e2: ParamId },
    Fixed(crate::tensor::Matrix),
}

impl GraphSource {
    /// Registers `prefix.E1` / `prefix.E2` for the adaptive kind, drawn
    /// i.i.d. from `U[−0.5, 0.5]`.
    pub fn build<R: Rng>(
        spec: &AdjacencySpec,
        num_nodes: usize,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        match spec {
            AdjacencySpec::Adaptive { embed_dim } => {
                if *embed_dim == 0 {
                    return Err(Error::Config("adjacency embedding width must be >= 1".into()));
                }
                let e1 = store.add_uniform(&format!("{prefix}.E1"), num_nodes, *embed_dim, 0.5, rng);
                let e2 = store.add_uniform(&format!("{prefix}.E2"), num_nodes, *embed_dim, 0.5, rng);
                Ok(Self::Adaptive { e1, e2 })
            }
            AdjacencySpec::Fixed(w) => {
                if w.rows() != num_nodes {
                    return Err(Error::Shape {
                        op: "GraphSource::build",
                        expected: (num_nodes, num_nodes),
                        found: w.shape(),
                    });
                }
                Ok(Self::Fixed(row_normalized(w)))
            }
        }
    }

    pub fn adjacency(&self, g: &mut Graph, store: &ParamStore) -> Result<Var> {
        match self {
            Self::Adaptive { e1, e2 } => {
                let (e1, e2) = (g.param(store, *e1), g.param(store, *e2));
                adaptive_adjacency_var(g, e1, e2)
            }
            Self::Fixed(w) => Ok(g.constant(w.clone())),
        }
    }
}

/// `ReLU((I + A)·H·W)` with the identity and `A` applied within row groups.
pub fn gcn_layer(g: &mut Graph, h: Var, adj: Var, weight: Var, layout: &Rc<GroupLayout>) -> Result<Var> {
    let mixed = g.graph_mix(h, adj, Rc::clone(layout))?;
    let lin = g.matmul(mixed, weight)?;
    Ok(g.relu(lin))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceConfig {
    pub window: usize,
    pub num_nodes: usize,
    pub temporal_channels: usize,
    pub repr_dim: usize,
    pub adjacency: AdjacencySpec,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            window: 12,
            num_nodes: 1,
            temporal_channels: 32,
            repr_dim: 64,
            adjacency: AdjacencySpec::Adaptive { embed_dim: 10 },
        }
    }
}

const KERNEL: usize = 3;
const DILATIONS: [usize; 2] = [1, 2];

/// Two dilated temporal convolutions (kernel 3, dilations 1 and 2) with a
/// residual link, a projection to `d`, then two residual graph layers.
#[derive(Clone, Debug)]
pub struct ReferenceExtractor {
    config: ReferenceConfig,
    conv: [(ParamId, ParamId); 2],
    proj: (ParamId, ParamId),
    gcn: [ParamId; 2],
    graph: GraphSource,
}

impl ReferenceExtractor {
    pub fn new<R: Rng>(config: ReferenceConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let min_window = 1 + DILATIONS.iter().map(|d| d * (KERNEL - 1)).sum::<usize>();
        if config.window < min_window {
            return Err(Error::Config(format!(
                "reference extractor needs a window of at least {min_window}, got {}",
                config.window
            )));
        }
        if config.temporal_channels == 0 || config.repr_dim == 0 {
            return Err(Error::Config("extractor widths must be positive".into()));
        }
        let c = config.temporal_channels;
        let d = config.repr_dim;
        let conv0 = (
            store.add_glorot("backbone.tconv0.weight", KERNEL, c, rng),
            store.add_zeros("backbone.tconv0.bias", 1, c),
        );
        let conv1 = (
            store.add_glorot("backbone.tconv1.weight", KERNEL * c, c, rng),
            store.add_zeros("backbone.tconv1.bias", 1, c),
        );
        let flat = c * (config.window - min_window + 1);
        let proj = (
            store.add_glorot("backbone.proj.weight", flat, d, rng),
            store.add_zeros("backbone.proj.bias", 1, d),
        );
        let gcn = [
            store.add_glorot("backbone.gcn0.weight", d, d, rng),
            store.add_glorot("backbone.gcn1.weight", d, d, rng),
        ];
        let graph = GraphSource::build(&config.adjacency, config.num_nodes, "backbone", store, rng)?;
        Ok(Self {
            config,
            conv: [conv0, conv1],
            proj,
            gcn,
            graph,
        })
    }

    pub fn config(&self) -> &ReferenceConfig {
        &self.config
    }

    pub fn graph(&self) -> &GraphSource {
        &self.graph
    }
}

impl Extractor for ReferenceExtractor {
    fn repr_dim(&self) -> usize {
        self.config.repr_dim
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &SampleBatch,
        layout: &Rc<GroupLayout>,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Parameter("empty batch".into()));
        }
        if batch.inputs.cols() != self.config.window {
            return Err(Error::Shape {
                op: "ReferenceExtractor::forward",
                expected: (batch.len(), self.config.window),
                found: batch.inputs.shape(),
            });
        }
        let c = self.config.temporal_channels;
        let x = g.constant(batch.inputs.clone());

        let mut len = self.config.window;
        let mut cin = 1;
        let mut h = x;
        let mut prev = None;
        for (i, &dil) in DILATIONS.iter().enumerate() {
            let (w, b) = (g.param(store, self.conv[i].0), g.param(store, self.conv[i].1));
            let shape = ConvShape {
                in_channels: cin,
                in_len: len,
                out_channels: c,
                kernel: KERNEL,
                dilation: dil,
            };
            let conv = g.conv1d(h, w, b, shape)?;
            let act = g.relu(conv);
            let out_len = shape.out_len();
            h = match prev {
                // residual: keep the most recent steps of the previous block
                Some((prev, prev_len)) => {
                    let skip = g.slice_cols(prev, (prev_len - out_len) * c, out_len * c)?;
                    g.add(act, skip)?
                }
                None => act,
            };
            prev = Some((h, out_len));
            len = out_len;
            cin = c;
        }

        let (pw, pb) = (g.param(store, self.proj.0), g.param(store, self.proj.1));
        let proj = g.matmul(h, pw)?;
        let mut z = g.add_row(proj, pb)?;

        let adj = self.graph.adjacency(g, store)?;
        for &wid in &self.gcn {
            let w = g.param(store, wid);
            let layer = gcn_layer(g, z, adj, w, layout)?;
            z = g.add(z, layer)?;
        }
        Ok(z)
    }
}

/// Two pointwise layers mapping the `d`-wide representation to all `h`
/// steps at once, followed by de-normalization to raw units.
#[derive(Clone, Debug)]
pub struct OutputHead {
    fc0: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    horizon: usize,
}

impl OutputHead {
    pub fn new<R: Rng>(repr_dim: usize, hidden: usize, horizon: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        Self {
            fc0: (
                store.add_glorot("head.fc0.weight", repr_dim, hidden, rng),
                store.add_zeros("head.fc0.bias", 1, hidden),
            ),
            fc1: (
                store.add_glorot("head.fc1.weight", hidden, horizon, rng),
                store.add_zeros("head.fc1.bias", 1, horizon),
            ),
            horizon,
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// `M × h` predictions in raw units.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, norm: &NormalizationState) -> Result<Var> {
        let (w0, b0) = (g.param(store, self.fc0.0), g.param(store, self.fc0.1));
        let (w1, b1) = (g.param(store, self.fc1.0), g.param(store, self.fc1.1));
        let h = g.matmul(x, w0)?;
        let h = g.add_row(h, b0)?;
        let h = g.relu(h);
        let y = g.matmul(h, w1)?;
        let y = g.add_row(y, b1)?;
        Ok(g.affine(y, norm.std, norm.mean))
    }
}
