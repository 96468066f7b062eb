//! The assembled forecasting model: extractor, recognizer, mix-up gate and
//! output head sharing one [`ParamStore`].

use alloc::rc::Rc;
use alloc::vec::Vec;

use rand::Rng;

use crate::adjacency::AdjacencySpec;
use crate::autograd::{Graph, GroupLayout, Var};
use crate::backbone::{Extractor, OutputHead, ReferenceConfig, ReferenceExtractor};
use crate::data::{NormalizationState, SampleBatch};
use crate::enhancement::{enhance, CompensatorySet, GateConfig, MixupGate, DEFAULT_K_C};
use crate::error::Result;
use crate::params::ParamStore;
use crate::recognizer::{classify, Recognizer, RecognizerArch, RecognizerConfig, DEFAULT_THRESHOLD};
use crate::tensor::Matrix;

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub window: usize,
    pub horizon: usize,
    pub num_nodes: usize,
    pub repr_dim: usize,
    pub temporal_channels: usize,
    pub head_hidden: usize,
    pub adjacency: AdjacencySpec,
    pub recognizer_arch: RecognizerArch,
    pub recognizer_hidden: usize,
    pub recognizer_embed_dim: usize,
    pub key_dim: usize,
    pub gate_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window: 12,
            horizon: 12,
            num_nodes: 1,
            repr_dim: 64,
            temporal_channels: 32,
            head_hidden: 64,
            adjacency: AdjacencySpec::Adaptive { embed_dim: 10 },
            recognizer_arch: RecognizerArch::Gcn3,
            recognizer_hidden: 32,
            recognizer_embed_dim: 10,
            key_dim: 32,
            gate_hidden: 16,
        }
    }
}

/// Samples sharing a window start form one graph snapshot.
pub fn batch_layout(batch: &SampleBatch) -> Rc<GroupLayout> {
    Rc::new(GroupLayout::new(&batch.node_index, &batch.window_start))
}

pub struct FairStg<E: Extractor = ReferenceExtractor> {
    pub config: ModelConfig,
    pub extractor: E,
    pub head: OutputHead,
    pub recognizer: Recognizer,
    pub gate: MixupGate,
}

impl FairStg<ReferenceExtractor> {
    /// Builds every module with the reference extractor, registering
    /// parameters in `store` in a fixed order.
    pub fn new<R: Rng>(config: ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let extractor = ReferenceExtractor::new(
            ReferenceConfig {
                window: config.window,
                num_nodes: config.num_nodes,
                temporal_channels: config.temporal_channels,
                repr_dim: config.repr_dim,
                adjacency: config.adjacency.clone(),
            },
            store,
            rng,
        )?;
        Self::with_extractor(config, extractor, store, rng)
    }
}

impl<E: Extractor> FairStg<E> {
    /// Wraps a custom extractor; its `repr_dim` overrides the config's.
    pub fn with_extractor<R: Rng>(
        mut config: ModelConfig,
        extractor: E,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.repr_dim = extractor.repr_dim();
        let head = OutputHead::new(config.repr_dim, config.head_hidden, config.horizon, store, rng);
        let recognizer = Recognizer::new(
            RecognizerConfig {
                arch: config.recognizer_arch,
                num_nodes: config.num_nodes,
                repr_dim: config.repr_dim,
                hidden: config.recognizer_hidden,
                adjacency_embed_dim: config.recognizer_embed_dim,
                ..RecognizerConfig::default()
            },
            store,
            rng,
        )?;
        let gate = MixupGate::new(
            GateConfig {
                repr_dim: config.repr_dim,
                key_dim: config.key_dim,
                hidden: config.gate_hidden,
            },
            store,
            rng,
        )?;
        Ok(Self {
            config,
            extractor,
            head,
            recognizer,
            gate,
        })
    }

    pub fn features(&self, g: &mut Graph, store: &ParamStore, batch: &SampleBatch, layout: &Rc<GroupLayout>) -> Result<Var> {
        self.extractor.forward(g, store, batch, layout)
    }

    /// Recognizer output for a batch given its representation.
    pub fn difficulty(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_st: Var,
        batch: &SampleBatch,
        norm: &NormalizationState,
        layout: &Rc<GroupLayout>,
    ) -> Result<Var> {
        let ctx = self.recognizer.context(g, store, x_st, batch, norm)?;
        self.recognizer.forward(g, store, ctx, layout)
    }

    /// Inference pass.
    ///
    /// With `enhance`, the recognizer's predicted easy set drives retrieval
    /// and mixing; otherwise the head sees the raw representation.
    pub fn predict(
        &self,
        store: &ParamStore,
        batch: &SampleBatch,
        norm: &NormalizationState,
        options: InferenceOptions,
    ) -> Result<Prediction> {
        let mut g = Graph::new();
        let layout = batch_layout(batch);
        let x_st = self.features(&mut g, store, batch, &layout)?;
        let plain = self.head.forward(&mut g, store, x_st, norm)?;
        let z_hat = if options.with_recognizer || options.enhance {
            let z = self.difficulty(&mut g, store, x_st, batch, norm, &layout)?;
            Some(g.value(z).as_slice().to_vec())
        } else {
            None
        };
        let (pred, compensatory, gate) = match (&z_hat, options.enhance) {
            (Some(zh), true) => {
                let easy = classify(zh, options.threshold);
                let enh = enhance(&mut g, store, &self.gate, x_st, &easy, options.k_c)?;
                let pred = if enh.compensatory.is_empty() {
                    plain
                } else {
                    self.head.forward(&mut g, store, enh.x_com, norm)?
                };
                let gate = enh.gate.map(|a| g.value(a).as_slice().to_vec());
                (pred, enh.compensatory, gate)
            }
            _ => (plain, CompensatorySet::default(), None),
        };
        Ok(Prediction {
            pred: g.value(pred).clone(),
            plain: g.value(plain).clone(),
            z_hat,
            compensatory,
            gate,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferenceOptions {
    pub enhance: bool,
    pub with_recognizer: bool,
    pub threshold: f64,
    pub k_c: usize,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            enhance: false,
            with_recognizer: true,
            threshold: DEFAULT_THRESHOLD,
            k_c: DEFAULT_K_C,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    /// Final `M × h` forecast in raw units.
    pub pred: Matrix,
    /// Forecast from the un-enhanced representation.
    pub plain: Matrix,
    pub z_hat: Option<Vec<f64>>,
    pub compensatory: CompensatorySet,
    /// `α′` per row when mixing happened (only challenging rows are mixed).
    pub gate: Option<Vec<f64>>,
}
