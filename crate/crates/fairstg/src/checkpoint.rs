//! Checkpoint container: an 8-byte magic, a little-endian `u32` header
//! length, a JSON header, then every tensor as little-endian `f32` in
//! header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use fairstg_core::adjacency::AdjacencySpec;
use fairstg_core::data::NormalizationState;
use fairstg_core::model::ModelConfig;
use fairstg_core::params::ParamStore;
use fairstg_core::recognizer::RecognizerArch;
use fairstg_core::tensor::Matrix;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"FAIRSTG\0";
pub const SCHEMA_VERSION: u32 = 1;
/// Tensor name of a fixed backbone adjacency, stored alongside parameters.
pub const FIXED_ADJACENCY: &str = "const.adjacency";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub schema_version: u32,
    pub d: usize,
    pub d_emb: usize,
    pub h: usize,
    pub w: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub temporal_channels: usize,
    pub head_hidden: usize,
    pub recognizer_arch: String,
    pub recognizer_hidden: usize,
    pub recognizer_embed_dim: usize,
    pub key_dim: usize,
    pub gate_hidden: usize,
    pub norm_mean: f64,
    pub norm_std: f64,
    pub node_ids: Vec<String>,
    pub ablation: String,
    pub stage: String,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub tensors: Vec<TensorEntry>,
}

impl Header {
    pub fn model_config(&self, fixed: Option<Matrix>) -> Result<ModelConfig> {
        let recognizer_arch = match self.recognizer_arch.as_str() {
            "gcn3" => RecognizerArch::Gcn3,
            "linear3" => RecognizerArch::Linear3,
            other => return Err(CliError::Data(format!("checkpoint: unknown recognizer arch {other:?}"))),
        };
        Ok(ModelConfig {
            window: self.w,
            horizon: self.h,
            num_nodes: self.n,
            repr_dim: self.d,
            temporal_channels: self.temporal_channels,
            head_hidden: self.head_hidden,
            adjacency: match fixed {
                Some(m) => AdjacencySpec::Fixed(m),
                None => AdjacencySpec::Adaptive { embed_dim: self.d_emb },
            },
            recognizer_arch,
            recognizer_hidden: self.recognizer_hidden,
            recognizer_embed_dim: self.recognizer_embed_dim,
            key_dim: self.key_dim,
            gate_hidden: self.gate_hidden,
        })
    }

    pub fn norm(&self) -> NormalizationState {
        NormalizationState {
            mean: self.norm_mean,
            std: self.norm_std,
        }
    }
}

/// Run metadata recorded next to the parameters.
pub struct Meta<'a> {
    pub config: &'a ModelConfig,
    pub norm: &'a NormalizationState,
    pub node_ids: &'a [String],
    pub ablation: &'a str,
    pub stage: &'a str,
    pub best_epoch: usize,
    pub best_val_mae: f64,
}

pub fn arch_name(arch: RecognizerArch) -> &'static str {
    match arch {
        RecognizerArch::Gcn3 => "gcn3",
        RecognizerArch::Linear3 => "linear3",
    }
}

pub fn encode(params: &ParamStore, meta: &Meta<'_>) -> Vec<u8> {
    let c = meta.config;
    let mut tensors: Vec<(String, &Matrix)> = params.iter().map(|(_, n, m)| (n.to_string(), m)).collect();
    let d_emb = match &c.adjacency {
        AdjacencySpec::Adaptive { embed_dim } => *embed_dim,
        AdjacencySpec::Fixed(m) => {
            tensors.push((FIXED_ADJACENCY.to_string(), m));
            0
        }
    };
    let header = Header {
        schema_version: SCHEMA_VERSION,
        d: c.repr_dim,
        d_emb,
        h: c.horizon,
        w: c.window,
        n: c.num_nodes,
        temporal_channels: c.temporal_channels,
        head_hidden: c.head_hidden,
        recognizer_arch: arch_name(c.recognizer_arch).into(),
        recognizer_hidden: c.recognizer_hidden,
        recognizer_embed_dim: c.recognizer_embed_dim,
        key_dim: c.key_dim,
        gate_hidden: c.gate_hidden,
        norm_mean: meta.norm.mean,
        norm_std: meta.norm.std,
        node_ids: meta.node_ids.to_vec(),
        ablation: meta.ablation.into(),
        stage: meta.stage.into(),
        best_epoch: meta.best_epoch,
        best_val_mae: meta.best_val_mae,
        tensors: tensors
            .iter()
            .map(|(name, m)| TensorEntry {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 4 * params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in &tensors {
        for &v in m.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Parsed container: header plus named tensors widened to `f64`.
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn fixed_adjacency(&self) -> Option<Matrix> {
        self.tensor(FIXED_ADJACENCY).cloned()
    }

    /// Copies every stored parameter into `store`, which must hold exactly
    /// the same names and shapes.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        let mut seen = 0;
        for (name, m) in &self.tensors {
            if name == FIXED_ADJACENCY {
                continue;
            }
            store
                .set(name, m.clone())
                .map_err(|e| CliError::Data(format!("checkpoint tensor {name}: {e}")))?;
            seen += 1;
        }
        if seen != store.len() {
            return Err(CliError::Data(format!(
                "checkpoint holds {seen} parameter tensors, model expects {}",
                store.len()
            )));
        }
        Ok(())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| CliError::Data(format!("checkpoint: {m}"));
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(bad(&format!("unsupported schema version {}", header.schema_version)));
    }
    let mut pos = 12 + len;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n = t.rows * t.cols;
        let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated tensor data"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        tensors.push((t.name.clone(), Matrix::from_vec(t.rows, t.cols, data)?));
        pos += 4 * n;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(Checkpoint { header, tensors })
}

pub fn save(path: &Path, params: &ParamStore, meta: &Meta<'_>) -> Result<()> {
    std::fs::write(path, encode(params, meta)).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes)
}
