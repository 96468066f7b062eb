//! Run configuration: a TOML document with dotted sections, `--set`
//! overrides and a resolved snapshot written next to every run's outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fairstg_core::adjacency::AdjacencySpec;
use fairstg_core::data::{MissingPolicy, SplitRatios};
use fairstg_core::metrics::MAPE_EPS;
use fairstg_core::model::ModelConfig;
use fairstg_core::objectives::LossWeights;
use fairstg_core::recognizer::RecognizerArch;
use fairstg_core::trainer::{Ablation, TrainConfig};

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "FAIRSTG_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub adjacency: AdjacencyConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsvFormat {
    #[default]
    Wide,
    Long,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingSetting {
    #[default]
    ForwardFill,
    Error,
}

impl From<MissingSetting> for MissingPolicy {
    fn from(m: MissingSetting) -> Self {
        match m {
            MissingSetting::ForwardFill => MissingPolicy::ForwardFill,
            MissingSetting::Error => MissingPolicy::Error,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Series CSV.
    pub path: Option<PathBuf>,
    pub format: CsvFormat,
    /// `node_a,node_b,distance` CSV for the Gaussian adjacency.
    pub distances: Option<PathBuf>,
    /// `node_id,x,y` CSV; used for Gaussian distances and error maps.
    pub coordinates: Option<PathBuf>,
    pub window: usize,
    pub horizon: usize,
    pub ratios: [f64; 3],
    pub missing_policy: MissingSetting,
    pub mape_epsilon: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            format: CsvFormat::Wide,
            distances: None,
            coordinates: None,
            window: 12,
            horizon: 12,
            ratios: [0.7, 0.2, 0.1],
            missing_policy: MissingSetting::ForwardFill,
            mape_epsilon: MAPE_EPS,
        }
    }
}

impl DataConfig {
    pub fn split_ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.ratios[0],
            val: self.ratios[1],
            test: self.ratios[2],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyKind {
    #[default]
    Adaptive,
    Gaussian,
    Topk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdjacencyConfig {
    pub kind: AdjacencyKind,
    pub embed_dim: usize,
    /// Kernel width; the standard deviation of the finite distances when unset.
    pub sigma: Option<f64>,
    pub threshold: f64,
    pub k_fraction: f64,
}

impl Default for AdjacencyConfig {
    fn default() -> Self {
        Self {
            kind: AdjacencyKind::Adaptive,
            embed_dim: 10,
            sigma: None,
            threshold: 0.1,
            k_fraction: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchSetting {
    #[default]
    Gcn3,
    Linear3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub repr_dim: usize,
    pub temporal_channels: usize,
    pub head_hidden: usize,
    pub recognizer_arch: ArchSetting,
    pub recognizer_hidden: usize,
    pub recognizer_embed_dim: usize,
    pub key_dim: usize,
    pub gate_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            repr_dim: m.repr_dim,
            temporal_channels: m.temporal_channels,
            head_hidden: m.head_hidden,
            recognizer_arch: ArchSetting::Gcn3,
            recognizer_hidden: m.recognizer_hidden,
            recognizer_embed_dim: m.recognizer_embed_dim,
            key_dim: m.key_dim,
            gate_hidden: m.gate_hidden,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, data: &DataConfig, num_nodes: usize, adjacency: AdjacencySpec) -> ModelConfig {
        ModelConfig {
            window: data.window,
            horizon: data.horizon,
            num_nodes,
            repr_dim: self.repr_dim,
            temporal_channels: self.temporal_channels,
            head_hidden: self.head_hidden,
            adjacency,
            recognizer_arch: match self.recognizer_arch {
                ArchSetting::Gcn3 => RecognizerArch::Gcn3,
                ArchSetting::Linear3 => RecognizerArch::Linear3,
            },
            recognizer_hidden: self.recognizer_hidden,
            recognizer_embed_dim: self.recognizer_embed_dim,
            key_dim: self.key_dim,
            gate_hidden: self.gate_hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub mu_r: f64,
    pub mu_f: f64,
    pub mu_s: f64,
    pub k_c: usize,
    pub easy_fraction: f64,
    pub omega: f64,
    pub patience: usize,
    /// `full`, `no_fe`, `no_fo` or `baseline` (no fairness stage).
    pub ablation: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            grad_clip: t.grad_clip,
            batch_size: t.batch_size,
            warmup_epochs: t.warmup_epochs,
            total_epochs: t.total_epochs,
            mu_r: t.mu.reweighted,
            mu_f: t.mu.fairness,
            mu_s: t.mu.self_supervised,
            k_c: t.k_c,
            easy_fraction: t.easy_fraction,
            omega: t.omega,
            patience: t.patience,
            ablation: t.ablation.as_str().into(),
        }
    }
}

pub fn parse_ablation(s: &str) -> Result<Ablation> {
    Ablation::parse(s).ok_or_else(|| {
        CliError::Config(format!(
            "unknown ablation {s:?}; expected full, no_fe, no_fo or baseline"
        ))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    pub horizons: Vec<usize>,
    pub subgroup_fraction: f64,
    /// Report of a reference model; when set, `delta` is computed against it.
    pub reference: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            horizons: vec![3, 6, 12],
            subgroup_fraction: 0.3,
            reference: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub nodes: usize,
    pub steps: usize,
    /// Share of nodes in the sinusoidal group.
    pub group_split: f64,
    pub sigma_a: f64,
    pub sigma_b: f64,
    /// Per-step probability that a regime-switching node changes regime.
    pub switch_prob: f64,
    /// Distance between the two regime means.
    pub regime_gap: f64,
    pub interval_seconds: i64,
    /// Sinusoid period in steps.
    pub period: usize,
    pub start: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            nodes: 20,
            steps: 2000,
            group_split: 0.5,
            sigma_a: 1.0,
            sigma_b: 2.0,
            switch_prob: 0.05,
            regime_gap: 8.0,
            interval_seconds: 300,
            period: 288,
            start: "2024-01-01T00:00:00Z".into(),
        }
    }
}

impl Config {
    /// Reads `path` (or defaults), applies the seed environment override and
    /// then `key=value` overrides, and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        if let Ok(seed) = std::env::var(SEED_ENV) {
            let seed: u64 = seed
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV} must be an unsigned integer, got {seed:?}")))?;
            doc.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let config: Config = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        let d = &self.data;
        if d.window == 0 || d.horizon == 0 {
            return bad("data.window and data.horizon must be positive".into());
        }
        if d.ratios.iter().any(|r| !(*r >= 0.0)) || (d.ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("data.ratios must be nonnegative and sum to 1, got {:?}", d.ratios));
        }
        if !(d.mape_epsilon >= 0.0) {
            return bad("data.mape_epsilon must be nonnegative".into());
        }
        for &k in &self.eval.horizons {
            if k == 0 || k > d.horizon {
                return bad(format!("eval.horizons entry {k} outside 1..={}", d.horizon));
            }
        }
        if !(self.eval.subgroup_fraction > 0.0 && self.eval.subgroup_fraction <= 0.5) {
            return bad("eval.subgroup_fraction must lie in (0, 0.5]".into());
        }
        if self.adjacency.kind == AdjacencyKind::Adaptive && self.adjacency.embed_dim == 0 {
            return bad("adjacency.embed_dim must be positive".into());
        }
        let s = &self.synth;
        if !(s.group_split >= 0.0 && s.group_split <= 1.0) {
            return bad("synth.group_split must lie in [0, 1]".into());
        }
        if !(s.sigma_a >= 0.0 && s.sigma_b >= 0.0) || !(s.switch_prob >= 0.0 && s.switch_prob <= 1.0) {
            return bad("synth noise levels must be nonnegative and switch_prob a probability".into());
        }
        if s.nodes == 0 || s.steps == 0 || s.period == 0 || !(s.regime_gap >= 0.0) {
            return bad("synth.nodes, synth.steps, synth.period must be positive and regime_gap nonnegative".into());
        }
        self.train_config()?.validate()?;
        Ok(())
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            lr: t.lr,
            grad_clip: t.grad_clip,
            batch_size: t.batch_size,
            warmup_epochs: t.warmup_epochs,
            total_epochs: t.total_epochs,
            seed: self.seed,
            mu: LossWeights::new(t.mu_r, t.mu_f, t.mu_s),
            k_c: t.k_c,
            easy_fraction: t.easy_fraction,
            omega: t.omega,
            threshold: self.eval.threshold,
            patience: t.patience,
            ablation: parse_ablation(&t.ablation)?,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Writes the resolved snapshot `config.resolved.toml` into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("config.resolved.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

/// Sets a dotted key in `doc`. The value is read as a TOML literal when it
/// parses as one and as a bare string otherwise.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = parse_value(raw);
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed key {key:?}")));
    }
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{key}: {part} is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
