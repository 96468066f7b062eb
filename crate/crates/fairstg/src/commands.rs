//! The five subcommands as library functions.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fairstg_core::adjacency::{coordinate_distances, gaussian_adjacency, topk_adjacency, AdjacencySpec};
use fairstg_core::data::{
    make_windows, split_starts, split_windows, RawDataset, SplitBounds, WindowIndex, WindowedSeries,
};
use fairstg_core::model::{FairStg, ModelConfig};
use fairstg_core::params::ParamStore;
use fairstg_core::tensor::Matrix;
use fairstg_core::trainer::{predict_split, Ablation, EpochRecord, SplitPredictions, Stage, TrainEvent, Trainer};

use crate::checkpoint::{self, Meta};
use crate::config::{AdjacencyKind, Config};
use crate::error::{CliError, Result};
use crate::io;
use crate::report::{self, build_report, Comparison, FairnessReport, ReportInputs};
use crate::synth;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const REPORT_FILE: &str = "report.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

/// A validated dataset with its splits and graph.
pub struct Prepared {
    pub dataset: RawDataset,
    pub bounds: SplitBounds,
    /// Train, validation and test windows.
    pub windows: [Vec<WindowIndex>; 3],
    pub series: WindowedSeries,
    pub adjacency: AdjacencySpec,
    pub coordinates: Option<Matrix>,
}

impl Prepared {
    pub fn node_ids(&self) -> &[String] {
        &self.dataset.node_ids
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn std_of_finite(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    let (_, var) = fairstg_core::data::mean_var(&v);
    (var > 0.0).then(|| var.sqrt())
}

pub fn load_prepared(config: &Config) -> Result<Prepared> {
    let d = &config.data;
    let path = d
        .path
        .as_deref()
        .ok_or_else(|| CliError::Config("data.path is not set".into()))?;
    let adj = &config.adjacency;
    if adj.kind == AdjacencyKind::Gaussian && d.distances.is_none() && d.coordinates.is_none() {
        return Err(CliError::Config(
            "adjacency.kind = \"gaussian\" needs data.distances or data.coordinates".into(),
        ));
    }
    let table = io::read_series(path, d.format)?;
    let node_ids = table.node_ids.clone();
    let coordinates = match &d.coordinates {
        Some(p) => Some(io::read_coordinates(p, &node_ids)?),
        None => None,
    };
    let mut dataset = table.into_dataset(d.missing_policy.into())?;
    if let Some(c) = &coordinates {
        dataset = dataset.with_coordinates(c.clone())?;
    }
    let windows = make_windows(dataset.num_nodes(), dataset.num_steps(), d.window, d.horizon)?;
    let num_starts = dataset.num_steps() - d.window - d.horizon + 1;
    let bounds = split_starts(num_starts, d.split_ratios())?;
    let series = WindowedSeries::fit(&dataset, d.window, d.horizon, &bounds)?;
    let adjacency = match adj.kind {
        AdjacencyKind::Adaptive => AdjacencySpec::Adaptive {
            embed_dim: adj.embed_dim,
        },
        AdjacencyKind::Gaussian => {
            let distances = match (&d.distances, &coordinates) {
                (Some(p), _) => io::read_distances(p, &node_ids)?,
                (None, Some(c)) => coordinate_distances(c),
                (None, None) => unreachable!("checked above"),
            };
            let n = node_ids.len();
            let sigma = match adj.sigma {
                Some(s) => s,
                None => std_of_finite((0..n * n).filter(|k| k / n != k % n).map(|k| distances.as_slice()[k]))
                    .ok_or_else(|| CliError::Data("cannot derive a kernel width: no finite distances".into()))?,
            };
            AdjacencySpec::fixed(gaussian_adjacency(&distances, sigma, adj.threshold)?)?
        }
        AdjacencyKind::Topk => {
            let steps = (bounds.train_end - 1 + d.window + d.horizon).min(dataset.num_steps());
            let mut history = Matrix::zeros(dataset.num_nodes(), steps);
            for i in 0..dataset.num_nodes() {
                history.row_mut(i).copy_from_slice(&dataset.values.row(i)[..steps]);
            }
            let topk = topk_adjacency(&history, adj.k_fraction)?;
            for &i in &topk.zero_norm_nodes {
                eprintln!("warning: node {} has an all-zero training history; it gets no neighbors", node_ids[i]);
            }
            AdjacencySpec::fixed(topk.weights)?
        }
    };
    let windows = split_windows(&windows, &bounds);
    Ok(Prepared {
        dataset,
        bounds,
        windows,
        series,
        adjacency,
        coordinates,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitsFile {
    pub window: usize,
    pub horizon: usize,
    pub num_starts: usize,
    pub train_end: usize,
    pub val_end: usize,
    pub norm_mean: f64,
    pub norm_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub nodes: usize,
    pub steps: usize,
    pub adjacency: String,
    pub files: Vec<ManifestEntry>,
}

pub fn sha256_file(path: &Path) -> Result<(u64, String)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok((bytes.len() as u64, digest.iter().map(|b| format!("{b:02x}")).collect()))
}

/// Writes the canonical series, split bounds, adjacency (when fixed), the
/// resolved config and a manifest hashing all of them.
pub fn prepare(config: &Config, out: &Path) -> Result<Manifest> {
    let p = load_prepared(config)?;
    ensure_dir(out)?;
    let mut files = vec!["series.csv".to_string(), "splits.json".to_string()];
    io::write_wide(&out.join("series.csv"), &p.dataset.timestamps, p.node_ids(), &p.dataset.values)?;
    let splits = SplitsFile {
        window: config.data.window,
        horizon: config.data.horizon,
        num_starts: p.bounds.num_starts,
        train_end: p.bounds.train_end,
        val_end: p.bounds.val_end,
        norm_mean: p.series.norm.mean,
        norm_std: p.series.norm.std,
    };
    report::write_json(&out.join("splits.json"), &splits)?;
    let adjacency = match &p.adjacency {
        AdjacencySpec::Fixed(w) => {
            io::write_matrix(&out.join("adjacency.csv"), p.node_ids(), w)?;
            files.push("adjacency.csv".into());
            format!("{:?}", config.adjacency.kind).to_lowercase()
        }
        AdjacencySpec::Adaptive { .. } => "adaptive".into(),
    };
    config.write_snapshot(out)?;
    files.push("config.resolved.toml".into());
    let mut entries = Vec::new();
    for f in files {
        let (bytes, sha256) = sha256_file(&out.join(&f))?;
        entries.push(ManifestEntry { file: f, bytes, sha256 });
    }
    let manifest = Manifest {
        nodes: p.dataset.num_nodes(),
        steps: p.dataset.num_steps(),
        adjacency,
        files: entries,
    };
    report::write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn build_model(config: &ModelConfig, seed: u64) -> Result<(FairStg, ParamStore)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = FairStg::new(config.clone(), &mut store, &mut rng)?;
    Ok((model, store))
}

pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub stage: Stage,
    pub epochs_run: usize,
}

fn log_row(r: &EpochRecord) -> Vec<String> {
    vec![
        r.epoch.to_string(),
        r.stage.as_str().into(),
        r.loss.reweighted.to_string(),
        r.loss.fairness.to_string(),
        r.loss.self_supervised.to_string(),
        r.loss.total.to_string(),
        r.train_mae.to_string(),
        r.val_mae.to_string(),
        r.val_mae_var.to_string(),
        (r.improved as u8).to_string(),
    ]
}

/// Trains on the configured data and writes the snapshot, log and
/// checkpoint into `out`. One progress line per epoch goes to `progress`.
pub fn train(config: &Config, out: &Path, ablation: Option<Ablation>, progress: &mut dyn Write) -> Result<TrainSummary> {
    let mut config = config.clone();
    if let Some(a) = ablation {
        config.train.ablation = a.as_str().into();
    }
    config.validate()?;
    let tc = config.train_config()?;
    let p = load_prepared(&config)?;
    ensure_dir(out)?;
    config.write_snapshot(out)?;
    let model_config = config
        .model
        .to_model_config(&config.data, p.dataset.num_nodes(), p.adjacency.clone());
    let (model, store) = build_model(&model_config, config.seed)?;

    let log_path = out.join(TRAIN_LOG_FILE);
    let mut log = csv::Writer::from_path(&log_path).map_err(|e| io::csv_io(&log_path, e))?;
    log.write_record([
        "epoch", "stage", "l_r", "l_f", "l_s", "total", "train_mae", "val_mae", "val_mae_var", "improved",
    ])
    .map_err(|e| io::csv_io(&log_path, e))?;
    let mut sink_error = None;
    let mut observer = |ev: TrainEvent<'_>| {
        if let TrainEvent::Epoch(r) = ev {
            let line = format!(
                "epoch={} stage={} train_mae={:.6} val_mae={:.6} mae_var={:.6}",
                r.epoch,
                r.stage.as_str(),
                r.train_mae,
                r.val_mae,
                r.val_mae_var
            );
            let res = writeln!(progress, "{line}")
                .map_err(|e| CliError::io("<stdout>", e))
                .and_then(|_| log.write_record(log_row(r)).map_err(|e| io::csv_io(&log_path, e)))
                .and_then(|_| log.flush().map_err(|e| CliError::io(&log_path, e)));
            if let Err(e) = res {
                sink_error.get_or_insert(e);
            }
        }
    };
    let mut trainer = Trainer::new(&model, store, tc)?;
    let outcome = trainer.fit(&p.series, &p.windows[0], &p.windows[1], &mut observer)?;
    if let Some(e) = sink_error {
        return Err(e);
    }
    let ckpt = out.join(CHECKPOINT_FILE);
    checkpoint::save(
        &ckpt,
        &outcome.params,
        &Meta {
            config: &model_config,
            norm: &p.series.norm,
            node_ids: p.node_ids(),
            ablation: &config.train.ablation,
            stage: outcome.stage.as_str(),
            best_epoch: outcome.best_epoch,
            best_val_mae: outcome.best_val_mae,
        },
    )?;
    Ok(TrainSummary {
        checkpoint: ckpt,
        best_epoch: outcome.best_epoch,
        best_val_mae: outcome.best_val_mae,
        stage: outcome.stage,
        epochs_run: outcome.epochs_run,
    })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EvaluateOptions {
    pub ablation: Option<Ablation>,
    pub dump_compensatory: bool,
    pub emit_error_map: bool,
}

pub struct Evaluation {
    pub report: FairnessReport,
    pub predictions: SplitPredictions,
}

/// Restores a checkpoint and scores it on the test split of the configured
/// data. Writes `report.json`, plus the error map and compensatory dump
/// when asked.
pub fn evaluate(config: &Config, checkpoint_path: &Path, out: &Path, opts: EvaluateOptions) -> Result<Evaluation> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let h = &ckpt.header;
    let p = load_prepared(config)?;
    if h.node_ids != p.node_ids() {
        return Err(CliError::Data(format!(
            "checkpoint was trained on nodes {:?}, data has {:?}",
            h.node_ids,
            p.node_ids()
        )));
    }
    if h.w != config.data.window || h.h != config.data.horizon {
        return Err(CliError::Config(format!(
            "checkpoint uses window {} and horizon {}, config asks for {} and {}",
            h.w, h.h, config.data.window, config.data.horizon
        )));
    }
    let model_config = h.model_config(ckpt.fixed_adjacency())?;
    let (model, mut store) = build_model(&model_config, 0)?;
    ckpt.load_into(&mut store)?;
    let mut series = p.series.clone();
    series.norm = h.norm();

    let stage = match h.stage.as_str() {
        "warmup" => Stage::Warmup,
        "fairness" => Stage::Fairness,
        other => return Err(CliError::Data(format!("checkpoint: unknown stage {other:?}"))),
    };
    let ablation = match opts.ablation {
        Some(a) => a,
        None => crate::config::parse_ablation(&h.ablation)?,
    };
    let mut tc = config.train_config()?;
    tc.ablation = ablation;
    let inference = tc.inference(stage);
    let starts = (tc.batch_size / p.dataset.num_nodes()).max(1);
    let predictions = predict_split(&model, &store, &series, &p.windows[2], starts, inference, tc.easy_fraction)?;
    let mut report = build_report(&ReportInputs {
        predictions: &predictions,
        node_ids: p.node_ids(),
        horizons: &config.eval.horizons,
        subgroup_fraction: config.eval.subgroup_fraction,
        mape_eps: config.data.mape_epsilon,
        threshold: config.eval.threshold,
        ablation: ablation.as_str(),
        enhanced: inference.enhance,
    })?;
    let reference = match &config.eval.reference {
        Some(r) => Some(report::read_report(r)?),
        None => None,
    };
    if let Some(r) = &reference {
        report.delta = fairstg_core::metrics::delta_ratio(report.overall.mae, r.overall.mae);
    }

    ensure_dir(out)?;
    config.write_snapshot(out)?;
    report::write_json(&out.join(REPORT_FILE), &report)?;
    if opts.emit_error_map {
        report::write_error_map(
            &out.join("error_map.csv"),
            &report,
            p.coordinates.as_ref(),
            reference.as_ref(),
        )?;
    }
    if opts.dump_compensatory {
        write_compensatory(&out.join("compensatory.csv"), &predictions, p.node_ids())?;
    }
    Ok(Evaluation { report, predictions })
}

/// One row per mixed challenging sample: its retrieved easy neighbors and
/// gate value. Row indices refer to the test split in batch order.
pub fn write_compensatory(path: &Path, preds: &SplitPredictions, node_ids: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io::csv_io(path, e))?;
    w.write_record(["batch", "row", "node_id", "window_start", "neighbor_rows", "neighbor_nodes", "alpha"])
        .map_err(|e| io::csv_io(path, e))?;
    let join = |xs: &mut dyn Iterator<Item = String>| xs.collect::<Vec<_>>().join(" ");
    for b in &preds.enhanced_batches {
        for (i, nbrs) in &b.compensatory.entries {
            let row = b.offset + i;
            let win = preds.windows[row];
            let rows = join(&mut nbrs.iter().map(|j| (b.offset + j).to_string()));
            let nodes = join(&mut nbrs.iter().map(|j| node_ids[preds.windows[b.offset + j].node].clone()));
            w.write_record([
                b.batch.to_string(),
                row.to_string(),
                node_ids[win.node].clone(),
                win.start.to_string(),
                rows,
                nodes,
                b.gate[*i].to_string(),
            ])
            .map_err(|e| io::csv_io(path, e))?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Compares report `b` against base report `a`; writes `comparison.json`
/// (and an improvement map) when `out` is given.
pub fn compare(
    config: &Config,
    a_path: &Path,
    b_path: &Path,
    out: Option<&Path>,
    emit_error_map: bool,
) -> Result<Comparison> {
    let a = report::read_report(a_path)?;
    let b = report::read_report(b_path)?;
    let cmp = report::compare(&a, &b)?;
    if let Some(out) = out {
        ensure_dir(out)?;
        config.write_snapshot(out)?;
        report::write_json(&out.join("comparison.json"), &cmp)?;
        if emit_error_map {
            let coords = match &config.data.coordinates {
                Some(p) => Some(io::read_coordinates(p, &b.node_ids)?),
                None => None,
            };
            report::write_error_map(&out.join("error_map.csv"), &b, coords.as_ref(), Some(&a))?;
        }
    } else if emit_error_map {
        return Err(CliError::Config("--emit-error-map needs --out".into()));
    }
    Ok(cmp)
}

/// Generates the synthetic benchmark into `out`.
pub fn synth(config: &Config, out: &Path) -> Result<synth::SynthData> {
    let data = synth::generate(&config.synth, config.seed)?;
    ensure_dir(out)?;
    synth::write(out, &data)?;
    config.write_snapshot(out)?;
    Ok(data)
}
