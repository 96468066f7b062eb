//! Evaluation reports, comparisons and per-node error maps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use fairstg_core::metrics::{
    accuracy_all, accuracy_at, delta_ratio, fairness_metrics, per_node_mean, per_sample_mape, relative_change,
    step_errors, subgroup_breakdown, GroupStats,
};
use fairstg_core::objectives::per_sample_mae;
use fairstg_core::recognizer::recognizer_accuracy;
use fairstg_core::trainer::SplitPredictions;

use crate::error::{CliError, Result};

pub const REPORT_SCHEMA: u32 = 1;

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Accuracy and fairness at one horizon step, or over the whole horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub horizon: usize,
    pub mae: f64,
    /// Percent; absent when every target is masked.
    pub mape: Option<f64>,
    pub rmse: f64,
    pub mae_var: f64,
    pub mape_var: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subgroup {
    pub mae: f64,
    pub mae_var: f64,
    pub count: usize,
}

impl From<GroupStats> for Subgroup {
    fn from(g: GroupStats) -> Self {
        Self {
            mae: g.mean,
            mae_var: g.var,
            count: g.count,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub schema_version: u32,
    pub samples: usize,
    pub ablation: String,
    pub enhanced: bool,
    /// k-th step metrics for each configured horizon k.
    pub horizons: Vec<MetricRow>,
    /// Metrics over all steps; `mae_var` is the variance of per-sample MAE.
    pub overall: MetricRow,
    pub easy30: Subgroup,
    pub challenging30: Subgroup,
    /// MAE relative to a reference report, when one was given.
    pub delta: Option<f64>,
    pub recognizer_accuracy: Option<f64>,
    pub node_ids: Vec<String>,
    /// Percent, per node over all of its test samples and steps.
    pub per_node_mape: Vec<Option<f64>>,
}

pub struct ReportInputs<'a> {
    pub predictions: &'a SplitPredictions,
    pub node_ids: &'a [String],
    pub horizons: &'a [usize],
    pub subgroup_fraction: f64,
    pub mape_eps: f64,
    pub threshold: f64,
    pub ablation: &'a str,
    pub enhanced: bool,
}

pub fn build_report(inp: &ReportInputs<'_>) -> Result<FairnessReport> {
    let p = inp.predictions;
    if p.pred.rows() == 0 {
        return Err(CliError::Data("no test samples to evaluate".into()));
    }
    let mut horizons = Vec::with_capacity(inp.horizons.len());
    for &k in inp.horizons {
        let acc = accuracy_at(&p.pred, &p.truth, k, inp.mape_eps)?;
        let (abs, ape) = step_errors(&p.pred, &p.truth, k, inp.mape_eps)?;
        let fair = fairness_metrics(&abs, &ape);
        horizons.push(MetricRow {
            horizon: k,
            mae: acc.mae,
            mape: finite(acc.mape),
            rmse: acc.rmse,
            mae_var: fair.mae_var,
            mape_var: finite(fair.mape_var).filter(|_| ape.iter().any(|v| v.is_finite())),
        });
    }
    let sample_mae = per_sample_mae(&p.pred, &p.truth)?;
    let sample_mape = per_sample_mape(&p.pred, &p.truth, inp.mape_eps)?;
    let acc = accuracy_all(&p.pred, &p.truth, inp.mape_eps)?;
    let fair = fairness_metrics(&sample_mae, &sample_mape);
    let overall = MetricRow {
        horizon: p.pred.cols(),
        mae: acc.mae,
        mape: finite(acc.mape),
        rmse: acc.rmse,
        mae_var: fair.mae_var,
        mape_var: finite(fair.mape_var).filter(|_| sample_mape.iter().any(|v| v.is_finite())),
    };
    let groups = subgroup_breakdown(&sample_mae, inp.subgroup_fraction).expect("nonempty");
    let nodes: Vec<usize> = p.windows.iter().map(|w| w.node).collect();
    let per_node = per_node_mean(&sample_mape, &nodes, inp.node_ids.len());
    Ok(FairnessReport {
        schema_version: REPORT_SCHEMA,
        samples: p.pred.rows(),
        ablation: inp.ablation.into(),
        enhanced: inp.enhanced,
        horizons,
        overall,
        easy30: groups.easy.into(),
        challenging30: groups.challenging.into(),
        delta: None,
        recognizer_accuracy: p
            .z_hat
            .as_ref()
            .map(|z| recognizer_accuracy(z, &p.labels, inp.threshold)),
        node_ids: inp.node_ids.to_vec(),
        per_node_mape: per_node.into_iter().map(finite).collect(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn read_report(path: &Path) -> Result<FairnessReport> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Change of `b` relative to `a` for one horizon row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowComparison {
    pub horizon: usize,
    /// `mae_b / mae_a`.
    pub delta: Option<f64>,
    /// Relative changes `(b − a) / |a|`; negative is an improvement.
    pub mae_change: f64,
    pub mae_var_change: f64,
    pub mape_var_change: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Horizon-wise and overall comparisons of report `b` against base `a`.
    pub horizons: Vec<RowComparison>,
    pub overall: RowComparison,
    pub easy30_mae_change: f64,
    pub challenging30_mae_change: f64,
    /// Per-node MAPE improvement `a − b` as a fraction.
    pub per_node_improvement: Vec<Option<f64>>,
}

fn compare_rows(a: &MetricRow, b: &MetricRow) -> RowComparison {
    RowComparison {
        horizon: a.horizon,
        delta: delta_ratio(b.mae, a.mae),
        mae_change: relative_change(a.mae, b.mae),
        mae_var_change: relative_change(a.mae_var, b.mae_var),
        mape_var_change: a.mape_var.zip(b.mape_var).map(|(x, y)| relative_change(x, y)),
    }
}

pub fn compare(a: &FairnessReport, b: &FairnessReport) -> Result<Comparison> {
    if a.node_ids != b.node_ids {
        return Err(CliError::Data("reports cover different nodes".into()));
    }
    let mut horizons = Vec::new();
    for ra in &a.horizons {
        if let Some(rb) = b.horizons.iter().find(|r| r.horizon == ra.horizon) {
            horizons.push(compare_rows(ra, rb));
        }
    }
    Ok(Comparison {
        horizons,
        overall: compare_rows(&a.overall, &b.overall),
        easy30_mae_change: relative_change(a.easy30.mae, b.easy30.mae),
        challenging30_mae_change: relative_change(a.challenging30.mae, b.challenging30.mae),
        per_node_improvement: a
            .per_node_mape
            .iter()
            .zip(&b.per_node_mape)
            .map(|(x, y)| x.zip(*y).map(|(x, y)| (x - y) / 100.0))
            .collect(),
    })
}

/// Per-node error map: MAPE as a fraction, optional coordinates and, when a
/// base report is given, the improvement `e_base − e`.
pub fn write_error_map(
    path: &Path,
    report: &FairnessReport,
    coordinates: Option<&fairstg_core::tensor::Matrix>,
    base: Option<&FairnessReport>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::io::csv_io(path, e))?;
    let mut header = vec!["node_id"];
    if coordinates.is_some() {
        header.extend(["x", "y"]);
    }
    header.push("mape");
    if base.is_some() {
        header.push("mape_improvement");
    }
    w.write_record(&header).map_err(|e| crate::io::csv_io(path, e))?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (i, id) in report.node_ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        if let Some(c) = coordinates {
            rec.push(c[(i, 0)].to_string());
            rec.push(c[(i, 1)].to_string());
        }
        let e = report.per_node_mape[i].map(|v| v / 100.0);
        rec.push(cell(e));
        if let Some(b) = base {
            let eb = b.per_node_mape.get(i).copied().flatten().map(|v| v / 100.0);
            rec.push(cell(eb.zip(e).map(|(x, y)| x - y)));
        }
        w.write_record(&rec).map_err(|e| crate::io::csv_io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}
