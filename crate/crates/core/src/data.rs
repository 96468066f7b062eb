//! In-memory series, windowing, splitting and normalization.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const SECONDS_PER_DAY: i64 = 86_400;
pub const WEEKDAYS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MissingPolicy {
    /// Forward fill, then back fill at the head of a series.
    #[default]
    ForwardFill,
    /// Reject datasets containing missing values.
    Error,
}

/// A multivariate series: one row per node, one column per timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    pub values: Matrix,
    /// Seconds since the Unix epoch (UTC), strictly increasing, evenly spaced.
    pub timestamps: Vec<i64>,
    pub node_ids: Vec<String>,
    pub node_coordinates: Option<Matrix>,
}

impl RawDataset {
    /// Validates shapes and timestamps, then handles missing (NaN) entries.
    pub fn new(
        mut values: Matrix,
        timestamps: Vec<i64>,
        node_ids: Vec<String>,
        policy: MissingPolicy,
    ) -> Result<Self> {
        let (n, t) = values.shape();
        if n == 0 {
            return Err(Error::Validation("dataset has no nodes".into()));
        }
        if node_ids.len() != n {
            return Err(Error::Validation(alloc::format!(
                "{} node ids for {n} series",
                node_ids.len()
            )));
        }
        if timestamps.len() != t {
            return Err(Error::Validation(alloc::format!(
                "{} timestamps for {t} columns",
                timestamps.len()
            )));
        }
        validate_timestamps(&timestamps)?;
        fill_missing(&mut values, policy)?;
        Ok(Self {
            values,
            timestamps,
            node_ids,
            node_coordinates: None,
        })
    }

    pub fn with_coordinates(mut self, coords: Matrix) -> Result<Self> {
        if coords.shape() != (self.num_nodes(), 2) {
            return Err(Error::Shape {
                op: "with_coordinates",
                expected: (self.num_nodes(), 2),
                found: coords.shape(),
            });
        }
        self.node_coordinates = Some(coords);
        Ok(self)
    }

    pub fn num_nodes(&self) -> usize {
        self.values.rows()
    }

    pub fn num_steps(&self) -> usize {
        self.values.cols()
    }
}

fn validate_timestamps(ts: &[i64]) -> Result<()> {
    for (i, pair) in ts.windows(2).enumerate() {
        if pair[1] <= pair[0] {
            return Err(Error::Validation(alloc::format!(
                "timestamps not strictly increasing at index {}",
                i + 1
            )));
        }
    }
    if ts.len() >= 3 {
        let step = ts[1] - ts[0];
        if let Some(i) = ts.windows(2).position(|p| p[1] - p[0] != step) {
            return Err(Error::Validation(alloc::format!(
                "irregular sampling interval at index {}",
                i + 1
            )));
        }
    }
    Ok(())
}

/// Replaces NaN entries per `policy`. A series with no observed value at
/// all is rejected.
pub fn fill_missing(values: &mut Matrix, policy: MissingPolicy) -> Result<()> {
    for r in 0..values.rows() {
        let row = values.row_mut(r);
        let Some(first) = row.iter().position(|v| !v.is_nan()) else {
            return Err(Error::Validation(alloc::format!("series {r} has no observed values")));
        };
        if policy == MissingPolicy::Error {
            if let Some(c) = row.iter().position(|v| v.is_nan()) {
                return Err(Error::Validation(alloc::format!(
                    "missing value at series {r}, step {c}"
                )));
            }
            continue;
        }
        let head = row[first];
        let mut last = head;
        for v in row.iter_mut() {
            if v.is_nan() {
                *v = last;
            } else {
                last = *v;
            }
        }
        row[..first].iter_mut().for_each(|v| *v = head);
    }
    Ok(())
}

/// One node-level sample: inputs at `start..start + w`, targets at
/// `start + w..start + w + h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WindowIndex {
    pub start: usize,
    pub node: usize,
}

/// All `N·(T − w − h + 1)` windows, ordered by start then node.
pub fn make_windows(num_nodes: usize, num_steps: usize, w: usize, h: usize) -> Result<Vec<WindowIndex>> {
    if w == 0 || h == 0 {
        return Err(Error::Parameter("window and horizon must be at least 1".into()));
    }
    if num_steps < w + h {
        return Err(Error::EmptyDataset {
            needed: w + h,
            have: num_steps,
        });
    }
    let starts = num_steps - w - h + 1;
    let mut out = Vec::with_capacity(starts * num_nodes);
    for start in 0..starts {
        for node in 0..num_nodes {
            out.push(WindowIndex { start, node });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.2,
            test: 0.1,
        }
    }
}

/// Window starts `[0, train_end)`, `[train_end, val_end)`, `[val_end, num_starts)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitBounds {
    pub train_end: usize,
    pub val_end: usize,
    pub num_starts: usize,
}

impl SplitBounds {
    pub fn train(&self) -> core::ops::Range<usize> {
        0..self.train_end
    }

    pub fn val(&self) -> core::ops::Range<usize> {
        self.train_end..self.val_end
    }

    pub fn test(&self) -> core::ops::Range<usize> {
        self.val_end..self.num_starts
    }
}

/// Chronological split of `num_starts` window starts; boundaries use the
/// floor of the cumulative ratio.
pub fn split_starts(num_starts: usize, ratios: SplitRatios) -> Result<SplitBounds> {
    let SplitRatios { train, val, test } = ratios;
    if [train, val, test].iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::Config(alloc::format!("invalid split ratios {ratios:?}")));
    }
    if libm::fabs(train + val + test - 1.0) > 1e-9 {
        return Err(Error::Config(alloc::format!(
            "split ratios must sum to 1, got {}",
            train + val + test
        )));
    }
    // absorb representation error such as 0.7 + 0.2 = 0.8999999999999999
    let cut = |x: f64| libm::floor(x * num_starts as f64 + 1e-9) as usize;
    let train_end = cut(train).min(num_starts);
    let val_end = cut(train + val).clamp(train_end, num_starts);
    let bounds = SplitBounds {
        train_end,
        val_end,
        num_starts,
    };
    for (name, range) in [("train", bounds.train()), ("val", bounds.val()), ("test", bounds.test())] {
        if range.is_empty() {
            return Err(Error::Config(alloc::format!(
                "{name} split is empty ({num_starts} window starts, ratios {train}/{val}/{test})"
            )));
        }
    }
    Ok(bounds)
}

/// Partitions windows by the start ranges of `bounds`.
pub fn split_windows(windows: &[WindowIndex], bounds: &SplitBounds) -> [Vec<WindowIndex>; 3] {
    let mut out: [Vec<WindowIndex>; 3] = Default::default();
    for &wi in windows {
        let slot = if wi.start < bounds.train_end {
            0
        } else if wi.start < bounds.val_end {
            1
        } else {
            2
        };
        out[slot].push(wi);
    }
    out
}

/// Global z-score parameters fitted on training data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizationState {
    pub mean: f64,
    pub std: f64,
}

impl NormalizationState {
    /// Population mean and standard deviation of `values`.
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Validation("cannot normalize an empty training split".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = libm::sqrt(var);
        if !(std > 1e-12) || !std.is_finite() {
            return Err(Error::DegenerateStd);
        }
        Ok(Self { mean, std })
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    #[inline]
    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Mean and population variance of a slice.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Fraction of the UTC day elapsed at `ts`, in `[0, 1)`.
pub fn time_of_day(ts: i64) -> f64 {
    ts.rem_euclid(SECONDS_PER_DAY) as f64 / SECONDS_PER_DAY as f64
}

/// Day of week with Monday = 0.
pub fn weekday(ts: i64) -> usize {
    // 1970-01-01 was a Thursday
    (ts.div_euclid(SECONDS_PER_DAY) + 3).rem_euclid(7) as usize
}

/// Materialized samples ready for a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    /// `M × w`, normalized.
    pub inputs: Matrix,
    /// `M × h`, raw units.
    pub targets: Matrix,
    pub node_index: Vec<usize>,
    pub window_start: Vec<usize>,
    /// Mean of the raw input window.
    pub stats_mean: Vec<f64>,
    /// Population variance of the raw input window.
    pub stats_var: Vec<f64>,
    /// Time of day of the last input step.
    pub time_of_day: Vec<f64>,
    /// Weekday of the last input step.
    pub weekday: Vec<usize>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.node_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_index.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.targets.cols()
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> SampleBatch {
        let pick = |m: &Matrix| {
            let mut out = Matrix::zeros(rows.len(), m.cols());
            for (i, &r) in rows.iter().enumerate() {
                out.row_mut(i).copy_from_slice(m.row(r));
            }
            out
        };
        SampleBatch {
            inputs: pick(&self.inputs),
            targets: pick(&self.targets),
            node_index: rows.iter().map(|&r| self.node_index[r]).collect(),
            window_start: rows.iter().map(|&r| self.window_start[r]).collect(),
            stats_mean: rows.iter().map(|&r| self.stats_mean[r]).collect(),
            stats_var: rows.iter().map(|&r| self.stats_var[r]).collect(),
            time_of_day: rows.iter().map(|&r| self.time_of_day[r]).collect(),
            weekday: rows.iter().map(|&r| self.weekday[r]).collect(),
        }
    }
}

/// A validated series with fixed window sizes and normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedSeries {
    pub values: Matrix,
    pub timestamps: Vec<i64>,
    pub window: usize,
    pub horizon: usize,
    pub norm: NormalizationState,
}

impl WindowedSeries {
    /// Fits normalization on every value observed by training inputs or
    /// targets, i.e. steps `0..train_end − 1 + w + h`.
    pub fn fit(ds: &RawDataset, window: usize, horizon: usize, bounds: &SplitBounds) -> Result<Self> {
        let steps = (bounds.train_end - 1 + window + horizon).min(ds.num_steps());
        let mut train_values = Vec::with_capacity(steps * ds.num_nodes());
        for r in 0..ds.num_nodes() {
            train_values.extend_from_slice(&ds.values.row(r)[..steps]);
        }
        let norm = NormalizationState::fit(&train_values)?;
        Ok(Self {
            values: ds.values.clone(),
            timestamps: ds.timestamps.clone(),
            window,
            horizon,
            norm,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.values.rows()
    }

    pub fn batch(&self, windows: &[WindowIndex]) -> SampleBatch {
        let (w, h) = (self.window, self.horizon);
        let m = windows.len();
        let mut inputs = Matrix::zeros(m, w);
        let mut targets = Matrix::zeros(m, h);
        let mut batch = SampleBatch {
            inputs: Matrix::zeros(0, 0),
            targets: Matrix::zeros(0, 0),
            node_index: Vec::with_capacity(m),
            window_start: Vec::with_capacity(m),
            stats_mean: Vec::with_capacity(m),
            stats_var: Vec::with_capacity(m),
            time_of_day: Vec::with_capacity(m),
            weekday: Vec::with_capacity(m),
        };
        for (i, wi) in windows.iter().enumerate() {
            let series = self.values.row(wi.node);
            let raw = &series[wi.start..wi.start + w];
            for (dst, v) in inputs.row_mut(i).iter_mut().zip(raw) {
                *dst = self.norm.apply(*v);
            }
            targets
                .row_mut(i)
                .copy_from_slice(&series[wi.start + w..wi.start + w + h]);
            let (mu, var) = mean_var(raw);
            let ts = self.timestamps[wi.start + w - 1];
            batch.node_index.push(wi.node);
            batch.window_start.push(wi.start);
            batch.stats_mean.push(mu);
            batch.stats_var.push(var);
            batch.time_of_day.push(time_of_day(ts));
            batch.weekday.push(weekday(ts));
        }
        batch.inputs = inputs;
        batch.targets = targets;
        batch
    }
}

/// Groups windows into batches of whole window starts.
///
/// Every batch holds `starts_per_batch` consecutive (or, with `rng`,
/// shuffled) window starts with all of their nodes, so graph mixing always
/// sees complete snapshots.
pub fn batches_by_start<R: Rng>(
    windows: &[WindowIndex],
    starts_per_batch: usize,
    rng: Option<&mut R>,
) -> Vec<Vec<WindowIndex>> {
    let mut starts: Vec<usize> = windows.iter().map(|w| w.start).collect();
    starts.sort_unstable();
    starts.dedup();
    if let Some(rng) = rng {
        starts.shuffle(rng);
    }
    let first = starts.iter().copied().min().unwrap_or(0);
    let last = starts.iter().copied().max().unwrap_or(0);
    let mut by_start: Vec<Vec<WindowIndex>> = (first..=last).map(|_| Vec::new()).collect();
    for &w in windows {
        by_start[w.start - first].push(w);
    }
    starts
        .chunks(starts_per_batch.max(1))
        .map(|chunk| {
            chunk
                .iter()
                .flat_map(|s| by_start[s - first].iter().copied())
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| i.to_string()).collect()
    }

    #[test]
    fn window_counts() {
        assert_eq!(make_windows(1, 24, 12, 12).unwrap().len(), 1);
        assert_eq!(make_windows(2, 25, 12, 12).unwrap().len(), 4);
        assert!(matches!(
            make_windows(3, 23, 12, 12),
            Err(Error::EmptyDataset { needed: 24, have: 23 })
        ));
    }

    #[test]
    fn split_examples() {
        let b = split_starts(10, SplitRatios::default()).unwrap();
        assert_eq!((b.train().len(), b.val().len(), b.test().len()), (7, 2, 1));
        let b = split_starts(100, SplitRatios::default()).unwrap();
        assert_eq!((b.train_end, b.val_end), (70, 90));
        let bad = SplitRatios {
            train: 0.5,
            val: 0.5,
            test: 0.0,
        };
        assert!(matches!(split_starts(10, bad), Err(Error::Config(_))));
        let bad = SplitRatios {
            train: 0.5,
            val: 0.2,
            test: 0.2,
        };
        assert!(split_starts(10, bad).is_err());
    }

    #[test]
    fn normalization_examples() {
        let n = NormalizationState::fit(&[0.0, 2.0]).unwrap();
        assert_eq!((n.mean, n.std), (1.0, 1.0));
        assert_eq!((n.apply(0.0), n.apply(2.0)), (-1.0, 1.0));
        assert!(matches!(NormalizationState::fit(&[5.0; 4]), Err(Error::DegenerateStd)));
        let x = 123.456;
        assert!((n.invert(n.apply(x)) - x).abs() <= 1e-9 * x.abs());
    }

    #[test]
    fn forward_fill_and_validation() {
        let v = Matrix::from_rows(&[[f64::NAN, 1.0, f64::NAN, 3.0]]).unwrap();
        let ds = RawDataset::new(v.clone(), vec![0, 60, 120, 180], ids(1), MissingPolicy::ForwardFill).unwrap();
        assert_eq!(ds.values.row(0), &[1.0, 1.0, 1.0, 3.0]);
        assert!(RawDataset::new(v, vec![0, 60, 120, 180], ids(1), MissingPolicy::Error).is_err());

        let ok = Matrix::zeros(1, 2);
        assert!(matches!(
            RawDataset::new(ok.clone(), vec![60, 0], ids(1), MissingPolicy::ForwardFill),
            Err(Error::Validation(_))
        ));
        let ok3 = Matrix::zeros(1, 3);
        assert!(RawDataset::new(ok3, vec![0, 60, 180], ids(1), MissingPolicy::ForwardFill).is_err());
    }

    #[test]
    fn calendar_features() {
        assert_eq!(time_of_day(0), 0.0);
        assert_eq!(time_of_day(86_400 * 5), 0.0);
        assert_eq!(time_of_day(43_200), 0.5);
        // 1970-01-01 Thursday, 1970-01-05 Monday
        assert_eq!(weekday(0), 3);
        assert_eq!(weekday(4 * 86_400), 0);
        assert_eq!(weekday(-86_400), 2);
    }

    #[test]
    fn batch_materialization() {
        let values = Matrix::from_rows(&[[1.0, 2.0, 3.0, 4.0, 5.0], [10.0, 20.0, 30.0, 40.0, 50.0]]).unwrap();
        let ds = RawDataset::new(values, (0..5).map(|i| i * 300).collect(), ids(2), MissingPolicy::ForwardFill).unwrap();
        let bounds = SplitBounds {
            train_end: 1,
            val_end: 1,
            num_starts: 2,
        };
        let series = WindowedSeries::fit(&ds, 2, 2, &bounds).unwrap();
        let b = series.batch(&[WindowIndex { start: 1, node: 1 }]);
        assert_eq!(b.targets.row(0), &[40.0, 50.0]);
        assert_eq!(b.stats_mean, [25.0]);
        assert_eq!(b.stats_var, [25.0]);
        let raw: Vec<f64> = b.inputs.row(0).iter().map(|z| series.norm.invert(*z)).collect();
        assert!((raw[0] - 20.0).abs() < 1e-9 && (raw[1] - 30.0).abs() < 1e-9);
    }

    #[test]
    fn batches_cover_whole_starts() {
        let w = make_windows(3, 30, 4, 4).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let batches = batches_by_start(&w, 4, Some(&mut rng));
        let total: usize = batches.iter().map(Vec::len).sum();
        assert_eq!(total, w.len());
        for b in &batches {
            assert_eq!(b.len() % 3, 0);
        }
    }
}
