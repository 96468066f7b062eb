//! Synthetic two-group benchmark.
//!
//! Group A nodes follow a daily-style sinusoid with low noise; group B nodes
//! hover around one of two levels, switching between them as a Markov chain,
//! with higher noise. Node ids carry the group letter (`A00`, `B03`).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use fairstg_core::tensor::Matrix;

use crate::config::SynthConfig;
use crate::error::{CliError, Result};
use crate::io::{parse_timestamp, SeriesTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Sinusoid,
    Switching,
}

impl Group {
    pub fn letter(self) -> char {
        match self {
            Group::Sinusoid => 'A',
            Group::Switching => 'B',
        }
    }
}

pub struct SynthData {
    pub table: SeriesTable,
    pub groups: Vec<Group>,
    /// Nodes laid out on a ring, group A first.
    pub coordinates: Matrix,
}

pub fn group_sizes(cfg: &SynthConfig) -> (usize, usize) {
    let a = ((cfg.group_split * cfg.nodes as f64).round() as usize).min(cfg.nodes);
    (a, cfg.nodes - a)
}

pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<SynthData> {
    let start = parse_timestamp(&cfg.start)
        .ok_or_else(|| CliError::Config(format!("synth.start: bad timestamp {:?}", cfg.start)))?;
    let noise = |s: f64| Normal::new(0.0, s).map_err(|e| CliError::Config(format!("synth noise: {e}")));
    let (noise_a, noise_b) = (noise(cfg.sigma_a)?, noise(cfg.sigma_b)?);
    let (n_a, _) = group_sizes(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Matrix::zeros(cfg.nodes, cfg.steps);
    let mut groups = Vec::with_capacity(cfg.nodes);
    let omega = 2.0 * std::f64::consts::PI / cfg.period as f64;
    for i in 0..cfg.nodes {
        let base: f64 = rng.gen_range(45.0..55.0);
        if i < n_a {
            groups.push(Group::Sinusoid);
            let amp: f64 = rng.gen_range(8.0..12.0);
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            for s in 0..cfg.steps {
                values[(i, s)] = base + amp * (omega * s as f64 + phase).sin() + noise_a.sample(&mut rng);
            }
        } else {
            groups.push(Group::Switching);
            let mut high: bool = rng.gen();
            for s in 0..cfg.steps {
                if rng.gen::<f64>() < cfg.switch_prob {
                    high = !high;
                }
                let level = if high { 0.5 } else { -0.5 } * cfg.regime_gap;
                values[(i, s)] = base + level + noise_b.sample(&mut rng);
            }
        }
    }
    let mut counters = [0usize; 2];
    let node_ids = groups
        .iter()
        .map(|g| {
            let c = &mut counters[(*g == Group::Switching) as usize];
            *c += 1;
            format!("{}{:02}", g.letter(), *c - 1)
        })
        .collect();
    let mut coordinates = Matrix::zeros(cfg.nodes, 2);
    for i in 0..cfg.nodes {
        let angle = std::f64::consts::TAU * i as f64 / cfg.nodes as f64;
        coordinates[(i, 0)] = 10.0 * angle.cos();
        coordinates[(i, 1)] = 10.0 * angle.sin();
    }
    Ok(SynthData {
        table: SeriesTable {
            timestamps: (0..cfg.steps as i64).map(|s| start + s * cfg.interval_seconds).collect(),
            node_ids,
            values,
        },
        groups,
        coordinates,
    })
}

/// Writes `series.csv`, `coordinates.csv` and `groups.csv` into `dir`.
pub fn write(dir: &Path, data: &SynthData) -> Result<()> {
    let t = &data.table;
    crate::io::write_wide(&dir.join("series.csv"), &t.timestamps, &t.node_ids, &t.values)?;
    let path = dir.join("coordinates.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| crate::io::csv_io(&path, e))?;
    w.write_record(["node_id", "x", "y"]).map_err(|e| crate::io::csv_io(&path, e))?;
    for (i, id) in t.node_ids.iter().enumerate() {
        let rec = [id.clone(), data.coordinates[(i, 0)].to_string(), data.coordinates[(i, 1)].to_string()];
        w.write_record(&rec).map_err(|e| crate::io::csv_io(&path, e))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    let path = dir.join("groups.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| crate::io::csv_io(&path, e))?;
    w.write_record(["node_id", "group"]).map_err(|e| crate::io::csv_io(&path, e))?;
    for (id, g) in t.node_ids.iter().zip(&data.groups) {
        w.write_record([id.as_str(), &g.letter().to_string()])
            .map_err(|e| crate::io::csv_io(&path, e))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))
}
