//! File formats: CSV ingestion, checkpoints, configs and reports.

use std::path::Path;

use fairstg::checkpoint::{self, Meta};
use fairstg::config::{Config, CsvFormat};
use fairstg::io::{read_coordinates, read_distances, read_series, write_wide};
use fairstg::report::{compare, write_error_map, FairnessReport, MetricRow, Subgroup};
use fairstg::CliError;
use fairstg_core::data::NormalizationState;
use fairstg_core::model::{FairStg, ModelConfig};
use fairstg_core::params::ParamStore;
use fairstg_core::tensor::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn wide_and_long_files_give_the_same_table() {
    let dir = tempfile::tempdir().unwrap();
    let wide = write(
        dir.path(),
        "wide.csv",
        "timestamp,a,b\n2024-01-01T00:00:00Z,1,10\n2024-01-01T00:05:00Z,,11\n2024-01-01T00:10:00Z,3,12\n",
    );
    let long = write(
        dir.path(),
        "long.csv",
        "timestamp,node,value\n2024-01-01 00:10:00,b,12\n2024-01-01 00:00:00,a,1\n2024-01-01 00:00:00,b,10\n\
         2024-01-01 00:05:00,b,11\n2024-01-01 00:10:00,a,3\n",
    );
    let w = read_series(&wide, CsvFormat::Wide).unwrap();
    let mut l = read_series(&long, CsvFormat::Long).unwrap();
    assert_eq!(w.timestamps, l.timestamps);
    // long files list nodes in first-seen order
    assert_eq!(l.node_ids, ["b", "a"]);
    let swapped = Matrix::from_vec(2, 3, [l.values.row(1), l.values.row(0)].concat()).unwrap();
    l.values = swapped;
    l.node_ids.reverse();
    assert_eq!(w.node_ids, l.node_ids);
    assert!(w.values[(0, 1)].is_nan() && l.values[(0, 1)].is_nan());
    let dw = w.into_dataset(fairstg_core::data::MissingPolicy::ForwardFill).unwrap();
    let dl = l.into_dataset(fairstg_core::data::MissingPolicy::ForwardFill).unwrap();
    assert_eq!(dw.values, dl.values);
    assert_eq!(dw.values.row(0), &[1.0, 1.0, 3.0]);

    let out = dir.path().join("canon.csv");
    write_wide(&out, &dw.timestamps, &dw.node_ids, &dw.values).unwrap();
    let back = read_series(&out, CsvFormat::Wide).unwrap();
    assert_eq!(back.values, dw.values);
}

#[test]
fn malformed_cells_name_their_location() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "s.csv", "timestamp,a\n2024-01-01T00:00:00Z,1\n2024-01-01T00:05:00Z,x\n");
    match read_series(&p, CsvFormat::Wide) {
        Err(CliError::Data(m)) => assert!(m.contains("row 3, column 2"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn distances_are_mirrored_and_unknown_pairs_infinite() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "d.csv", "from,to,distance\na,b,2.5\nc,b,1\nb,c,4\n");
    let ids = ["a", "b", "c"].map(String::from);
    let d = read_distances(&p, &ids).unwrap();
    assert_eq!(d[(1, 0)], 2.5);
    assert_eq!((d[(2, 1)], d[(1, 2)]), (1.0, 4.0));
    assert!(d[(0, 2)].is_infinite());
    assert_eq!(d[(1, 1)], 0.0);
    let bad = write(dir.path(), "bad.csv", "from,to,distance\na,z,1\n");
    assert!(matches!(read_distances(&bad, &ids), Err(CliError::Data(_))));
    let coords = write(dir.path(), "c.csv", "node_id,x,y\na,0,0\nb,3,4\n");
    assert!(read_coordinates(&coords, &ids).is_err());
}

fn model(seed: u64) -> (ModelConfig, ParamStore) {
    let config = ModelConfig {
        num_nodes: 3,
        repr_dim: 6,
        temporal_channels: 4,
        head_hidden: 5,
        ..ModelConfig::default()
    };
    let mut store = ParamStore::new();
    FairStg::new(config.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (config, store)
}

#[test]
fn checkpoints_round_trip_at_f32_precision() {
    let (config, mut store) = model(4);
    store.round_to_f32();
    let norm = NormalizationState { mean: 50.0, std: 8.0 };
    let ids = ["a", "b", "c"].map(String::from);
    let meta = Meta {
        config: &config,
        norm: &norm,
        node_ids: &ids,
        ablation: "full",
        stage: "fairness",
        best_epoch: 7,
        best_val_mae: 1.25,
    };
    let bytes = checkpoint::encode(&store, &meta);
    let ck = checkpoint::decode(&bytes).unwrap();
    assert_eq!(ck.header.n, 3);
    assert_eq!(ck.header.norm(), norm);
    assert_eq!(ck.header.model_config(None).unwrap(), config);
    let (_, mut fresh) = model(99);
    ck.load_into(&mut fresh).unwrap();
    for ((_, n1, a), (_, n2, b)) in store.iter().zip(fresh.iter()) {
        assert_eq!((n1, a), (n2, b));
    }
    let json = String::from_utf8_lossy(&bytes[12..]);
    assert!(json.contains("\"N\":3") && json.contains("\"d_emb\":10"));

    assert!(checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(checkpoint::decode(&extra).is_err());
    let mut bad = bytes;
    bad[0] = b'X';
    assert!(checkpoint::decode(&bad).is_err());
}

#[test]
fn checkpoint_rejects_a_different_architecture() {
    let (config, store) = model(1);
    let norm = NormalizationState { mean: 0.0, std: 1.0 };
    let ids = ["a", "b", "c"].map(String::from);
    let meta = Meta {
        config: &config,
        norm: &norm,
        node_ids: &ids,
        ablation: "full",
        stage: "warmup",
        best_epoch: 0,
        best_val_mae: 1.0,
    };
    let ck = checkpoint::decode(&checkpoint::encode(&store, &meta)).unwrap();
    let mut other = ParamStore::new();
    let wider = ModelConfig {
        head_hidden: 9,
        ..config
    };
    FairStg::new(wider, &mut other, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(ck.load_into(&mut other).is_err());
}

#[test]
fn config_overrides_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "c.toml", "seed = 1\n[train]\nmu_f = 0.1\n");
    let c = Config::load(Some(&p), &["train.mu_f=0.5".into(), "eval.horizons=[1, 2]".into()]).unwrap();
    assert_eq!(c.train.mu_f, 0.5);
    assert_eq!(c.eval.horizons, [1, 2]);
    let snap = c.write_snapshot(dir.path()).unwrap();
    assert_eq!(Config::load(Some(&snap), &[]).unwrap(), c);
    let err = |o: &str| Config::load(Some(&p), &[o.to_string()]).unwrap_err().exit_code();
    assert_eq!(err("train.nope=1"), 2);
    assert_eq!(err("train.ablation=sideways"), 2);
    assert_eq!(err("data.ratios=[0.5, 0.5, 0.5]"), 2);
    assert_eq!(err("eval.horizons=[13]"), 2);
    assert_eq!(err("train.warmup_epochs=200"), 2);
    assert_eq!(err("no_equals_sign"), 2);
}

fn row(h: usize, mae: f64) -> MetricRow {
    MetricRow {
        horizon: h,
        mae,
        mape: Some(10.0),
        rmse: mae * 1.5,
        mae_var: mae * 2.0,
        mape_var: Some(4.0),
    }
}

fn report(per_node: Vec<Option<f64>>) -> FairnessReport {
    let g = Subgroup {
        mae: 1.0,
        mae_var: 0.5,
        count: 3,
    };
    FairnessReport {
        schema_version: 1,
        samples: 10,
        ablation: "full".into(),
        enhanced: true,
        horizons: vec![row(3, 1.0), row(12, 2.0)],
        overall: row(12, 1.5),
        easy30: g.clone(),
        challenging30: g,
        delta: None,
        recognizer_accuracy: Some(0.7),
        node_ids: vec!["a".into(), "b".into()],
        per_node_mape: per_node,
    }
}

#[test]
fn error_map_reports_improvement_as_a_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let base = report(vec![Some(10.0), Some(5.0)]);
    let fair = report(vec![Some(8.0), None]);
    let p = dir.path().join("map.csv");
    write_error_map(&p, &fair, None, Some(&base)).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "node_id,mape,mape_improvement");
    let cells: Vec<f64> = lines[1].split(',').skip(1).map(|c| c.parse().unwrap()).collect();
    assert!((cells[0] - 0.08).abs() < 1e-12 && (cells[1] - 0.02).abs() < 1e-12);
    assert_eq!(lines[2], "b,,");
    assert_eq!(lines.len(), 3);
}

#[test]
fn comparing_a_report_with_itself_is_neutral() {
    let r = report(vec![Some(3.0), Some(4.0)]);
    let c = compare(&r, &r).unwrap();
    assert_eq!(c.overall.delta, Some(1.0));
    assert!(c.horizons.iter().all(|h| h.mae_change == 0.0 && h.mae_var_change == 0.0));
    assert_eq!(c.per_node_improvement, [Some(0.0), Some(0.0)]);
    let mut other = r.clone();
    other.node_ids[1] = "z".into();
    assert!(compare(&r, &other).is_err());
}
