use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use cadgmm::data::{
    apply_stats, inject_noise, load_and_encode, normalize, split_train_test, DatasetRecipe, LabeledDataset,
    NormStats, Split,
};
use cadgmm::{Error, Matrix, SeededRng};

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::File::create(&p).unwrap().write_all(text.as_bytes()).unwrap();
    p
}

fn recipe(dir: &Path, csv: &str, extra: &str) -> DatasetRecipe {
    write(dir, "d.csv", csv);
    let text = format!("name = toy\nsource = d.csv\nanomaly_labels = bad\n{extra}");
    DatasetRecipe::from_file(&write(dir, "toy.recipe", &text)).unwrap()
}

/// `n` rows, the first `anomalies` of them labeled anomalous.
fn synthetic(n: usize, anomalies: usize) -> LabeledDataset {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = SeededRng::new(1);
    let mut csv = String::new();
    for i in 0..n {
        let label = if i < anomalies { "bad" } else { "ok" };
        csv.push_str(&format!("{:.4},{:.4},{label}\n", rng.uniform(0.0, 10.0), rng.uniform(-3.0, 3.0)));
    }
    load_and_encode(&recipe(dir.path(), &csv, "")).unwrap()
}

#[test]
fn one_hot_in_first_appearance_order() {
    let dir = tempfile::tempdir().unwrap();
    let csv = "1.5,tcp,x,ok\n2.5,udp,y,bad\n3.5,tcp,z,ok\n4.5,icmp,x,ok\n";
    let ds = load_and_encode(&recipe(dir.path(), csv, "categorical = 1,2\n")).unwrap();
    assert_eq!(ds.n_features(), 1 + 3 + 3);
    assert_eq!(ds.labels, vec![0, 1, 0, 0]);
    assert_eq!(ds.features.row(1), &[2.5, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    assert_eq!(ds.features.row(3), &[4.5, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    assert_eq!(ds.recipe.categories[&1], vec!["tcp", "udp", "icmp"]);
    assert_eq!(ds.recipe.categories[&2], vec!["x", "y", "z"]);
    // argmax of each block recovers the category
    for (r, want) in ["tcp", "udp", "tcp", "icmp"].iter().enumerate() {
        let block = &ds.features.row(r)[1..4];
        let k = block.iter().position(|&v| v == 1.0).unwrap();
        assert_eq!(&ds.recipe.categories[&1][k], want);
    }
}

#[test]
fn frozen_categories_encode_unknowns_as_zero() {
    let dir = tempfile::tempdir().unwrap();
    let csv = "1,tcp,ok\n2,sctp,bad\n";
    let r = recipe(dir.path(), csv, "categorical = 1\ncategories.1 = udp|tcp\n");
    let ds = load_and_encode(&r).unwrap();
    assert_eq!(ds.features.row(0), &[1.0, 0.0, 1.0]);
    assert_eq!(ds.features.row(1), &[2.0, 0.0, 0.0]);
}

#[test]
fn wrong_arity_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let csv = "1,2,ok\n3,4,ok\n5,bad\n";
    let err = load_and_encode(&recipe(dir.path(), csv, "")).unwrap_err();
    match err {
        Error::Parse { line, .. } => assert_eq!(line, 3),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn non_numeric_value_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_and_encode(&recipe(dir.path(), "1,2,ok\nx,4,ok\n", "")).unwrap_err();
    assert!(err.to_string().contains(":2:"), "{err}");
}

#[test]
fn header_and_drop_columns() {
    let dir = tempfile::tempdir().unwrap();
    let csv = "a,b,c,class\n1,9,2,ok\n3,9,4,bad\n";
    let ds = load_and_encode(&recipe(dir.path(), csv, "header = true\ndrop_columns = 1\n")).unwrap();
    assert_eq!(ds.features, Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
}

#[test]
fn expected_feature_mismatch_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_and_encode(&recipe(dir.path(), "1,2,ok\n", "expected_features = 3\n")).unwrap_err();
    assert!(err.to_string().contains("expects 3"), "{err}");
}

#[test]
fn missing_source_is_io_error() {
    let r = DatasetRecipe::builtin("satellite", Path::new("/nonexistent")).unwrap();
    assert!(matches!(load_and_encode(&r), Err(Error::Io { .. })));
}

#[test]
fn missing_values_get_training_mean() {
    let dir = tempfile::tempdir().unwrap();
    let csv = "0,1,ok\n?,2,ok\n4,3,ok\n10,4,ok\n";
    let mut ds = load_and_encode(&recipe(dir.path(), csv, "")).unwrap();
    assert_eq!(ds.missing, vec![(1, 0)]);
    ds.split = Some(vec![Split::Train, Split::Train, Split::Train, Split::Test]);
    let ds = normalize(ds).unwrap();
    // training mean of column 0 is 2, range [0, 4]
    assert!((ds.features.get(1, 0) - 0.5).abs() < 1e-12);
    assert_eq!(ds.features.get(3, 0), 1.0);
    assert!(ds.missing.is_empty());
}

#[test]
fn normalize_examples() {
    let mut x = Matrix::new(3, 3, vec![0.0, 5.0, 0.2, 1.0, 5.0, 0.4, 0.5, 5.0, 2.0]).unwrap();
    let stats = NormStats {
        min: vec![0.0, 5.0, 0.2],
        max: vec![1.0, 5.0, 0.4],
    };
    apply_stats(&mut x, &stats);
    // unit column unchanged, constant column zero, out-of-range clipped
    assert_eq!((x.get(0, 0), x.get(1, 0), x.get(2, 0)), (0.0, 1.0, 0.5));
    assert_eq!((x.get(0, 1), x.get(1, 1), x.get(2, 1)), (0.0, 0.0, 0.0));
    assert_eq!(x.get(2, 2), 1.0);
}

#[test]
fn normalize_uses_training_rows_only() {
    let ds = split_train_test(synthetic(60, 10), 4);
    let ds = normalize(ds).unwrap();
    let train = ds.train_indices().unwrap();
    for c in 0..ds.n_features() {
        let vals: Vec<f64> = train.iter().map(|&r| ds.features.get(r, c)).collect();
        assert_eq!(vals.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 1.0);
    }
    assert!(ds.features.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn split_counts_and_determinism() {
    let ds = synthetic(100, 20);
    assert!((ds.anomaly_ratio() - 0.2).abs() < 1e-9);
    let a = split_train_test(ds.clone(), 7);
    let b = split_train_test(ds.clone(), 7);
    let c = split_train_test(ds, 8);
    assert_eq!(a.split, b.split);
    assert_ne!(a.split, c.split);
    assert_eq!(a.test_indices().unwrap().len(), 50);
    assert_eq!(a.train_indices().unwrap().len(), 50);
    let normals = a.train_normal_indices().unwrap().len();
    assert!((30..=50).contains(&normals), "{normals}");
    let train: HashSet<usize> = a.train_indices().unwrap().into_iter().collect();
    assert!(a.test_indices().unwrap().iter().all(|i| !train.contains(i)));
}

#[test]
fn noise_injection() {
    let ds = split_train_test(synthetic(400, 200), 3);
    let clean = inject_noise(&ds, 0.0, 1).unwrap();
    assert_eq!(clean.rows, ds.train_normal_indices().unwrap());
    assert!(clean.injected.is_empty());

    let noisy = inject_noise(&ds, 0.05, 1).unwrap();
    let normals = clean.rows.len();
    let expected = (0.05 * normals as f64 / 0.95).round() as usize;
    assert_eq!(noisy.injected.len(), expected);
    assert_eq!(noisy.rows.len(), normals + expected);
    let test: HashSet<usize> = ds.test_indices().unwrap().into_iter().collect();
    assert!(noisy.injected.iter().all(|i| !test.contains(i) && ds.labels[*i] == 1));
    assert_eq!(inject_noise(&ds, 0.05, 1).unwrap(), noisy);
}

#[test]
fn insufficient_anomaly_pool_rejected() {
    let ds = split_train_test(synthetic(100, 2), 3);
    match inject_noise(&ds, 0.5, 0) {
        Err(Error::InsufficientAnomalies { needed, available }) => assert!(needed > available),
        other => panic!("unexpected {other:?}"),
    }
}

fn data_dir() -> PathBuf {
    std::env::var_os("CADGMM_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

#[test]
fn satellite_encoding_when_available() {
    let r = DatasetRecipe::builtin("satellite", &data_dir()).unwrap();
    if !r.source.exists() {
        eprintln!("skipping: {} not present", r.source.display());
        return;
    }
    let ds = load_and_encode(&r).unwrap();
    assert_eq!((ds.len(), ds.n_features()), (6435, 36));
    assert!((ds.anomaly_ratio() - 0.32).abs() < 0.005);
    let split = split_train_test(ds.clone(), 0);
    let test = split.test_indices().unwrap();
    let ratio = test.iter().map(|&i| ds.labels[i] as f64).sum::<f64>() / test.len() as f64;
    assert!((ratio - ds.anomaly_ratio()).abs() < 0.02);
}
