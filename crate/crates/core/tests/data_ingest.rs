use std::path::PathBuf;

use gaia_core::data::{
    self, generate_synthetic_with_truth, load_tabular, load_tabular_with, read_canonical, split, write_canonical,
    DataError, DatasetId, LoadOptions, SyntheticSpec,
};
use statrs::distribution::{ContinuousCDF, Normal};

fn data_file(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

#[test]
fn adult_row_accounting() {
    let ds = load_tabular(&data_file("adult.csv"), DatasetId::Adult).unwrap();
    let prov = ds.provenance();
    assert_eq!(prov.n_raw_rows, 48_842);
    assert_eq!(ds.n_samples(), 45_222);
    assert_eq!(prov.n_dropped_rows, 48_842 - 45_222);
    // Known marginals of the cleaned data.
    let positives = ds.labels().iter().filter(|&&y| y == 1).count();
    assert_eq!(positives, 11_208);
    let male = ds.protected().iter().filter(|&&a| a == 1).count();
    assert_eq!(male, 30_527);
    assert!(ds.feature_names().iter().all(|n| !n.starts_with("fnlwgt") && !n.starts_with("education=")));
}

#[test]
fn german_row_accounting() {
    let ds = load_tabular(&data_file("german.csv"), DatasetId::German).unwrap();
    assert_eq!(ds.n_samples(), 1000);
    assert_eq!(ds.provenance().n_dropped_rows, 0);
    assert_eq!(ds.labels().iter().filter(|&&y| y == 1).count(), 700);
    assert_eq!(ds.protected().iter().filter(|&&a| a == 1).count(), 690);
}

#[test]
fn header_only_file_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let src = std::fs::read_to_string(data_file("german.csv")).unwrap();
    let header = src.lines().next().unwrap();
    let p = dir.path().join("g.csv");
    std::fs::write(&p, format!("{header}\n")).unwrap();
    assert!(matches!(load_tabular(&p, DatasetId::German), Err(DataError::EmptyDataset)));
}

#[test]
fn missing_column_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.csv");
    std::fs::write(&p, "age,sex\n30,Male\n").unwrap();
    assert!(matches!(load_tabular(&p, DatasetId::Adult), Err(DataError::MissingColumn(_))));
}

#[test]
fn strict_mode_rejects_malformed_rows() {
    let dir = tempfile::tempdir().unwrap();
    let src = std::fs::read_to_string(data_file("german.csv")).unwrap();
    let mut lines: Vec<String> = src.lines().take(6).map(String::from).collect();
    let mut fields: Vec<&str> = lines[3].split(',').collect();
    fields[1] = "six";
    lines[3] = fields.join(",");
    let p = dir.path().join("g.csv");
    std::fs::write(&p, lines.join("\n") + "\n").unwrap();
    let lenient = load_tabular_with(&p, DatasetId::German, LoadOptions { strict: false }).unwrap();
    assert_eq!(lenient.n_samples(), 4);
    assert_eq!(lenient.provenance().n_dropped_rows, 1);
    assert!(matches!(
        load_tabular_with(&p, DatasetId::German, LoadOptions { strict: true }),
        Err(DataError::UnparseableRow(_))
    ));
}

#[test]
fn canonical_round_trip_is_exact() {
    let ds = load_tabular(&data_file("german.csv"), DatasetId::German).unwrap();
    let (train, _, _) = split(&ds, (0.7, 0.1, 0.2), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("train.csv");
    write_canonical(&train, &p).unwrap();
    let back = read_canonical(&p).unwrap();
    assert_eq!(back.features(), train.features());
    assert_eq!(back.labels(), train.labels());
    assert_eq!(back.protected(), train.protected());
    assert_eq!(back.feature_names(), train.feature_names());
    assert_eq!(back.scaling(), train.scaling());
    assert_eq!(back.split_tag(), train.split_tag());
}

#[test]
fn split_is_deterministic_and_disjoint() {
    let ds = load_tabular(&data_file("german.csv"), DatasetId::German).unwrap();
    let a = split(&ds, (0.7, 0.1, 0.2), 11).unwrap();
    let b = split(&ds, (0.7, 0.1, 0.2), 11).unwrap();
    assert_eq!(a.0.features(), b.0.features());
    assert_eq!(a.2.labels(), b.2.labels());
    assert_eq!((a.0.n_samples(), a.1.n_samples(), a.2.n_samples()), (700, 100, 200));
    let c = split(&ds, (0.7, 0.1, 0.2), 12).unwrap();
    assert_ne!(a.2.features(), c.2.features());
    // Train numeric columns are standardized.
    for &j in a.0.numeric_columns() {
        let col = a.0.features().column(j);
        let mean = col.mean().unwrap();
        let var = col.mapv(|v| (v - mean).powi(2)).mean().unwrap();
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
    }
}

#[test]
fn synthetic_flip_rate_within_three_standard_errors() {
    let (n, eta) = (4000usize, 0.2);
    let se = (eta * (1.0 - eta) / n as f64).sqrt();
    for seed in 0..10 {
        let sd = generate_synthetic_with_truth(&SyntheticSpec::new(n, 4, eta, seed)).unwrap();
        let rate = sd.flipped().iter().filter(|&&f| f).count() as f64 / n as f64;
        assert!((rate - eta).abs() < 3.0 * se, "seed {seed}: flip rate {rate}");
    }
}

#[test]
fn synthetic_attribute_correlation_matches_target() {
    for rho in [0.0, 0.3, 0.6] {
        let ds = data::generate_synthetic(&SyntheticSpec::new(20_000, 3, 0.1, 5).with_correlation(rho)).unwrap();
        let got = ds.attr_label_correlation();
        assert!((got - rho).abs() < 0.05, "target {rho}, got {got}");
    }
}

#[test]
fn synthetic_bayes_accuracy_matches_normal_cdf() {
    // The Bayes rule sign(sum x) has clean-label accuracy Phi(separation).
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    for sep in [1.0, 2.0] {
        let n = 20_000;
        let sd = generate_synthetic_with_truth(&SyntheticSpec::new(n, 6, 0.0, 8).with_separation(sep)).unwrap();
        let hits = sd
            .dataset
            .features()
            .rows()
            .into_iter()
            .zip(&sd.true_labels)
            .filter(|(r, &y)| (r.sum() > 0.0) == (y == 1))
            .count();
        let acc = hits as f64 / n as f64;
        let expect = std_normal.cdf(sep);
        let se = (expect * (1.0 - expect) / n as f64).sqrt();
        assert!((acc - expect).abs() < 4.0 * se, "sep {sep}: {acc} vs {expect}");
    }
}

#[test]
fn synthetic_rejects_bad_specs() {
    assert!(data::generate_synthetic(&SyntheticSpec::new(100, 2, 0.7, 0)).is_err());
    assert!(data::generate_synthetic(&SyntheticSpec::new(0, 2, 0.1, 0)).is_err());
    assert!(data::generate_synthetic(&SyntheticSpec::new(100, 2, 0.1, 0).with_correlation(1.5)).is_err());
}
