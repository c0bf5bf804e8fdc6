mod common;

use std::fs;
use std::path::{Path, PathBuf};

use gaia_core::bnn::BnnHyper;
use gaia_core::data::{generate_synthetic_with_truth, SyntheticSpec};
use gaia_core::harness::{
    pruning_sweep, read_results, results_path, run_matrix, run_matrix_limited, summarize, DataSource, HarnessError,
    Method, RunConfig,
};
use gaia_core::metrics::{accuracy, confusion_by_group, eod, hard_labels};
use gaia_core::objective::GaiaHyper;

fn tiny_config(out_dir: &Path) -> RunConfig {
    let spec = SyntheticSpec::new(400, 4, 0.1, 17).with_correlation(0.3);
    let mut cfg = RunConfig::new(DataSource::Synthetic(spec), out_dir);
    cfg.seeds = vec![0, 1];
    cfg.bnn = BnnHyper { hidden: vec![8, 8, 8], epochs: 2, j_eval: 8, ..BnnHyper::default() };
    cfg.gaia = GaiaHyper { epochs: 2, ..GaiaHyper::default() };
    cfg
}

#[test]
fn single_cell_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.methods = vec![Method::GaiaAls];
    cfg.seeds = vec![3];
    let rows = run_matrix(&cfg).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].error.is_empty(), "{}", rows[0].error);
    assert!(rows[0].accuracy.is_some());
    assert_eq!(read_results(&results_path(dir.path())).unwrap(), rows);
}

#[test]
fn rerun_and_resume_are_byte_identical() {
    let full = tempfile::tempdir().unwrap();
    let cfg = tiny_config(full.path());
    let first = run_matrix(&cfg).unwrap();
    assert_eq!(first.len(), 10);
    let bytes = fs::read(results_path(full.path())).unwrap();
    // A second run finds every cell done and appends nothing.
    assert_eq!(run_matrix(&cfg).unwrap(), first);
    assert_eq!(fs::read(results_path(full.path())).unwrap(), bytes);

    let resumed = tempfile::tempdir().unwrap();
    // Same config apart from the output directory: interrupt after three cells.
    let cfg2 = RunConfig { out_dir: resumed.path().to_path_buf(), ..cfg.clone() };
    assert_eq!(run_matrix_limited(&cfg2, 3).unwrap().len(), 3);
    run_matrix(&cfg2).unwrap();
    assert_eq!(fs::read(results_path(resumed.path())).unwrap(), bytes);
}

#[test]
fn changed_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.methods = vec![Method::Erm];
    cfg.seeds = vec![0];
    run_matrix(&cfg).unwrap();
    cfg.gaia.lr *= 2.0;
    assert!(matches!(run_matrix(&cfg), Err(HarnessError::ConfigMismatch { .. })));
}

#[test]
fn adult_matrix_arithmetic() {
    let mut cfg = RunConfig::new(DataSource::Adult { path: common::data_file("adult.csv") }, "unused");
    cfg.methods = vec![Method::Erm, Method::BnnAls, Method::GaiaAls];
    assert_eq!(cfg.cells().len(), 15);
    cfg.k_values = vec![0.5, 1.0, 2.0];
    assert_eq!(cfg.cells().len(), 5 * (2 + 3));
}

#[test]
fn summary_uses_sample_standard_deviation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.methods = vec![Method::Erm];
    cfg.seeds = vec![0, 1, 2];
    let rows = run_matrix(&cfg).unwrap();
    let acc: Vec<f64> = rows.iter().map(|r| r.accuracy.unwrap()).collect();
    let mean = acc.iter().sum::<f64>() / 3.0;
    let sd = (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    let s = summarize(&rows);
    let row = s.iter().find(|r| r.metric == "accuracy").unwrap();
    assert_eq!(row.n, 3);
    assert!((row.mean - mean).abs() < 1e-12 && (row.std - sd).abs() < 1e-12);
}

#[test]
fn pruning_noisy_samples_raises_accuracy() {
    let sd = generate_synthetic_with_truth(&SyntheticSpec::new(2000, 4, 0.2, 9)).unwrap();
    // Predict the clean label and flag exactly the flipped samples as uncertain.
    let probs: Vec<f64> = sd.true_labels.iter().map(|&y| y as f64).collect();
    let u: Vec<f64> = sd.flipped().iter().map(|&f| if f { 0.6 } else { 0.1 }).collect();
    let fractions = [0.0, 0.05, 0.1, 0.15];
    let rows = pruning_sweep(&probs, &u, &fractions, sd.dataset.labels(), sd.dataset.protected()).unwrap();
    assert!(rows.windows(2).all(|w| w[1].accuracy > w[0].accuracy));
    assert_eq!(rows.iter().map(|r| r.fraction).collect::<Vec<_>>(), fractions);
    // No pruning reproduces the plain evaluation.
    let preds = hard_labels(&probs, 0.5);
    assert_eq!(rows[0].accuracy, accuracy(&preds, sd.dataset.labels()).unwrap());
    let gc = confusion_by_group(&probs, sd.dataset.labels(), sd.dataset.protected(), 0.5).unwrap();
    assert_eq!(rows[0].eod, eod(&gc).ok());
    assert_eq!(rows[1].n_kept, 1900);
    assert!(matches!(
        pruning_sweep(&probs, &u, &[1.0], sd.dataset.labels(), sd.dataset.protected()),
        Err(HarnessError::BadFraction(_))
    ));
}

#[test]
fn shipped_configs_parse() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["adult.toml", "german.toml"] {
        let cfg = RunConfig::load(&root.join(name)).unwrap();
        assert_eq!(cfg.seeds.len(), 5);
        assert_eq!(cfg.methods, Method::ALL.to_vec());
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }
}
