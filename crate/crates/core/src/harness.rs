//! Experiment orchestration: the method × seed matrix, uncertainty pruning,
//! Pareto fronts and the two theorem checks.
//!
//! Results go to `<out_dir>/results.csv` (append-only, one row per
//! method/seed, byte-identical across reruns), `<out_dir>/manifest.json`
//! (config plus its SHA-256) and `<out_dir>/timings.csv` (wall times, kept
//! apart because they are not reproducible).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bnn::{self, BnnHyper, UncertaintyProfile};
use crate::data::{self, DataError, Dataset, DatasetId, SyntheticSpec};
use crate::metrics::{self, Evaluation, FairnessReport, KnnGraph, MetricsError};
use crate::objective::{self, BetaConfig, GaiaHyper};
use crate::rng::{self, streams};
use crate::sampler::BatchMode;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Bnn(#[from] bnn::BnnError),
    #[error(transparent)]
    Objective(#[from] objective::ObjectiveError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("pruning fraction {0} leaves no sample of one class")]
    EmptyRemainder(f64),
    #[error("pruning fraction {0} outside [0, 1)")]
    BadFraction(f64),
    #[error("{dir} holds results for config {found}, current config is {expected}")]
    ConfigMismatch { dir: PathBuf, found: String, expected: String },
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("toml: {0}")]
    Toml(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Method {
    Erm,
    BnnLs,
    BnnAls,
    GaiaLs,
    GaiaAls,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Erm, Method::BnnLs, Method::BnnAls, Method::GaiaLs, Method::GaiaAls];

    /// Batch mode of the uncertainty network the method depends on.
    pub fn bnn_mode(self) -> Option<BatchMode> {
        match self {
            Method::Erm => None,
            Method::BnnLs | Method::GaiaLs => Some(BatchMode::Ls),
            Method::BnnAls | Method::GaiaAls => Some(BatchMode::Als),
        }
    }

    pub fn uses_k(self) -> bool {
        matches!(self, Method::GaiaLs | Method::GaiaAls)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::BnnLs => "bnn_ls",
            Method::BnnAls => "bnn_als",
            Method::GaiaLs => "gaia_ls",
            Method::GaiaAls => "gaia_als",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where the data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    /// Raw UCI file, split with `RunConfig::splits`.
    Adult {
        path: PathBuf,
    },
    German {
        path: PathBuf,
    },
    Synthetic(SyntheticSpec),
    /// Output directory of `prepare-data` (`train.csv`, `validation.csv`, `test.csv`).
    Prepared {
        dir: PathBuf,
    },
}

fn default_splits() -> (f64, f64, f64) {
    (0.7, 0.1, 0.2)
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_cs_k() -> usize {
    5
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

/// Everything that determines a matrix run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_splits")]
    pub splits: (f64, f64, f64),
    /// Seed of the train/validation/test partition, shared by all runs.
    #[serde(default)]
    pub split_seed: u64,
    /// Neighbors for the consistency score.
    #[serde(default = "default_cs_k")]
    pub cs_k: usize,
    /// Exponents swept for the GAIA methods; empty means just `gaia.k`.
    #[serde(default)]
    pub k_values: Vec<f64>,
    pub dataset: DataSource,
    #[serde(default)]
    pub bnn: BnnHyper,
    #[serde(default)]
    pub gaia: GaiaHyper,
}

impl RunConfig {
    pub fn new(dataset: DataSource, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            methods: default_methods(),
            seeds: default_seeds(),
            splits: default_splits(),
            split_seed: 0,
            cs_k: default_cs_k(),
            k_values: Vec::new(),
            dataset,
            bnn: BnnHyper::default(),
            gaia: GaiaHyper::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HarnessError::Toml(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::Toml(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config always serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Every cell of the matrix in execution order (seed-major).
    pub fn cells(&self) -> Vec<CellKey> {
        let ks: Vec<f64> = if self.k_values.is_empty() { vec![self.gaia.k] } else { self.k_values.clone() };
        let mut out = Vec::new();
        for &seed in &self.seeds {
            for &method in &self.methods {
                if method.uses_k() {
                    out.extend(ks.iter().map(|&k| CellKey::new(method, seed, Some(k))));
                } else {
                    out.push(CellKey::new(method, seed, None));
                }
            }
        }
        out
    }
}

/// Identity of one matrix cell. `k` is stored by bit pattern so keys are
/// totally ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    pub method: Method,
    pub seed: u64,
    k_bits: Option<u64>,
}

impl CellKey {
    pub fn new(method: Method, seed: u64, k: Option<f64>) -> Self {
        Self { method, seed, k_bits: k.map(f64::to_bits) }
    }

    pub fn k(&self) -> Option<f64> {
        self.k_bits.map(f64::from_bits)
    }
}

/// One (method, seed) outcome on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub seed: u64,
    /// Beta exponent, for the GAIA methods.
    pub k: Option<f64>,
    pub accuracy: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub aod: Option<f64>,
    pub eod: Option<f64>,
    pub ge: Option<f64>,
    pub cs: Option<f64>,
    pub bce_diff: Option<f64>,
    pub mean_aleatoric: Option<f64>,
    /// `;`-separated names of metrics that could not be computed.
    pub undefined: String,
    /// Failure message when the run itself failed.
    pub error: String,
}

impl ResultRow {
    fn from_report(key: CellKey, rep: &FairnessReport, mean_aleatoric: Option<f64>) -> Self {
        let mut undefined: Vec<String> =
            rep.undefined_flags.iter().map(|f| f.split(':').next().unwrap_or(f).to_string()).collect();
        if mean_aleatoric.is_none() {
            undefined.push("mean_aleatoric".into());
        }
        Self {
            method: key.method,
            seed: key.seed,
            k: key.k(),
            accuracy: rep.accuracy,
            balanced_accuracy: rep.balanced_accuracy,
            aod: rep.aod,
            eod: rep.eod,
            ge: rep.ge,
            cs: rep.cs,
            bce_diff: rep.bce_diff,
            mean_aleatoric,
            undefined: undefined.join(";"),
            error: String::new(),
        }
    }

    /// Row with every metric missing.
    pub fn empty(method: Method, seed: u64, k: Option<f64>) -> Self {
        Self {
            method,
            seed,
            k,
            accuracy: None,
            balanced_accuracy: None,
            aod: None,
            eod: None,
            ge: None,
            cs: None,
            bce_diff: None,
            mean_aleatoric: None,
            undefined: String::new(),
            error: String::new(),
        }
    }

    fn failed(key: CellKey, err: &HarnessError) -> Self {
        Self { error: err.to_string(), ..Self::empty(key.method, key.seed, key.k()) }
    }

    pub fn key(&self) -> CellKey {
        CellKey::new(self.method, self.seed, self.k)
    }

    pub fn metric(&self, key: MetricKey) -> Option<f64> {
        match key {
            MetricKey::Accuracy => self.accuracy,
            MetricKey::BalancedAccuracy => self.balanced_accuracy,
            MetricKey::Aod => self.aod,
            MetricKey::Eod => self.eod,
            MetricKey::Ge => self.ge,
            MetricKey::Cs => self.cs,
            MetricKey::BceDiff => self.bce_diff,
        }
    }
}

/// Metric columns usable as Pareto axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum MetricKey {
    Accuracy,
    BalancedAccuracy,
    Aod,
    Eod,
    Ge,
    Cs,
    BceDiff,
}

impl MetricKey {
    pub fn higher_is_better(self) -> bool {
        matches!(self, MetricKey::Accuracy | MetricKey::BalancedAccuracy | MetricKey::Cs)
    }

    /// Value oriented so that larger is always better.
    fn oriented(self, v: f64) -> f64 {
        if self.higher_is_better() {
            v
        } else {
            -v
        }
    }
}

/// The three partitions of a prepared dataset.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

pub fn load_splits(source: &DataSource, splits: (f64, f64, f64), split_seed: u64) -> Result<Splits> {
    let full = match source {
        DataSource::Adult { path } => data::load_tabular(path, DatasetId::Adult)?,
        DataSource::German { path } => data::load_tabular(path, DatasetId::German)?,
        DataSource::Synthetic(spec) => data::generate_synthetic(spec)?,
        DataSource::Prepared { dir } => {
            return Ok(Splits {
                train: data::read_canonical(&dir.join("train.csv"))?,
                validation: data::read_canonical(&dir.join("validation.csv"))?,
                test: data::read_canonical(&dir.join("test.csv"))?,
            })
        }
    };
    let (train, validation, test) = data::split(&full, splits, split_seed)?;
    Ok(Splits { train, validation, test })
}

/// Trained uncertainty network plus its outputs on train and test.
#[derive(Debug, Clone)]
pub struct BnnOutputs {
    pub fit: bnn::BnnFit,
    pub test_profile: UncertaintyProfile,
    pub test_probs: Vec<f64>,
}

/// Predictions of one method on the test split.
#[derive(Debug, Clone)]
pub struct CellOutput {
    pub method: Method,
    pub seed: u64,
    pub test_probs: Vec<f64>,
    /// Aleatoric uncertainty of the test samples, when the method has a BNN.
    pub test_aleatoric: Option<Vec<f64>>,
    pub report: FairnessReport,
}

/// Data, neighbor graph and per-seed BNN cache shared by the cells of a matrix.
pub struct Experiment {
    pub splits: Splits,
    pub bnn: BnnHyper,
    pub gaia: GaiaHyper,
    knn: Option<KnnGraph>,
    cache: HashMap<(BatchMode, u64), BnnOutputs>,
}

impl Experiment {
    pub fn new(splits: Splits, bnn: BnnHyper, gaia: GaiaHyper, cs_k: usize) -> Self {
        let knn = KnnGraph::build(splits.test.features().view(), cs_k)
            .map_err(|e| log::warn!("consistency score disabled: {e}"))
            .ok();
        Self { splits, bnn, gaia, knn, cache: HashMap::new() }
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let splits = load_splits(&cfg.dataset, cfg.splits, cfg.split_seed)?;
        Ok(Self::new(splits, cfg.bnn.clone(), cfg.gaia.clone(), cfg.cs_k))
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn knn(&self) -> Option<&KnnGraph> {
        self.knn.as_ref()
    }

    /// BNN for `(mode, seed)`, trained on first use.
    pub fn bnn_outputs(&mut self, mode: BatchMode, seed: u64) -> Result<&BnnOutputs> {
        if !self.cache.contains_key(&(mode, seed)) {
            let fit = bnn::train_bnn(&self.splits.train, mode, &self.bnn, seed)?;
            let mut eval_rng = rng::substream(seed, streams::TEST_EVAL);
            let pp = bnn::sample_forward(&fit.net, self.splits.test.features().view(), self.bnn.j_eval, &mut eval_rng)?;
            let test_profile = bnn::decompose_uncertainty(&pp);
            let out = BnnOutputs { fit, test_profile, test_probs: pp.mean_prob };
            self.cache.insert((mode, seed), out);
        }
        Ok(&self.cache[&(mode, seed)])
    }

    /// Drop cached networks for `seed`.
    pub fn forget_seed(&mut self, seed: u64) {
        self.cache.retain(|&(_, s), _| s != seed);
    }

    /// Run one cell; GAIA cells use the cell's `k` in place of `gaia.k`.
    pub fn run_cell(&mut self, key: CellKey) -> Result<CellOutput> {
        let saved = self.gaia.k;
        if let Some(k) = key.k() {
            self.gaia.k = k;
        }
        let out = self.run(key.method, key.seed);
        self.gaia.k = saved;
        out
    }

    pub fn run(&mut self, method: Method, seed: u64) -> Result<CellOutput> {
        let (test_probs, test_aleatoric) = match method {
            Method::Erm => {
                let fit = objective::train_erm(&self.splits.train, &self.gaia, seed)?;
                (fit.model.predict_proba(self.splits.test.features().view())?, None)
            }
            Method::BnnLs | Method::BnnAls => {
                let out = self.bnn_outputs(method.bnn_mode().expect("bnn method"), seed)?;
                (out.test_probs.clone(), Some(out.test_profile.aleatoric.clone()))
            }
            Method::GaiaLs | Method::GaiaAls => {
                let mode = method.bnn_mode().expect("gaia method");
                let gaia = self.gaia.clone();
                let out = self.bnn_outputs(mode, seed)?.clone();
                let cfg =
                    BetaConfig::from_percentiles(&out.fit.profile.aleatoric, gaia.umin_pct, gaia.umax_pct, gaia.k)?;
                let fit = objective::train_gaia(&self.splits.train, &out.fit.profile, &cfg, mode, &gaia, seed)?;
                let x_test = objective::augment(
                    self.splits.test.features().view(),
                    Some(&out.test_profile),
                    gaia.uncertainty_inputs,
                )?;
                (fit.model.predict_proba(x_test.view())?, Some(out.test_profile.aleatoric))
            }
        };
        let report = FairnessReport::compute(&Evaluation {
            probs: &test_probs,
            true_labels: self.splits.test.labels(),
            protected: self.splits.test.protected(),
            knn: self.knn.as_ref(),
        })?;
        Ok(CellOutput { method, seed, test_probs, test_aleatoric, report })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub config: RunConfig,
    pub expected_rows: usize,
}

pub fn results_path(out_dir: &Path) -> PathBuf {
    out_dir.join("results.csv")
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn append_row(path: &Path, row: &ResultRow) -> Result<()> {
    let fresh = !path.exists();
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(row)?;
    w.flush()?;
    Ok(())
}

fn check_manifest(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("manifest.json");
    let expected = cfg.hash();
    if path.exists() {
        let m: Manifest = serde_json::from_slice(&fs::read(&path)?)?;
        if m.config_hash != expected {
            return Err(HarnessError::ConfigMismatch { dir: cfg.out_dir.clone(), found: m.config_hash, expected });
        }
        return Ok(());
    }
    let m = Manifest { config_hash: expected, config: cfg.clone(), expected_rows: cfg.cells().len() };
    fs::write(&path, serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

/// Run every (method, seed) cell not already in `results.csv`, appending as
/// it goes. Failed cells are recorded with their error and the matrix moves
/// on. Returns all rows in matrix order (seed-major).
pub fn run_matrix(cfg: &RunConfig) -> Result<Vec<ResultRow>> {
    run_matrix_limited(cfg, usize::MAX)
}

/// [`run_matrix`] that stops after computing `max_new` cells; used to
/// simulate interruption.
pub fn run_matrix_limited(cfg: &RunConfig, max_new: usize) -> Result<Vec<ResultRow>> {
    if cfg.methods.is_empty() || cfg.seeds.is_empty() {
        return Err(HarnessError::BadConfig("methods and seeds must be non-empty".into()));
    }
    check_manifest(cfg)?;
    let results = results_path(&cfg.out_dir);
    let mut done: BTreeMap<CellKey, ResultRow> = read_results(&results)?.into_iter().map(|r| (r.key(), r)).collect();
    let cells = cfg.cells();
    let pending: Vec<CellKey> = cells.iter().filter(|k| !done.contains_key(k)).copied().collect();
    if !pending.is_empty() {
        let mut exp = Experiment::from_config(cfg)?;
        let mut timings = OpenOptions::new().create(true).append(true).open(cfg.out_dir.join("timings.csv"))?;
        let mut last_seed = None;
        for key in pending.into_iter().take(max_new) {
            if last_seed.is_some_and(|s| s != key.seed) {
                exp.forget_seed(last_seed.expect("checked"));
            }
            last_seed = Some(key.seed);
            let start = Instant::now();
            let row = match exp.run_cell(key) {
                Ok(cell) => {
                    let mean_u = cell.test_aleatoric.as_ref().map(|u| u.iter().sum::<f64>() / u.len() as f64);
                    ResultRow::from_report(key, &cell.report, mean_u)
                }
                Err(e) => {
                    log::error!("{} seed {} failed: {e}", key.method, key.seed);
                    ResultRow::failed(key, &e)
                }
            };
            let secs = start.elapsed().as_secs_f64();
            log::info!("{} seed {} done in {secs:.1}s", key.method, key.seed);
            append_row(&results, &row)?;
            let k = key.k().map(|k| k.to_string()).unwrap_or_default();
            writeln!(timings, "{},{},{k},{secs:.3}", key.method, key.seed)?;
            done.insert(key, row);
        }
    }
    Ok(cells.iter().filter_map(|k| done.get(k).cloned()).collect())
}

/// Mean and sample standard deviation of one metric for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub k: Option<f64>,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Long-format (method, metric, mean, std, n) summary over seeds. Undefined
/// values are left out of the aggregate.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    type Getter = fn(&ResultRow) -> Option<f64>;
    let metrics: [(&str, Getter); 8] = [
        ("accuracy", |r| r.accuracy),
        ("balanced_accuracy", |r| r.balanced_accuracy),
        ("aod", |r| r.aod),
        ("eod", |r| r.eod),
        ("ge", |r| r.ge),
        ("cs", |r| r.cs),
        ("bce_diff", |r| r.bce_diff),
        ("mean_aleatoric", |r| r.mean_aleatoric),
    ];
    let mut groups: Vec<(Method, Option<u64>)> = rows.iter().map(|r| (r.method, r.k.map(f64::to_bits))).collect();
    groups.sort();
    groups.dedup();
    let mut out = Vec::new();
    for (m, k) in groups {
        let members: Vec<&ResultRow> = rows.iter().filter(|r| r.method == m && r.k.map(f64::to_bits) == k).collect();
        for (name, get) in &metrics {
            let v: Vec<f64> = members.iter().copied().filter_map(get).collect();
            if v.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&v);
            out.push(SummaryRow {
                method: m,
                k: k.map(f64::from_bits),
                metric: name.to_string(),
                mean,
                std,
                n: v.len(),
            });
        }
    }
    out
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, std)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRow {
    pub fraction: f64,
    pub n_kept: usize,
    pub accuracy: f64,
    pub eod: Option<f64>,
}

/// For each fraction `q`, drop the `floor(q n)` test samples with the
/// highest aleatoric uncertainty (ties: higher index dropped first) and
/// re-score the rest. Rows come back in input order.
pub fn pruning_sweep(
    probs: &[f64],
    aleatoric: &[f64],
    fractions: &[f64],
    labels: &[u8],
    protected: &[u8],
) -> Result<Vec<PruneRow>> {
    let n = probs.len();
    for (name, len) in [("aleatoric", aleatoric.len()), ("labels", labels.len()), ("protected", protected.len())] {
        if len != n {
            return Err(MetricsError::LengthMismatch(format!("{name} has {len} entries, expected {n}")).into());
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| aleatoric[a].total_cmp(&aleatoric[b]).then(a.cmp(&b)));
    let mut rows = Vec::with_capacity(fractions.len());
    for &q in fractions {
        if !(0.0..1.0).contains(&q) {
            return Err(HarnessError::BadFraction(q));
        }
        let n_drop = (q * n as f64 + 1e-9).floor() as usize;
        let kept = &order[..n - n_drop];
        let p: Vec<f64> = kept.iter().map(|&i| probs[i]).collect();
        let y: Vec<u8> = kept.iter().map(|&i| labels[i]).collect();
        let a: Vec<u8> = kept.iter().map(|&i| protected[i]).collect();
        if !y.contains(&0) || !y.contains(&1) {
            return Err(HarnessError::EmptyRemainder(q));
        }
        let preds = metrics::hard_labels(&p, 0.5);
        let accuracy = metrics::accuracy(&preds, &y)?;
        let gc = metrics::confusion_by_group(&p, &y, &a, 0.5)?;
        rows.push(PruneRow { fraction: q, n_kept: kept.len(), accuracy, eod: metrics::eod(&gc).ok() });
    }
    Ok(rows)
}

/// Indices of the non-dominated points. Each point is `(utility, fairness)`
/// already oriented so that larger is better on both axes. Points with a
/// NaN coordinate are never on the front.
pub fn pareto_indices(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).filter(|&i| !points[i].0.is_nan() && !points[i].1.is_nan()).collect();
    order.sort_by(|&a, &b| points[b].0.total_cmp(&points[a].0));
    let mut on_front = vec![false; points.len()];
    let mut best_before = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        // Group of equal utility.
        let mut j = i;
        while j < order.len() && points[order[j]].0 == points[order[i]].0 {
            j += 1;
        }
        let group_max = order[i..j].iter().map(|&k| points[k].1).fold(f64::NEG_INFINITY, f64::max);
        for &k in &order[i..j] {
            let f = points[k].1;
            on_front[k] = f == group_max && best_before < f;
        }
        best_before = best_before.max(group_max);
        i = j;
    }
    (0..points.len()).filter(|&k| on_front[k]).collect()
}

/// Non-dominated rows under `(utility, fairness)`, in input order. Rows
/// missing either metric are skipped.
pub fn pareto_front(rows: &[ResultRow], utility: MetricKey, fairness: MetricKey) -> Vec<ResultRow> {
    let points: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| match (r.metric(utility), r.metric(fairness)) {
            (Some(u), Some(f)) => (utility.oriented(u), fairness.oriented(f)),
            _ => (f64::NAN, f64::NAN),
        })
        .collect();
    pareto_indices(&points).into_iter().map(|i| rows[i].clone()).collect()
}

// ---------------------------------------------------------------------------
// Theorem checks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// Inputs had no variance; nothing to test.
    Degenerate,
}

impl CheckStatus {
    fn from_bool(ok: bool) -> Self {
        if ok {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseLeg {
    pub eta: f64,
    pub test_accuracy: f64,
    pub mean_aleatoric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepReport {
    pub legs: Vec<NoiseLeg>,
    pub slack: f64,
    pub accuracy_non_increasing: CheckStatus,
    pub terminal_accuracy_in_range: CheckStatus,
    pub entropy_non_decreasing: CheckStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorReport {
    pub n_predictors: usize,
    pub n_excluded: usize,
    pub spearman: Option<f64>,
    pub threshold: f64,
    pub status: CheckStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub seed: u64,
    pub noise_sweep: NoiseSweepReport,
    pub predictors: PredictorReport,
}

impl TheoremReport {
    /// True iff no check failed.
    pub fn passed(&self) -> bool {
        let s = &self.noise_sweep;
        [s.accuracy_non_increasing, s.terminal_accuracy_in_range, s.entropy_non_decreasing, self.predictors.status]
            .iter()
            .all(|&c| c != CheckStatus::Fail)
    }
}

/// Settings of the noise sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepConfig {
    pub etas: Vec<f64>,
    pub n_samples: usize,
    pub n_features: usize,
    pub slack: f64,
    pub terminal_range: (f64, f64),
    pub bnn: BnnHyper,
}

impl Default for NoiseSweepConfig {
    fn default() -> Self {
        Self {
            etas: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            n_samples: 10_000,
            n_features: 8,
            slack: 0.02,
            terminal_range: (0.45, 0.55),
            bnn: BnnHyper { hidden: vec![32, 32, 32], epochs: 5, j_eval: 32, ..BnnHyper::default() },
        }
    }
}

/// Train a BNN (label-shift batches) on synthetic data at each noise level
/// and record test accuracy against the observed labels and mean aleatoric
/// entropy on the test split.
pub fn noise_sweep(cfg: &NoiseSweepConfig, seed: u64) -> Result<NoiseSweepReport> {
    let mut legs = Vec::with_capacity(cfg.etas.len());
    for (i, &eta) in cfg.etas.iter().enumerate() {
        let spec =
            SyntheticSpec::new(cfg.n_samples, cfg.n_features, eta, seed.wrapping_mul(1000).wrapping_add(i as u64));
        let ds = data::generate_synthetic(&spec)?;
        let (train, _, test) = data::split(&ds, (0.8, 0.0, 0.2), seed)?;
        let fit = bnn::train_bnn(&train, BatchMode::Ls, &cfg.bnn, seed)?;
        let mut eval_rng = rng::substream(seed, streams::TEST_EVAL);
        let pp = bnn::sample_forward(&fit.net, test.features().view(), cfg.bnn.j_eval, &mut eval_rng)?;
        let profile = bnn::decompose_uncertainty(&pp);
        let preds = metrics::hard_labels(&pp.mean_prob, 0.5);
        legs.push(NoiseLeg {
            eta,
            test_accuracy: metrics::accuracy(&preds, test.labels())?,
            mean_aleatoric: profile.mean_aleatoric(),
        });
    }
    let acc_ok = legs.windows(2).all(|w| w[1].test_accuracy <= w[0].test_accuracy + cfg.slack);
    let ent_ok = legs.windows(2).all(|w| w[1].mean_aleatoric + cfg.slack >= w[0].mean_aleatoric);
    let terminal_ok =
        legs.last().is_some_and(|l| l.test_accuracy >= cfg.terminal_range.0 && l.test_accuracy <= cfg.terminal_range.1);
    Ok(NoiseSweepReport {
        legs,
        slack: cfg.slack,
        accuracy_non_increasing: CheckStatus::from_bool(acc_ok),
        terminal_accuracy_in_range: CheckStatus::from_bool(terminal_ok),
        entropy_non_decreasing: CheckStatus::from_bool(ent_ok),
    })
}

/// Probabilities of `n_predictors` random scorers on `ds`. Each scorer is
/// `sigmoid(x . 1/sqrt(d) + tau_a xi + b_a)` with per-group noise scale
/// `tau_a ~ U(0, 3)`, per-group offset `b_a ~ N(0, 0.3)` and fresh
/// per-sample noise `xi ~ N(0, 1)`, so groups differ in both calibration
/// and error rates by varying amounts.
pub fn random_predictors<R: Rng + ?Sized>(ds: &Dataset, n_predictors: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let d = ds.n_features();
    let scale = 1.0 / (d as f64).sqrt();
    let proj: Vec<f64> = ds.features().rows().into_iter().map(|r| r.sum() * scale).collect();
    let tau_dist = Uniform::new(0.0, 3.0).expect("valid range");
    let b_dist = Normal::new(0.0, 0.3).expect("valid std");
    (0..n_predictors)
        .map(|_| {
            let tau = [tau_dist.sample(rng), tau_dist.sample(rng)];
            let b = [b_dist.sample(rng), b_dist.sample(rng)];
            proj.iter()
                .zip(ds.protected())
                .map(|(&z, &a)| {
                    let xi: f64 = StandardNormal.sample(rng);
                    bnn::sigmoid(z + tau[a as usize] * xi + b[a as usize])
                })
                .collect()
        })
        .collect()
}

/// Spearman correlation between the group BCE gap and AOD across
/// `predictors`. Predictors where either is undefined are excluded.
pub fn bce_aod_rank_correlation(ds: &Dataset, predictors: &[Vec<f64>]) -> (Option<f64>, usize) {
    let mut bce = Vec::new();
    let mut aod = Vec::new();
    let mut excluded = 0;
    for p in predictors {
        let b = metrics::bce_group_difference(p, ds.labels(), ds.protected());
        let a = metrics::confusion_by_group(p, ds.labels(), ds.protected(), 0.5).and_then(|gc| metrics::aod(&gc));
        match (b, a) {
            (Ok(b), Ok(a)) => {
                bce.push(b);
                aod.push(a);
            }
            _ => excluded += 1,
        }
    }
    (metrics::spearman(&bce, &aod), excluded)
}

pub fn predictor_check(seed: u64, n_predictors: usize, threshold: f64) -> Result<PredictorReport> {
    let spec = SyntheticSpec::new(5000, 8, 0.1, seed).with_correlation(0.3);
    let ds = data::generate_synthetic(&spec)?;
    let mut r = rng::substream(seed, streams::PREDICTORS);
    let preds = random_predictors(&ds, n_predictors, &mut r);
    let (rho, excluded) = bce_aod_rank_correlation(&ds, &preds);
    let status = match rho {
        None => CheckStatus::Degenerate,
        Some(v) => CheckStatus::from_bool(v >= threshold),
    };
    Ok(PredictorReport { n_predictors, n_excluded: excluded, spearman: rho, threshold, status })
}

pub fn verify_theorems(seed: u64) -> Result<TheoremReport> {
    Ok(TheoremReport {
        seed,
        noise_sweep: noise_sweep(&NoiseSweepConfig::default(), seed)?,
        predictors: predictor_check(seed, 200, 0.6)?,
    })
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub index: usize,
    pub prob: f64,
    pub label: u8,
    pub protected: u8,
    pub aleatoric: Option<f64>,
}

pub fn write_predictions(path: &Path, ds: &Dataset, probs: &[f64], aleatoric: Option<&[f64]>) -> Result<()> {
    let rows: Vec<PredictionRow> = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| PredictionRow {
            index: i,
            prob: p,
            label: ds.labels()[i],
            protected: ds.protected()[i],
            aleatoric: aleatoric.map(|u| u[i]),
        })
        .collect();
    write_csv(path, &rows)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pareto_small_cases() {
        assert_eq!(pareto_indices(&[(0.5, -0.1)]), vec![0]);
        assert_eq!(pareto_indices(&[(0.5, -0.1), (0.6, -0.05)]), vec![1]);
        assert_eq!(pareto_indices(&[(0.5, -0.1), (0.6, -0.2)]), vec![0, 1]);
        // Exact duplicates do not dominate each other.
        assert_eq!(pareto_indices(&[(0.5, 0.5), (0.5, 0.5), (0.5, 0.4)]), vec![0, 1]);
        assert_eq!(pareto_indices(&[(f64::NAN, 1.0), (0.0, 0.0)]), vec![1]);
    }

    #[test]
    fn pruning_identity_and_order() {
        let probs = [0.9, 0.1, 0.8, 0.3, 0.6, 0.4];
        let labels = [1, 0, 1, 0, 0, 1];
        let prot = [0, 1, 1, 0, 1, 0];
        let u = [0.1, 0.2, 0.1, 0.3, 0.6, 0.5];
        let rows = pruning_sweep(&probs, &u, &[0.0, 0.34], &labels, &prot).unwrap();
        assert_eq!(rows[0].n_kept, 6);
        assert!((rows[0].accuracy - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(rows[1].n_kept, 4);
        assert_eq!(rows[1].accuracy, 1.0);
        assert!(matches!(pruning_sweep(&probs, &u, &[1.0], &labels, &prot), Err(HarnessError::BadFraction(_))));
    }

    #[test]
    fn pruning_everything_of_a_class_is_an_error() {
        let r = pruning_sweep(&[0.9, 0.1, 0.2], &[0.9, 0.1, 0.2], &[0.34], &[1, 0, 0], &[0, 1, 0]);
        assert!(matches!(r, Err(HarnessError::EmptyRemainder(_))));
    }

    #[test]
    fn config_toml_round_trip() {
        let mut cfg = RunConfig::new(DataSource::Synthetic(SyntheticSpec::new(300, 4, 0.1, 9)), "/tmp/x");
        cfg.bnn.lr = 0.1 + 0.2;
        cfg.gaia.k = 1.0 / 3.0;
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn identical_group_behavior_is_degenerate() {
        let spec = SyntheticSpec::new(200, 3, 0.0, 1);
        let ds = data::generate_synthetic(&spec).unwrap();
        let preds: Vec<Vec<f64>> = (0..5).map(|_| ds.labels().iter().map(|&y| y as f64).collect()).collect();
        let (rho, excluded) = bce_aod_rank_correlation(&ds, &preds);
        assert_eq!(excluded, 0);
        assert_eq!(rho, None);
    }
}
