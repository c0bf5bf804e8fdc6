//! Tabular ingest, splitting, scaling, synthetic generation and the
//! canonical on-disk format.
//!
//! Loading produces one-hot categorical columns and *raw* numeric columns.
//! Numeric columns are standardized by [`split`], using statistics from the
//! training partition only, so no information from held-out rows leaks into
//! the scaling.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, streams};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("unparseable row at line {0}")]
    UnparseableRow(u64),
    #[error("dataset has no usable rows")]
    EmptyDataset,
    #[error("bad split fractions: {0}")]
    BadFractions(String),
    #[error("bad synthetic spec: {0}")]
    BadSpec(String),
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    Adult,
    German,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Validation,
    Test,
}

/// Per-column z-score statistics for the scaled columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingStats {
    pub columns: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Where the rows came from and how many were discarded on the way in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub source: String,
    pub n_raw_rows: usize,
    pub n_dropped_rows: usize,
}

/// Binary-label, binary-attribute tabular data.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<u8>,
    protected: Vec<u8>,
    feature_names: Vec<String>,
    split_tag: SplitTag,
    /// Columns that [`split`] standardizes (numeric inputs).
    numeric_columns: Vec<usize>,
    scaling: Option<ScalingStats>,
    provenance: Provenance,
}

impl Dataset {
    /// Validating constructor. Requires at least one row.
    pub fn new(
        features: Array2<f64>,
        labels: Vec<u8>,
        protected: Vec<u8>,
        feature_names: Vec<String>,
        split_tag: SplitTag,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        Self::new_unchecked_len(features, labels, protected, feature_names, split_tag)
    }

    fn new_unchecked_len(
        features: Array2<f64>,
        labels: Vec<u8>,
        protected: Vec<u8>,
        feature_names: Vec<String>,
        split_tag: SplitTag,
    ) -> Result<Self> {
        let n = labels.len();
        if features.nrows() != n || protected.len() != n {
            return Err(DataError::Inconsistent(format!(
                "row counts differ: features {}, labels {}, protected {}",
                features.nrows(),
                n,
                protected.len()
            )));
        }
        if feature_names.len() != features.ncols() {
            return Err(DataError::Inconsistent(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                features.ncols()
            )));
        }
        if labels.iter().chain(protected.iter()).any(|&v| v > 1) {
            return Err(DataError::Inconsistent("labels and protected must be 0 or 1".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Inconsistent("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            labels,
            protected,
            feature_names,
            split_tag,
            numeric_columns: Vec::new(),
            scaling: None,
            provenance: Provenance::default(),
        })
    }

    pub fn with_numeric_columns(mut self, cols: Vec<usize>) -> Self {
        self.numeric_columns = cols;
        self
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn with_split_tag(mut self, tag: SplitTag) -> Self {
        self.split_tag = tag;
        self
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn protected(&self) -> &[u8] {
        &self.protected
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn split_tag(&self) -> SplitTag {
        self.split_tag
    }

    pub fn numeric_columns(&self) -> &[usize] {
        &self.numeric_columns
    }

    pub fn scaling(&self) -> Option<&ScalingStats> {
        self.scaling.as_ref()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Row subset in the given order. May be empty.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            protected: indices.iter().map(|&i| self.protected[i]).collect(),
            feature_names: self.feature_names.clone(),
            split_tag: self.split_tag,
            numeric_columns: self.numeric_columns.clone(),
            scaling: self.scaling.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Counts of samples per (protected, label) cell, indexed `[a][y]`.
    pub fn cell_counts(&self) -> [[usize; 2]; 2] {
        let mut c = [[0usize; 2]; 2];
        for (&a, &y) in self.protected.iter().zip(&self.labels) {
            c[a as usize][y as usize] += 1;
        }
        c
    }

    /// Pearson correlation between the protected attribute and the label.
    pub fn attr_label_correlation(&self) -> f64 {
        pearson_binary(&self.protected, &self.labels)
    }

    fn apply_scaling(&mut self, stats: &ScalingStats) {
        for (k, &c) in stats.columns.iter().enumerate() {
            let (m, s) = (stats.mean[k], stats.std[k]);
            self.features.column_mut(c).mapv_inplace(|v| (v - m) / s);
        }
        self.scaling = Some(stats.clone());
    }
}

/// Pearson correlation of two 0/1 vectors; 0 when either is constant.
pub fn pearson_binary(a: &[u8], b: &[u8]) -> f64 {
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let (mut sa, mut sb, mut sab) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sa += x as f64;
        sb += y as f64;
        sab += (x * y) as f64;
    }
    let (ma, mb) = (sa / n, sb / n);
    let cov = sab / n - ma * mb;
    let var = (ma * (1.0 - ma)) * (mb * (1.0 - mb));
    if var <= 0.0 {
        0.0
    } else {
        cov / var.sqrt()
    }
}

// ---------------------------------------------------------------------------
// Schemas
// ---------------------------------------------------------------------------

/// Column layout of a raw benchmark file.
///
/// Adult: `fnlwgt` (a census sampling weight) and `education` (duplicated by
/// `education-num`) are dropped. German: `personal_status` is replaced by the
/// binary `sex` it encodes.
struct Schema {
    numeric: &'static [&'static str],
    categorical: &'static [&'static str],
    protected: &'static str,
    label: &'static str,
    protected_map: fn(&str) -> Option<u8>,
    label_map: fn(&str) -> Option<u8>,
}

fn adult_sex(v: &str) -> Option<u8> {
    match v {
        "Male" => Some(1),
        "Female" => Some(0),
        _ => None,
    }
}

fn adult_income(v: &str) -> Option<u8> {
    match v.trim_end_matches('.') {
        ">50K" => Some(1),
        "<=50K" => Some(0),
        _ => None,
    }
}

fn german_sex(v: &str) -> Option<u8> {
    match v {
        "A91" | "A93" | "A94" => Some(1),
        "A92" | "A95" => Some(0),
        _ => None,
    }
}

fn german_credit(v: &str) -> Option<u8> {
    match v {
        "1" => Some(1),
        "2" => Some(0),
        _ => None,
    }
}

impl DatasetId {
    fn schema(self) -> Schema {
        match self {
            DatasetId::Adult => Schema {
                numeric: &["age", "education-num", "capital-gain", "capital-loss", "hours-per-week"],
                categorical: &["workclass", "marital-status", "occupation", "relationship", "race", "native-country"],
                protected: "sex",
                label: "income",
                protected_map: adult_sex,
                label_map: adult_income,
            },
            DatasetId::German => Schema {
                numeric: &[
                    "duration",
                    "credit_amount",
                    "installment_rate",
                    "residence_since",
                    "age",
                    "number_of_credits",
                    "people_liable",
                ],
                categorical: &[
                    "status",
                    "credit_history",
                    "purpose",
                    "savings",
                    "employment",
                    "other_debtors",
                    "property",
                    "installment_plans",
                    "housing",
                    "job",
                    "telephone",
                    "foreign_worker",
                ],
                protected: "personal_status",
                label: "credit",
                protected_map: german_sex,
                label_map: german_credit,
            },
        }
    }

    /// Column names the loader reads, in the order they are consumed.
    pub fn used_columns(self) -> Vec<&'static str> {
        let s = self.schema();
        let mut v: Vec<&str> = s.numeric.to_vec();
        v.extend_from_slice(s.categorical);
        v.push(s.protected);
        v.push(s.label);
        v
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Fail on malformed rows instead of dropping them.
    pub strict: bool,
}

/// Load a headered CSV of the Adult or German benchmark.
///
/// Rows with a missing value (`?` or empty) in a used column are dropped and
/// counted in the provenance. Returned numeric columns are unscaled.
pub fn load_tabular(path: &Path, schema: DatasetId) -> Result<Dataset> {
    load_tabular_with(path, schema, LoadOptions::default())
}

pub fn load_tabular_with(path: &Path, id: DatasetId, opts: LoadOptions) -> Result<Dataset> {
    let schema = id.schema();
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).flexible(true).from_path(path)?;
    let header: HashMap<String, usize> =
        reader.headers()?.iter().enumerate().map(|(i, h)| (h.to_string(), i)).collect();
    let col = |name: &str| -> Result<usize> {
        header.get(name).copied().ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let numeric_idx: Vec<usize> = schema.numeric.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let cat_idx: Vec<usize> = schema.categorical.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let prot_idx = col(schema.protected)?;
    let label_idx = col(schema.label)?;

    struct Row {
        numeric: Vec<f64>,
        cats: Vec<String>,
        protected: u8,
        label: u8,
    }

    let mut rows = Vec::new();
    let mut n_raw = 0usize;
    let mut n_dropped = 0usize;
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        n_raw += 1;
        let parsed = (|| -> std::result::Result<Option<Row>, ()> {
            let field = |i: usize| rec.get(i);
            let mut missing = false;
            let mut get = |i: usize| -> std::result::Result<&str, ()> {
                match field(i) {
                    None => Err(()),
                    Some(v) if v.is_empty() || v == "?" => {
                        missing = true;
                        Ok(v)
                    }
                    Some(v) => Ok(v),
                }
            };
            let num_raw: Vec<&str> = numeric_idx.iter().map(|&i| get(i)).collect::<std::result::Result<_, _>>()?;
            let cats: Vec<String> =
                cat_idx.iter().map(|&i| get(i).map(str::to_string)).collect::<std::result::Result<_, _>>()?;
            let p = get(prot_idx)?;
            let l = get(label_idx)?;
            if missing {
                return Ok(None);
            }
            let numeric = num_raw
                .iter()
                .map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or(()))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let protected = (schema.protected_map)(p).ok_or(())?;
            let label = (schema.label_map)(l).ok_or(())?;
            Ok(Some(Row { numeric, cats, protected, label }))
        })();
        match parsed {
            Ok(Some(r)) => rows.push(r),
            Ok(None) => n_dropped += 1,
            Err(()) if opts.strict => return Err(DataError::UnparseableRow(line)),
            Err(()) => n_dropped += 1,
        }
    }
    if rows.is_empty() {
        return Err(DataError::EmptyDataset);
    }

    // One-hot levels, sorted for a deterministic column order.
    let levels: Vec<Vec<String>> = (0..cat_idx.len())
        .map(|k| {
            let set: BTreeSet<&str> = rows.iter().map(|r| r.cats[k].as_str()).collect();
            set.into_iter().map(str::to_string).collect()
        })
        .collect();
    let mut names: Vec<String> = schema.numeric.iter().map(|s| s.to_string()).collect();
    for (k, c) in schema.categorical.iter().enumerate() {
        names.extend(levels[k].iter().map(|l| format!("{c}={l}")));
    }
    names.push("sex".to_string());
    let level_pos: Vec<BTreeMap<&str, usize>> =
        levels.iter().map(|ls| ls.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect()).collect();

    let d = names.len();
    let n = rows.len();
    let mut flat = vec![0.0; n * d];
    for (r, row) in rows.iter().enumerate() {
        let out = &mut flat[r * d..(r + 1) * d];
        out[..row.numeric.len()].copy_from_slice(&row.numeric);
        let mut offset = row.numeric.len();
        for (k, v) in row.cats.iter().enumerate() {
            out[offset + level_pos[k][v.as_str()]] = 1.0;
            offset += levels[k].len();
        }
        out[d - 1] = row.protected as f64;
    }
    let features = Array2::from_shape_vec((n, d), flat).expect("row-major buffer sized n*d");
    let labels = rows.iter().map(|r| r.label).collect();
    let protected = rows.iter().map(|r| r.protected).collect();
    let ds = Dataset::new(features, labels, protected, names, SplitTag::Train)?
        .with_numeric_columns((0..schema.numeric.len()).collect())
        .with_provenance(Provenance {
            source: path.display().to_string(),
            n_raw_rows: n_raw,
            n_dropped_rows: n_dropped,
        });
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Splitting and scaling
// ---------------------------------------------------------------------------

/// Partition sizes for `n` rows: each held-out size is floored, the
/// remainder goes to train.
pub fn split_sizes(n: usize, fractions: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (tr, va, te) = fractions;
    for f in [tr, va, te] {
        if !f.is_finite() || f < 0.0 {
            return Err(DataError::BadFractions(format!("{fractions:?}")));
        }
    }
    if tr <= 0.0 || (tr + va + te - 1.0).abs() > 1e-9 {
        return Err(DataError::BadFractions(format!("{fractions:?}")));
    }
    // The epsilon absorbs products like 0.29 * 100 = 28.999999999999996.
    let floor = |f: f64| ((n as f64) * f + 1e-9).floor() as usize;
    let n_val = floor(va);
    let n_test = floor(te);
    Ok((n - n_val - n_test, n_val, n_test))
}

/// Seeded disjoint train/validation/test partition. Numeric columns are
/// z-scored with the training partition's mean and population std.
pub fn split(ds: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let n = ds.n_samples();
    let (n_train, n_val, _) = split_sizes(n, fractions)?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::substream(seed, streams::SPLIT));
    let mut parts =
        [perm[..n_train].to_vec(), perm[n_train..n_train + n_val].to_vec(), perm[n_train + n_val..].to_vec()];
    for p in parts.iter_mut() {
        p.sort_unstable();
    }
    let mut train = ds.select(&parts[0]).with_split_tag(SplitTag::Train);
    let mut val = ds.select(&parts[1]).with_split_tag(SplitTag::Validation);
    let mut test = ds.select(&parts[2]).with_split_tag(SplitTag::Test);

    let stats = scaling_stats(&train);
    train.apply_scaling(&stats);
    val.apply_scaling(&stats);
    test.apply_scaling(&stats);
    Ok((train, val, test))
}

fn scaling_stats(train: &Dataset) -> ScalingStats {
    let cols = train.numeric_columns.clone();
    let n = train.n_samples() as f64;
    let mut mean = Vec::with_capacity(cols.len());
    let mut std = Vec::with_capacity(cols.len());
    for &c in &cols {
        let column = train.features.column(c);
        let m = column.sum() / n;
        let var = column.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        let s = var.sqrt();
        mean.push(m);
        std.push(if s > 1e-12 { s } else { 1.0 });
    }
    ScalingStats { columns: cols, mean, std }
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Two Gaussian clusters with injected label noise and a protected
/// attribute correlated with the observed label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub n_features: usize,
    /// Probability η that an observed label is flipped, in [0, 0.5].
    pub label_noise_rate: f64,
    /// Target Pearson correlation between protected attribute and observed label.
    pub attribute_label_correlation: f64,
    /// Distance of each cluster mean from the origin along the diagonal;
    /// the Bayes accuracy on clean labels is Φ(separation).
    pub separation: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n_samples: usize, n_features: usize, label_noise_rate: f64, seed: u64) -> Self {
        Self { n_samples, n_features, label_noise_rate, attribute_label_correlation: 0.0, separation: 2.0, seed }
    }

    pub fn with_correlation(mut self, rho: f64) -> Self {
        self.attribute_label_correlation = rho;
        self
    }

    pub fn with_separation(mut self, separation: f64) -> Self {
        self.separation = separation;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.n_features == 0 {
            return Err(DataError::BadSpec("n_samples and n_features must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.label_noise_rate) {
            return Err(DataError::BadSpec(format!("label_noise_rate {} outside [0, 0.5]", self.label_noise_rate)));
        }
        if !(-1.0..=1.0).contains(&self.attribute_label_correlation) {
            return Err(DataError::BadSpec(format!(
                "attribute_label_correlation {} outside [-1, 1]",
                self.attribute_label_correlation
            )));
        }
        if !self.separation.is_finite() || self.separation < 0.0 {
            return Err(DataError::BadSpec("separation must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Synthetic dataset together with the clean labels it was derived from.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub true_labels: Vec<u8>,
}

impl SyntheticData {
    /// Per-sample indicator of an injected label flip.
    pub fn flipped(&self) -> Vec<bool> {
        self.true_labels.iter().zip(self.dataset.labels()).map(|(t, o)| t != o).collect()
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    Ok(generate_synthetic_with_truth(spec)?.dataset)
}

pub fn generate_synthetic_with_truth(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = rng::seeded(spec.seed);
    let (n, d) = (spec.n_samples, spec.n_features);
    let shift = spec.separation / (d as f64).sqrt();
    let agree = (1.0 + spec.attribute_label_correlation) / 2.0;
    let mut flat = Vec::with_capacity(n * d);
    let mut truth = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut protected = Vec::with_capacity(n);
    for _ in 0..n {
        let y: u8 = rng.random_bool(0.5) as u8;
        let sign = if y == 1 { 1.0 } else { -1.0 };
        for _ in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            flat.push(z + sign * shift);
        }
        let observed = if rng.random::<f64>() < spec.label_noise_rate { 1 - y } else { y };
        let a = if rng.random::<f64>() < agree { observed } else { 1 - observed };
        truth.push(y);
        labels.push(observed);
        protected.push(a);
    }
    let features = Array2::from_shape_vec((n, d), flat).expect("row-major buffer sized n*d");
    let names = (0..d).map(|j| format!("x{j}")).collect();
    let dataset = Dataset::new(features, labels, protected, names, SplitTag::Train)?
        .with_numeric_columns((0..d).collect())
        .with_provenance(Provenance {
            source: format!(
                "synthetic(seed={}, eta={}, rho={})",
                spec.seed, spec.label_noise_rate, spec.attribute_label_correlation
            ),
            n_raw_rows: n,
            n_dropped_rows: 0,
        });
    Ok(SyntheticData { dataset, true_labels: truth })
}

// ---------------------------------------------------------------------------
// Canonical format
// ---------------------------------------------------------------------------

const LABEL_COLUMN: &str = "label";
const PROTECTED_COLUMN: &str = "protected";

/// JSON sidecar written next to the canonical CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub feature_names: Vec<String>,
    pub numeric_columns: Vec<usize>,
    pub scaling: Option<ScalingStats>,
    pub label_column: String,
    pub protected_column: String,
    pub split_tag: SplitTag,
    pub n_samples: usize,
    pub provenance: Provenance,
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    let mut s = csv_path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Write `features..., label, protected` as CSV plus a `.meta.json` sidecar.
/// Floats use the shortest representation that parses back exactly.
pub fn write_canonical(ds: &Dataset, csv_path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(csv_path)?;
    let mut header: Vec<&str> = ds.feature_names.iter().map(String::as_str).collect();
    header.push(LABEL_COLUMN);
    header.push(PROTECTED_COLUMN);
    w.write_record(&header)?;
    let mut buf = Vec::with_capacity(header.len());
    for i in 0..ds.n_samples() {
        buf.clear();
        buf.extend(ds.features.row(i).iter().map(|v| v.to_string()));
        buf.push(ds.labels[i].to_string());
        buf.push(ds.protected[i].to_string());
        w.write_record(&buf)?;
    }
    w.flush()?;
    let meta = DatasetMeta {
        feature_names: ds.feature_names.clone(),
        numeric_columns: ds.numeric_columns.clone(),
        scaling: ds.scaling.clone(),
        label_column: LABEL_COLUMN.into(),
        protected_column: PROTECTED_COLUMN.into(),
        split_tag: ds.split_tag,
        n_samples: ds.n_samples(),
        provenance: ds.provenance.clone(),
    };
    let mut f = BufWriter::new(File::create(sidecar_path(csv_path))?);
    serde_json::to_writer_pretty(&mut f, &meta)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn read_canonical(csv_path: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = serde_json::from_reader(BufReader::new(File::open(sidecar_path(csv_path))?))?;
    let mut r = csv::Reader::from_path(csv_path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let d = meta.feature_names.len();
    if header.len() != d + 2 || header[..d] != meta.feature_names[..] {
        return Err(DataError::Inconsistent("CSV header does not match sidecar".into()));
    }
    let mut flat = Vec::with_capacity(meta.n_samples * d);
    let mut labels = Vec::with_capacity(meta.n_samples);
    let mut protected = Vec::with_capacity(meta.n_samples);
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != d + 2 {
            return Err(DataError::UnparseableRow(line));
        }
        for v in rec.iter().take(d) {
            flat.push(v.parse::<f64>().map_err(|_| DataError::UnparseableRow(line))?);
        }
        labels.push(rec[d].parse::<u8>().map_err(|_| DataError::UnparseableRow(line))?);
        protected.push(rec[d + 1].parse::<u8>().map_err(|_| DataError::UnparseableRow(line))?);
    }
    let n = labels.len();
    if n != meta.n_samples {
        return Err(DataError::Inconsistent(format!("sidecar says {} rows, CSV has {n}", meta.n_samples)));
    }
    let features = Array2::from_shape_vec((n, d), flat).expect("row-major buffer sized n*d");
    let mut ds = Dataset::new_unchecked_len(features, labels, protected, meta.feature_names, meta.split_tag)?
        .with_numeric_columns(meta.numeric_columns)
        .with_provenance(meta.provenance);
    ds.scaling = meta.scaling;
    Ok(ds)
}
