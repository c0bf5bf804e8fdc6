use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use gaia_core::bnn::{self, BnnHyper, VariationalNet};
use gaia_core::checkpoint::Checkpoint;
use gaia_core::data::{self, SyntheticSpec};
use gaia_core::harness::{self, DataSource, Method, MetricKey, RunConfig};
use gaia_core::metrics::{Evaluation, FairnessReport, KnnGraph};
use gaia_core::objective::{self, BetaConfig, GaiaClassifier, GaiaHyper, UncertaintyInputs};
use gaia_core::rng::{self, streams};
use gaia_core::sampler::BatchMode;

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "gaia", version, about = "Uncertainty-guided fair classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a raw dataset (or generate a synthetic one), split and standardize it.
    PrepareData(PrepareArgs),
    /// Train the variational network on a prepared dataset.
    TrainBnn(TrainBnnArgs),
    /// Train the uncertainty-weighted classifier using a trained network.
    TrainGaia(TrainGaiaArgs),
    /// Score a predictions file.
    Evaluate(EvaluateArgs),
    /// Run the method x seed matrix from a config file.
    RunMatrix(RunMatrixArgs),
    /// Accuracy and EOD after dropping the most uncertain samples.
    PruneSweep(PruneArgs),
    /// Noise sweep and BCE/AOD correlation checks. Exits 1 if any fails.
    VerifyTheorems(VerifyArgs),
    /// Non-dominated rows of a results file.
    Pareto(ParetoArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Adult,
    German,
    Synthetic,
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long, value_enum)]
    dataset: DatasetArg,
    /// Raw CSV; defaults to data/<dataset>.csv.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.7,0.1,0.2")]
    splits: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    n_samples: usize,
    #[arg(long, default_value_t = 8)]
    n_features: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    correlation: f64,
}

#[derive(Args)]
struct TrainBnnArgs {
    /// Directory written by prepare-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = BatchMode::Als)]
    batch_mode: BatchMode,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, value_delimiter = ',', default_value = "64,64,64")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    j_eval: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Also write test-split predictions with aleatoric uncertainty.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct TrainGaiaArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    bnn_checkpoint: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    k: f64,
    #[arg(long, default_value_t = 1.0)]
    umin_pct: f64,
    #[arg(long, default_value_t = 99.0)]
    umax_pct: f64,
    #[arg(long, value_enum, default_value_t = BatchMode::Als)]
    batch_mode: BatchMode,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, value_enum, default_value_t = UncertaintyInputs::AleatoricOnly)]
    uncertainty_inputs: UncertaintyInputs,
    /// Posterior draws used for the uncertainty estimates.
    #[arg(long, default_value_t = 64)]
    j_eval: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// CSV with columns index, prob, label, protected[, aleatoric].
    #[arg(long)]
    predictions: PathBuf,
    /// Canonical feature file of the same samples, for the consistency score.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    neighbors: usize,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Append a one-line CSV summary to this file.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct RunMatrixArgs {
    /// TOML config; see README for the keys.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_enum, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long, value_delimiter = ',')]
    k_values: Option<Vec<f64>>,
    /// Overrides the epochs of both trainers.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides the batch size of both trainers.
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct PruneArgs {
    /// Predictions file with an aleatoric column.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1,0.2,0.3,0.4,0.5")]
    fractions: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ParetoArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long, value_enum, default_value_t = MetricKey::BalancedAccuracy)]
    utility: MetricKey,
    #[arg(long, value_enum, default_value_t = MetricKey::Aod)]
    fairness: MetricKey,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::PrepareData(a) => prepare(a),
        Command::TrainBnn(a) => train_bnn(a),
        Command::TrainGaia(a) => train_gaia(a),
        Command::Evaluate(a) => evaluate(a),
        Command::RunMatrix(a) => run_matrix(a),
        Command::PruneSweep(a) => prune(a),
        Command::VerifyTheorems(a) => verify(a),
        Command::Pareto(a) => pareto(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn splits_tuple(v: &[f64]) -> AnyResult<(f64, f64, f64)> {
    match v {
        [a, b, c] => Ok((*a, *b, *c)),
        _ => Err(format!("--splits needs three fractions, got {}", v.len()).into()),
    }
}

fn emit_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> AnyResult<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn prepare(a: PrepareArgs) -> AnyResult<ExitCode> {
    let splits = splits_tuple(&a.splits)?;
    let default_input = |name: &str| a.input.clone().unwrap_or_else(|| PathBuf::from(format!("data/{name}.csv")));
    let source = match a.dataset {
        DatasetArg::Adult => DataSource::Adult { path: default_input("adult") },
        DatasetArg::German => DataSource::German { path: default_input("german") },
        DatasetArg::Synthetic => DataSource::Synthetic(
            SyntheticSpec::new(a.n_samples, a.n_features, a.noise, a.seed).with_correlation(a.correlation),
        ),
    };
    let s = harness::load_splits(&source, splits, a.seed)?;
    std::fs::create_dir_all(&a.out)?;
    for (name, ds) in [("train", &s.train), ("validation", &s.validation), ("test", &s.test)] {
        data::write_canonical(ds, &a.out.join(format!("{name}.csv")))?;
        info!("{name}: {} samples, {} features", ds.n_samples(), ds.n_features());
    }
    Ok(ExitCode::SUCCESS)
}

fn prepared(dir: &Path) -> AnyResult<harness::Splits> {
    Ok(harness::load_splits(&DataSource::Prepared { dir: dir.to_path_buf() }, (1.0, 0.0, 0.0), 0)?)
}

fn train_bnn(a: TrainBnnArgs) -> AnyResult<ExitCode> {
    let s = prepared(&a.data)?;
    let hyper = BnnHyper {
        hidden: a.hidden,
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        j_eval: a.j_eval,
        ..BnnHyper::default()
    };
    let fit = bnn::train_bnn(&s.train, a.batch_mode, &hyper, a.seed)?;
    let mut ck = fit.net.to_checkpoint();
    ck.meta = serde_json::json!({
        "batch_mode": a.batch_mode,
        "seed": a.seed,
        "selected_step": fit.log.selected_step,
        "train_mean_aleatoric": fit.profile.mean_aleatoric(),
    });
    ck.save(&a.out)?;
    info!("saved {} (mean training aleatoric {:.4})", a.out.display(), fit.profile.mean_aleatoric());
    if let Some(p) = a.predictions {
        let mut r = rng::substream(a.seed, streams::TEST_EVAL);
        let pp = bnn::sample_forward(&fit.net, s.test.features().view(), a.j_eval, &mut r)?;
        let prof = bnn::decompose_uncertainty(&pp);
        harness::write_predictions(&p, &s.test, &pp.mean_prob, Some(&prof.aleatoric))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn train_gaia(a: TrainGaiaArgs) -> AnyResult<ExitCode> {
    let s = prepared(&a.data)?;
    let net = VariationalNet::from_checkpoint(&Checkpoint::load(&a.bnn_checkpoint)?)?;
    let mut r = rng::substream(a.seed, streams::BNN_EVAL);
    let train_prof =
        bnn::decompose_uncertainty(&bnn::sample_forward(&net, s.train.features().view(), a.j_eval, &mut r)?);
    let cfg = BetaConfig::from_percentiles(&train_prof.aleatoric, a.umin_pct, a.umax_pct, a.k)?;
    let hyper = GaiaHyper {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        k: a.k,
        umin_pct: a.umin_pct,
        umax_pct: a.umax_pct,
        uncertainty_inputs: a.uncertainty_inputs,
        ..GaiaHyper::default()
    };
    let fit = objective::train_gaia(&s.train, &train_prof, &cfg, a.batch_mode, &hyper, a.seed)?;
    let mut ck = fit.model.to_checkpoint();
    if let serde_json::Value::Object(m) = &mut ck.meta {
        m.insert("beta".into(), serde_json::to_value(cfg)?);
        m.insert("batch_mode".into(), serde_json::to_value(a.batch_mode)?);
        m.insert("seed".into(), a.seed.into());
    }
    ck.save(&a.out)?;
    info!("saved {}", a.out.display());
    if let Some(p) = a.predictions {
        let mut r = rng::substream(a.seed, streams::TEST_EVAL);
        let prof = bnn::decompose_uncertainty(&bnn::sample_forward(&net, s.test.features().view(), a.j_eval, &mut r)?);
        let x = objective::augment(s.test.features().view(), Some(&prof), a.uncertainty_inputs)?;
        let model = GaiaClassifier::from_checkpoint(&ck)?;
        harness::write_predictions(&p, &s.test, &model.predict_proba(x.view())?, Some(&prof.aleatoric))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn evaluate(a: EvaluateArgs) -> AnyResult<ExitCode> {
    let rows = harness::read_predictions(&a.predictions)?;
    let probs: Vec<f64> = rows.iter().map(|r| r.prob).collect();
    let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
    let protected: Vec<u8> = rows.iter().map(|r| r.protected).collect();
    let knn = match &a.features {
        Some(p) => {
            let ds = data::read_canonical(p)?;
            let idx: Vec<usize> = rows.iter().map(|r| r.index).collect();
            Some(KnnGraph::build(ds.select(&idx).features().view(), a.neighbors)?)
        }
        None => None,
    };
    let report = FairnessReport::compute(&Evaluation {
        probs: &probs,
        true_labels: &labels,
        protected: &protected,
        knn: knn.as_ref(),
    })?;
    emit_json(&report, a.out.as_deref())?;
    if let Some(p) = a.csv {
        let fresh = !p.exists();
        let file = std::fs::OpenOptions::new().create(true).append(true).open(&p)?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            w.write_record(["predictions", "accuracy", "balanced_accuracy", "aod", "eod", "ge", "cs", "bce_diff"])?;
        }
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            a.predictions.display().to_string(),
            f(report.accuracy),
            f(report.balanced_accuracy),
            f(report.aod),
            f(report.eod),
            f(report.ge),
            f(report.cs),
            f(report.bce_diff),
        ])?;
        w.flush()?;
    }
    Ok(ExitCode::SUCCESS)
}

fn run_matrix(a: RunMatrixArgs) -> AnyResult<ExitCode> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(d) = a.out_dir {
        cfg.out_dir = d;
    }
    if let Some(s) = a.seeds {
        cfg.seeds = s;
    }
    if let Some(m) = a.methods {
        cfg.methods = m;
    }
    if let Some(k) = a.k_values {
        cfg.k_values = k;
    }
    if let Some(e) = a.epochs {
        cfg.bnn.epochs = e;
        cfg.gaia.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.bnn.batch_size = b;
        cfg.gaia.batch_size = b;
    }
    let rows = harness::run_matrix(&cfg)?;
    let summary = harness::summarize(&rows);
    harness::write_csv(&cfg.out_dir.join("summary.csv"), &summary)?;
    let failed = rows.iter().filter(|r| !r.error.is_empty()).count();
    info!("{} rows ({failed} failed) in {}", rows.len(), cfg.out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn prune(a: PruneArgs) -> AnyResult<ExitCode> {
    let rows = harness::read_predictions(&a.predictions)?;
    let aleatoric: Vec<f64> =
        rows.iter().map(|r| r.aleatoric.ok_or("predictions file has no aleatoric column")).collect::<Result<_, _>>()?;
    let probs: Vec<f64> = rows.iter().map(|r| r.prob).collect();
    let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
    let protected: Vec<u8> = rows.iter().map(|r| r.protected).collect();
    let table = harness::pruning_sweep(&probs, &aleatoric, &a.fractions, &labels, &protected)?;
    match a.out {
        Some(p) => harness::write_csv(&p, &table)?,
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for r in &table {
                w.serialize(r)?;
            }
            w.flush()?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn verify(a: VerifyArgs) -> AnyResult<ExitCode> {
    let report = harness::verify_theorems(a.seed)?;
    emit_json(&report, a.out.as_deref())?;
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn pareto(a: ParetoArgs) -> AnyResult<ExitCode> {
    let rows = harness::read_results(&a.results)?;
    let front = harness::pareto_front(&rows, a.utility, a.fairness);
    match a.out {
        Some(p) => harness::write_csv(&p, &front)?,
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for r in &front {
                w.serialize(r)?;
            }
            w.flush()?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
