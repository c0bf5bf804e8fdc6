//! Uncertainty-weighted bi-objective loss and the downstream classifier.
//!
//! Each sample gets a weight `beta = ((u - u_min) / (u_max - u_min))^k` from
//! its aleatoric uncertainty `u`; beta grows with `u`. The utility term is
//! weighted by `beta` and the fairness term by `1 - beta`:
//!
//! ```text
//! L = CE(S, beta) + | CE(S_0, 1 - beta) - CE(S_1, 1 - beta) |
//! CE(S, w) = -(1/|S|) sum_i w_i [y_i ln p_i + (1 - y_i) ln(1 - p_i)]
//! ```
//!
//! where `S_0`, `S_1` split the batch by protected attribute and each group
//! term is normalized by its own size.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bnn::{sigmoid, softplus, UncertaintyProfile};
use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::data::Dataset;
use crate::optim::{batch_accuracy, Adam, SmoothedAccuracy, TrainLog};
use crate::rng::{self, streams};
use crate::sampler::{BatchMode, Sampler, SamplerError};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("degenerate normalization range: u_min {u_min} >= u_max {u_max}")]
    DegenerateRange { u_min: f64, u_max: f64 },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("bad exponent k = {0}")]
    BadExponent(f64),
    #[error("bad hyperparameter: {0}")]
    BadHyper(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaConfig {
    pub k: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub clamp: bool,
}

impl BetaConfig {
    pub fn new(k: f64, u_min: f64, u_max: f64) -> Result<Self> {
        let cfg = Self { k, u_min, u_max, clamp: true };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Normalization range from percentiles (0-100) of the training-set
    /// uncertainties.
    pub fn from_percentiles(u: &[f64], lo_pct: f64, hi_pct: f64, k: f64) -> Result<Self> {
        if u.is_empty() {
            return Err(ObjectiveError::LengthMismatch("no uncertainties to normalize".into()));
        }
        Self::new(k, percentile(u, lo_pct), percentile(u, hi_pct))
    }

    fn validate(&self) -> Result<()> {
        if !(self.u_max > self.u_min) {
            return Err(ObjectiveError::DegenerateRange { u_min: self.u_min, u_max: self.u_max });
        }
        if !(self.k > 0.0) || !self.k.is_finite() {
            return Err(ObjectiveError::BadExponent(self.k));
        }
        Ok(())
    }
}

/// Linear-interpolation percentile, `pct` in [0, 100].
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (pct.clamp(0.0, 100.0) / 100.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Per-sample utility weights.
pub fn beta(u: &[f64], cfg: &BetaConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let range = cfg.u_max - cfg.u_min;
    Ok(u.iter()
        .map(|&ui| {
            let t = (ui - cfg.u_min) / range;
            let t = if cfg.clamp { t.clamp(0.0, 1.0) } else { t };
            t.powf(cfg.k)
        })
        .collect())
}

fn check_lengths(n: usize, others: &[(&str, usize)]) -> Result<()> {
    for &(name, len) in others {
        if len != n {
            return Err(ObjectiveError::LengthMismatch(format!("{name} has {len} entries, expected {n}")));
        }
    }
    Ok(())
}

/// Per-sample cross-entropy on clamped probabilities.
fn ce_terms_from_probs(probs: &[f64], labels: &[u8]) -> Vec<f64> {
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .collect()
}

fn weighted_mean_of(terms: &[f64], w: &[f64]) -> f64 {
    if terms.is_empty() {
        return 0.0;
    }
    terms.iter().zip(w).map(|(t, w)| w * t).sum::<f64>() / terms.len() as f64
}

/// Group terms: (mean over A=0, mean over A=1, sizes), each normalized by
/// its own group size.
fn group_means(terms: &[f64], protected: &[u8], w: &[f64]) -> ([f64; 2], [usize; 2]) {
    let mut sum = [0.0; 2];
    let mut cnt = [0usize; 2];
    for ((t, &a), w) in terms.iter().zip(protected).zip(w) {
        sum[a as usize] += w * t;
        cnt[a as usize] += 1;
    }
    let mean = [0, 1].map(|g| if cnt[g] > 0 { sum[g] / cnt[g] as f64 } else { 0.0 });
    (mean, cnt)
}

/// Weighted cross-entropy, normalized by the batch size (not by the weight
/// sum).
pub fn weighted_ce(probs: &[f64], labels: &[u8], w: &[f64]) -> Result<f64> {
    check_lengths(probs.len(), &[("labels", labels.len()), ("weights", w.len())])?;
    Ok(weighted_mean_of(&ce_terms_from_probs(probs, labels), w))
}

/// Absolute difference of the per-group weighted cross-entropies. Returns 0
/// (with a warning) when the batch holds only one protected group.
pub fn fairness_loss(probs: &[f64], labels: &[u8], protected: &[u8], w_complement: &[f64]) -> Result<f64> {
    check_lengths(
        probs.len(),
        &[("labels", labels.len()), ("protected", protected.len()), ("weights", w_complement.len())],
    )?;
    let (mean, cnt) = group_means(&ce_terms_from_probs(probs, labels), protected, w_complement);
    if cnt.contains(&0) {
        log::warn!("fairness loss on a single-group batch is 0");
        return Ok(0.0);
    }
    Ok((mean[0] - mean[1]).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub utility: f64,
    pub fairness: f64,
}

/// Full objective on probabilities.
pub fn gaia_loss(probs: &[f64], labels: &[u8], protected: &[u8], u: &[f64], cfg: &BetaConfig) -> Result<LossParts> {
    check_lengths(probs.len(), &[("labels", labels.len()), ("protected", protected.len()), ("u", u.len())])?;
    let b = beta(u, cfg)?;
    let complement: Vec<f64> = b.iter().map(|v| 1.0 - v).collect();
    let utility = weighted_ce(probs, labels, &b)?;
    let fairness = fairness_loss(probs, labels, protected, &complement)?;
    Ok(LossParts { total: utility + fairness, utility, fairness })
}

/// Which objective the classifier trainer minimizes.
#[derive(Debug, Clone, PartialEq)]
pub enum LossKind {
    /// Utility weighted by `beta`, fairness by `1 - beta`.
    Gaia { beta: Vec<f64> },
    /// Weighted cross-entropy only.
    WeightedCe { weights: Vec<f64> },
    /// Fairness term only, with the given per-sample weights.
    Fairness { weights: Vec<f64> },
}

impl LossKind {
    fn n(&self) -> usize {
        match self {
            LossKind::Gaia { beta } => beta.len(),
            LossKind::WeightedCe { weights } | LossKind::Fairness { weights } => weights.len(),
        }
    }
}

/// Loss and `d loss / d logit` for one batch, computed from logits so the
/// cross-entropy stays exact where probabilities saturate.
pub fn loss_from_logits(
    logits: &[f64],
    labels: &[u8],
    protected: &[u8],
    kind: &LossKind,
    batch: &[usize],
) -> (LossParts, Vec<f64>) {
    let m = logits.len();
    let terms: Vec<f64> = logits.iter().zip(labels).map(|(&z, &y)| softplus(z) - y as f64 * z).collect();
    let resid: Vec<f64> = logits.iter().zip(labels).map(|(&z, &y)| sigmoid(z) - y as f64).collect();
    let pick = |v: &[f64]| -> Vec<f64> { batch.iter().map(|&i| v[i]).collect() };
    let (util_w, fair_w) = match kind {
        LossKind::Gaia { beta } => {
            let b = pick(beta);
            let c = b.iter().map(|v| 1.0 - v).collect();
            (Some(b), Some(c))
        }
        LossKind::WeightedCe { weights } => (Some(pick(weights)), None),
        LossKind::Fairness { weights } => (None, Some(pick(weights))),
    };
    let mut grad = vec![0.0; m];
    let mut utility = 0.0;
    if let Some(w) = &util_w {
        utility = weighted_mean_of(&terms, w);
        for i in 0..m {
            grad[i] += w[i] * resid[i] / m as f64;
        }
    }
    let mut fairness = 0.0;
    if let Some(w) = &fair_w {
        let (mean, cnt) = group_means(&terms, protected, w);
        if !cnt.contains(&0) {
            let diff = mean[0] - mean[1];
            fairness = diff.abs();
            let s = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            for i in 0..m {
                let g = protected[i] as usize;
                let dir = if g == 0 { s } else { -s };
                grad[i] += dir * w[i] * resid[i] / cnt[g] as f64;
            }
        }
    }
    let total = match (&util_w, &fair_w) {
        (Some(_), Some(_)) => utility + fairness,
        (Some(_), None) => utility,
        _ => fairness,
    };
    (LossParts { total, utility, fairness }, grad)
}

// ---------------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyInputs {
    /// Features only (ERM baseline).
    None,
    #[default]
    AleatoricOnly,
    AleatoricAndEpistemic,
}

impl UncertaintyInputs {
    pub fn extra_columns(self) -> usize {
        match self {
            UncertaintyInputs::None => 0,
            UncertaintyInputs::AleatoricOnly => 1,
            UncertaintyInputs::AleatoricAndEpistemic => 2,
        }
    }
}

/// Append the per-sample uncertainty columns requested by `inputs`.
pub fn augment(
    x: ArrayView2<f64>,
    profile: Option<&UncertaintyProfile>,
    inputs: UncertaintyInputs,
) -> Result<Array2<f64>> {
    if inputs == UncertaintyInputs::None {
        return Ok(x.to_owned());
    }
    let profile = profile.ok_or_else(|| ObjectiveError::LengthMismatch("uncertainty profile required".into()))?;
    check_lengths(x.nrows(), &[("uncertainty profile", profile.len())])?;
    let alea = Array1::from(profile.aleatoric.clone()).insert_axis(Axis(1));
    let extra = if inputs == UncertaintyInputs::AleatoricAndEpistemic {
        let epi = Array1::from(profile.epistemic.clone()).insert_axis(Axis(1));
        concatenate![Axis(1), alea, epi]
    } else {
        alea
    };
    Ok(concatenate![Axis(1), x, extra])
}

/// Logistic model over features with optional uncertainty inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GaiaClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub uncertainty_inputs: UncertaintyInputs,
}

impl GaiaClassifier {
    pub fn zeros(n_features: usize, inputs: UncertaintyInputs) -> Self {
        Self { weights: vec![0.0; n_features + inputs.extra_columns()], bias: 0.0, uncertainty_inputs: inputs }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.len()
    }

    pub fn n_features(&self) -> usize {
        self.weights.len() - self.uncertainty_inputs.extra_columns()
    }

    pub fn logits(&self, x_aug: ArrayView2<f64>) -> Result<Vec<f64>> {
        check_lengths(self.input_dim(), &[("input columns", x_aug.ncols())])?;
        let w = ndarray::ArrayView1::from(&self.weights);
        Ok(x_aug.dot(&w).iter().map(|z| z + self.bias).collect())
    }

    pub fn predict_proba(&self, x_aug: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self.logits(x_aug)?.into_iter().map(sigmoid).collect())
    }

    /// Flat parameter vector `[weights..., bias]`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.weights.clone();
        p.push(self.bias);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let d = self.weights.len();
        self.weights.copy_from_slice(&p[..d]);
        self.bias = p[d];
    }

    /// Batch loss and its gradient with respect to [`Self::params`].
    /// `batch` indexes into the per-sample weight vectors of `kind`.
    pub fn loss_and_grad(
        &self,
        x_aug: ArrayView2<f64>,
        labels: &[u8],
        protected: &[u8],
        kind: &LossKind,
        batch: &[usize],
    ) -> Result<(LossParts, Vec<f64>)> {
        check_lengths(
            x_aug.nrows(),
            &[("labels", labels.len()), ("protected", protected.len()), ("batch", batch.len())],
        )?;
        let logits = self.logits(x_aug)?;
        let (parts, dlogit) = loss_from_logits(&logits, labels, protected, kind, batch);
        let dz = Array1::from(dlogit);
        let mut grad = x_aug.t().dot(&dz).to_vec();
        grad.push(dz.sum());
        Ok((parts, grad))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: CheckpointKind::Logistic,
            layer_shapes: vec![(self.input_dim(), 1)],
            activation: None,
            prior_std: None,
            mu: self.params(),
            rho: None,
            meta: serde_json::json!({ "uncertainty_inputs": self.uncertainty_inputs }),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bad = || ObjectiveError::LengthMismatch("checkpoint is not a logistic model".into());
        if ck.kind != CheckpointKind::Logistic || ck.layer_shapes.len() != 1 || ck.layer_shapes[0].1 != 1 {
            return Err(bad());
        }
        let d = ck.layer_shapes[0].0;
        if ck.mu.len() != d + 1 {
            return Err(bad());
        }
        let inputs: UncertaintyInputs =
            ck.meta.get("uncertainty_inputs").and_then(|v| serde_json::from_value(v.clone()).ok()).ok_or_else(bad)?;
        if d < inputs.extra_columns() {
            return Err(bad());
        }
        let mut m = Self::zeros(d - inputs.extra_columns(), inputs);
        m.set_params(&ck.mu);
        Ok(m)
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaiaHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub k: f64,
    pub umin_pct: f64,
    pub umax_pct: f64,
    pub uncertainty_inputs: UncertaintyInputs,
    pub smoothing_decay: f64,
    pub selection_warmup: usize,
}

impl Default for GaiaHyper {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 64,
            lr: 1e-2,
            k: 1.0,
            umin_pct: 1.0,
            umax_pct: 99.0,
            uncertainty_inputs: UncertaintyInputs::AleatoricOnly,
            smoothing_decay: 0.98,
            selection_warmup: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierFit {
    pub model: GaiaClassifier,
    pub log: TrainLog,
}

/// Train the logistic model on batches from `mode` with the given loss.
/// `x_aug` must already contain the uncertainty columns for `inputs`.
pub fn train_classifier(
    ds: &Dataset,
    x_aug: ArrayView2<f64>,
    inputs: UncertaintyInputs,
    kind: &LossKind,
    mode: BatchMode,
    hyper: &GaiaHyper,
    seed: u64,
) -> Result<ClassifierFit> {
    let n = ds.n_samples();
    check_lengths(n, &[("augmented rows", x_aug.nrows()), ("loss weights", kind.n())])?;
    let mut model = GaiaClassifier::zeros(ds.n_features(), inputs);
    check_lengths(model.input_dim(), &[("augmented columns", x_aug.ncols())])?;
    let mut log = TrainLog::default();
    if hyper.epochs == 0 {
        return Ok(ClassifierFit { model, log });
    }
    if !(hyper.lr > 0.0) {
        return Err(ObjectiveError::BadHyper(format!("learning rate {}", hyper.lr)));
    }
    let m = hyper.batch_size.min(n);
    let mut sampler = Sampler::new(ds, m, mode)?;
    let mut sampler_rng = rng::substream(seed, streams::GAIA_SAMPLER);
    let mut params = model.params();
    let mut opt = Adam::new(params.len(), hyper.lr);
    let mut smoother = SmoothedAccuracy::new(hyper.smoothing_decay, hyper.selection_warmup);
    let mut best: Option<Vec<f64>> = None;
    let mut step = 0;
    for _ in 0..hyper.epochs {
        for plan in sampler.epoch(&mut sampler_rng) {
            let idx = &plan.batch_indices;
            let xb = x_aug.select(Axis(0), idx);
            let yb: Vec<u8> = idx.iter().map(|&i| ds.labels()[i]).collect();
            let ab: Vec<u8> = idx.iter().map(|&i| ds.protected()[i]).collect();
            let (parts, grad) = model.loss_and_grad(xb.view(), &yb, &ab, kind, idx)?;
            if !parts.total.is_finite() {
                return Err(ObjectiveError::NonFiniteLoss(step));
            }
            let probs = model.predict_proba(xb.view())?;
            log.losses.push(parts.total);
            let acc = batch_accuracy(&probs, &yb);
            if smoother.update(acc) {
                best = Some(params.clone());
                log.selected_step = Some(step);
            }
            log.smoothed_accuracy.push(smoother.value().unwrap_or(acc));
            opt.step(&mut params, &grad);
            model.set_params(&params);
            step += 1;
        }
    }
    if let Some(bp) = best {
        model.set_params(&bp);
    }
    Ok(ClassifierFit { model, log })
}

/// Fit the uncertainty-guided classifier. Returns the fit and the beta
/// configuration derived from the training-set uncertainties.
pub fn train_gaia(
    ds: &Dataset,
    profile: &UncertaintyProfile,
    cfg: &BetaConfig,
    mode: BatchMode,
    hyper: &GaiaHyper,
    seed: u64,
) -> Result<ClassifierFit> {
    check_lengths(ds.n_samples(), &[("uncertainty profile", profile.len())])?;
    let b = beta(&profile.aleatoric, cfg)?;
    let x_aug = augment(ds.features().view(), Some(profile), hyper.uncertainty_inputs)?;
    train_classifier(ds, x_aug.view(), hyper.uncertainty_inputs, &LossKind::Gaia { beta: b }, mode, hyper, seed)
}

/// Plain logistic regression: unit-weight cross-entropy on shuffled batches.
pub fn train_erm(ds: &Dataset, hyper: &GaiaHyper, seed: u64) -> Result<ClassifierFit> {
    let ones = vec![1.0; ds.n_samples()];
    train_classifier(
        ds,
        ds.features().view(),
        UncertaintyInputs::None,
        &LossKind::WeightedCe { weights: ones },
        BatchMode::Plain,
        hyper,
        seed,
    )
}
