//! Mean-field Gaussian variational network trained with Bayes by Backprop.
//!
//! Every weight and bias has a variational mean `mu` and a raw scale `rho`,
//! with standard deviation `sigma = ln(1 + exp(rho))`. Draws use the
//! reparameterization `theta = mu + sigma * eps`, `eps ~ N(0, I)`, so the
//! loss is differentiable in `(mu, rho)`. The output layer is a single logit
//! followed by a sigmoid.
//!
//! Parameters are stored flat. Layer `l` with shape `(in, out)` occupies
//! `in * out` row-major weights followed by `out` biases.

use std::f64::consts::LN_2;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::data::Dataset;
use crate::optim::{Adam, SmoothedAccuracy, TrainLog};
use crate::rng::{self, streams};
use crate::sampler::{BatchMode, Sampler, SamplerError};

#[derive(Debug, Error)]
pub enum BnnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at step {step} (nll {nll}, kl {kl})")]
    NonFiniteLoss { step: usize, nll: f64, kl: f64 },
    #[error("bad hyperparameter: {0}")]
    BadHyper(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

pub type Result<T> = std::result::Result<T, BnnError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Activation::Relu => z.max(0.0),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-y ln sigmoid(z) - (1 - y) ln(1 - sigmoid(z))`, evaluated without
/// forming the probability.
#[inline]
fn bce_with_logit(z: f64, y: f64) -> f64 {
    softplus(z) - y * z
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalNet {
    layer_shapes: Vec<(usize, usize)>,
    mu: Vec<f64>,
    rho: Vec<f64>,
    prior_std: f64,
    activation: Activation,
}

impl VariationalNet {
    /// Fresh network with `mu ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))` and a
    /// constant `rho`.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        prior_std: f64,
        activation: Activation,
        rho_init: f64,
        rng: &mut R,
    ) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let layer_shapes: Vec<(usize, usize)> = dims.windows(2).map(|w| (w[0], w[1])).collect();
        let mut mu = Vec::new();
        for &(i, o) in &layer_shapes {
            let bound = 1.0 / (i as f64).sqrt();
            for _ in 0..(i * o + o) {
                mu.push(rng.random_range(-bound..bound));
            }
        }
        let rho = vec![rho_init; mu.len()];
        Self { layer_shapes, mu, rho, prior_std, activation }
    }

    pub fn from_parts(
        layer_shapes: Vec<(usize, usize)>,
        mu: Vec<f64>,
        rho: Vec<f64>,
        prior_std: f64,
        activation: Activation,
    ) -> Result<Self> {
        let expected: usize = layer_shapes.iter().map(|&(i, o)| i * o + o).sum();
        if mu.len() != expected || rho.len() != expected {
            return Err(BnnError::ShapeMismatch(format!(
                "layer shapes need {expected} parameters, got mu {} / rho {}",
                mu.len(),
                rho.len()
            )));
        }
        if layer_shapes.windows(2).any(|w| w[0].1 != w[1].0) || layer_shapes.last().is_none_or(|l| l.1 != 1) {
            return Err(BnnError::ShapeMismatch("layers do not chain to a single output".into()));
        }
        if !(prior_std > 0.0) {
            return Err(BnnError::BadHyper(format!("prior_std {prior_std}")));
        }
        Ok(Self { layer_shapes, mu, rho, prior_std, activation })
    }

    pub fn layer_shapes(&self) -> &[(usize, usize)] {
        &self.layer_shapes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_shapes[0].0
    }

    pub fn n_params(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn mu_mut(&mut self) -> &mut [f64] {
        &mut self.mu
    }

    pub fn rho_mut(&mut self) -> &mut [f64] {
        &mut self.rho
    }

    pub fn prior_std(&self) -> f64 {
        self.prior_std
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| softplus(r)).collect()
    }

    /// Closed-form `KL(q || N(0, prior_std^2))` summed over all parameters.
    pub fn kl_divergence(&self) -> f64 {
        let sp = self.prior_std;
        self.mu
            .iter()
            .zip(&self.rho)
            .map(|(&m, &r)| {
                let s = softplus(r);
                (sp / s).ln() + (s * s + m * m) / (2.0 * sp * sp) - 0.5
            })
            .sum()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(BnnError::ShapeMismatch(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn draw_theta<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let eps: Vec<f64> = (0..self.mu.len()).map(|_| rng.sample(StandardNormal)).collect();
        let theta = self.mu.iter().zip(&self.rho).zip(&eps).map(|((&m, &r), &e)| m + softplus(r) * e).collect();
        (theta, eps)
    }

    /// Sigmoid outputs for one concrete parameter vector.
    pub fn probs_with(&self, theta: &[f64], x: ArrayView2<f64>) -> Vec<f64> {
        forward(&self.layer_shapes, self.activation, theta, x, None).iter().map(|&z| sigmoid(z)).collect()
    }

    /// Deterministic pass at the variational means.
    pub fn mean_probs(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.check_input(&x)?;
        Ok(self.probs_with(&self.mu, x))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: CheckpointKind::Variational,
            layer_shapes: self.layer_shapes.clone(),
            activation: Some(self.activation),
            prior_std: Some(self.prior_std),
            mu: self.mu.clone(),
            rho: Some(self.rho.clone()),
            meta: serde_json::Value::Null,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        match (ck.kind, &ck.rho, ck.prior_std, ck.activation) {
            (CheckpointKind::Variational, Some(rho), Some(ps), Some(act)) => {
                Self::from_parts(ck.layer_shapes.clone(), ck.mu.clone(), rho.clone(), ps, act)
            }
            _ => Err(BnnError::ShapeMismatch("checkpoint is not a variational network".into())),
        }
    }
}

fn layer_view(theta: &[f64], offset: usize, i: usize, o: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
    let w = ArrayView2::from_shape((i, o), &theta[offset..offset + i * o]).expect("slice sized i*o");
    let b = ArrayView1::from(&theta[offset + i * o..offset + i * o + o]);
    (w, b)
}

struct ForwardCache {
    /// Input to every layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Array2<f64>>,
}

/// Logits for every row of `x`.
fn forward(
    shapes: &[(usize, usize)],
    act: Activation,
    theta: &[f64],
    x: ArrayView2<f64>,
    mut cache: Option<&mut ForwardCache>,
) -> Array1<f64> {
    let mut h = x.to_owned();
    let mut offset = 0;
    let last = shapes.len() - 1;
    for (l, &(i, o)) in shapes.iter().enumerate() {
        let (w, b) = layer_view(theta, offset, i, o);
        offset += i * o + o;
        let mut z = h.dot(&w);
        z += &b;
        if l == last {
            if let Some(c) = cache.as_deref_mut() {
                c.inputs.push(h);
            }
            return z.index_axis_move(Axis(1), 0);
        }
        let a = z.mapv(|v| act.apply(v));
        if let Some(c) = cache.as_deref_mut() {
            c.inputs.push(h);
            c.pre.push(z);
        }
        h = a;
    }
    unreachable!("network has at least one layer")
}

/// Accumulate `d loss / d theta` given `d loss / d logit`.
fn backward(
    shapes: &[(usize, usize)],
    act: Activation,
    theta: &[f64],
    cache: &ForwardCache,
    dlogit: Array1<f64>,
    grad: &mut [f64],
) {
    let offsets: Vec<usize> = shapes
        .iter()
        .scan(0, |acc, &(i, o)| {
            let start = *acc;
            *acc += i * o + o;
            Some(start)
        })
        .collect();
    let mut dz = dlogit.insert_axis(Axis(1));
    for l in (0..shapes.len()).rev() {
        let (i, o) = shapes[l];
        let off = offsets[l];
        let input = &cache.inputs[l];
        {
            let (gw_slice, rest) = grad[off..off + i * o + o].split_at_mut(i * o);
            let mut gw = ArrayViewMut2::from_shape((i, o), gw_slice).expect("slice sized i*o");
            gw += &input.t().dot(&dz);
            let mut gb = ArrayViewMut1::from(rest);
            gb += &dz.sum_axis(Axis(0));
        }
        if l > 0 {
            let (w, _) = layer_view(theta, off, i, o);
            let mut dh = dz.dot(&w.t());
            let pre = &cache.pre[l - 1];
            dh.zip_mut_with(pre, |d, &z| *d *= act.derivative(z));
            dz = dh;
        }
    }
}

/// Loss pieces and gradients of one ELBO evaluation.
#[derive(Debug, Clone)]
pub struct ElboOutput {
    pub loss: f64,
    /// Negative log-likelihood summed over the batch, averaged over draws.
    pub nll: f64,
    pub kl: f64,
    pub grad_mu: Vec<f64>,
    pub grad_rho: Vec<f64>,
    /// Per-sample predictive probability averaged over the training draws.
    pub mean_probs: Vec<f64>,
}

/// `kl_weight * KL(q || prior) + E_q[-log p(y | x, theta)]`, the expectation
/// estimated with `j_train` reparameterized draws. The likelihood term sums
/// over the batch.
pub fn elbo_loss<R: Rng + ?Sized>(
    net: &VariationalNet,
    x: ArrayView2<f64>,
    y: &[u8],
    kl_weight: f64,
    rng: &mut R,
    j_train: usize,
) -> Result<ElboOutput> {
    net.check_input(&x)?;
    if y.len() != x.nrows() {
        return Err(BnnError::ShapeMismatch(format!("{} labels for {} rows", y.len(), x.nrows())));
    }
    if j_train == 0 || !(kl_weight >= 0.0) {
        return Err(BnnError::BadHyper(format!("j_train {j_train}, kl_weight {kl_weight}")));
    }
    let p = net.n_params();
    let b = x.nrows();
    let inv_j = 1.0 / j_train as f64;
    let yf: Array1<f64> = y.iter().map(|&v| v as f64).collect();
    let mut grad_mu = vec![0.0; p];
    let mut grad_rho = vec![0.0; p];
    let mut nll = 0.0;
    let mut mean_probs = vec![0.0; b];
    let mut g_theta = vec![0.0; p];
    for _ in 0..j_train {
        let (theta, eps) = net.draw_theta(rng);
        let mut cache = ForwardCache { inputs: Vec::new(), pre: Vec::new() };
        let logits = forward(&net.layer_shapes, net.activation, &theta, x, Some(&mut cache));
        let mut dlogit = Array1::zeros(b);
        for k in 0..b {
            let z = logits[k];
            nll += bce_with_logit(z, yf[k]) * inv_j;
            let pk = sigmoid(z);
            mean_probs[k] += pk * inv_j;
            dlogit[k] = (pk - yf[k]) * inv_j;
        }
        g_theta.iter_mut().for_each(|g| *g = 0.0);
        backward(&net.layer_shapes, net.activation, &theta, &cache, dlogit, &mut g_theta);
        for q in 0..p {
            grad_mu[q] += g_theta[q];
            grad_rho[q] += g_theta[q] * eps[q] * sigmoid(net.rho[q]);
        }
    }
    let kl = net.kl_divergence();
    let sp2 = net.prior_std * net.prior_std;
    for q in 0..p {
        let s = softplus(net.rho[q]);
        grad_mu[q] += kl_weight * net.mu[q] / sp2;
        grad_rho[q] += kl_weight * (-1.0 / s + s / sp2) * sigmoid(net.rho[q]);
    }
    let loss = kl_weight * kl + nll;
    Ok(ElboOutput { loss, nll, kl, grad_mu, grad_rho, mean_probs })
}

/// Per-draw and averaged posterior predictive probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorPredictive {
    pub mean_prob: Vec<f64>,
    /// `J x n_samples`.
    pub per_draw_probs: Array2<f64>,
}

impl PosteriorPredictive {
    pub fn from_draws(per_draw_probs: Array2<f64>) -> Self {
        let mean_prob = per_draw_probs.mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default();
        Self { mean_prob, per_draw_probs }
    }

    pub fn n_draws(&self) -> usize {
        self.per_draw_probs.nrows()
    }
}

/// Run the network under `j` posterior draws.
pub fn sample_forward<R: Rng + ?Sized>(
    net: &VariationalNet,
    x: ArrayView2<f64>,
    j: usize,
    rng: &mut R,
) -> Result<PosteriorPredictive> {
    net.check_input(&x)?;
    if j == 0 {
        return Err(BnnError::BadHyper("at least one posterior draw is required".into()));
    }
    let n = x.nrows();
    let mut draws = Array2::zeros((j, n));
    for mut row in draws.rows_mut() {
        let (theta, _) = net.draw_theta(rng);
        let probs = net.probs_with(&theta, x);
        row.assign(&ArrayView1::from(&probs));
    }
    Ok(PosteriorPredictive::from_draws(draws))
}

/// Per-sample uncertainty split into an aleatoric and an epistemic part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyProfile {
    /// Expected binary entropy over posterior draws, in nats.
    pub aleatoric: Vec<f64>,
    /// Population variance of the predictive probability over draws.
    pub epistemic: Vec<f64>,
    pub n_posterior_samples: usize,
}

impl UncertaintyProfile {
    pub fn len(&self) -> usize {
        self.aleatoric.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aleatoric.is_empty()
    }

    pub fn mean_aleatoric(&self) -> f64 {
        self.aleatoric.iter().sum::<f64>() / self.aleatoric.len().max(1) as f64
    }
}

/// Binary entropy in nats with `0 ln 0 = 0`.
#[inline]
pub fn binary_entropy(p: f64) -> f64 {
    #[inline]
    fn xlnx(v: f64) -> f64 {
        if v <= 0.0 {
            0.0
        } else {
            v * v.ln()
        }
    }
    let p = p.clamp(0.0, 1.0);
    (-xlnx(p) - xlnx(1.0 - p)).clamp(0.0, LN_2)
}

pub fn decompose_uncertainty(pp: &PosteriorPredictive) -> UncertaintyProfile {
    let draws = &pp.per_draw_probs;
    let j = draws.nrows();
    let n = draws.ncols();
    let mut aleatoric = Vec::with_capacity(n);
    let mut epistemic = Vec::with_capacity(n);
    for col in draws.columns() {
        let h = col.iter().map(|&p| binary_entropy(p)).sum::<f64>() / j as f64;
        let m = col.sum() / j as f64;
        let var = col.iter().map(|&p| (p - m) * (p - m)).sum::<f64>() / j as f64;
        aleatoric.push(h.clamp(0.0, LN_2));
        epistemic.push(var.clamp(0.0, 0.25));
    }
    UncertaintyProfile { aleatoric, epistemic, n_posterior_samples: j }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BnnHyper {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub j_train: usize,
    pub j_eval: usize,
    pub prior_std: f64,
    pub rho_init: f64,
    pub leaky_slope: f64,
    /// Defaults to `1 / batches_per_epoch`.
    pub kl_weight: Option<f64>,
    pub smoothing_decay: f64,
    /// Batches before a checkpoint may be selected.
    pub selection_warmup: usize,
}

impl Default for BnnHyper {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            epochs: 5,
            batch_size: 64,
            lr: 1e-3,
            j_train: 2,
            j_eval: 64,
            prior_std: 1.0,
            rho_init: -5.0,
            leaky_slope: 0.01,
            kl_weight: None,
            smoothing_decay: 0.98,
            selection_warmup: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BnnFit {
    pub net: VariationalNet,
    /// Uncertainty over the training set under `j_eval` draws.
    pub profile: UncertaintyProfile,
    pub log: TrainLog,
}

/// Train on interventional batches and return the best smoothed-accuracy
/// checkpoint together with its training-set uncertainty.
pub fn train_bnn(ds: &Dataset, mode: BatchMode, hyper: &BnnHyper, seed: u64) -> Result<BnnFit> {
    let mut init_rng = rng::substream(seed, streams::BNN_INIT);
    let net = VariationalNet::new(
        ds.n_features(),
        &hyper.hidden,
        hyper.prior_std,
        Activation::LeakyRelu { slope: hyper.leaky_slope },
        hyper.rho_init,
        &mut init_rng,
    );
    let (net, log) = fit_bnn(net, ds, mode, hyper, seed)?;
    let mut eval_rng = rng::substream(seed, streams::BNN_EVAL);
    let pp = sample_forward(&net, ds.features().view(), hyper.j_eval, &mut eval_rng)?;
    Ok(BnnFit { profile: decompose_uncertainty(&pp), net, log })
}

/// Optimization loop on an existing network. Zero epochs returns it as is.
pub fn fit_bnn(
    mut net: VariationalNet,
    ds: &Dataset,
    mode: BatchMode,
    hyper: &BnnHyper,
    seed: u64,
) -> Result<(VariationalNet, TrainLog)> {
    let mut log = TrainLog::default();
    if hyper.epochs == 0 {
        return Ok((net, log));
    }
    if !(hyper.lr > 0.0) {
        return Err(BnnError::BadHyper("learning rate must be positive".into()));
    }
    let m = hyper.batch_size.min(ds.n_samples());
    let mut sampler = Sampler::new(ds, m, mode)?;
    let kl_weight = hyper.kl_weight.unwrap_or(1.0 / sampler.batches_per_epoch() as f64);
    let mut sampler_rng = rng::substream(seed, streams::BNN_SAMPLER);
    let mut noise_rng = rng::substream(seed, streams::BNN_NOISE);
    let p = net.n_params();
    let mut params = [net.mu.clone(), net.rho.clone()].concat();
    let mut opt = Adam::new(2 * p, hyper.lr);
    let mut smoother = SmoothedAccuracy::new(hyper.smoothing_decay, hyper.selection_warmup);
    let mut best: Option<Vec<f64>> = None;
    let mut step = 0;
    for _ in 0..hyper.epochs {
        for plan in sampler.epoch(&mut sampler_rng) {
            let xb = ds.features().select(Axis(0), &plan.batch_indices);
            let yb: Vec<u8> = plan.batch_indices.iter().map(|&i| ds.labels()[i]).collect();
            let out = elbo_loss(&net, xb.view(), &yb, kl_weight, &mut noise_rng, hyper.j_train)?;
            if !out.loss.is_finite() || out.grad_mu.iter().chain(&out.grad_rho).any(|g| !g.is_finite()) {
                return Err(BnnError::NonFiniteLoss { step, nll: out.nll, kl: out.kl });
            }
            let acc = crate::optim::batch_accuracy(&out.mean_probs, &yb);
            log.losses.push(out.loss);
            if smoother.update(acc) {
                best = Some(params.clone());
                log.selected_step = Some(step);
            }
            log.smoothed_accuracy.push(smoother.value().unwrap_or(acc));
            let grad = [out.grad_mu, out.grad_rho].concat();
            opt.step(&mut params, &grad);
            net.mu.copy_from_slice(&params[..p]);
            net.rho.copy_from_slice(&params[p..]);
            step += 1;
        }
    }
    if let Some(bp) = best {
        net.mu.copy_from_slice(&bp[..p]);
        net.rho.copy_from_slice(&bp[p..]);
    }
    Ok((net, log))
}
