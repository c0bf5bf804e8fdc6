//! Adam and the smoothed-accuracy model selection shared by both trainers.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Bias-corrected exponential running average of per-batch training
/// accuracy, used to pick the checkpoint to keep. Checkpoints only become
/// eligible after `warmup` updates so a single lucky early batch cannot win.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothedAccuracy {
    pub decay: f64,
    pub warmup: usize,
    raw: f64,
    updates: usize,
    best: Option<f64>,
}

impl SmoothedAccuracy {
    pub fn new(decay: f64, warmup: usize) -> Self {
        Self { decay, warmup, raw: 0.0, updates: 0, best: None }
    }

    /// Feed one batch accuracy. Returns `true` when the smoothed value is a
    /// new eligible best, i.e. the caller should snapshot its parameters.
    pub fn update(&mut self, batch_accuracy: f64) -> bool {
        self.raw = self.decay * self.raw + (1.0 - self.decay) * batch_accuracy;
        self.updates += 1;
        let v = self.value().expect("at least one update");
        if self.updates < self.warmup {
            return false;
        }
        if self.best.is_none_or(|b| v > b) {
            self.best = Some(v);
            true
        } else {
            false
        }
    }

    pub fn value(&self) -> Option<f64> {
        (self.updates > 0).then(|| self.raw / (1.0 - self.decay.powi(self.updates as i32)))
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

/// Per-step record of a training run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub smoothed_accuracy: Vec<f64>,
    /// Step whose parameters were returned; `None` when no step qualified.
    pub selected_step: Option<usize>,
}

/// Fraction of `probs` on the correct side of 0.5.
pub fn batch_accuracy(probs: &[f64], labels: &[u8]) -> f64 {
    let hits = probs.iter().zip(labels).filter(|(&p, &y)| (p >= 0.5) == (y == 1)).count();
    hits as f64 / labels.len().max(1) as f64
}
