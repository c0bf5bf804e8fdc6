//! Helpers shared by the integration test targets: finite-difference
//! gradient checks and brute-force metric oracles written independently of
//! the library code.
#![allow(dead_code)]

use std::path::PathBuf;

use gaia_core::bnn::{elbo_loss, Activation, VariationalNet};
use gaia_core::data::{Dataset, SplitTag};
use gaia_core::objective::{GaiaClassifier, LossKind, UncertaintyInputs};
use gaia_core::rng::seeded;
use ndarray::Array2;
use rand::Rng;

pub fn data_file(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

/// Dataset whose (A, Y) cells hold `counts[a][y]` rows and one index feature.
pub fn cells(counts: [[usize; 2]; 2]) -> Dataset {
    let mut labels = Vec::new();
    let mut prot = Vec::new();
    for a in 0..2u8 {
        for y in 0..2u8 {
            for _ in 0..counts[a as usize][y as usize] {
                labels.push(y);
                prot.push(a);
            }
        }
    }
    let n = labels.len();
    let x = Array2::from_shape_fn((n, 1), |(i, _)| i as f64);
    Dataset::new(x, labels, prot, vec!["i".into()], SplitTag::Train).unwrap()
}

/// Relative error with a floor: entries whose magnitudes are both below
/// `floor` are compared on the absolute scale of `floor`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-6;

/// Max relative error between analytic and central-difference gradients of
/// the ELBO over all `mu` and `rho` entries. Returns `(error, n_params)`.
pub fn elbo_fd_error(seed: u64) -> (f64, usize) {
    let mut r = seeded(seed);
    let net = VariationalNet::new(4, &[8, 6], 1.0, Activation::LeakyRelu { slope: 0.01 }, -2.0, &mut r);
    let n = 12;
    let x = Array2::from_shape_fn((n, 4), |_| r.random_range(-1.5..1.5));
    let y: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
    let kl_weight = 0.3;
    let j = 3;
    let eval = |net: &VariationalNet| elbo_loss(net, x.view(), &y, kl_weight, &mut seeded(seed + 1000), j).unwrap();
    let base = eval(&net);
    let p = net.n_params();
    let mut worst: f64 = 0.0;
    for q in 0..p {
        for which in 0..2 {
            let mut plus = net.clone();
            let mut minus = net.clone();
            if which == 0 {
                plus.mu_mut()[q] += FD_STEP;
                minus.mu_mut()[q] -= FD_STEP;
            } else {
                plus.rho_mut()[q] += FD_STEP;
                minus.rho_mut()[q] -= FD_STEP;
            }
            let fd = (eval(&plus).loss - eval(&minus).loss) / (2.0 * FD_STEP);
            let an = if which == 0 { base.grad_mu[q] } else { base.grad_rho[q] };
            worst = worst.max(rel_err(an, fd, FD_FLOOR));
        }
    }
    (worst, 2 * p)
}

/// Same check for the classifier loss with random per-sample weights.
pub fn gaia_fd_error(seed: u64) -> (f64, usize) {
    let mut r = seeded(seed);
    let (n, d) = (10, 5);
    let x = Array2::from_shape_fn((n, d + 1), |_| r.random_range(-2.0..2.0));
    let y: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
    let mut a: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
    a[0] = 0;
    a[1] = 1;
    let beta: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
    let kind = LossKind::Gaia { beta };
    let batch: Vec<usize> = (0..n).collect();
    let mut model = GaiaClassifier::zeros(d, UncertaintyInputs::AleatoricOnly);
    let params: Vec<f64> = (0..=d + 1).map(|_| r.random_range(-1.0..1.0)).collect();
    model.set_params(&params);
    let (_, grad) = model.loss_and_grad(x.view(), &y, &a, &kind, &batch).unwrap();
    let mut worst: f64 = 0.0;
    for q in 0..params.len() {
        let mut pp = params.clone();
        pp[q] += FD_STEP;
        model.set_params(&pp);
        let lp = model.loss_and_grad(x.view(), &y, &a, &kind, &batch).unwrap().0.total;
        pp[q] -= 2.0 * FD_STEP;
        model.set_params(&pp);
        let lm = model.loss_and_grad(x.view(), &y, &a, &kind, &batch).unwrap().0.total;
        worst = worst.max(rel_err(grad[q], (lp - lm) / (2.0 * FD_STEP), FD_FLOOR));
    }
    (worst, params.len())
}

// ---------------------------------------------------------------------------
// Metric oracles: direct enumeration, no shared code with the library.
// ---------------------------------------------------------------------------

fn rate(num: usize, den: usize) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

/// (TPR, FPR) of group `g`, counting sample by sample.
pub fn oracle_rates(pred: &[u8], y: &[u8], a: &[u8], g: u8) -> (Option<f64>, Option<f64>) {
    let (mut tp, mut pos, mut fp, mut neg) = (0, 0, 0, 0);
    for i in 0..y.len() {
        if a[i] != g {
            continue;
        }
        if y[i] == 1 {
            pos += 1;
            if pred[i] == 1 {
                tp += 1;
            }
        } else {
            neg += 1;
            if pred[i] == 1 {
                fp += 1;
            }
        }
    }
    (rate(tp, pos), rate(fp, neg))
}

pub fn oracle_aod(pred: &[u8], y: &[u8], a: &[u8]) -> Option<f64> {
    let (t0, f0) = oracle_rates(pred, y, a, 0);
    let (t1, f1) = oracle_rates(pred, y, a, 1);
    Some(((t0? - t1?).abs() + (f0? - f1?).abs()) / 2.0)
}

pub fn oracle_eod(pred: &[u8], y: &[u8], a: &[u8]) -> Option<f64> {
    let (t0, _) = oracle_rates(pred, y, a, 0);
    let (t1, _) = oracle_rates(pred, y, a, 1);
    Some((t0? - t1?).abs())
}

/// GE with alpha = 2 in the expanded form
/// `(1 / (2n)) * sum_i (b_i^2 / mu^2 - 1)`.
pub fn oracle_ge2(pred: &[u8], y: &[u8]) -> Option<f64> {
    let n = y.len() as f64;
    let b: Vec<f64> = (0..y.len()).map(|i| pred[i] as f64 - y[i] as f64 + 1.0).collect();
    let mu = b.iter().sum::<f64>() / n;
    if mu == 0.0 {
        return None;
    }
    Some(b.iter().map(|v| v * v / (mu * mu) - 1.0).sum::<f64>() / (2.0 * n))
}

/// Consistency by sorting all other points for each sample.
pub fn oracle_cs(x: &Array2<f64>, pred: &[u8], k: usize) -> f64 {
    let n = x.nrows();
    let mut total = 0.0;
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let d2: f64 = (0..x.ncols()).map(|c| (x[[i, c]] - x[[j, c]]).powi(2)).sum();
                (d2.sqrt(), j)
            })
            .collect();
        others.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap().then(p.1.cmp(&q.1)));
        let mean = others[..k].iter().map(|&(_, j)| pred[j] as f64).sum::<f64>() / k as f64;
        total += (pred[i] as f64 - mean).abs();
    }
    1.0 - total / n as f64
}

/// Indices not dominated by any other point; larger is better on both axes.
pub fn oracle_front(points: &[(f64, f64)]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| {
            !(0..points.len()).any(|j| {
                let (p, q) = (points[i], points[j]);
                q.0 >= p.0 && q.1 >= p.1 && (q.0 > p.0 || q.1 > p.1)
            })
        })
        .collect()
}

fn agree(what: &str, lib: Option<f64>, oracle: Option<f64>) -> Result<(), String> {
    match (lib, oracle) {
        (None, None) => Ok(()),
        (Some(a), Some(b)) if (a - b).abs() <= 1e-12 => Ok(()),
        _ => Err(format!("{what}: library {lib:?} vs oracle {oracle:?}")),
    }
}

/// Random fixtures of at most ten samples, each scored by the library and
/// by the oracles above. Returns the number of fixtures checked.
pub fn metric_oracle_sweep(cases: usize, seed: u64) -> Result<usize, String> {
    use gaia_core::metrics::{aod, confusion_by_group, consistency_score, eod, generalized_entropy};
    let mut r = seeded(seed);
    for case in 0..cases {
        let n = r.random_range(2..=10);
        let y: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        let a: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        let pred: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        let scores: Vec<f64> = pred.iter().map(|&p| p as f64).collect();
        let gc = confusion_by_group(&scores, &y, &a, 0.5).map_err(|e| e.to_string())?;
        let tag = format!("case {case}");
        agree(&format!("{tag} aod"), aod(&gc).ok(), oracle_aod(&pred, &y, &a))?;
        agree(&format!("{tag} eod"), eod(&gc).ok(), oracle_eod(&pred, &y, &a))?;
        agree(&format!("{tag} ge"), generalized_entropy(&pred, &y, 2.0).ok(), oracle_ge2(&pred, &y))?;
        let k = r.random_range(1..n);
        // Coarse grid so that distance ties occur.
        let x = Array2::from_shape_fn((n, 2), |_| r.random_range(0..3) as f64);
        let cs = consistency_score(x.view(), &pred, k).map_err(|e| e.to_string())?;
        agree(&format!("{tag} cs"), Some(cs), Some(oracle_cs(&x, &pred, k)))?;
    }
    Ok(cases)
}

/// Random point clouds of up to 100 points on a coarse grid (many ties),
/// front compared against the quadratic oracle.
pub fn pareto_oracle_sweep(cases: usize, seed: u64) -> Result<usize, String> {
    let mut r = seeded(seed);
    for case in 0..cases {
        let n = r.random_range(1..=100);
        let pts: Vec<(f64, f64)> =
            (0..n).map(|_| (r.random_range(0..8) as f64 / 8.0, r.random_range(0..8) as f64 / 8.0)).collect();
        let got = gaia_core::harness::pareto_indices(&pts);
        let want = oracle_front(&pts);
        if got != want {
            return Err(format!("case {case}: {got:?} vs {want:?}"));
        }
    }
    Ok(cases)
}
