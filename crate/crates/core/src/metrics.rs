//! Group fairness (AOD, EOD), individual fairness (generalized entropy,
//! consistency), balanced accuracy and the group BCE gap.
//!
//! Group rates with an empty denominator are reported as undefined, never
//! as 0.

use std::collections::BTreeSet;
use std::fmt;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("{rate} undefined for group {group}")]
    UndefinedRate { group: Group, rate: Rate },
    #[error("all benefits are zero")]
    ZeroMeanBenefit,
    #[error("need more than {k} samples, got {n}")]
    TooFewSamples { n: usize, k: usize },
    #[error("only one protected group present")]
    SingleGroup,
    #[error("empty input")]
    Empty,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Protected group id, or the pooled population.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    G0,
    G1,
    Pooled,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::G0 => "0",
            Group::G1 => "1",
            Group::Pooled => "pooled",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rate {
    Tpr,
    Fpr,
    Tnr,
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rate::Tpr => "TPR",
            Rate::Fpr => "FPR",
            Rate::Tnr => "TNR",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn tpr(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    pub fn fpr(&self) -> Option<f64> {
        let d = self.fp + self.tn;
        (d > 0).then(|| self.fp as f64 / d as f64)
    }

    pub fn tnr(&self) -> Option<f64> {
        let d = self.fp + self.tn;
        (d > 0).then(|| self.tn as f64 / d as f64)
    }

    pub fn accuracy(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| (self.tp + self.tn) as f64 / n as f64)
    }

    fn add(&self, o: &Confusion) -> Confusion {
        Confusion { tp: self.tp + o.tp, fp: self.fp + o.fp, tn: self.tn + o.tn, fn_: self.fn_ + o.fn_ }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroupConfusion {
    /// Indexed by protected attribute value.
    pub groups: [Confusion; 2],
}

impl GroupConfusion {
    pub fn pooled(&self) -> Confusion {
        self.groups[0].add(&self.groups[1])
    }

    fn rate(&self, g: usize, rate: Rate) -> Result<f64> {
        let c = &self.groups[g];
        let v = match rate {
            Rate::Tpr => c.tpr(),
            Rate::Fpr => c.fpr(),
            Rate::Tnr => c.tnr(),
        };
        v.ok_or(MetricsError::UndefinedRate { group: if g == 0 { Group::G0 } else { Group::G1 }, rate })
    }

    /// `|TPR_0 - TPR_1|`.
    pub fn tpr_gap(&self) -> Result<f64> {
        Ok((self.rate(0, Rate::Tpr)? - self.rate(1, Rate::Tpr)?).abs())
    }

    /// `|FPR_0 - FPR_1|`.
    pub fn fpr_gap(&self) -> Result<f64> {
        Ok((self.rate(0, Rate::Fpr)? - self.rate(1, Rate::Fpr)?).abs())
    }
}

fn check_len(n: usize, parts: &[(&str, usize)]) -> Result<()> {
    for &(name, len) in parts {
        if len != n {
            return Err(MetricsError::LengthMismatch(format!("{name} has {len} entries, expected {n}")));
        }
    }
    Ok(())
}

/// Hard predictions from scores: `score >= threshold`.
pub fn hard_labels(scores: &[f64], threshold: f64) -> Vec<u8> {
    scores.iter().map(|&s| (s >= threshold) as u8).collect()
}

/// Confusion counts per protected group. `scores` may be probabilities or
/// 0/1 labels; both are thresholded.
pub fn confusion_by_group(
    scores: &[f64],
    true_labels: &[u8],
    protected: &[u8],
    threshold: f64,
) -> Result<GroupConfusion> {
    check_len(scores.len(), &[("true_labels", true_labels.len()), ("protected", protected.len())])?;
    let mut gc = GroupConfusion::default();
    for ((&s, &y), &a) in scores.iter().zip(true_labels).zip(protected) {
        let c = &mut gc.groups[a as usize];
        match (s >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(gc)
}

/// Average odds difference `(|dTPR| + |dFPR|) / 2`.
pub fn aod(gc: &GroupConfusion) -> Result<f64> {
    Ok((gc.tpr_gap()? + gc.fpr_gap()?) / 2.0)
}

/// Equal opportunity difference `|dTPR|`.
pub fn eod(gc: &GroupConfusion) -> Result<f64> {
    gc.tpr_gap()
}

/// `(TPR + TNR) / 2` on pooled counts.
pub fn balanced_accuracy(c: &Confusion) -> Result<f64> {
    let tpr = c.tpr().ok_or(MetricsError::UndefinedRate { group: Group::Pooled, rate: Rate::Tpr })?;
    let tnr = c.tnr().ok_or(MetricsError::UndefinedRate { group: Group::Pooled, rate: Rate::Tnr })?;
    Ok((tpr + tnr) / 2.0)
}

/// Generalized entropy index over benefits `b_i = yhat_i - y_i + 1`.
pub fn generalized_entropy(pred_labels: &[u8], true_labels: &[u8], alpha: f64) -> Result<f64> {
    check_len(pred_labels.len(), &[("true_labels", true_labels.len())])?;
    if pred_labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    let benefits: Vec<f64> = pred_labels.iter().zip(true_labels).map(|(&p, &y)| p as f64 - y as f64 + 1.0).collect();
    generalized_entropy_of(&benefits, alpha)
}

/// Entropy index of arbitrary non-negative benefits.
pub fn generalized_entropy_of(benefits: &[f64], alpha: f64) -> Result<f64> {
    let n = benefits.len() as f64;
    if benefits.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mu = benefits.iter().sum::<f64>() / n;
    if mu <= 0.0 {
        return Err(MetricsError::ZeroMeanBenefit);
    }
    let v = if alpha == 1.0 {
        benefits
            .iter()
            .map(|&b| {
                let r = b / mu;
                if r > 0.0 {
                    r * r.ln()
                } else {
                    0.0
                }
            })
            .sum::<f64>()
            / n
    } else if alpha == 0.0 {
        -benefits.iter().map(|&b| (b / mu).ln()).sum::<f64>() / n
    } else {
        benefits.iter().map(|&b| (b / mu).powf(alpha) - 1.0).sum::<f64>() / (n * alpha * (alpha - 1.0))
    };
    Ok(v)
}

/// Exact k-nearest-neighbor lists under Euclidean distance, self excluded,
/// ties broken by lower index.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    pub k: usize,
    pub neighbors: Vec<Vec<usize>>,
}

impl KnnGraph {
    pub fn build(features: ArrayView2<f64>, k: usize) -> Result<Self> {
        let n = features.nrows();
        if k == 0 || n <= k {
            return Err(MetricsError::TooFewSamples { n, k });
        }
        let rows: Vec<Vec<f64>> = features.rows().into_iter().map(|r| r.to_vec()).collect();
        // Per point: the k best (distance, index) pairs, sorted ascending.
        let mut best: Vec<Vec<(f64, usize)>> = vec![Vec::with_capacity(k + 1); n];
        fn offer(list: &mut Vec<(f64, usize)>, k: usize, cand: (f64, usize)) {
            if list.len() == k {
                let worst = list[k - 1];
                if (cand.0, cand.1) >= (worst.0, worst.1) {
                    return;
                }
            }
            let pos = list.partition_point(|&(d, j)| (d, j) < (cand.0, cand.1));
            list.insert(pos, cand);
            list.truncate(k);
        }
        for i in 0..n {
            let (head, tail) = rows.split_at(i + 1);
            let xi = &head[i];
            for (off, xj) in tail.iter().enumerate() {
                let j = i + 1 + off;
                let d: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
                offer(&mut best[i], k, (d, j));
                offer(&mut best[j], k, (d, i));
            }
        }
        Ok(Self { k, neighbors: best.into_iter().map(|l| l.into_iter().map(|(_, j)| j).collect()).collect() })
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// `1 - (1/n) sum_i |yhat_i - mean_{j in kNN(i)} yhat_j|`.
    pub fn consistency(&self, pred_labels: &[u8]) -> Result<f64> {
        check_len(self.len(), &[("pred_labels", pred_labels.len())])?;
        let n = self.len() as f64;
        let dev: f64 = self
            .neighbors
            .iter()
            .zip(pred_labels)
            .map(|(nb, &p)| {
                let m = nb.iter().map(|&j| pred_labels[j] as f64).sum::<f64>() / self.k as f64;
                (p as f64 - m).abs()
            })
            .sum();
        Ok(1.0 - dev / n)
    }
}

pub fn consistency_score(features: ArrayView2<f64>, pred_labels: &[u8], k: usize) -> Result<f64> {
    check_len(features.nrows(), &[("pred_labels", pred_labels.len())])?;
    KnnGraph::build(features, k)?.consistency(pred_labels)
}

/// `|mean BCE over A=0 - mean BCE over A=1|` with unit weights.
pub fn bce_group_difference(probs: &[f64], true_labels: &[u8], protected: &[u8]) -> Result<f64> {
    check_len(probs.len(), &[("true_labels", true_labels.len()), ("protected", protected.len())])?;
    let mut sum = [0.0; 2];
    let mut cnt = [0usize; 2];
    for ((&p, &y), &a) in probs.iter().zip(true_labels).zip(protected) {
        let p = p.clamp(crate::objective::PROB_EPS, 1.0 - crate::objective::PROB_EPS);
        let l = if y == 1 { -p.ln() } else { -(1.0 - p).ln() };
        sum[a as usize] += l;
        cnt[a as usize] += 1;
    }
    if cnt.contains(&0) {
        return Err(MetricsError::SingleGroup);
    }
    Ok((sum[0] / cnt[0] as f64 - sum[1] / cnt[1] as f64).abs())
}

pub fn accuracy(pred_labels: &[u8], true_labels: &[u8]) -> Result<f64> {
    check_len(pred_labels.len(), &[("true_labels", true_labels.len())])?;
    if pred_labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(pred_labels.iter().zip(true_labels).filter(|(a, b)| a == b).count() as f64 / pred_labels.len() as f64)
}

/// Ranks with ties sharing their average rank (1-based).
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation; `None` when either side has zero variance.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// All metrics for one set of predictions. Metrics that cannot be computed
/// are `None` and named in `undefined_flags`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub aod: Option<f64>,
    pub eod: Option<f64>,
    pub ge: Option<f64>,
    pub cs: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub accuracy: Option<f64>,
    pub bce_diff: Option<f64>,
    pub confusion: GroupConfusion,
    pub undefined_flags: BTreeSet<String>,
}

/// Inputs for [`FairnessReport::compute`].
pub struct Evaluation<'a> {
    pub probs: &'a [f64],
    pub true_labels: &'a [u8],
    pub protected: &'a [u8],
    /// Precomputed neighbor graph for the consistency score.
    pub knn: Option<&'a KnnGraph>,
}

impl FairnessReport {
    pub fn compute(ev: &Evaluation<'_>) -> Result<Self> {
        let gc = confusion_by_group(ev.probs, ev.true_labels, ev.protected, 0.5)?;
        let preds = hard_labels(ev.probs, 0.5);
        let mut flags = BTreeSet::new();
        let mut keep = |name: &str, r: Result<f64>| match r {
            Ok(v) => Some(v),
            Err(e) => {
                flags.insert(format!("{name}: {e}"));
                None
            }
        };
        let aod_v = keep("aod", aod(&gc));
        let eod_v = keep("eod", eod(&gc));
        let ge = keep("ge", generalized_entropy(&preds, ev.true_labels, 2.0));
        let cs = match ev.knn {
            Some(g) => keep("cs", g.consistency(&preds)),
            None => None,
        };
        let ba = keep("balanced_accuracy", balanced_accuracy(&gc.pooled()));
        let acc = keep("accuracy", accuracy(&preds, ev.true_labels));
        let bce = keep("bce_diff", bce_group_difference(ev.probs, ev.true_labels, ev.protected));
        Ok(Self {
            aod: aod_v,
            eod: eod_v,
            ge,
            cs,
            balanced_accuracy: ba,
            accuracy: acc,
            bce_diff: bce,
            confusion: gc,
            undefined_flags: flags,
        })
    }
}
