//! Interventional mini-batch sampling.
//!
//! LabelShift redraws the favored-label share `p ~ U(0,1)` for every batch;
//! AttrLabelShift additionally redraws the protected-group share
//! `p_attr ~ U(0,1)`, independently of `p`. Samples are then drawn without
//! replacement with probability proportional to their stratum weight and
//! uniformly within a stratum.
//!
//! When a stratum runs out before the batch is full, the remaining draws
//! renormalize over the strata that still have members; if every remaining
//! stratum has zero weight they are drawn in proportion to stratum size.
//! Batches therefore always have exactly `m` distinct indices.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("dataset contains a single label class")]
    SingleClassDataset,
    #[error("joint cell (protected={protected}, label={label}) is empty")]
    EmptyJointCell { protected: u8, label: u8 },
    #[error("batch size {m} invalid for {n} samples")]
    BatchTooLarge { m: usize, n: usize },
    #[error("forced proportion {0} outside [0, 1]")]
    BadProportion(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BatchMode {
    /// Uniformly shuffled batches (ERM).
    Plain,
    /// LabelShift.
    Ls,
    /// AttrLabelShift.
    Als,
}

impl std::fmt::Display for BatchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BatchMode::Plain => "plain",
            BatchMode::Ls => "ls",
            BatchMode::Als => "als",
        })
    }
}

/// How AttrLabelShift turns `(p, p_attr)` into per-sample weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlsWeighting {
    /// `P(a) P(y) / n_{a,y}`: the batch's expected joint of (A, Y) is the
    /// product of the drawn marginals, so A and Y are independent given the
    /// draw.
    #[default]
    Cell,
    /// `(P(a) / n_a) (P(y) / n_y)`: product of the two marginal-count
    /// weights. This rescales rows and columns of the (A, Y) table and so
    /// keeps the dataset's odds ratio in every batch.
    Marginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub mode: BatchMode,
    /// Favored-label share drawn for this batch (absent for plain batches).
    pub p_label: Option<f64>,
    /// Protected-group share (AttrLabelShift only).
    pub p_attr: Option<f64>,
    /// Unnormalized selection weight of every dataset index.
    pub selection_prob: Vec<f64>,
    pub batch_indices: Vec<usize>,
}

/// Precomputed strata for one dataset.
#[derive(Debug, Clone)]
pub struct Sampler {
    mode: BatchMode,
    weighting: AlsWeighting,
    m: usize,
    n: usize,
    /// Stratum id of every dataset index.
    stratum_of: Vec<usize>,
    /// Members per stratum. Order is scrambled by sampling and carries no
    /// meaning.
    pools: Vec<Vec<usize>>,
    label_counts: [usize; 2],
    attr_counts: [usize; 2],
}

impl Sampler {
    pub fn new(ds: &Dataset, m: usize, mode: BatchMode) -> Result<Self, SamplerError> {
        let n = ds.n_samples();
        if m == 0 || m > n {
            return Err(SamplerError::BatchTooLarge { m, n });
        }
        let cells = ds.cell_counts();
        let label_counts = [cells[0][0] + cells[1][0], cells[0][1] + cells[1][1]];
        let attr_counts = [cells[0][0] + cells[0][1], cells[1][0] + cells[1][1]];
        let (n_strata, stratum_of): (usize, Vec<usize>) = match mode {
            BatchMode::Plain => (1, vec![0; n]),
            BatchMode::Ls => {
                if label_counts.contains(&0) {
                    return Err(SamplerError::SingleClassDataset);
                }
                (2, ds.labels().iter().map(|&y| y as usize).collect())
            }
            BatchMode::Als => {
                for a in 0..2u8 {
                    for y in 0..2u8 {
                        if cells[a as usize][y as usize] == 0 {
                            return Err(SamplerError::EmptyJointCell { protected: a, label: y });
                        }
                    }
                }
                let ids = ds.protected().iter().zip(ds.labels()).map(|(&a, &y)| 2 * a as usize + y as usize).collect();
                (4, ids)
            }
        };
        let mut pools = vec![Vec::new(); n_strata];
        for (i, &s) in stratum_of.iter().enumerate() {
            pools[s].push(i);
        }
        Ok(Self { mode, weighting: AlsWeighting::default(), m, n, stratum_of, pools, label_counts, attr_counts })
    }

    pub fn with_als_weighting(mut self, weighting: AlsWeighting) -> Self {
        self.weighting = weighting;
        self
    }

    pub fn mode(&self) -> BatchMode {
        self.mode
    }

    pub fn batch_size(&self) -> usize {
        self.m
    }

    /// Batches per epoch, `ceil(n / m)`.
    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.m)
    }

    /// One interventional batch with freshly drawn proportions.
    pub fn next_plan<R: Rng + ?Sized>(&mut self, rng: &mut R) -> BatchPlan {
        match self.mode {
            BatchMode::Plain => {
                let idx = self.draw(&[1.0], self.m, rng);
                let w = 1.0 / self.n as f64;
                BatchPlan {
                    mode: self.mode,
                    p_label: None,
                    p_attr: None,
                    selection_prob: vec![w; self.n],
                    batch_indices: idx,
                }
            }
            BatchMode::Ls => {
                let p: f64 = rng.random();
                self.forced_plan(p, None, rng).expect("p drawn from [0, 1)")
            }
            BatchMode::Als => {
                let p: f64 = rng.random();
                let p_attr: f64 = rng.random();
                self.forced_plan(p, Some(p_attr), rng).expect("proportions drawn from [0, 1)")
            }
        }
    }

    /// Batch with the proportions fixed by the caller. `p_attr` is ignored
    /// in LabelShift mode and required in AttrLabelShift mode.
    pub fn forced_plan<R: Rng + ?Sized>(
        &mut self,
        p_label: f64,
        p_attr: Option<f64>,
        rng: &mut R,
    ) -> Result<BatchPlan, SamplerError> {
        for p in std::iter::once(p_label).chain(p_attr) {
            if !(0.0..=1.0).contains(&p) {
                return Err(SamplerError::BadProportion(p));
            }
        }
        let label_share = [1.0 - p_label, p_label];
        let weights: Vec<f64> = match self.mode {
            BatchMode::Plain => vec![1.0 / self.n as f64],
            BatchMode::Ls => (0..2).map(|y| label_share[y] / self.label_counts[y] as f64).collect(),
            BatchMode::Als => {
                let pa = p_attr.unwrap_or(0.5);
                let attr_share = [1.0 - pa, pa];
                (0..4)
                    .map(|s| {
                        let (a, y) = (s / 2, s % 2);
                        match self.weighting {
                            AlsWeighting::Cell => attr_share[a] * label_share[y] / self.pools[s].len() as f64,
                            AlsWeighting::Marginal => {
                                (attr_share[a] / self.attr_counts[a] as f64)
                                    * (label_share[y] / self.label_counts[y] as f64)
                            }
                        }
                    })
                    .collect()
            }
        };
        let selection_prob = self.stratum_of.iter().map(|&s| weights[s]).collect();
        let batch_indices = self.draw(&weights, self.m, rng);
        Ok(BatchPlan {
            mode: self.mode,
            p_label: (self.mode != BatchMode::Plain).then_some(p_label),
            p_attr: if self.mode == BatchMode::Als { p_attr.or(Some(0.5)) } else { None },
            selection_prob,
            batch_indices,
        })
    }

    /// All plans of one epoch. Plain mode partitions a fresh permutation;
    /// the interventional modes draw `ceil(n / m)` independent batches.
    pub fn epoch<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<BatchPlan> {
        if self.mode == BatchMode::Plain {
            let perm = self.draw(&[1.0], self.n, rng);
            let w = 1.0 / self.n as f64;
            return perm
                .chunks(self.m)
                .map(|c| BatchPlan {
                    mode: BatchMode::Plain,
                    p_label: None,
                    p_attr: None,
                    selection_prob: vec![w; self.n],
                    batch_indices: c.to_vec(),
                })
                .collect();
        }
        (0..self.batches_per_epoch()).map(|_| self.next_plan(rng)).collect()
    }

    /// Sequential weighted sampling without replacement over strata with
    /// uniform per-sample weight inside each stratum.
    fn draw<R: Rng + ?Sized>(&mut self, weights: &[f64], m: usize, rng: &mut R) -> Vec<usize> {
        let mut taken = vec![0usize; self.pools.len()];
        let mut out = Vec::with_capacity(m);
        let mut mass = vec![0.0; self.pools.len()];
        for _ in 0..m {
            let mut total = 0.0;
            for s in 0..self.pools.len() {
                let left = (self.pools[s].len() - taken[s]) as f64;
                mass[s] = left * weights[s];
                total += mass[s];
            }
            if total <= 0.0 {
                // Spill: nothing with positive weight is left.
                total = 0.0;
                for s in 0..self.pools.len() {
                    mass[s] = (self.pools[s].len() - taken[s]) as f64;
                    total += mass[s];
                }
            }
            let mut target = rng.random::<f64>() * total;
            let mut s = 0;
            while s + 1 < mass.len() && (target >= mass[s] || mass[s] == 0.0) {
                target -= mass[s];
                s += 1;
            }
            // Rounding can land on a massless last stratum.
            while mass[s] == 0.0 {
                s = (s + mass.len() - 1) % mass.len();
            }
            let pool = &mut self.pools[s];
            let j = rng.random_range(taken[s]..pool.len());
            pool.swap(taken[s], j);
            out.push(pool[taken[s]]);
            taken[s] += 1;
        }
        out
    }
}

/// A single LabelShift batch.
pub fn label_shift_batch<R: Rng + ?Sized>(ds: &Dataset, m: usize, rng: &mut R) -> Result<BatchPlan, SamplerError> {
    Ok(Sampler::new(ds, m, BatchMode::Ls)?.next_plan(rng))
}

/// A single AttrLabelShift batch.
pub fn attr_label_shift_batch<R: Rng + ?Sized>(ds: &Dataset, m: usize, rng: &mut R) -> Result<BatchPlan, SamplerError> {
    Ok(Sampler::new(ds, m, BatchMode::Als)?.next_plan(rng))
}

pub fn epoch_batches<R: Rng + ?Sized>(
    ds: &Dataset,
    m: usize,
    mode: BatchMode,
    rng: &mut R,
) -> Result<Vec<BatchPlan>, SamplerError> {
    Ok(Sampler::new(ds, m, mode)?.epoch(rng))
}
