//! Fairness-utility training guided by aleatoric uncertainty.
//!
//! A mean-field variational network is trained on interventionally
//! resampled batches to estimate per-sample aleatoric and epistemic
//! uncertainty. A logistic classifier is then trained with a loss that
//! weights cross-entropy and a group cross-entropy gap by that uncertainty.
//!
//! Modules:
//! - [`data`]: Adult/German ingest, splits, synthetic generator, canonical format
//! - [`sampler`]: LabelShift / AttrLabelShift batch construction
//! - [`bnn`]: variational network, ELBO, uncertainty decomposition
//! - [`objective`]: beta weighting, bi-objective loss, classifier training
//! - [`metrics`]: group and individual fairness metrics
//! - [`harness`]: experiment matrix, pruning sweeps, Pareto fronts, theory checks

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bnn;
pub mod checkpoint;
pub mod data;
pub mod harness;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod sampler;
