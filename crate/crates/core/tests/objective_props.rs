mod common;

use gaia_core::bnn::{train_bnn, BnnHyper};
use gaia_core::data::{generate_synthetic, split, SyntheticSpec};
use gaia_core::metrics::{accuracy, hard_labels};
use gaia_core::objective::{
    augment, beta, fairness_loss, gaia_loss, train_classifier, train_erm, train_gaia, weighted_ce, BetaConfig,
    GaiaHyper, LossKind, UncertaintyInputs,
};
use gaia_core::rng::seeded;
use gaia_core::sampler::BatchMode;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn gaia_gradients_match_finite_differences() {
    for seed in 0..5 {
        let (err, _) = common::gaia_fd_error(seed);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn endpoint_reductions_are_exact() {
    let probs = [0.9, 0.2, 0.6, 0.35, 0.7, 0.05];
    let labels = [1, 0, 1, 1, 0, 0];
    let prot = [0, 1, 1, 0, 1, 0];
    let cfg = BetaConfig::new(1.0, 0.1, 0.5).unwrap();
    let at_max = gaia_loss(&probs, &labels, &prot, &[0.5; 6], &cfg).unwrap();
    assert_eq!(at_max.total, weighted_ce(&probs, &labels, &[1.0; 6]).unwrap());
    assert_eq!(at_max.fairness, 0.0);
    let at_min = gaia_loss(&probs, &labels, &prot, &[0.1; 6], &cfg).unwrap();
    assert_eq!(at_min.total, fairness_loss(&probs, &labels, &prot, &[1.0; 6]).unwrap());
    assert_eq!(at_min.utility, 0.0);
}

#[test]
fn random_predictor_fairness_vanishes_with_n() {
    let mut r = seeded(4);
    let n = 200_000;
    let probs: Vec<f64> = (0..n).map(|_| r.random_range(0.05..0.95)).collect();
    let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
    let prot: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
    let f = fairness_loss(&probs, &labels, &prot, &vec![1.0; n]).unwrap();
    assert!(f < 0.01, "{f}");
}

#[test]
fn single_group_batch_has_zero_fairness() {
    assert_eq!(fairness_loss(&[0.3, 0.8], &[1, 0], &[1, 1], &[1.0, 1.0]).unwrap(), 0.0);
}

#[test]
fn unit_beta_plain_training_equals_erm() {
    let ds = generate_synthetic(&SyntheticSpec::new(500, 4, 0.1, 3)).unwrap();
    let hyper = GaiaHyper { epochs: 3, ..GaiaHyper::default() };
    let erm = train_erm(&ds, &hyper, 5).unwrap();
    let ones = vec![1.0; ds.n_samples()];
    let gaia = train_classifier(
        &ds,
        ds.features().view(),
        UncertaintyInputs::None,
        &LossKind::Gaia { beta: ones },
        BatchMode::Plain,
        &hyper,
        5,
    )
    .unwrap();
    assert_eq!(gaia.log.losses, erm.log.losses);
    assert_eq!(gaia.model, erm.model);
}

#[test]
fn separable_synthetic_reaches_high_accuracy() {
    let ds = generate_synthetic(&SyntheticSpec::new(4000, 6, 0.0, 31)).unwrap();
    let (train, _, test) = split(&ds, (0.8, 0.0, 0.2), 31).unwrap();
    let bh = BnnHyper { hidden: vec![16, 16, 16], j_eval: 16, ..BnnHyper::default() };
    let bnn = train_bnn(&train, BatchMode::Als, &bh, 31).unwrap();
    let gh = GaiaHyper::default();
    let cfg = BetaConfig::from_percentiles(&bnn.profile.aleatoric, gh.umin_pct, gh.umax_pct, gh.k).unwrap();
    let fit = train_gaia(&train, &bnn.profile, &cfg, BatchMode::Als, &gh, 31).unwrap();
    let test_prof = gaia_core::bnn::decompose_uncertainty(
        &gaia_core::bnn::sample_forward(&bnn.net, test.features().view(), 16, &mut seeded(1)).unwrap(),
    );
    let x = augment(test.features().view(), Some(&test_prof), gh.uncertainty_inputs).unwrap();
    let p = fit.model.predict_proba(x.view()).unwrap();
    let acc = accuracy(&hard_labels(&p, 0.5), test.labels()).unwrap();
    assert!(acc > 0.95, "accuracy {acc}");
}

fn batch() -> impl Strategy<Value = (Vec<f64>, Vec<u8>, Vec<u8>, Vec<f64>)> {
    (2usize..30).prop_flat_map(|n| {
        (
            proptest::collection::vec(0.0f64..=1.0, n),
            proptest::collection::vec(0u8..2, n),
            proptest::collection::vec(0u8..2, n),
            proptest::collection::vec(0.0f64..1.0, n),
        )
    })
}

proptest! {
    #[test]
    fn gaia_loss_is_non_negative((p, y, a, u) in batch(), k in 0.25f64..4.0) {
        let cfg = BetaConfig::new(k, 0.0, 1.0).unwrap();
        let l = gaia_loss(&p, &y, &a, &u, &cfg).unwrap();
        prop_assert!(l.total >= 0.0 && l.utility >= 0.0 && l.fairness >= 0.0);
    }

    #[test]
    fn losses_are_permutation_invariant((p, y, a, u) in batch(), seed in 0u64..1000) {
        let cfg = BetaConfig::new(1.0, 0.0, 1.0).unwrap();
        let base = gaia_loss(&p, &y, &a, &u, &cfg).unwrap();
        let mut idx: Vec<usize> = (0..p.len()).collect();
        let mut r = seeded(seed);
        for i in (1..idx.len()).rev() {
            idx.swap(i, r.random_range(0..=i));
        }
        let perm = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let perm8 = |v: &[u8]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let shuffled = gaia_loss(&perm(&p), &perm8(&y), &perm8(&a), &perm(&u), &cfg).unwrap();
        prop_assert!((base.total - shuffled.total).abs() < 1e-12);
        prop_assert!((base.utility - shuffled.utility).abs() < 1e-12);
        prop_assert!((base.fairness - shuffled.fairness).abs() < 1e-12);
    }

    #[test]
    fn beta_is_bounded_and_monotone(u in proptest::collection::vec(-1.0f64..2.0, 1..50), k in 0.1f64..5.0) {
        let cfg = BetaConfig::new(k, 0.2, 0.7).unwrap();
        let b = beta(&u, &cfg).unwrap();
        prop_assert!(b.iter().all(|v| (0.0..=1.0).contains(v)));
        // Raising one sample's uncertainty moves its weight toward utility.
        for i in 0..u.len() {
            for j in 0..u.len() {
                if u[i] <= u[j] {
                    prop_assert!(b[i] <= b[j]);
                }
            }
        }
    }
}
