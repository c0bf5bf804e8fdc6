mod common;

use gaia_core::bnn::{
    binary_entropy, decompose_uncertainty, fit_bnn, sample_forward, train_bnn, Activation, BnnHyper,
    PosteriorPredictive, VariationalNet,
};
use gaia_core::checkpoint::Checkpoint;
use gaia_core::data::{generate_synthetic, split, SyntheticSpec};
use gaia_core::metrics::{accuracy, hard_labels};
use gaia_core::rng::seeded;
use gaia_core::sampler::BatchMode;
use ndarray::{array, Array2};
use proptest::prelude::*;

fn net(seed: u64) -> VariationalNet {
    VariationalNet::new(3, &[6, 4], 1.0, Activation::LeakyRelu { slope: 0.01 }, -3.0, &mut seeded(seed))
}

#[test]
fn elbo_gradients_match_finite_differences() {
    for seed in 0..3 {
        let (err, n) = common::elbo_fd_error(seed);
        assert!(n <= 1000);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn sample_forward_is_deterministic_per_seed() {
    let net = net(1);
    let x = Array2::from_shape_fn((7, 3), |(i, j)| (i as f64 - 3.0) * 0.4 + j as f64);
    let a = sample_forward(&net, x.view(), 16, &mut seeded(5)).unwrap();
    let b = sample_forward(&net, x.view(), 16, &mut seeded(5)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.n_draws(), 16);
}

#[test]
fn more_draws_reduce_estimator_variance() {
    let net = VariationalNet::new(3, &[6, 4], 1.0, Activation::LeakyRelu { slope: 0.01 }, 0.0, &mut seeded(2));
    let x = Array2::from_shape_fn((5, 3), |(i, j)| (i + j) as f64 * 0.3 - 1.0);
    let spread = |j: usize| {
        let vals: Vec<f64> = (0..40)
            .map(|s| {
                decompose_uncertainty(&sample_forward(&net, x.view(), j, &mut seeded(100 + s)).unwrap()).aleatoric[0]
            })
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64
    };
    assert!(spread(128) < spread(8));
}

#[test]
fn trivial_uncertainty_cases() {
    let half = PosteriorPredictive::from_draws(Array2::from_elem((4, 1), 0.5));
    let u = decompose_uncertainty(&half);
    assert!((u.aleatoric[0] - std::f64::consts::LN_2).abs() < 1e-12);
    assert_eq!(u.epistemic[0], 0.0);
    let sure = decompose_uncertainty(&PosteriorPredictive::from_draws(Array2::from_elem((4, 1), 1.0)));
    assert!(sure.aleatoric[0].abs() < 1e-9 && sure.epistemic[0] == 0.0);
    let split_draws = decompose_uncertainty(&PosteriorPredictive::from_draws(array![[0.0], [1.0], [0.0], [1.0]]));
    assert!(split_draws.aleatoric[0].abs() < 1e-9);
    assert!((split_draws.epistemic[0] - 0.25).abs() < 1e-12);
}

#[test]
fn zero_epochs_returns_the_initial_net() {
    let ds = generate_synthetic(&SyntheticSpec::new(100, 3, 0.1, 0)).unwrap();
    let init = net(4);
    let hyper = BnnHyper { epochs: 0, ..BnnHyper::default() };
    let (out, log) = fit_bnn(init.clone(), &ds, BatchMode::Ls, &hyper, 0).unwrap();
    assert_eq!(out, init);
    assert!(log.losses.is_empty());
}

#[test]
fn separable_synthetic_is_learned() {
    let ds = generate_synthetic(&SyntheticSpec::new(4000, 6, 0.0, 21)).unwrap();
    let (train, _, test) = split(&ds, (0.8, 0.0, 0.2), 21).unwrap();
    let hyper = BnnHyper { hidden: vec![16, 16, 16], j_eval: 16, ..BnnHyper::default() };
    let fit = train_bnn(&train, BatchMode::Ls, &hyper, 21).unwrap();
    let probs = fit.net.mean_probs(test.features().view()).unwrap();
    let acc = accuracy(&hard_labels(&probs, 0.5), test.labels()).unwrap();
    assert!(acc > 0.9, "accuracy {acc}");
    assert_eq!(fit.profile.len(), train.n_samples());
    assert!(fit.log.selected_step.is_some());
}

#[test]
fn training_loss_decreases() {
    let ds = generate_synthetic(&SyntheticSpec::new(2000, 4, 0.0, 12)).unwrap();
    let hyper = BnnHyper { hidden: vec![16, 16, 16], j_eval: 8, ..BnnHyper::default() };
    let fit = train_bnn(&ds, BatchMode::Plain, &hyper, 12).unwrap();
    let median = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let l = &fit.log.losses;
    let tenth = l.len() / 10;
    assert!(median(&l[l.len() - tenth..]) < median(&l[..tenth]));
}

#[test]
fn training_is_reproducible() {
    let ds = generate_synthetic(&SyntheticSpec::new(300, 3, 0.2, 2)).unwrap();
    let hyper = BnnHyper { hidden: vec![8, 8, 8], epochs: 2, j_eval: 8, ..BnnHyper::default() };
    let a = train_bnn(&ds, BatchMode::Als, &hyper, 7).unwrap();
    let b = train_bnn(&ds, BatchMode::Als, &hyper, 7).unwrap();
    assert_eq!(a.net, b.net);
    assert_eq!(a.profile, b.profile);
}

#[test]
fn checkpoint_file_round_trip_is_exact() {
    let mut n = net(8);
    n.mu_mut()[0] = 0.1 + 0.2;
    n.rho_mut()[1] = -1e-300;
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bnn.json");
    n.to_checkpoint().save(&p).unwrap();
    let back = VariationalNet::from_checkpoint(&Checkpoint::load(&p).unwrap()).unwrap();
    assert_eq!(back, n);
}

proptest! {
    #[test]
    fn uncertainty_bounds_hold(draws in proptest::collection::vec(0.0f64..=1.0, 1..40)) {
        let j = draws.len();
        let pp = PosteriorPredictive::from_draws(Array2::from_shape_vec((j, 1), draws).unwrap());
        let u = decompose_uncertainty(&pp);
        prop_assert!((0.0..=std::f64::consts::LN_2).contains(&u.aleatoric[0]));
        prop_assert!((0.0..=0.25).contains(&u.epistemic[0]));
    }

    #[test]
    fn entropy_is_symmetric(p in 0.0f64..=1.0) {
        prop_assert!((binary_entropy(p) - binary_entropy(1.0 - p)).abs() < 1e-12);
    }

    #[test]
    fn kl_is_non_negative(mu in proptest::collection::vec(-3.0f64..3.0, 9), rho in proptest::collection::vec(-6.0f64..3.0, 9)) {
        let n = VariationalNet::from_parts(vec![(2, 2), (2, 1)], mu, rho, 1.0, Activation::Relu).unwrap();
        prop_assert!(n.kl_divergence() >= -1e-12);
    }
}
