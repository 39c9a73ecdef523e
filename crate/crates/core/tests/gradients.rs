//! Analytic gradients of every trained loss against central differences.

use mbcd_core::dynamics::nll_loss_and_grad;
use mbcd_core::nn::{numerical_gradient, relative_error, DenseNetwork, GaussianHead, Gradients};
use mbcd_core::policy::{SacConfig, SacPolicy};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

/// Moves every parameter by a random offset. Freshly built networks have zero
/// biases, which puts whole rows exactly on a ReLU kink whenever a previous
/// layer is fully inactive.
fn jitter(net: &mut DenseNetwork<f64>, rng: &mut ChaCha8Rng) {
    let params: Vec<f64> = net
        .flat_params()
        .into_iter()
        .map(|p| p + rng.gen_range(-0.3..0.3))
        .collect();
    net.set_flat_params(&params).unwrap();
}

fn rel_error(
    net: &DenseNetwork<f64>,
    analytic: &Gradients<f64>,
    loss: impl FnMut(&DenseNetwork<f64>) -> f64,
) -> f64 {
    relative_error(&analytic.flatten(), &numerical_gradient(net, H, loss))
}

#[test]
fn dynamics_nll_gradient() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = DenseNetwork::<f64>::new(&[4, 8, 8, 6], &mut rng).unwrap();
        jitter(&mut net, &mut rng);
        let head = GaussianHead::new(-10.0, 4.0).unwrap();
        let x = random_matrix(7, 4, &mut rng);
        let y = random_matrix(7, 3, &mut rng);
        let (_, g) = nll_loss_and_grad(&net, &head, x.view(), y.view()).unwrap();
        let err = rel_error(&net, &g, |n| nll_loss_and_grad(n, &head, x.view(), y.view()).unwrap().0);
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn dynamics_nll_gradient_near_logvar_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut net = DenseNetwork::<f64>::new(&[2, 6, 4], &mut rng).unwrap();
    jitter(&mut net, &mut rng);
    let last = net.layers().len() - 1;
    net.layers_mut()[last].bias[2] = 6.0;
    net.layers_mut()[last].bias[3] = -14.0;
    let head = GaussianHead::new(-10.0, 4.0).unwrap();
    let x = random_matrix(5, 2, &mut rng);
    let y = random_matrix(5, 2, &mut rng);
    let (_, g) = nll_loss_and_grad(&net, &head, x.view(), y.view()).unwrap();
    let err = rel_error(&net, &g, |n| nll_loss_and_grad(n, &head, x.view(), y.view()).unwrap().0);
    assert!(err < TOL, "{err}");
}

fn small_policy(seed: u64) -> (SacPolicy<f64>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SacConfig {
        hidden: vec![8, 8],
        ..SacConfig::default()
    };
    (SacPolicy::new(3, 2, &cfg, &mut rng).unwrap(), rng)
}

#[test]
fn critic_loss_gradient() {
    for seed in 0..3 {
        let (mut policy, mut rng) = small_policy(seed);
        jitter(&mut policy.critic1, &mut rng);
        let s = random_matrix(6, 3, &mut rng);
        let a = random_matrix(6, 2, &mut rng);
        let y: Array1<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (_, g) = SacPolicy::critic_loss_and_grad(&policy.critic1, s.view(), a.view(), &y).unwrap();
        let err = rel_error(&policy.critic1, &g, |n| {
            SacPolicy::critic_loss_and_grad(n, s.view(), a.view(), &y).unwrap().0
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn actor_loss_gradient_with_frozen_noise() {
    for seed in 0..3 {
        let (mut policy, mut rng) = small_policy(seed);
        jitter(&mut policy.actor, &mut rng);
        jitter(&mut policy.critic1, &mut rng);
        jitter(&mut policy.critic2, &mut rng);
        let s = random_matrix(6, 3, &mut rng);
        let noise = policy.sample_noise(6, &mut rng);
        let (_, g) = policy.actor_loss_and_grad(s.view(), noise.clone()).unwrap();
        let err = rel_error(&policy.actor, &g, |n| {
            let mut p = policy.clone();
            p.actor = n.clone();
            p.actor_loss_and_grad(s.view(), noise.clone()).unwrap().0
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}
