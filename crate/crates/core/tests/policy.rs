//! Soft actor-critic on problems small enough to solve exactly.

use mbcd_core::policy::{SacConfig, SacPolicy};
use mbcd_core::replay::{ReplayBuffer, Transition};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bandit_reward(a: f64) -> f64 {
    -(a - 0.5) * (a - 0.5)
}

/// One-step bandit with a constant state; every transition is terminal.
fn bandit_buffer(rng: &mut ChaCha8Rng) -> ReplayBuffer<f64> {
    let mut buf = ReplayBuffer::new(2000);
    for _ in 0..2000 {
        let a: f64 = rng.gen_range(-1.0..1.0);
        buf.push(Transition {
            state: vec![1.0],
            action: vec![a],
            reward: bandit_reward(a),
            next_state: vec![1.0],
            terminal: true,
        });
    }
    buf
}

fn train_bandit(beta: f64, steps: usize, seed: u64) -> SacPolicy<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SacConfig {
        hidden: vec![32, 32],
        actor_lr: 3e-3,
        critic_lr: 3e-3,
        beta,
        batch_size: 64,
        ..SacConfig::default()
    };
    let mut policy = SacPolicy::new(1, 1, &cfg, &mut rng).unwrap();
    let buf = bandit_buffer(&mut rng);
    let empty = ReplayBuffer::new(1);
    for _ in 0..steps {
        policy.optimize_step(&buf, &empty, 0.0, &mut rng).unwrap();
    }
    policy
}

/// Monte-Carlo entropy of the squashed policy at the bandit state.
fn entropy(policy: &SacPolicy<f64>, rng: &mut ChaCha8Rng) -> f64 {
    let n = 4000;
    let states = Array2::from_elem((n, 1), 1.0);
    let noise = policy.sample_noise(n, rng);
    let s = policy.sample_with_noise(states.view(), noise).unwrap();
    -s.log_prob.mean().unwrap()
}

#[test]
fn bandit_converges_to_the_best_arm() {
    let policy = train_bandit(0.01, 1500, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = policy.act(&[1.0], true, &mut rng).unwrap()[0];
    assert!((a - 0.5).abs() < 0.1, "greedy action {a}");
}

/// Two arms at the ends of the action range: `a = 1` pays 1, `a = -1` pays 0,
/// linear in between. The soft-optimal policy is proportional to
/// `exp(a / (2 beta))` on `[-1, 1]` with mean `coth(1 / (2 beta)) - 2 beta`,
/// about 0.90 at `beta = 0.05` (and only 0.61 at the default 0.2).
#[test]
fn two_arm_bandit_prefers_the_paying_arm() {
    let beta: f64 = 0.05;
    let soft_mean = 1.0 / (1.0 / (2.0 * beta)).tanh() - 2.0 * beta;
    assert!(soft_mean > 0.8);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = SacConfig {
        hidden: vec![32, 32],
        beta,
        batch_size: 64,
        ..SacConfig::default()
    };
    let mut policy = SacPolicy::new(1, 1, &cfg, &mut rng).unwrap();
    let mut buf = ReplayBuffer::new(2000);
    for _ in 0..2000 {
        let a: f64 = rng.gen_range(-1.0..1.0);
        buf.push(Transition {
            state: vec![1.0],
            action: vec![a],
            reward: (a + 1.0) / 2.0,
            next_state: vec![1.0],
            terminal: true,
        });
    }
    let empty = ReplayBuffer::new(1);
    for _ in 0..5000 {
        policy.optimize_step(&buf, &empty, 0.0, &mut rng).unwrap();
    }
    let a = policy.act(&[1.0], true, &mut rng).unwrap()[0];
    assert!(a > 0.8, "mean action {a}");
}

#[test]
fn target_networks_follow_tau() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut buf = ReplayBuffer::new(64);
    for _ in 0..64 {
        buf.push(Transition {
            state: vec![rng.gen_range(-1.0..1.0)],
            action: vec![rng.gen_range(-1.0..1.0)],
            reward: rng.gen_range(-1.0..1.0),
            next_state: vec![rng.gen_range(-1.0..1.0)],
            terminal: false,
        });
    }
    let empty = ReplayBuffer::new(1);
    for tau in [0.0, 1.0] {
        let cfg = SacConfig {
            hidden: vec![8],
            tau,
            batch_size: 16,
            ..SacConfig::default()
        };
        let mut policy = SacPolicy::new(1, 1, &cfg, &mut rng).unwrap();
        let before = policy.target1.clone();
        policy.optimize_step(&buf, &empty, 0.0, &mut rng).unwrap();
        assert_ne!(policy.critic1, before);
        if tau == 0.0 {
            assert_eq!(policy.target1, before);
        } else {
            assert_eq!(policy.target1, policy.critic1);
            assert_eq!(policy.target2, policy.critic2);
        }
    }
}

#[test]
fn entropy_grows_with_the_temperature() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let low = entropy(&train_bandit(0.001, 1500, 3), &mut rng);
    let high = entropy(&train_bandit(0.1, 1500, 3), &mut rng);
    assert!(high > low + 0.5, "entropy {low} at low beta vs {high} at high beta");
}

/// Two states with one-hot encoding. The action only affects the reward,
/// and each step moves to the other state.
const TARGETS: [f64; 2] = [0.5, -0.3];
const BONUS: [f64; 2] = [1.0, 0.0];
const GAMMA: f64 = 0.5;

fn mdp_reward(s: usize, a: f64) -> f64 {
    BONUS[s] - (a - TARGETS[s]).powi(2)
}

fn one_hot(s: usize) -> Vec<f64> {
    let mut v = vec![0.0; 2];
    v[s] = 1.0;
    v
}

/// Value iteration over a dense action grid.
fn value_iteration() -> [f64; 2] {
    let grid: Vec<f64> = (0..=2000).map(|i| -1.0 + i as f64 * 0.001).collect();
    let mut v = [0.0; 2];
    for _ in 0..200 {
        let mut next = [0.0; 2];
        for (s, slot) in next.iter_mut().enumerate() {
            *slot = grid
                .iter()
                .map(|&a| mdp_reward(s, a) + GAMMA * v[1 - s])
                .fold(f64::NEG_INFINITY, f64::max);
        }
        v = next;
    }
    v
}

#[test]
fn zero_temperature_critic_matches_value_iteration() {
    let v = value_iteration();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = SacConfig {
        hidden: vec![32, 32],
        actor_lr: 1e-3,
        critic_lr: 3e-3,
        gamma: GAMMA,
        tau: 0.02,
        beta: 0.0,
        batch_size: 64,
        ..SacConfig::default()
    };
    let mut policy = SacPolicy::new(2, 1, &cfg, &mut rng).unwrap();
    let mut buf = ReplayBuffer::new(4000);
    for i in 0..4000 {
        let s = i % 2;
        let a: f64 = rng.gen_range(-1.0..1.0);
        buf.push(Transition {
            state: one_hot(s),
            action: vec![a],
            reward: mdp_reward(s, a),
            next_state: one_hot(1 - s),
            terminal: false,
        });
    }
    let empty = ReplayBuffer::new(1);
    for _ in 0..4000 {
        policy.optimize_step(&buf, &empty, 0.0, &mut rng).unwrap();
    }
    for s in 0..2 {
        let a = policy.act(&one_hot(s), true, &mut rng).unwrap()[0];
        assert!((a - TARGETS[s]).abs() < 0.1, "state {s}: greedy action {a}");
        for probe in [-0.8, 0.0, 0.6] {
            let expected = mdp_reward(s, probe) + GAMMA * v[1 - s];
            let states = Array2::from_shape_vec((1, 2), one_hot(s)).unwrap();
            let actions = Array2::from_elem((1, 1), probe);
            let q = policy.min_q(states.view(), actions.view()).unwrap()[0];
            assert!((q - expected).abs() < 0.05, "Q({s}, {probe}) = {q}, expected {expected}");
        }
    }
}
