//! Zero-delay oracle: one frozen policy per context, switched exactly at the
//! scheduled change points.

use mbcd_core::environments::{schedule_context, ContextSchedule, Environment, MazeSpec, NonStationaryMaze};
use mbcd_core::policy::{SacConfig, SacPolicy};
use mbcd_core::replay::{ReplayBuffer, Transition};
use mbcd_core::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

fn lift<S: Scalar>(v: &[f64]) -> Vec<S> {
    v.iter().map(|&x| S::lit(x)).collect()
}

/// Trains a SAC policy alone in `spec` for `steps` environment steps.
pub fn train_policy<S: Scalar>(
    spec: &MazeSpec,
    sac: &SacConfig,
    learning_starts: usize,
    steps: u64,
    seed: u64,
) -> Result<SacPolicy<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = NonStationaryMaze::new(vec![spec.clone()], ContextSchedule::constant(0))?;
    let mut policy = SacPolicy::<S>::new(env.state_dim(), env.action_dim(), sac, &mut rng)?;
    let mut real = ReplayBuffer::new(steps.max(1) as usize);
    let none = ReplayBuffer::new(1);
    for _ in 0..steps {
        let s = env.observation();
        let a = policy.act(&lift::<S>(&s), false, &mut rng)?;
        let a: Vec<f64> = a.iter().map(|v| v.as_f64()).collect();
        let out = env.step(&a)?;
        real.push(Transition {
            state: lift(&s),
            action: lift(&a),
            reward: S::lit(out.reward),
            next_state: lift(&out.next_state),
            terminal: out.terminal,
        });
        if real.len() >= learning_starts {
            policy.optimize_step(&real, &none, 0.0, &mut rng)?;
        }
    }
    Ok(policy)
}

/// Acts with the policy of the context the schedule says is active.
#[derive(Debug, Clone)]
pub struct OracleAgent<S> {
    policies: Vec<SacPolicy<S>>,
    schedule: ContextSchedule,
    rng: ChaCha8Rng,
}

impl<S: Scalar> OracleAgent<S> {
    pub fn new(policies: Vec<SacPolicy<S>>, schedule: ContextSchedule, seed: u64) -> Result<Self> {
        if schedule.max_context() >= policies.len() {
            return Err(mbcd_core::Error::InvalidContext {
                id: schedule.max_context(),
                known: policies.len(),
            }
            .into());
        }
        Ok(Self {
            policies,
            schedule,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Trains one policy per context in `pool`, each in isolation.
    pub fn pretrain(
        pool: &[MazeSpec],
        schedule: ContextSchedule,
        sac: &SacConfig,
        learning_starts: usize,
        steps: u64,
        seed: u64,
    ) -> Result<Self> {
        let policies = pool
            .iter()
            .enumerate()
            .map(|(k, spec)| {
                let s = seed.wrapping_mul(1_000_003).wrapping_add(k as u64 + 1);
                train_policy::<S>(spec, sac, learning_starts, steps, s)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(policies, schedule, seed)
    }

    pub fn policies(&self) -> &[SacPolicy<S>] {
        &self.policies
    }

    pub fn context_at(&self, t: u64) -> usize {
        schedule_context(&self.schedule, t)
    }

    pub fn act(&mut self, t: u64, state: &[f64], deterministic: bool) -> Result<Vec<f64>> {
        let k = self.context_at(t);
        let a = self.policies[k].act(&lift::<S>(state), deterministic, &mut self.rng)?;
        Ok(a.iter().map(|v| v.as_f64()).collect())
    }
}
