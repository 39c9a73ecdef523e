//! Soft actor-critic with a tanh-squashed Gaussian actor, twin critics,
//! Polyak-averaged targets and a fixed entropy coefficient, plus the
//! Dyna-style one-step rollout generator that feeds it simulated data.
//!
//! Actions live in `[-1, 1]^dim(A)`; environments rescale if they need to.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::TransitionModel;
use crate::error::{check_dim, Error, Result};
use crate::nn::{AdamState, DenseNetwork, Gradients, NetworkDump, SoftClamp};
use crate::replay::{ReplayBuffer, Transition};
use crate::scalar::{softplus, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    /// Entropy coefficient, kept fixed.
    pub beta: f64,
    pub batch_size: usize,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            gamma: 0.99,
            tau: 0.005,
            beta: 0.2,
            batch_size: 256,
            log_std_min: -5.0,
            log_std_max: 2.0,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config("gamma and tau must lie in [0, 1]".into()));
        }
        if self.beta < 0.0 || self.batch_size == 0 {
            return Err(Error::Config("beta must be >= 0 and batch_size >= 1".into()));
        }
        SoftClamp::new(self.log_std_min, self.log_std_max)?;
        Ok(())
    }
}

/// Minibatch in matrix form; rows are samples.
#[derive(Debug, Clone)]
pub struct Batch<S> {
    pub states: Array2<S>,
    pub actions: Array2<S>,
    pub rewards: Array1<S>,
    pub next_states: Array2<S>,
    /// 1 for terminal transitions, 0 otherwise.
    pub terminals: Array1<S>,
}

impl<S: Scalar> Batch<S> {
    pub fn from_transitions(items: &[&Transition<S>]) -> Result<Self> {
        let first = items.first().ok_or(Error::Empty("batch"))?;
        let (ds, da) = (first.state.len(), first.action.len());
        let b = items.len();
        let mut batch = Self {
            states: Array2::zeros((b, ds)),
            actions: Array2::zeros((b, da)),
            rewards: Array1::zeros(b),
            next_states: Array2::zeros((b, ds)),
            terminals: Array1::zeros(b),
        };
        for (i, t) in items.iter().enumerate() {
            check_dim("batch state", ds, t.state.len())?;
            check_dim("batch action", da, t.action.len())?;
            check_dim("batch next state", ds, t.next_state.len())?;
            batch.states.row_mut(i).assign(&ndarray::aview1(&t.state));
            batch.actions.row_mut(i).assign(&ndarray::aview1(&t.action));
            batch.next_states.row_mut(i).assign(&ndarray::aview1(&t.next_state));
            batch.rewards[i] = t.reward;
            batch.terminals[i] = if t.terminal { S::one() } else { S::zero() };
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Reparameterised draw from the squashed Gaussian, with what the actor
/// gradient needs.
#[derive(Debug, Clone)]
pub struct SquashedSample<S> {
    pub actions: Array2<S>,
    pub pre_tanh: Array2<S>,
    pub log_prob: Array1<S>,
    pub std: Array2<S>,
    /// d(log_std)/d(raw) of the soft clamp.
    pub log_std_slope: Array2<S>,
    pub noise: Array2<S>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SacLosses<S> {
    pub critic: S,
    pub actor: S,
}

#[derive(Debug, Clone)]
pub struct SacPolicy<S> {
    pub actor: DenseNetwork<S>,
    pub critic1: DenseNetwork<S>,
    pub critic2: DenseNetwork<S>,
    pub target1: DenseNetwork<S>,
    pub target2: DenseNetwork<S>,
    actor_opt: AdamState<S>,
    critic1_opt: AdamState<S>,
    critic2_opt: AdamState<S>,
    cfg: SacConfig,
    log_std: SoftClamp,
    state_dim: usize,
    action_dim: usize,
    warned_empty_model: bool,
}

impl<S: Scalar> SacPolicy<S> {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        cfg: &SacConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut actor_sizes = vec![state_dim];
        actor_sizes.extend(&cfg.hidden);
        actor_sizes.push(2 * action_dim);
        let mut critic_sizes = vec![state_dim + action_dim];
        critic_sizes.extend(&cfg.hidden);
        critic_sizes.push(1);
        let actor = DenseNetwork::new(&actor_sizes, rng)?;
        let critic1 = DenseNetwork::new(&critic_sizes, rng)?;
        let critic2 = DenseNetwork::new(&critic_sizes, rng)?;
        Ok(Self {
            target1: critic1.clone(),
            target2: critic2.clone(),
            actor,
            critic1,
            critic2,
            actor_opt: AdamState::new(cfg.actor_lr),
            critic1_opt: AdamState::new(cfg.critic_lr),
            critic2_opt: AdamState::new(cfg.critic_lr),
            log_std: SoftClamp::new(cfg.log_std_min, cfg.log_std_max)?,
            cfg: cfg.clone(),
            state_dim,
            action_dim,
            warned_empty_model: false,
        })
    }

    pub fn config(&self) -> &SacConfig {
        &self.cfg
    }

    /// Mutable hyperparameters; network shapes are fixed at construction.
    pub fn set_gamma(&mut self, gamma: f64) {
        self.cfg.gamma = gamma;
    }

    pub fn set_tau(&mut self, tau: f64) {
        self.cfg.tau = tau;
    }

    pub fn set_beta(&mut self, beta: f64) {
        self.cfg.beta = beta;
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Actor head split into `(mean, log_std, d log_std / d raw)`.
    fn actor_head(&self, raw: &Array2<S>) -> (Array2<S>, Array2<S>, Array2<S>) {
        let a = self.action_dim;
        let mean = raw.slice(s![.., ..a]).to_owned();
        let raw_ls = raw.slice(s![.., a..]);
        let mut log_std = Array2::zeros(raw_ls.raw_dim());
        let mut slope = Array2::zeros(raw_ls.raw_dim());
        for ((r, ls), sl) in raw_ls.iter().zip(log_std.iter_mut()).zip(slope.iter_mut()) {
            let (v, d) = self.log_std.apply(*r);
            *ls = v;
            *sl = d;
        }
        (mean, log_std, slope)
    }

    /// Squashed sample for given standard-normal noise (rows match `raw`).
    fn squash(&self, raw: &Array2<S>, noise: Array2<S>) -> SquashedSample<S> {
        let (mean, log_std, slope) = self.actor_head(raw);
        let std = log_std.mapv(|x| x.exp());
        let pre_tanh = &mean + &(&std * &noise);
        let actions = pre_tanh.mapv(|u| u.tanh());
        let half_ln_2pi = S::lit(0.5) * (S::lit(2.0) * S::PI()).ln();
        let ln2 = S::LN_2();
        let mut log_prob = Array1::zeros(raw.nrows());
        for r in 0..raw.nrows() {
            let mut lp = S::zero();
            for j in 0..self.action_dim {
                let u = pre_tanh[[r, j]];
                let e = noise[[r, j]];
                // log(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u))
                let log_jac = S::lit(2.0) * (ln2 - u - softplus(S::lit(-2.0) * u));
                lp = lp - S::lit(0.5) * e * e - log_std[[r, j]] - half_ln_2pi - log_jac;
            }
            log_prob[r] = lp;
        }
        SquashedSample {
            actions,
            pre_tanh,
            log_prob,
            std,
            log_std_slope: slope,
            noise,
        }
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Array2<S> {
        Array2::from_shape_fn((rows, self.action_dim), |_| {
            S::lit(rng.sample::<f64, _>(StandardNormal))
        })
    }

    /// Stochastic draws (or squashed means) for a batch of states.
    pub fn act_batch<R: Rng + ?Sized>(
        &self,
        states: ArrayView2<S>,
        deterministic: bool,
        rng: &mut R,
    ) -> Result<Array2<S>> {
        let raw = self.actor.forward_batch(states)?;
        if deterministic {
            Ok(raw.slice(s![.., ..self.action_dim]).mapv(|u| u.tanh()))
        } else {
            let noise = self.sample_noise(states.nrows(), rng);
            Ok(self.squash(&raw, noise).actions)
        }
    }

    pub fn act<R: Rng + ?Sized>(&self, state: &[S], deterministic: bool, rng: &mut R) -> Result<Vec<S>> {
        check_dim("policy state", self.state_dim, state.len())?;
        let view = ArrayView2::from_shape((1, state.len()), state).map_err(|e| Error::Config(e.to_string()))?;
        Ok(self.act_batch(view, deterministic, rng)?.row(0).to_vec())
    }

    /// Sample with explicit noise; exposes `log pi` for diagnostics and tests.
    pub fn sample_with_noise(&self, states: ArrayView2<S>, noise: Array2<S>) -> Result<SquashedSample<S>> {
        check_dim("noise rows", states.nrows(), noise.nrows())?;
        check_dim("noise cols", self.action_dim, noise.ncols())?;
        let raw = self.actor.forward_batch(states)?;
        Ok(self.squash(&raw, noise))
    }

    fn q_input(states: ArrayView2<S>, actions: ArrayView2<S>) -> Array2<S> {
        let mut x = Array2::zeros((states.nrows(), states.ncols() + actions.ncols()));
        x.slice_mut(s![.., ..states.ncols()]).assign(&states);
        x.slice_mut(s![.., states.ncols()..]).assign(&actions);
        x
    }

    /// `min(Q1, Q2)` under the online critics.
    pub fn min_q(&self, states: ArrayView2<S>, actions: ArrayView2<S>) -> Result<Array1<S>> {
        let x = Self::q_input(states, actions);
        let q1 = self.critic1.forward_batch(x.view())?;
        let q2 = self.critic2.forward_batch(x.view())?;
        Ok(ndarray::Zip::from(q1.column(0))
            .and(q2.column(0))
            .map_collect(|&a, &b| a.min(b)))
    }

    /// Soft Bellman targets `r + gamma (1 - d) (min Qbar(s', a') - beta log pi(a'|s'))`
    /// with `a' = tanh(mu + sigma * noise)`.
    pub fn critic_targets(&self, batch: &Batch<S>, noise: Array2<S>) -> Result<Array1<S>> {
        let next = self.sample_with_noise(batch.next_states.view(), noise)?;
        let x = Self::q_input(batch.next_states.view(), next.actions.view());
        let q1 = self.target1.forward_batch(x.view())?;
        let q2 = self.target2.forward_batch(x.view())?;
        let gamma = S::lit(self.cfg.gamma);
        let beta = S::lit(self.cfg.beta);
        let mut y = Array1::zeros(batch.len());
        for i in 0..batch.len() {
            let soft_v = q1[[i, 0]].min(q2[[i, 0]]) - beta * next.log_prob[i];
            y[i] = batch.rewards[i] + gamma * (S::one() - batch.terminals[i]) * soft_v;
        }
        Ok(y)
    }

    /// Mean squared Bellman error of one critic against fixed targets.
    pub fn critic_loss_and_grad(
        critic: &DenseNetwork<S>,
        states: ArrayView2<S>,
        actions: ArrayView2<S>,
        targets: &Array1<S>,
    ) -> Result<(S, Gradients<S>)> {
        let x = Self::q_input(states, actions);
        let (q, cache) = critic.forward_cached(x.view())?;
        let b = S::lit(targets.len() as f64);
        let mut up = Array2::zeros(q.raw_dim());
        let mut loss = S::zero();
        for i in 0..targets.len() {
            let e = q[[i, 0]] - targets[i];
            loss = loss + e * e / b;
            up[[i, 0]] = S::lit(2.0) * e / b;
        }
        let (g, _) = critic.backward(&cache, up.view())?;
        Ok((loss, g))
    }

    /// `J_pi = mean(beta log pi(a|s) - min Q(s, a))` with `a` reparameterised
    /// by `noise`, and its gradient with respect to the actor parameters.
    pub fn actor_loss_and_grad(&self, states: ArrayView2<S>, noise: Array2<S>) -> Result<(S, Gradients<S>)> {
        let (raw, actor_cache) = self.actor.forward_cached(states)?;
        let sample = self.squash(&raw, noise);
        let x = Self::q_input(states, sample.actions.view());
        let (q1, c1) = self.critic1.forward_cached(x.view())?;
        let (q2, c2) = self.critic2.forward_cached(x.view())?;
        let n = states.nrows();
        let b = S::lit(n as f64);
        let beta = S::lit(self.cfg.beta);

        // Route -1/B through whichever critic attains the minimum.
        let mut up1 = Array2::zeros((n, 1));
        let mut up2 = Array2::zeros((n, 1));
        let mut loss = S::zero();
        for i in 0..n {
            let (a, c) = (q1[[i, 0]], q2[[i, 0]]);
            if a <= c {
                up1[[i, 0]] = -S::one() / b;
            } else {
                up2[[i, 0]] = -S::one() / b;
            }
            loss = loss + (beta * sample.log_prob[i] - a.min(c)) / b;
        }
        let (_, gx1) = self.critic1.backward(&c1, up1.view())?;
        let (_, gx2) = self.critic2.backward(&c2, up2.view())?;
        let ds = self.state_dim;
        let dq_da = &gx1.slice(s![.., ds..]) + &gx2.slice(s![.., ds..]);

        let ad = self.action_dim;
        let mut up = Array2::zeros(raw.raw_dim());
        for i in 0..n {
            for j in 0..ad {
                let t = sample.actions[[i, j]];
                // d/du of the loss through a = tanh(u) and through log pi.
                let du = dq_da[[i, j]] * (S::one() - t * t) + beta * S::lit(2.0) * t / b;
                up[[i, j]] = du;
                let dlog_std = du * sample.std[[i, j]] * sample.noise[[i, j]] - beta / b;
                up[[i, ad + j]] = dlog_std * sample.log_std_slope[[i, j]];
            }
        }
        let (g, _) = self.actor.backward(&actor_cache, up.view())?;
        Ok((loss, g))
    }

    /// One critic step on both critics, then Polyak averaging of the targets.
    pub fn critic_update<R: Rng + ?Sized>(&mut self, batch: &Batch<S>, rng: &mut R) -> Result<S> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let noise = self.sample_noise(batch.len(), rng);
        let targets = self.critic_targets(batch, noise)?;
        let (l1, g1) =
            Self::critic_loss_and_grad(&self.critic1, batch.states.view(), batch.actions.view(), &targets)?;
        let (l2, g2) =
            Self::critic_loss_and_grad(&self.critic2, batch.states.view(), batch.actions.view(), &targets)?;
        self.critic1_opt.step_network(&mut self.critic1, &g1)?;
        self.critic2_opt.step_network(&mut self.critic2, &g2)?;
        let tau = S::lit(self.cfg.tau);
        self.target1.soft_update_from(&self.critic1, tau);
        self.target2.soft_update_from(&self.critic2, tau);
        Ok(l1 + l2)
    }

    pub fn actor_update<R: Rng + ?Sized>(&mut self, states: ArrayView2<S>, rng: &mut R) -> Result<S> {
        if states.nrows() == 0 {
            return Err(Error::Empty("batch"));
        }
        let noise = self.sample_noise(states.nrows(), rng);
        let (loss, g) = self.actor_loss_and_grad(states, noise)?;
        self.actor_opt.step_network(&mut self.actor, &g)?;
        Ok(loss)
    }

    /// One SAC iteration on a batch mixing simulated (`mix` fraction) and
    /// real experience. An empty model buffer falls back to real data.
    pub fn optimize_step<R: Rng + ?Sized>(
        &mut self,
        real: &ReplayBuffer<S>,
        model: &ReplayBuffer<S>,
        mix: f64,
        rng: &mut R,
    ) -> Result<SacLosses<S>> {
        if real.is_empty() && model.is_empty() {
            return Err(Error::Empty("real and model buffers"));
        }
        let b = self.cfg.batch_size;
        let mut n_model = if real.is_empty() {
            b
        } else {
            (mix.clamp(0.0, 1.0) * b as f64).round() as usize
        };
        if model.is_empty() {
            if n_model > 0 && !self.warned_empty_model {
                log::warn!("model buffer is empty; training the policy on real experience only");
                self.warned_empty_model = true;
            }
            n_model = 0;
        }
        let mut items: Vec<&Transition<S>> = Vec::with_capacity(b);
        for _ in 0..n_model {
            items.push(model.sample(rng).expect("model buffer is non-empty"));
        }
        for _ in n_model..b {
            items.push(real.sample(rng).expect("real buffer is non-empty"));
        }
        let batch = Batch::from_transitions(&items)?;
        let critic = self.critic_update(&batch, rng)?;
        let actor = self.actor_update(batch.states.view(), rng)?;
        Ok(SacLosses { critic, actor })
    }

    pub fn all_finite(&self) -> bool {
        [&self.actor, &self.critic1, &self.critic2, &self.target1, &self.target2]
            .iter()
            .all(|n| n.all_finite())
    }

    pub fn to_dump(&self) -> PolicyDump {
        PolicyDump {
            format: POLICY_DUMP_FORMAT.to_string(),
            version: POLICY_DUMP_VERSION,
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            config: self.cfg.clone(),
            actor: self.actor.to_dump(),
            critic1: self.critic1.to_dump(),
            critic2: self.critic2.to_dump(),
            target1: self.target1.to_dump(),
            target2: self.target2.to_dump(),
        }
    }

    pub fn from_dump(dump: &PolicyDump) -> Result<Self> {
        if dump.format != POLICY_DUMP_FORMAT || dump.version != POLICY_DUMP_VERSION {
            return Err(Error::Config(format!(
                "unsupported policy checkpoint {} v{}",
                dump.format, dump.version
            )));
        }
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let mut p = Self::new(dump.state_dim, dump.action_dim, &dump.config, &mut rng)?;
        p.actor = DenseNetwork::from_dump(&dump.actor)?;
        p.critic1 = DenseNetwork::from_dump(&dump.critic1)?;
        p.critic2 = DenseNetwork::from_dump(&dump.critic2)?;
        p.target1 = DenseNetwork::from_dump(&dump.target1)?;
        p.target2 = DenseNetwork::from_dump(&dump.target2)?;
        Ok(p)
    }
}

pub const POLICY_DUMP_FORMAT: &str = "mbcd-sac-policy";
pub const POLICY_DUMP_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDump {
    pub format: String,
    pub version: u32,
    pub state_dim: usize,
    pub action_dim: usize,
    pub config: SacConfig,
    pub actor: NetworkDump,
    pub critic1: NetworkDump,
    pub critic2: NetworkDump,
    pub target1: NetworkDump,
    pub target2: NetworkDump,
}

/// `count` one-step simulated transitions: states drawn uniformly from
/// `source`, actions from the policy, `(s', r)` from the model.
pub fn dyna_rollouts<S, M>(
    policy: &SacPolicy<S>,
    model: &M,
    source: &ReplayBuffer<S>,
    sink: &mut ReplayBuffer<S>,
    count: usize,
    rng: &mut dyn RngCore,
) -> Result<()>
where
    S: Scalar,
    M: TransitionModel<S> + ?Sized,
{
    if count == 0 {
        return Ok(());
    }
    if source.is_empty() {
        return Err(Error::Empty("rollout source buffer"));
    }
    const CHUNK: usize = 512;
    let ds = policy.state_dim;
    let mut remaining = count;
    while remaining > 0 {
        let n = remaining.min(CHUNK);
        let mut states = Array2::zeros((n, ds));
        for mut row in states.axis_iter_mut(Axis(0)) {
            let t = source.sample(rng).expect("source is non-empty");
            row.assign(&ndarray::aview1(&t.state));
        }
        let actions = policy.act_batch(states.view(), false, rng)?;
        let (next, rewards) = model.sample_batch(states.view(), actions.view(), rng)?;
        for i in 0..n {
            sink.push(Transition {
                state: states.row(i).to_vec(),
                action: actions.row(i).to_vec(),
                reward: rewards[i],
                next_state: next.row(i).to_vec(),
                terminal: false,
            });
        }
        remaining -= n;
    }
    Ok(())
}
