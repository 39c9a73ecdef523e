//! Per-context probabilistic ensemble dynamics.
//!
//! Each member maps a normalised `x = (s, a)` to a diagonal Gaussian over
//! `y = (s', r)`. Predictions of the ensemble are moment-matched into one
//! Gaussian: `mu* = mean(mu_n)`, `Sigma* = mean(v_n + mu_n^2) - mu*^2`.
//! With `predict_deltas` the networks regress `s' - s` and the state is added
//! back before anything leaves this module, so callers only ever see `y`.
//! Network targets are standardised per dimension with buffer statistics.

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gaussian::DiagonalGaussian;
use crate::nn::{AdamState, DenseNetwork, GaussianHead, Gradients, NetworkDump};
use crate::replay::{ReplayBuffer, Transition};
use crate::scalar::{from_f64_vec, to_f64_vec, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsConfig {
    pub ensemble_size: usize,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub logvar_min: f64,
    pub logvar_max: f64,
    /// Regress `s' - s` instead of `s'`.
    pub predict_deltas: bool,
    /// Minibatch steps per member per training round.
    pub train_steps: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 5,
            hidden: vec![32, 32],
            learning_rate: 1e-3,
            logvar_min: -10.0,
            logvar_max: 4.0,
            predict_deltas: true,
            train_steps: 100,
            batch_size: 64,
            buffer_capacity: 100_000,
        }
    }
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size == 0 {
            return Err(Error::Config("ensemble_size must be >= 1".into()));
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return Err(Error::Config("batch_size and buffer_capacity must be >= 1".into()));
        }
        GaussianHead::new(self.logvar_min, self.logvar_max)?;
        Ok(())
    }
}

/// Running input statistics; fitted only from the owning context's buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer<S> {
    pub mean: Vec<S>,
    pub std: Vec<S>,
}

impl<S: Scalar> Normalizer<S> {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![S::zero(); dim],
            std: vec![S::one(); dim],
        }
    }

    pub fn fit<'a, I>(dim: usize, rows: I) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
    {
        let mut n = 0usize;
        let mut mean = vec![0.0f64; dim];
        let mut m2 = vec![0.0f64; dim];
        for row in rows {
            n += 1;
            for i in 0..dim {
                let x = row[i].as_f64();
                let d = x - mean[i];
                mean[i] += d / n as f64;
                m2[i] += d * (x - mean[i]);
            }
        }
        if n == 0 {
            return Self::identity(dim);
        }
        let std = m2
            .iter()
            .map(|&m| {
                let s = (m / n as f64).sqrt();
                if s < 1e-6 {
                    1.0
                } else {
                    s
                }
            })
            .collect::<Vec<_>>();
        Self {
            mean: from_f64_vec(&mean),
            std: from_f64_vec(&std),
        }
    }

    pub fn apply(&self, x: &[S], out: &mut [S]) {
        for i in 0..x.len() {
            out[i] = (x[i] - self.mean[i]) / self.std[i];
        }
    }
}

/// Moment-matched ensemble prediction over `y = (s', r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction<S> {
    pub mean: Vec<S>,
    pub variance: Vec<S>,
    pub member_means: Vec<Vec<S>>,
    pub member_variances: Vec<Vec<S>>,
}

impl<S: Scalar> EnsemblePrediction<S> {
    /// Mixture moments of an equal-weight Gaussian mixture.
    pub fn from_members(member_means: Vec<Vec<S>>, member_variances: Vec<Vec<S>>) -> Result<Self> {
        if member_means.is_empty() {
            return Err(Error::Empty("ensemble"));
        }
        check_dim("ensemble variances", member_means.len(), member_variances.len())?;
        let d = member_means[0].len();
        for (m, v) in member_means.iter().zip(&member_variances) {
            check_dim("member mean", d, m.len())?;
            check_dim("member variance", d, v.len())?;
        }
        let n = S::lit(member_means.len() as f64);
        let mut mean = vec![S::zero(); d];
        let mut aleatoric = vec![S::zero(); d];
        for (m, v) in member_means.iter().zip(&member_variances) {
            for i in 0..d {
                mean[i] = mean[i] + m[i] / n;
                aleatoric[i] = aleatoric[i] + v[i] / n;
            }
        }
        // mean(v + mu^2) - mu*^2 written as mean(v) + mean((mu - mu*)^2),
        // which avoids cancellation.
        let mut variance = aleatoric;
        for m in &member_means {
            for i in 0..d {
                let e = m[i] - mean[i];
                variance[i] = variance[i] + e * e / n;
            }
        }
        Ok(Self {
            mean,
            variance,
            member_means,
            member_variances,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn to_gaussian(&self) -> Result<DiagonalGaussian<S>> {
        DiagonalGaussian::new(self.mean.clone(), self.variance.clone())
    }

    /// Mean over dimensions of the population variance of member means.
    pub fn disagreement(&self) -> S {
        let n = S::lit(self.member_means.len() as f64);
        let d = self.dim();
        let mut total = S::zero();
        for i in 0..d {
            for m in &self.member_means {
                let e = m[i] - self.mean[i];
                total = total + e * e / n;
            }
        }
        total / S::lit(d as f64)
    }
}

/// Anything that can simulate `(s', r)` from batches of `(s, a)`.
pub trait TransitionModel<S: Scalar> {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;

    /// Rows of `states`/`actions` are samples; returns next states and rewards.
    fn sample_batch(
        &self,
        states: ArrayView2<S>,
        actions: ArrayView2<S>,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(Array2<S>, Array1<S>)>;
}

/// Ensemble of probabilistic networks plus the experience buffer it is
/// trained on.
#[derive(Debug, Clone)]
pub struct ContextModel<S> {
    id: usize,
    state_dim: usize,
    action_dim: usize,
    members: Vec<DenseNetwork<S>>,
    optimizers: Vec<AdamState<S>>,
    head: GaussianHead,
    normalizer: Normalizer<S>,
    target_normalizer: Normalizer<S>,
    predict_deltas: bool,
    train_steps: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
    buffer: ReplayBuffer<S>,
    rounds: u64,
}

impl<S: Scalar> ContextModel<S> {
    pub fn new(
        id: usize,
        state_dim: usize,
        action_dim: usize,
        cfg: &DynamicsConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if state_dim == 0 || action_dim == 0 {
            return Err(Error::Config("state and action dims must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y_dim = state_dim + 1;
        let mut sizes = vec![state_dim + action_dim];
        sizes.extend(&cfg.hidden);
        sizes.push(2 * y_dim);
        let members = (0..cfg.ensemble_size)
            .map(|_| DenseNetwork::new(&sizes, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let optimizers = (0..cfg.ensemble_size)
            .map(|_| AdamState::new(cfg.learning_rate))
            .collect();
        Ok(Self {
            id,
            state_dim,
            action_dim,
            members,
            optimizers,
            head: GaussianHead::new(cfg.logvar_min, cfg.logvar_max)?,
            normalizer: Normalizer::identity(state_dim + action_dim),
            target_normalizer: Normalizer::identity(state_dim + 1),
            predict_deltas: cfg.predict_deltas,
            train_steps: cfg.train_steps,
            batch_size: cfg.batch_size,
            rng,
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            rounds: 0,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn ensemble_size(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self) -> &[DenseNetwork<S>] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [DenseNetwork<S>] {
        &mut self.members
    }

    pub fn head(&self) -> GaussianHead {
        self.head
    }

    pub fn normalizer(&self) -> &Normalizer<S> {
        &self.normalizer
    }

    /// Standardisation of network-space targets (deltas and reward).
    pub fn target_normalizer(&self) -> &Normalizer<S> {
        &self.target_normalizer
    }

    pub fn y_dim(&self) -> usize {
        self.state_dim + 1
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + self.action_dim
    }

    pub fn buffer(&self) -> &ReplayBuffer<S> {
        &self.buffer
    }

    pub fn push(&mut self, t: Transition<S>) {
        self.buffer.push(t);
    }

    /// Number of completed training rounds.
    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    pub fn refit_normalizer(&mut self) {
        let rows: Vec<Vec<S>> = self
            .buffer
            .iter()
            .map(|t| join(&t.state, &t.action))
            .collect();
        self.normalizer = Normalizer::fit(self.input_dim(), rows.iter().map(|r| r.as_slice()));
        let targets: Vec<Vec<S>> = self.buffer.iter().map(|t| self.target(t)).collect();
        self.target_normalizer = Normalizer::fit(self.y_dim(), targets.iter().map(|r| r.as_slice()));
    }

    fn normalized_batch(&self, xs: ArrayView2<S>) -> Array2<S> {
        let mut out = Array2::zeros(xs.raw_dim());
        for (row, mut dst) in xs.rows().into_iter().zip(out.rows_mut()) {
            for i in 0..row.len() {
                dst[i] = (row[i] - self.normalizer.mean[i]) / self.normalizer.std[i];
            }
        }
        out
    }

    /// Per-member `(means, variances)` over `y` for a batch of raw inputs.
    pub fn member_outputs(&self, xs: ArrayView2<S>) -> Result<Vec<(Array2<S>, Array2<S>)>> {
        check_dim("model input", self.input_dim(), xs.ncols())?;
        let xn = self.normalized_batch(xs);
        let d = self.y_dim();
        self.members
            .iter()
            .map(|net| {
                let raw = net.forward_batch(xn.view())?;
                let tn = &self.target_normalizer;
                let mut mean = raw.slice(ndarray::s![.., ..d]).to_owned();
                let mut var = raw
                    .slice(ndarray::s![.., d..])
                    .mapv(|r| self.head.logvar.apply(r).0.exp());
                for (mut m, mut v) in mean.rows_mut().into_iter().zip(var.rows_mut()) {
                    for i in 0..d {
                        m[i] = m[i] * tn.std[i] + tn.mean[i];
                        v[i] = v[i] * tn.std[i] * tn.std[i];
                    }
                }
                if self.predict_deltas {
                    for (mut m, x) in mean.rows_mut().into_iter().zip(xs.rows()) {
                        for i in 0..self.state_dim {
                            m[i] = m[i] + x[i];
                        }
                    }
                }
                Ok((mean, var))
            })
            .collect()
    }

    pub fn predict(&self, x: &[S]) -> Result<EnsemblePrediction<S>> {
        check_dim("model input", self.input_dim(), x.len())?;
        let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Config(e.to_string()))?;
        let outs = self.member_outputs(view)?;
        let (means, vars) = outs
            .into_iter()
            .map(|(m, v)| (m.row(0).to_vec(), v.row(0).to_vec()))
            .unzip();
        EnsemblePrediction::from_members(means, vars)
    }

    pub fn log_likelihood(&self, x: &[S], y: &[S]) -> Result<S> {
        check_dim("model target", self.y_dim(), y.len())?;
        self.predict(x)?.to_gaussian()?.log_density(y)
    }

    pub fn disagreement(&self, x: &[S]) -> Result<S> {
        Ok(self.predict(x)?.disagreement())
    }

    /// Draws `(s', r)` from the moment-matched ensemble Gaussian.
    pub fn sample_next<R: Rng + ?Sized>(&self, x: &[S], rng: &mut R) -> Result<(Vec<S>, S)> {
        let p = self.predict(x)?;
        let y: Vec<S> = p
            .mean
            .iter()
            .zip(&p.variance)
            .map(|(&m, &v)| m + v.sqrt() * S::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let r = y[self.state_dim];
        Ok((y[..self.state_dim].to_vec(), r))
    }

    /// Network-space regression target for one transition.
    fn target(&self, t: &Transition<S>) -> Vec<S> {
        let mut y = Vec::with_capacity(self.y_dim());
        for i in 0..self.state_dim {
            let v = if self.predict_deltas {
                t.next_state[i] - t.state[i]
            } else {
                t.next_state[i]
            };
            y.push(v);
        }
        y.push(t.reward);
        y
    }

    /// One training round: refit the normaliser on the buffer, then train
    /// every member on its own bootstrap resample of the buffer. Returns the
    /// ensemble-average minibatch loss per step.
    pub fn train(&mut self) -> Result<Vec<S>> {
        let (steps, batch) = (self.train_steps, self.batch_size);
        self.train_for(steps, batch)
    }

    pub fn train_for(&mut self, steps: usize, batch_size: usize) -> Result<Vec<S>> {
        let n = self.buffer.len();
        if n == 0 {
            return Err(Error::Empty("context buffer"));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        self.refit_normalizer();
        let in_dim = self.input_dim();
        let d = self.y_dim();
        let inputs: Vec<Vec<S>> = self
            .buffer
            .iter()
            .map(|t| {
                let mut x = vec![S::zero(); in_dim];
                self.normalizer.apply(&join(&t.state, &t.action), &mut x);
                x
            })
            .collect();
        let targets: Vec<Vec<S>> = self
            .buffer
            .iter()
            .map(|t| {
                let mut y = vec![S::zero(); d];
                self.target_normalizer.apply(&self.target(t), &mut y);
                y
            })
            .collect();

        let mut trace = vec![S::zero(); steps];
        let members = self.members.len();
        for m in 0..members {
            let boot: Vec<usize> = (0..n).map(|_| self.rng.gen_range(0..n)).collect();
            for step in 0..steps {
                let mut x = Array2::zeros((batch_size, in_dim));
                let mut y = Array2::zeros((batch_size, d));
                for b in 0..batch_size {
                    let idx = boot[self.rng.gen_range(0..n)];
                    x.row_mut(b).assign(&ndarray::aview1(&inputs[idx]));
                    y.row_mut(b).assign(&ndarray::aview1(&targets[idx]));
                }
                let (loss, grads) = nll_loss_and_grad(&self.members[m], &self.head, x.view(), y.view())?;
                self.optimizers[m].step_network(&mut self.members[m], &grads)?;
                trace[step] = trace[step] + loss / S::lit(members as f64);
            }
        }
        self.rounds += 1;
        Ok(trace)
    }

    pub fn to_dump(&self) -> ModelDump {
        ModelDump {
            format: MODEL_DUMP_FORMAT.to_string(),
            version: MODEL_DUMP_VERSION,
            id: self.id,
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            predict_deltas: self.predict_deltas,
            logvar_min: self.head.logvar.lo,
            logvar_max: self.head.logvar.hi,
            normalizer_mean: to_f64_vec(&self.normalizer.mean),
            normalizer_std: to_f64_vec(&self.normalizer.std),
            target_mean: to_f64_vec(&self.target_normalizer.mean),
            target_std: to_f64_vec(&self.target_normalizer.std),
            members: self.members.iter().map(|m| m.to_dump()).collect(),
        }
    }

    /// Restores a model from a dump. Optimiser state and the buffer are not
    /// part of a checkpoint and start fresh.
    pub fn from_dump(dump: &ModelDump, cfg: &DynamicsConfig, seed: u64) -> Result<Self> {
        if dump.format != MODEL_DUMP_FORMAT || dump.version != MODEL_DUMP_VERSION {
            return Err(Error::Config(format!(
                "unsupported model checkpoint {} v{}",
                dump.format, dump.version
            )));
        }
        let mut cfg = cfg.clone();
        cfg.ensemble_size = dump.members.len();
        cfg.predict_deltas = dump.predict_deltas;
        cfg.logvar_min = dump.logvar_min;
        cfg.logvar_max = dump.logvar_max;
        let mut model = Self::new(dump.id, dump.state_dim, dump.action_dim, &cfg, seed)?;
        model.members = dump
            .members
            .iter()
            .map(DenseNetwork::from_dump)
            .collect::<Result<_>>()?;
        for m in &model.members {
            check_dim("checkpoint member input", model.input_dim(), m.input_dim())?;
            check_dim("checkpoint member output", 2 * model.y_dim(), m.output_dim())?;
        }
        model.normalizer = Normalizer {
            mean: from_f64_vec(&dump.normalizer_mean),
            std: from_f64_vec(&dump.normalizer_std),
        };
        check_dim("checkpoint target normalizer", model.y_dim(), dump.target_mean.len())?;
        check_dim("checkpoint target normalizer", model.y_dim(), dump.target_std.len())?;
        model.target_normalizer = Normalizer {
            mean: from_f64_vec(&dump.target_mean),
            std: from_f64_vec(&dump.target_std),
        };
        Ok(model)
    }
}

impl<S: Scalar> TransitionModel<S> for ContextModel<S> {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn sample_batch(
        &self,
        states: ArrayView2<S>,
        actions: ArrayView2<S>,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(Array2<S>, Array1<S>)> {
        check_dim("batch actions", states.nrows(), actions.nrows())?;
        let mut xs = Array2::zeros((states.nrows(), states.ncols() + actions.ncols()));
        xs.slice_mut(ndarray::s![.., ..states.ncols()]).assign(&states);
        xs.slice_mut(ndarray::s![.., states.ncols()..]).assign(&actions);
        let outs = self.member_outputs(xs.view())?;
        let b = xs.nrows();
        let d = self.y_dim();
        let n = S::lit(outs.len() as f64);
        let mut next = Array2::zeros((b, self.state_dim));
        let mut reward = Array1::zeros(b);
        for row in 0..b {
            for i in 0..d {
                let mut mu = S::zero();
                for (m, _) in &outs {
                    mu = mu + m[[row, i]] / n;
                }
                let mut var = S::zero();
                for (m, v) in &outs {
                    let e = m[[row, i]] - mu;
                    var = var + (v[[row, i]] + e * e) / n;
                }
                let y = mu + var.sqrt() * S::lit(rng.sample::<f64, _>(StandardNormal));
                if i < self.state_dim {
                    next[[row, i]] = y;
                } else {
                    reward[row] = y;
                }
            }
        }
        Ok((next, reward))
    }
}

/// Mean Gaussian negative log-likelihood of targets `y` under one member,
/// with gradients for its parameters. Inputs are already normalised and
/// targets are in network space.
pub fn nll_loss_and_grad<S: Scalar>(
    net: &DenseNetwork<S>,
    head: &GaussianHead,
    x: ArrayView2<S>,
    y: ArrayView2<S>,
) -> Result<(S, Gradients<S>)> {
    let d = y.ncols();
    check_dim("member output", 2 * d, net.output_dim())?;
    let (raw, cache) = net.forward_cached(x)?;
    let b = S::lit(x.nrows() as f64);
    let half = S::lit(0.5);
    let ln_2pi = (S::lit(2.0) * S::PI()).ln();
    let mut upstream = Array2::zeros(raw.raw_dim());
    let mut loss = S::zero();
    for r in 0..x.nrows() {
        for i in 0..d {
            let mu = raw[[r, i]];
            let (lv, dlv) = head.logvar.apply(raw[[r, d + i]]);
            let inv_var = (-lv).exp();
            let e = y[[r, i]] - mu;
            loss = loss + half * (lv + e * e * inv_var + ln_2pi);
            upstream[[r, i]] = -e * inv_var / b;
            upstream[[r, d + i]] = half * (S::one() - e * e * inv_var) * dlv / b;
        }
    }
    let (grads, _) = net.backward(&cache, upstream.view())?;
    Ok((loss / b, grads))
}

fn join<S: Copy>(a: &[S], b: &[S]) -> Vec<S> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

pub const MODEL_DUMP_FORMAT: &str = "mbcd-context-model";
pub const MODEL_DUMP_VERSION: u32 = 1;

/// JSON checkpoint of a [`ContextModel`]'s parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDump {
    pub format: String,
    pub version: u32,
    pub id: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub predict_deltas: bool,
    pub logvar_min: f64,
    pub logvar_max: f64,
    pub normalizer_mean: Vec<f64>,
    pub normalizer_std: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
    pub members: Vec<NetworkDump>,
}
