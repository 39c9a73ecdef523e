//! The context-detecting agent: a growing library of (dynamics model,
//! policy, experience buffer) triples, an MCUSUM bank over the library's
//! predictive likelihoods, warm-up gating, and the model/policy update loop.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::changepoint::{ContextChoice, CusumBank, DetectionEvent, DetectorConfig};
use crate::dynamics::{ContextModel, DynamicsConfig, ModelDump};
use crate::environments::{EnvStep, Environment};
use crate::error::{check_dim, Error, Result};
use crate::policy::{dyna_rollouts, PolicyDump, SacConfig, SacLosses, SacPolicy};
use crate::replay::{ReplayBuffer, Transition};
use crate::scalar::{from_f64_vec, to_f64_vec, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub detector: DetectorConfig,
    pub dynamics: DynamicsConfig,
    pub sac: SacConfig,
    /// Model-update interval `F` in environment steps.
    pub model_interval: usize,
    /// Simulated transitions `L` generated after every model update.
    pub rollouts: usize,
    pub rollout_capacity: usize,
    /// Steps after a context model is created during which detection is off.
    pub warmup_steps: u64,
    /// Detection is also off while the mean ensemble disagreement over the
    /// last `model_interval` steps exceeds this value.
    pub disagreement_threshold: f64,
    /// Fraction of each policy minibatch drawn from simulated experience.
    pub mix_ratio: f64,
    /// Real transitions in the active buffer before models and policy train.
    pub learning_starts: usize,
    /// Copy critics and targets (not only the actor) into a new context.
    pub copy_critics_on_spawn: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            dynamics: DynamicsConfig::default(),
            sac: SacConfig::default(),
            model_interval: 250,
            rollouts: 400,
            rollout_capacity: 2000,
            warmup_steps: 1000,
            disagreement_threshold: 0.05,
            mix_ratio: 0.95,
            learning_starts: 256,
            copy_critics_on_spawn: true,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.dynamics.validate()?;
        self.sac.validate()?;
        if self.model_interval == 0 || self.rollout_capacity == 0 {
            return Err(Error::Config("model_interval and rollout_capacity must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::Config(format!("mix_ratio must lie in [0, 1], got {}", self.mix_ratio)));
        }
        if self.disagreement_threshold.is_nan() || self.disagreement_threshold < 0.0 {
            return Err(Error::Config("disagreement_threshold must be >= 0".into()));
        }
        Ok(())
    }
}

/// One library slot.
#[derive(Debug, Clone)]
pub struct LibraryEntry<S> {
    pub model: ContextModel<S>,
    pub policy: SacPolicy<S>,
    /// Step at which the context was instantiated.
    pub created_at: u64,
    /// Set once warm-up has ended; it does not restart for this context.
    pub warmed_up: bool,
}

/// Known contexts; never shrinks.
#[derive(Debug, Clone)]
pub struct ModelLibrary<S> {
    entries: Vec<LibraryEntry<S>>,
    current: usize,
}

impl<S: Scalar> ModelLibrary<S> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn current(&self) -> usize {
        self.current
    }

    pub fn entry(&self, k: usize) -> Result<&LibraryEntry<S>> {
        let known = self.entries.len();
        self.entries.get(k).ok_or(Error::InvalidContext { id: k, known })
    }

    pub fn entries(&self) -> &[LibraryEntry<S>] {
        &self.entries
    }
}

/// Everything observed and decided at one environment step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub t: u64,
    /// Active context after this step's decision.
    pub z: usize,
    pub action: Vec<f64>,
    pub reward: f64,
    pub w: Vec<f64>,
    pub w_new: f64,
    /// `log p_k(y)` for every library model, evaluated before any switch.
    pub log_likelihood: Vec<f64>,
    pub log_likelihood_new: f64,
    pub disagreement: f64,
    pub warmup: bool,
    pub detection: Option<DetectionEvent>,
    /// Library size after this step.
    pub k: usize,
    pub model_trained: bool,
    pub losses: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct MbcdAgent<S> {
    cfg: AgentConfig,
    library: ModelLibrary<S>,
    bank: CusumBank<S>,
    model_buffer: ReplayBuffer<S>,
    disagreement: VecDeque<f64>,
    rng: ChaCha8Rng,
    t: u64,
    state_dim: usize,
    action_dim: usize,
}

impl<S: Scalar> MbcdAgent<S> {
    pub fn new(state_dim: usize, action_dim: usize, cfg: AgentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = ContextModel::new(0, state_dim, action_dim, &cfg.dynamics, rng.gen())?;
        let policy = SacPolicy::new(state_dim, action_dim, &cfg.sac, &mut rng)?;
        Ok(Self {
            library: ModelLibrary {
                entries: vec![LibraryEntry { model, policy, created_at: 0, warmed_up: false }],
                current: 0,
            },
            bank: CusumBank::new(1, 0)?,
            model_buffer: ReplayBuffer::new(cfg.rollout_capacity),
            disagreement: VecDeque::with_capacity(cfg.model_interval),
            rng,
            t: 0,
            state_dim,
            action_dim,
            cfg,
        })
    }

    /// Agent bound to an environment; fails if the dimensions disagree.
    pub fn for_env(env: &dyn Environment, cfg: AgentConfig, seed: u64) -> Result<Self> {
        Self::new(env.state_dim(), env.action_dim(), cfg, seed)
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn library(&self) -> &ModelLibrary<S> {
        &self.library
    }

    pub fn known_contexts(&self) -> usize {
        self.library.len()
    }

    pub fn current_context(&self) -> usize {
        self.library.current
    }

    pub fn current_model(&self) -> &ContextModel<S> {
        &self.library.entries[self.library.current].model
    }

    pub fn current_policy(&self) -> &SacPolicy<S> {
        &self.library.entries[self.library.current].policy
    }

    pub fn bank(&self) -> &CusumBank<S> {
        &self.bank
    }

    pub fn model_buffer(&self) -> &ReplayBuffer<S> {
        &self.model_buffer
    }

    /// Steps observed so far.
    pub fn time(&self) -> u64 {
        self.t
    }

    /// Whether bank updates are currently suppressed. Warm-up of a context
    /// ends at the later of `warmup_steps` after its creation and the mean
    /// disagreement over the last `model_interval` steps first dropping to
    /// the threshold; after that it stays off for that context.
    pub fn warmup_active(&self) -> bool {
        let entry = &self.library.entries[self.library.current];
        if entry.warmed_up {
            return false;
        }
        if self.t.saturating_sub(entry.created_at) < self.cfg.warmup_steps {
            return true;
        }
        if self.disagreement.is_empty() {
            return false;
        }
        let mean = self.disagreement.iter().sum::<f64>() / self.disagreement.len() as f64;
        mean > self.cfg.disagreement_threshold
    }

    /// Activates context `choice`, allocating a new library slot for `New`.
    /// The detector and the simulated buffer are reset either way. Returns
    /// the activated id.
    pub fn switch_to(&mut self, choice: ContextChoice) -> Result<usize> {
        let k = match choice {
            ContextChoice::Known(k) => {
                self.library.entry(k)?;
                k
            }
            ContextChoice::New => {
                let id = self.library.len();
                let prev = &self.library.entries[self.library.current].policy;
                let policy = if self.cfg.copy_critics_on_spawn {
                    prev.clone()
                } else {
                    let mut fresh = SacPolicy::new(self.state_dim, self.action_dim, &self.cfg.sac, &mut self.rng)?;
                    fresh.actor = prev.actor.clone();
                    fresh
                };
                let model = ContextModel::new(id, self.state_dim, self.action_dim, &self.cfg.dynamics, self.rng.gen())?;
                self.library.entries.push(LibraryEntry {
                    model,
                    policy,
                    created_at: self.t,
                    warmed_up: false,
                });
                self.bank.add_candidate();
                id
            }
        };
        self.library.current = k;
        self.bank.set_current(k)?;
        self.bank.reset();
        self.model_buffer.clear();
        self.disagreement.clear();
        Ok(k)
    }

    /// Samples an action from the active policy.
    pub fn act(&mut self, state: &[f64], deterministic: bool) -> Result<Vec<f64>> {
        check_dim("agent state", self.state_dim, state.len())?;
        let s = from_f64_vec::<S>(state);
        let a = self.library.entries[self.library.current]
            .policy
            .act(&s, deterministic, &mut self.rng)?;
        Ok(to_f64_vec(&a))
    }

    /// Processes one observed transition: detection, buffer bookkeeping, and
    /// scheduled model and policy updates.
    pub fn observe(
        &mut self,
        state: &[f64],
        action: &[f64],
        reward: f64,
        next_state: &[f64],
        terminal: bool,
    ) -> Result<StepReport> {
        check_dim("agent state", self.state_dim, state.len())?;
        check_dim("agent action", self.action_dim, action.len())?;
        check_dim("agent next state", self.state_dim, next_state.len())?;
        let t = self.t;
        let x: Vec<S> = from_f64_vec(&[state, action].concat());
        let mut y: Vec<S> = from_f64_vec(next_state);
        y.push(S::lit(reward));

        let predictions = self
            .library
            .entries
            .iter()
            .map(|e| e.model.predict(&x))
            .collect::<Result<Vec<_>>>()?;
        let gaussians = predictions
            .iter()
            .map(|p| p.to_gaussian())
            .collect::<Result<Vec<_>>>()?;
        let z = self.library.current;
        let disagreement = predictions[z].disagreement().as_f64();

        let warmup = self.warmup_active();
        if !warmup {
            self.library.entries[z].warmed_up = true;
        }
        let mut detection = None;
        let (log_likelihood, log_likelihood_new) = if warmup {
            let ll = gaussians
                .iter()
                .map(|g| g.log_density(&y).map(|v| v.as_f64()))
                .collect::<Result<Vec<_>>>()?;
            let new = crate::changepoint::new_context_likelihood(
                &gaussians[z],
                &y,
                S::lit(self.cfg.detector.delta),
                self.cfg.detector.shift,
            )?
            .as_f64();
            (ll, new)
        } else {
            let rec = self.bank.update(&gaussians, &x, &y, &self.cfg.detector)?;
            (to_f64_vec(&rec.log_likelihood), rec.log_likelihood_new.as_f64())
        };
        let (w, w_new) = (to_f64_vec(self.bank.statistics()), self.bank.new_statistic().as_f64());
        if !warmup {
            if let Some(choice) = self.bank.decide(self.cfg.detector.threshold) {
                if choice != ContextChoice::Known(z) {
                    let activated = self.switch_to(choice)?;
                    detection = Some(DetectionEvent {
                        gamma: t,
                        previous: z,
                        selected: choice,
                        activated,
                        change_point: None,
                        delay: None,
                    });
                }
            }
        }
        if detection.is_none() {
            if self.disagreement.len() == self.cfg.model_interval {
                self.disagreement.pop_front();
            }
            self.disagreement.push_back(disagreement);
        }

        let active = self.library.current;
        let transition = Transition {
            state: from_f64_vec(state),
            action: from_f64_vec(action),
            reward: S::lit(reward),
            next_state: from_f64_vec(next_state),
            terminal,
        };
        self.library.entries[active].model.push(transition);
        self.t += 1;

        let model_trained = self.t % self.cfg.model_interval as u64 == 0 && self.update_model()?;
        let losses = self.update_policy()?;

        Ok(StepReport {
            t,
            z: active,
            action: action.to_vec(),
            reward,
            w,
            w_new,
            log_likelihood,
            log_likelihood_new,
            disagreement,
            warmup,
            detection,
            k: self.library.len(),
            model_trained,
            losses: losses.map(|l| (l.critic.as_f64(), l.actor.as_f64())),
        })
    }

    /// Trains the active model and refreshes the simulated buffer.
    fn update_model(&mut self) -> Result<bool> {
        let entry = &mut self.library.entries[self.library.current];
        if entry.model.buffer().len() < self.cfg.learning_starts {
            return Ok(false);
        }
        entry.model.train()?;
        dyna_rollouts(
            &entry.policy,
            &entry.model,
            entry.model.buffer(),
            &mut self.model_buffer,
            self.cfg.rollouts,
            &mut self.rng,
        )?;
        Ok(true)
    }

    fn update_policy(&mut self) -> Result<Option<SacLosses<S>>> {
        let entry = &mut self.library.entries[self.library.current];
        if entry.model.buffer().len() < self.cfg.learning_starts {
            return Ok(None);
        }
        entry
            .policy
            .optimize_step(entry.model.buffer(), &self.model_buffer, self.cfg.mix_ratio, &mut self.rng)
            .map(Some)
    }

    /// Acts in `env`, observes the outcome and learns from it.
    pub fn step(&mut self, env: &mut dyn Environment) -> Result<(EnvStep, StepReport)> {
        check_dim("environment state", self.state_dim, env.state_dim())?;
        let s = env.observation();
        let a = self.act(&s, false)?;
        let out = env.step(&a)?;
        let report = self.observe(&s, &a, out.reward, &out.next_state, out.terminal)?;
        Ok((out, report))
    }

    /// Writes every context's model and policy plus a manifest into `dir`.
    pub fn save_library(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut contexts = Vec::with_capacity(self.library.len());
        for (k, e) in self.library.entries.iter().enumerate() {
            let model_file = format!("context_{k}_model.json");
            let policy_file = format!("context_{k}_policy.json");
            fs::write(dir.join(&model_file), serde_json::to_string(&e.model.to_dump())?)?;
            fs::write(dir.join(&policy_file), serde_json::to_string(&e.policy.to_dump())?)?;
            contexts.push(ManifestEntry {
                id: k,
                created_at: e.created_at,
                warmed_up: e.warmed_up,
                model: model_file,
                policy: policy_file,
            });
        }
        let manifest = LibraryManifest {
            format: MANIFEST_FORMAT.to_string(),
            version: MANIFEST_VERSION,
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            current: self.library.current,
            time: self.t,
            contexts,
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Rebuilds an agent from [`save_library`](Self::save_library) output.
    /// Experience buffers and optimiser moments are not checkpointed.
    pub fn load_library(dir: &Path, cfg: AgentConfig, seed: u64) -> Result<Self> {
        let manifest: LibraryManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "unsupported library manifest {} v{}",
                manifest.format, manifest.version
            )));
        }
        let mut agent = Self::new(manifest.state_dim, manifest.action_dim, cfg, seed)?;
        let mut entries = Vec::with_capacity(manifest.contexts.len());
        for c in &manifest.contexts {
            let md: ModelDump = serde_json::from_str(&fs::read_to_string(dir.join(&c.model))?)?;
            let pd: PolicyDump = serde_json::from_str(&fs::read_to_string(dir.join(&c.policy))?)?;
            let model = ContextModel::from_dump(&md, &agent.cfg.dynamics, agent.rng.gen())?;
            let policy = SacPolicy::from_dump(&pd)?;
            check_dim("checkpoint policy state", manifest.state_dim, policy.state_dim())?;
            entries.push(LibraryEntry {
                model,
                policy,
                created_at: c.created_at,
                warmed_up: c.warmed_up,
            });
        }
        if manifest.current >= entries.len() {
            return Err(Error::InvalidContext {
                id: manifest.current,
                known: entries.len(),
            });
        }
        agent.bank = CusumBank::new(entries.len(), manifest.current)?;
        agent.library = ModelLibrary {
            entries,
            current: manifest.current,
        };
        agent.t = manifest.time;
        Ok(agent)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "mbcd-library";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    id: usize,
    created_at: u64,
    warmed_up: bool,
    model: String,
    policy: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LibraryManifest {
    format: String,
    version: u32,
    state_dim: usize,
    action_dim: usize,
    current: usize,
    time: u64,
    contexts: Vec<ManifestEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> AgentConfig {
        AgentConfig {
            detector: DetectorConfig {
                threshold: f64::INFINITY,
                ..DetectorConfig::default()
            },
            dynamics: DynamicsConfig {
                ensemble_size: 2,
                hidden: vec![8],
                train_steps: 5,
                batch_size: 8,
                ..DynamicsConfig::default()
            },
            sac: SacConfig {
                hidden: vec![8],
                batch_size: 8,
                ..SacConfig::default()
            },
            model_interval: 10,
            rollouts: 16,
            learning_starts: 8,
            warmup_steps: 5,
            ..AgentConfig::default()
        }
    }

    fn feed(agent: &mut MbcdAgent<f64>, n: usize) -> Vec<StepReport> {
        (0..n)
            .map(|i| {
                let s = [i as f64 * 0.01, 0.0];
                let a = agent.act(&s, false).unwrap();
                let next = [s[0] + 0.1 * a[0], s[1] + 0.1 * a[1]];
                agent.observe(&s, &a, -next[0].abs(), &next, false).unwrap()
            })
            .collect()
    }

    #[test]
    fn fresh_agent_is_warming_up() {
        let agent = MbcdAgent::<f64>::new(2, 2, small_cfg(), 0).unwrap();
        assert!(agent.warmup_active());
        assert_eq!(agent.known_contexts(), 1);
    }

    #[test]
    fn disabled_warmup_is_never_active() {
        let cfg = AgentConfig {
            warmup_steps: 0,
            disagreement_threshold: f64::INFINITY,
            ..small_cfg()
        };
        let mut agent = MbcdAgent::<f64>::new(2, 2, cfg, 0).unwrap();
        assert!(!agent.warmup_active());
        assert!(feed(&mut agent, 30).iter().all(|r| !r.warmup));
    }

    #[test]
    fn new_context_copies_policy_and_resets_state() {
        let mut agent = MbcdAgent::<f64>::new(2, 2, small_cfg(), 1).unwrap();
        feed(&mut agent, 40);
        assert!(!agent.model_buffer().is_empty());
        let before = agent.current_policy().clone();
        assert_eq!(agent.switch_to(ContextChoice::New).unwrap(), 1);
        assert_eq!(agent.known_contexts(), 2);
        assert_eq!(agent.current_policy().actor, before.actor);
        assert_eq!(agent.current_policy().critic1, before.critic1);
        assert!(agent.model_buffer().is_empty());
        assert!(agent.bank().statistics().iter().all(|&w| w == 0.0));
        assert_eq!(agent.bank().new_statistic(), 0.0);
        assert!(agent.warmup_active());
    }

    #[test]
    fn excursion_leaves_untouched_policies_identical() {
        let mut agent = MbcdAgent::<f64>::new(2, 2, small_cfg(), 2).unwrap();
        feed(&mut agent, 20);
        agent.switch_to(ContextChoice::New).unwrap();
        let p0 = agent.library().entry(0).unwrap().policy.actor.clone();
        feed(&mut agent, 20);
        agent.switch_to(ContextChoice::Known(0)).unwrap();
        assert_eq!(agent.library().entry(0).unwrap().policy.actor, p0);
        assert_eq!(agent.known_contexts(), 2);
        // Self-switch only resets the detector.
        agent.switch_to(ContextChoice::Known(0)).unwrap();
        assert_eq!(agent.known_contexts(), 2);
        assert!(matches!(
            agent.switch_to(ContextChoice::Known(7)),
            Err(Error::InvalidContext { id: 7, known: 2 })
        ));
    }

    #[test]
    fn every_transition_lands_in_the_active_buffer() {
        let mut agent = MbcdAgent::<f64>::new(2, 2, small_cfg(), 3).unwrap();
        feed(&mut agent, 15);
        agent.switch_to(ContextChoice::New).unwrap();
        feed(&mut agent, 7);
        let lens: Vec<usize> = agent.library().entries().iter().map(|e| e.model.buffer().len()).collect();
        assert_eq!(lens, vec![15, 7]);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut agent = MbcdAgent::<f64>::new(2, 2, small_cfg(), 4).unwrap();
        assert!(agent.act(&[0.0], false).is_err());
        assert!(agent.observe(&[0.0, 0.0], &[0.0], 0.0, &[0.0, 0.0], false).is_err());
    }

    #[test]
    fn library_checkpoint_roundtrip() {
        let mut agent = MbcdAgent::<f64>::new(2, 2, small_cfg(), 5).unwrap();
        feed(&mut agent, 20);
        agent.switch_to(ContextChoice::New).unwrap();
        feed(&mut agent, 20);
        let dir = std::env::temp_dir().join(format!("mbcd-lib-{}", std::process::id()));
        agent.save_library(&dir).unwrap();
        let back = MbcdAgent::<f64>::load_library(&dir, small_cfg(), 9).unwrap();
        fs::remove_dir_all(&dir).unwrap();
        assert_eq!(back.known_contexts(), 2);
        assert_eq!(back.current_context(), 1);
        for k in 0..2 {
            let (a, b) = (agent.library().entry(k).unwrap(), back.library().entry(k).unwrap());
            assert_eq!(a.policy.actor, b.policy.actor);
            assert_eq!(a.model.members(), b.model.members());
        }
    }
}
