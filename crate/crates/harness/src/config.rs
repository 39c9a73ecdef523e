//! Experiment configuration.
//!
//! A config is a TOML file. Its optional `preset` key names the experiment
//! the file starts from (default `reidentify`). Every other key overrides
//! the preset: tables merge key by key, other values replace. A table whose
//! `kind` differs from the preset's is replaced whole. Command-line
//! overrides `dotted.key=value` are applied last; the value is parsed as a
//! TOML literal and falls back to a plain string.
//!
//! ```toml
//! preset = "fast-switch"
//! variant = "single-model"
//! seeds = [0, 1, 2]
//!
//! [agent.detector]
//! threshold = 500.0
//!
//! [schedule]
//! kind = "segments"
//! segments = [[0, 3000], [1, 3000]]
//! ```

use std::path::{Path, PathBuf};

use mbcd_core::agent::AgentConfig;
use mbcd_core::environments::{ContextSchedule, MazeSpec, ScheduleEntry};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::error::{HarnessError, IoContext, Result};
use crate::mpc::CemConfig;
use crate::presets;

pub const DEFAULT_PRESET: &str = "reidentify";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Mbcd,
    /// MBCD with actions planned by CEM on the active model.
    MbcdMpc,
    /// One model and one policy for every context (detection off).
    SingleModel,
    /// Plain SAC: detection off and no simulated experience.
    ModelFree,
    /// Frozen per-context policies switched exactly at each change point.
    Oracle,
    /// Uniform random actions; the floor for normalized scores.
    Random,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Mbcd,
        Variant::MbcdMpc,
        Variant::SingleModel,
        Variant::ModelFree,
        Variant::Oracle,
        Variant::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mbcd => "mbcd",
            Variant::MbcdMpc => "mbcd-mpc",
            Variant::SingleModel => "single-model",
            Variant::ModelFree => "model-free",
            Variant::Oracle => "oracle",
            Variant::Random => "random",
        }
    }

    /// The agent settings this variant runs with. Baselines differ from MBCD
    /// only in configuration values.
    pub fn configure(self, base: &AgentConfig) -> AgentConfig {
        let mut cfg = base.clone();
        match self {
            Variant::SingleModel => {
                cfg.detector.threshold = f64::INFINITY;
                cfg.detector.alpha = None;
            }
            Variant::ModelFree => {
                cfg.detector.threshold = f64::INFINITY;
                cfg.detector.alpha = None;
                cfg.rollouts = 0;
                cfg.mix_ratio = 0.0;
            }
            Variant::Mbcd | Variant::MbcdMpc | Variant::Oracle | Variant::Random => {}
        }
        cfg
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// A maze context given by preset name or spelled out in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ContextRef {
    Named(String),
    Inline(MazeSpec),
}

impl ContextRef {
    pub fn resolve(&self) -> Result<MazeSpec> {
        match self {
            ContextRef::Named(name) => presets::maze_context(name).ok_or_else(|| {
                HarnessError::Config(format!(
                    "unknown maze context {name:?}; known: {}",
                    presets::MAZE_CONTEXTS.join(", ")
                ))
            }),
            ContextRef::Inline(spec) => {
                spec.validate()?;
                Ok(spec.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    /// Context pool; schedule entries index into it.
    pub contexts: Vec<ContextRef>,
}

impl EnvironmentConfig {
    pub fn resolve(&self) -> Result<Vec<MazeSpec>> {
        self.contexts.iter().map(ContextRef::resolve).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScheduleConfig {
    /// `(context, length)` pairs played in order; the last one extends to
    /// the end of the run.
    Segments { segments: Vec<(usize, u64)> },
    /// Optional scripted `lead_in` segments, then `contexts` cycled every
    /// `period` steps.
    Periodic {
        contexts: Vec<usize>,
        period: u64,
        #[serde(default)]
        lead_in: Vec<(usize, u64)>,
    },
    /// Seeded random segments over the whole pool.
    Random {
        min_len: u64,
        max_len: u64,
        #[serde(default)]
        seed: u64,
    },
    /// A schedule exported as JSON.
    File { path: PathBuf },
}

impl ScheduleConfig {
    pub fn build(&self, pool: usize, horizon: u64) -> Result<ContextSchedule> {
        let schedule = match self {
            ScheduleConfig::Segments { segments } => ContextSchedule::from_segments(segments)?,
            ScheduleConfig::Periodic {
                contexts,
                period,
                lead_in,
            } => {
                if contexts.is_empty() || *period == 0 {
                    return Err(HarnessError::Config(
                        "periodic schedule needs contexts and a positive period".into(),
                    ));
                }
                let mut entries = Vec::new();
                let mut t = 0;
                for &(context, len) in lead_in {
                    if len == 0 {
                        return Err(HarnessError::Config("lead-in segments must be non-empty".into()));
                    }
                    entries.push(ScheduleEntry { start: t, context });
                    t += len;
                }
                let mut i = 0;
                while t < horizon.max(1) {
                    entries.push(ScheduleEntry {
                        start: t,
                        context: contexts[i % contexts.len()],
                    });
                    t += period;
                    i += 1;
                }
                ContextSchedule::new(entries)?
            }
            ScheduleConfig::Random {
                min_len,
                max_len,
                seed,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                ContextSchedule::random(pool, *min_len, *max_len, horizon, &mut rng)?
            }
            ScheduleConfig::File { path } => {
                let text = std::fs::read_to_string(path).at(path)?;
                ContextSchedule::from_json(&text)?
            }
        };
        if schedule.max_context() >= pool {
            return Err(HarnessError::Config(format!(
                "schedule refers to context {} but the pool holds {pool}",
                schedule.max_context()
            )));
        }
        Ok(schedule)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    /// SAC steps each oracle policy trains for, alone in its context.
    pub pretrain_steps: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { pretrain_steps: 4000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub variant: Variant,
    pub precision: Precision,
    pub environment: EnvironmentConfig,
    pub schedule: ScheduleConfig,
    pub agent: AgentConfig,
    pub oracle: OracleConfig,
    pub mpc: CemConfig,
    pub seeds: Vec<u64>,
    pub steps: u64,
    /// Summaries and regret cover `t >= metrics_from`.
    pub metrics_from: u64,
    /// Discount of the regret and discounted-return metrics.
    pub gamma: f64,
    /// Act with the policy mean instead of sampling.
    pub deterministic_actions: bool,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            variant: Variant::Mbcd,
            precision: Precision::F64,
            environment: EnvironmentConfig {
                contexts: vec![ContextRef::Named("maze-a".into())],
            },
            schedule: ScheduleConfig::Segments {
                segments: vec![(0, 1000)],
            },
            agent: AgentConfig::default(),
            oracle: OracleConfig::default(),
            mpc: CemConfig::default(),
            seeds: (0..7).collect(),
            steps: 1000,
            metrics_from: 0,
            gamma: 0.99,
            deterministic_actions: false,
            output: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        presets::experiment(name).ok_or_else(|| {
            HarnessError::Config(format!(
                "unknown preset {name:?}; known: {}",
                presets::EXPERIMENTS.join(", ")
            ))
        })
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut user: toml::Table = text.parse()?;
        let preset = match user.remove("preset") {
            None => DEFAULT_PRESET.to_string(),
            Some(Value::String(s)) => s,
            Some(other) => {
                return Err(HarnessError::Config(format!("preset must be a string, got {other}")))
            }
        };
        Self::preset(&preset)?.with_table(user, overrides)
    }

    /// Applies a partial TOML table and then `key=value` overrides.
    pub fn with_table(&self, table: toml::Table, overrides: &[String]) -> Result<Self> {
        let mut base = Value::try_from(self)?;
        merge(&mut base, Value::Table(table));
        for o in overrides {
            apply_override(&mut base, o)?;
        }
        let cfg: Self = base.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        self.with_table(toml::Table::new(), overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Agent settings after the variant is applied.
    pub fn agent_config(&self) -> AgentConfig {
        self.variant.configure(&self.agent)
    }

    pub fn schedule(&self) -> Result<ContextSchedule> {
        self.schedule.build(self.environment.contexts.len(), self.steps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seeds must not be empty".into()));
        }
        if self.environment.contexts.is_empty() {
            return Err(HarnessError::Config("environment.contexts must not be empty".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(HarnessError::Config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if self.metrics_from > self.steps {
            return Err(HarnessError::Config(format!(
                "metrics_from ({}) exceeds steps ({})",
                self.metrics_from, self.steps
            )));
        }
        self.environment.resolve()?;
        if !matches!(self.schedule, ScheduleConfig::File { .. }) {
            self.schedule()?;
        }
        self.agent_config().validate()?;
        self.mpc.validate()?;
        Ok(())
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Table(b), Value::Table(p)) => {
            let kind_changed = matches!(
                (b.get("kind"), p.get("kind")),
                (Some(x), Some(y)) if x != y
            );
            if kind_changed {
                *b = p;
                return;
            }
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, patch) => *slot = patch,
    }
}

fn parse_literal(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets `dotted.key=value` inside `root`, creating tables on the way.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override {spec:?} is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(HarnessError::Config(format!("override key {key:?} is malformed")));
    }
    let mut node = root;
    for part in &path[..path.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("override {key:?}: {part:?} is not a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| HarnessError::Config(format!("override {key:?} does not address a table")))?;
    let last = path[path.len() - 1].to_string();
    let value = parse_literal(raw.trim());
    match table.get_mut(&last) {
        Some(slot) => merge(slot, value),
        None => {
            table.insert(last, value);
        }
    }
    Ok(())
}

/// Dotted paths of every leaf that differs between two serializable values.
pub fn config_diff<T: Serialize>(a: &T, b: &T) -> Result<Vec<String>> {
    let (a, b) = (Value::try_from(a)?, Value::try_from(b)?);
    let mut out = Vec::new();
    diff_into(&a, &b, String::new(), &mut out);
    out.sort();
    Ok(out)
}

fn diff_into(a: &Value, b: &Value, prefix: String, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Table(x), Value::Table(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => diff_into(u, v, path, out),
                    _ => out.push(path),
                }
            }
        }
        (Value::Float(x), Value::Float(y)) if x.to_bits() == y.to_bits() => {}
        _ if a == b => {}
        _ => out.push(prefix),
    }
}
