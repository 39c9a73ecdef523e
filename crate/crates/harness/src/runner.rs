//! Executes experiments and writes their run logs.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use mbcd_core::agent::MbcdAgent;
use mbcd_core::changepoint::{ContextChoice, DetectionEvent};
use mbcd_core::environments::{ContextSchedule, Environment, NonStationaryMaze};
use mbcd_core::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, Precision, Variant};
use crate::error::{IoContext, Result};
use crate::metrics::RunSummary;
use crate::mpc::mpc_act;
use crate::oracle::OracleAgent;
use crate::runlog::{write_summaries, RunLog, RunMeta, StepRecord, SCHEMA};

/// Stream offsets so the planner, the oracle's acting noise and random play
/// never share a generator with the agent.
const PLANNER_STREAM: u64 = 0x9e37_79b9;
const RANDOM_STREAM: u64 = 0x85eb_ca6b;

fn meta(cfg: &ExperimentConfig, seed: u64, schedule: &ContextSchedule, env: &NonStationaryMaze) -> RunMeta {
    RunMeta {
        schema: SCHEMA.to_string(),
        experiment: cfg.name.clone(),
        variant: cfg.variant,
        seed,
        steps: cfg.steps,
        metrics_from: cfg.metrics_from,
        gamma: cfg.gamma,
        contexts: env.pool().iter().map(|s| s.name.clone()).collect(),
        change_points: schedule.change_points(cfg.steps),
    }
}

/// One seeded run of `cfg` at element type `S`, kept in memory.
pub fn simulate_with<S: Scalar>(cfg: &ExperimentConfig, seed: u64) -> Result<RunLog> {
    cfg.validate()?;
    let pool = cfg.environment.resolve()?;
    let schedule = cfg.schedule()?;
    let mut env = NonStationaryMaze::new(pool.clone(), schedule.clone())?;
    let meta = meta(cfg, seed, &schedule, &env);
    let mut records = Vec::with_capacity(cfg.steps as usize);
    let det = cfg.deterministic_actions;

    match cfg.variant {
        Variant::Mbcd | Variant::MbcdMpc | Variant::SingleModel | Variant::ModelFree => {
            let mut agent = MbcdAgent::<S>::for_env(&env, cfg.agent_config(), seed)?;
            let mut planner_rng = ChaCha8Rng::seed_from_u64(seed ^ PLANNER_STREAM);
            for t in 0..cfg.steps {
                let s = env.observation();
                let a = if cfg.variant == Variant::MbcdMpc {
                    let spec = env.spec(env.context()).clone();
                    let known = move |y: &[f64]| spec.reward([y[0], y[1]]);
                    let reward: Option<&dyn Fn(&[f64]) -> f64> = cfg.mpc.known_reward.then_some(&known);
                    mpc_act::<S, _>(agent.current_model(), &s, reward, &cfg.mpc, &mut planner_rng)?
                } else {
                    agent.act(&s, det)?
                };
                let out = env.step(&a)?;
                let report = agent.observe(&s, &a, out.reward, &out.next_state, out.terminal)?;
                records.push(StepRecord::from_report(report, out.context));
                if (t + 1) % 1000 == 0 {
                    log::debug!("{} seed {seed}: t={} K={}", cfg.variant, t + 1, agent.known_contexts());
                }
            }
        }
        Variant::Oracle => {
            let agent_cfg = cfg.agent_config();
            let mut oracle = OracleAgent::<S>::pretrain(
                &pool,
                schedule.clone(),
                &agent_cfg.sac,
                agent_cfg.learning_starts,
                cfg.oracle.pretrain_steps,
                seed,
            )?;
            let mut previous = oracle.context_at(0);
            for t in 0..cfg.steps {
                let s = env.observation();
                let a = oracle.act(t, &s, det)?;
                let out = env.step(&a)?;
                let mut rec = StepRecord::plain(t, out.context, out.context, a, out.reward);
                rec.k = pool.len();
                if out.context != previous {
                    rec.detection = Some(
                        DetectionEvent {
                            gamma: t,
                            previous,
                            selected: ContextChoice::Known(out.context),
                            activated: out.context,
                            change_point: None,
                            delay: None,
                        }
                        .with_change_point(t),
                    );
                    previous = out.context;
                }
                records.push(rec);
            }
        }
        Variant::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ RANDOM_STREAM);
            for t in 0..cfg.steps {
                let a: Vec<f64> = (0..env.action_dim()).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                let out = env.step(&a)?;
                records.push(StepRecord::plain(t, out.context, 0, a, out.reward));
            }
        }
    }
    Ok(RunLog { meta, records })
}

/// One seeded run at the configured precision.
pub fn simulate(cfg: &ExperimentConfig, seed: u64) -> Result<RunLog> {
    match cfg.precision {
        Precision::F32 => simulate_with::<f32>(cfg, seed),
        Precision::F64 => simulate_with::<f64>(cfg, seed),
    }
}

pub fn run_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.output.join(cfg.variant.name()).join(format!("seed_{seed}"))
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub summaries: Vec<RunSummary>,
    pub dirs: Vec<PathBuf>,
}

/// Runs every seed (in parallel when cores allow), writes each run directory,
/// the resolved config and a per-variant summary table.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output).at(&cfg.output)?;
    let cfg_path = cfg.output.join(format!("{}.toml", cfg.variant.name()));
    std::fs::write(&cfg_path, cfg.to_toml_string()?).at(&cfg_path)?;

    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(cfg.seeds.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<(RunSummary, PathBuf)>>>> =
        Mutex::new((0..cfg.seeds.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&seed) = cfg.seeds.get(i) else { break };
                let out = run_one(cfg, seed);
                results.lock().expect("result slots")[i] = Some(out);
            });
        }
    });

    let mut summaries = Vec::new();
    let mut dirs = Vec::new();
    for slot in results.into_inner().expect("result slots") {
        let (s, d) = slot.expect("every seed ran")?;
        summaries.push(s);
        dirs.push(d);
    }
    write_summaries(&cfg.output.join(cfg.variant.name()).join("summary.csv"), &summaries)?;
    Ok(ExperimentOutcome { summaries, dirs })
}

fn run_one(cfg: &ExperimentConfig, seed: u64) -> Result<(RunSummary, PathBuf)> {
    let log = simulate(cfg, seed)?;
    let dir = run_dir(cfg, seed);
    log.save(&dir)?;
    log::info!("{} seed {seed} done -> {}", cfg.variant, dir.display());
    Ok((RunSummary::compute(&log), dir))
}

/// Writes the schedule `cfg` would run as JSON.
pub fn export_schedule(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    let json = cfg.schedule()?.to_json()?;
    std::fs::write(path, json).at(path)?;
    Ok(())
}
