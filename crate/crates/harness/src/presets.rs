//! Named environments, agent settings and experiments.
//!
//! The particle maze stands in for the locomotion benchmarks. Each kind of
//! non-stationarity has a maze analog:
//!
//! | archetype              | maze analog                               |
//! |------------------------|-------------------------------------------|
//! | target velocity change | goal relocation (`maze-a` vs `maze-b`)    |
//! | obstacle / terrain     | wall relocation (`maze-wall`)             |
//! | joint malfunction      | weakened actuation (`maze-weak`)          |
//! | wind                   | drift of the observation stream (`shift`) |
//!
//! The last row has no control effect and lives in the Gaussian-stream
//! presets used by the detection benchmark.

use mbcd_core::agent::AgentConfig;
use mbcd_core::changepoint::{DetectorConfig, ShiftScale};
use mbcd_core::environments::{MazeSpec, StreamContext, Wall};

use crate::config::{
    ContextRef, EnvironmentConfig, ExperimentConfig, OracleConfig, ScheduleConfig, Variant,
};

pub const MAZE_CONTEXTS: &[&str] = &["maze-a", "maze-b", "maze-wall", "maze-weak"];
pub const EXPERIMENTS: &[&str] = &["reidentify", "fast-switch", "stationary"];

/// Pretraining steps per context before the fast-switch measurement.
pub const FAST_SWITCH_PRETRAIN: u64 = 4000;
/// Measured steps of the fast-switch protocol.
pub const FAST_SWITCH_MEASURED: u64 = 2000;
pub const FAST_SWITCH_PERIOD: u64 = 25;

pub fn maze_context(name: &str) -> Option<MazeSpec> {
    let base = MazeSpec {
        name: name.to_string(),
        ..MazeSpec::default()
    };
    let spec = match name {
        "maze-a" => MazeSpec {
            goal: [3.5, 3.5],
            walls: vec![Wall::vertical(2.0, -2.0, 2.0)],
            ..base
        },
        "maze-b" => MazeSpec {
            goal: [-3.5, 3.5],
            walls: vec![Wall::vertical(-2.0, -2.0, 2.0)],
            ..base
        },
        "maze-wall" => MazeSpec {
            goal: [3.5, 3.5],
            walls: vec![Wall::horizontal(1.0, -1.0, 5.0)],
            ..base
        },
        "maze-weak" => MazeSpec {
            goal: [3.5, 3.5],
            walls: vec![Wall::vertical(2.0, -2.0, 2.0)],
            step_scale: 0.2,
            ..base
        },
        _ => return None,
    };
    Some(spec)
}

/// Univariate emission contexts for detection benchmarks.
pub fn stream_contexts(name: &str) -> Option<Vec<StreamContext>> {
    let c = |mean: f64| StreamContext {
        mean: vec![mean],
        variance: vec![1.0],
    };
    match name {
        "shift" => Some(vec![c(0.0), c(2.0)]),
        "small-shift" => Some(vec![c(0.0), c(1.0)]),
        _ => None,
    }
}

/// Agent settings tuned for the particle maze.
pub fn maze_agent() -> AgentConfig {
    let mut cfg = AgentConfig {
        detector: DetectorConfig {
            threshold: 1000.0,
            delta: 2.5,
            alpha: None,
            shift: ShiftScale::StdDev,
        },
        mix_ratio: 0.1,
        copy_critics_on_spawn: false,
        ..AgentConfig::default()
    };
    cfg.dynamics.train_steps = 400;
    cfg.dynamics.batch_size = 128;
    cfg.dynamics.logvar_min = -3.0;
    cfg.sac.batch_size = 128;
    cfg
}

fn two_mazes() -> EnvironmentConfig {
    EnvironmentConfig {
        contexts: vec![
            ContextRef::Named("maze-a".into()),
            ContextRef::Named("maze-b".into()),
        ],
    }
}

pub fn experiment(name: &str) -> Option<ExperimentConfig> {
    let base = ExperimentConfig {
        name: name.to_string(),
        variant: Variant::Mbcd,
        environment: two_mazes(),
        agent: maze_agent(),
        ..ExperimentConfig::default()
    };
    let cfg = match name {
        "reidentify" => ExperimentConfig {
            schedule: ScheduleConfig::Segments {
                segments: vec![(0, 4000), (1, 4000), (0, 2000)],
            },
            steps: 10_000,
            ..base
        },
        "fast-switch" => {
            let p = FAST_SWITCH_PRETRAIN;
            let mut agent = maze_agent();
            agent.detector.threshold = 100.0;
            agent.detector.delta = 3.0;
            ExperimentConfig {
                agent,
                schedule: ScheduleConfig::Periodic {
                    contexts: vec![0, 1],
                    period: FAST_SWITCH_PERIOD,
                    lead_in: vec![(0, p), (1, p)],
                },
                steps: 2 * p + FAST_SWITCH_MEASURED,
                metrics_from: 2 * p,
                oracle: OracleConfig { pretrain_steps: p },
                ..base
            }
        }
        "stationary" => ExperimentConfig {
            schedule: ScheduleConfig::Segments {
                segments: vec![(0, 10_000)],
            },
            steps: 10_000,
            ..base
        },
        _ => return None,
    };
    Some(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_named_preset_is_valid() {
        for name in MAZE_CONTEXTS {
            maze_context(name).unwrap().validate().unwrap();
        }
        for name in EXPERIMENTS {
            experiment(name).unwrap().validate().unwrap();
        }
        maze_agent().validate().unwrap();
        assert!(maze_context("nope").is_none());
        assert!(experiment("nope").is_none());
        assert_eq!(stream_contexts("shift").unwrap().len(), 2);
    }

    #[test]
    fn structurally_distinct_contexts() {
        let a = maze_context("maze-a").unwrap();
        let b = maze_context("maze-b").unwrap();
        assert_ne!(a.goal, b.goal);
        assert_ne!(a.walls, b.walls);
    }
}
