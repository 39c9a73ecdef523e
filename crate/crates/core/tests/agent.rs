//! Detection behaviour of the full agent on scripted transition streams.

use mbcd_core::agent::AgentConfig;
use mbcd_core::changepoint::{ContextChoice, DetectionEvent, DetectorConfig, ShiftScale};
use mbcd_core::Agent;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn config() -> AgentConfig {
    let mut cfg = AgentConfig {
        detector: DetectorConfig::new(20.0, 2.5).unwrap().with_shift(ShiftScale::StdDev),
        model_interval: 100,
        rollouts: 0,
        mix_ratio: 0.0,
        warmup_steps: 300,
        learning_starts: 100,
        ..AgentConfig::default()
    };
    cfg.dynamics.ensemble_size = 3;
    cfg.dynamics.train_steps = 200;
    cfg.sac.hidden = vec![16, 16];
    cfg.sac.batch_size = 16;
    cfg
}

/// Feeds `(context, steps)` segments of `s' = s + sign * 0.5 * a + noise`
/// with random states and actions, returning every detection.
fn run(segments: &[(usize, u64)], seed: u64) -> (Agent, Vec<DetectionEvent>) {
    let mut agent = Agent::new(1, 1, config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.02).unwrap();
    let mut events = Vec::new();
    for &(context, steps) in segments {
        let sign = if context == 0 { 1.0 } else { -1.0 };
        for _ in 0..steps {
            let s: f64 = rng.gen_range(-1.0..1.0);
            let a: f64 = rng.gen_range(-1.0..1.0);
            let next = s + sign * 0.5 * a + noise.sample(&mut rng);
            let report = agent.observe(&[s], &[a], -next * next, &[next], false).unwrap();
            events.extend(report.detection);
        }
    }
    (agent, events)
}

#[test]
fn switch_spawns_then_returns_to_the_first_context() {
    let (agent, events) = run(&[(0, 1500), (1, 2000), (0, 1000)], 0);
    assert_eq!(events.len(), 2, "{events:?}");
    assert_eq!(events[0].selected, ContextChoice::New);
    assert!((1500..1600).contains(&events[0].gamma), "{:?}", events[0]);
    assert_eq!(events[1].selected, ContextChoice::Known(0));
    assert!((3500..3600).contains(&events[1].gamma), "{:?}", events[1]);
    assert_eq!(agent.known_contexts(), 2);
    assert_eq!(agent.current_context(), 0);
}

#[test]
fn stationary_stream_raises_no_alarm() {
    let (agent, events) = run(&[(0, 3000)], 1);
    assert!(events.is_empty(), "{events:?}");
    assert_eq!(agent.known_contexts(), 1);
    assert!(!agent.warmup_active());
}
