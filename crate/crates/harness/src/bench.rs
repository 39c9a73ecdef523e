//! False-alarm and delay benchmarks for the CUSUM bank on Gaussian streams.
//!
//! Stream contexts are known exactly, so the bank sees the true predictive
//! distributions and only the detector itself is under test. Context 0 is
//! the pre-change regime and context 1 the post-change one.

use mbcd_core::changepoint::{predicted_worst_delay, CusumBank, DetectorConfig};
use mbcd_core::environments::{stream_emit, ContextSchedule, GaussianStreamSpec, StreamContext};
use mbcd_core::gaussian::{kl_divergence, DiagonalGaussian};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub threshold: f64,
    /// Shift of the new-context alternative. With unit variances and the
    /// default variance scaling, `delta` equal to the mean gap makes the
    /// new-context statistic coincide with the known alternative's.
    pub delta: f64,
    pub streams: usize,
    pub stream_steps: u64,
    pub trials: usize,
    pub change_at: u64,
    /// Cap on post-change observations per delay trial.
    pub max_delay: u64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            threshold: 5.0,
            delta: 2.0,
            streams: 200,
            stream_steps: 2000,
            trials: 500,
            change_at: 100,
            max_delay: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FarResult {
    pub streams: usize,
    pub observed_steps: u64,
    pub alarms: u64,
    /// Alarms per observation.
    pub false_alarm_rate: f64,
    /// Observations per alarm; infinite when none fired.
    pub mean_run_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayResult {
    pub trials: usize,
    /// Post-change observations consumed before each alarm.
    pub delays: Vec<u64>,
    pub mean_delay: f64,
    /// `h / KL`.
    pub predicted: f64,
    pub pre_change_alarms: u64,
    /// Trials that hit `max_delay` without an alarm.
    pub missed: usize,
}

fn gaussians(contexts: &[StreamContext]) -> Result<Vec<DiagonalGaussian<f64>>> {
    if contexts.len() != 2 {
        return Err(HarnessError::Config(format!(
            "detection benchmarks need exactly two stream contexts, got {}",
            contexts.len()
        )));
    }
    contexts
        .iter()
        .map(|c| DiagonalGaussian::new(c.mean.clone(), c.variance.clone()).map_err(Into::into))
        .collect()
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn detector(cfg: &BenchConfig) -> Result<DetectorConfig> {
    Ok(DetectorConfig::new(cfg.threshold, cfg.delta)?)
}

/// Streams drawn entirely from context 0 while the bank believes context 0.
/// Any decision to leave it is a false alarm; the bank restarts after each.
pub fn false_alarm_bench(contexts: &[StreamContext], cfg: &BenchConfig) -> Result<FarResult> {
    let preds = gaussians(contexts)?;
    let det = detector(cfg)?;
    let spec = GaussianStreamSpec::new(contexts.to_vec(), ContextSchedule::constant(0))?;
    let mut alarms = 0;
    for i in 0..cfg.streams {
        let mut rng = stream_rng(cfg.seed, i as u64);
        let mut bank = CusumBank::<f64>::new(2, 0)?;
        for t in 0..cfg.stream_steps {
            let y = stream_emit(&spec, t, &mut rng);
            bank.update(&preds, &[], &y, &det)?;
            if bank.decide(det.threshold).is_some() {
                alarms += 1;
                bank.reset();
            }
        }
    }
    let observed = cfg.streams as u64 * cfg.stream_steps;
    Ok(FarResult {
        streams: cfg.streams,
        observed_steps: observed,
        alarms,
        false_alarm_rate: alarms as f64 / observed.max(1) as f64,
        mean_run_length: if alarms == 0 {
            f64::INFINITY
        } else {
            observed as f64 / alarms as f64
        },
    })
}

/// Streams switching from context 0 to context 1 at `change_at`. Alarms
/// before the change restart the bank and are counted separately.
pub fn delay_bench(contexts: &[StreamContext], cfg: &BenchConfig) -> Result<DelayResult> {
    let preds = gaussians(contexts)?;
    let det = detector(cfg)?;
    let kl = kl_divergence(&preds[1], &preds[0])?;
    let predicted = predicted_worst_delay(cfg.threshold, kl)?;
    let schedule = ContextSchedule::from_segments(&[(0, cfg.change_at.max(1)), (1, 1)])?;
    let spec = GaussianStreamSpec::new(contexts.to_vec(), schedule)?;
    let mut delays = Vec::with_capacity(cfg.trials);
    let mut pre_change_alarms = 0;
    let mut missed = 0;
    for i in 0..cfg.trials {
        let mut rng = stream_rng(cfg.seed, (1 << 32) + i as u64);
        let mut bank = CusumBank::<f64>::new(2, 0)?;
        let mut hit = None;
        for t in 0..cfg.change_at + cfg.max_delay {
            let y = stream_emit(&spec, t, &mut rng);
            bank.update(&preds, &[], &y, &det)?;
            if bank.decide(det.threshold).is_some() {
                if t < cfg.change_at {
                    pre_change_alarms += 1;
                    bank.reset();
                } else {
                    hit = Some(t - cfg.change_at + 1);
                    break;
                }
            }
        }
        match hit {
            Some(d) => delays.push(d),
            None => missed += 1,
        }
    }
    let mean_delay = if delays.is_empty() {
        f64::NAN
    } else {
        delays.iter().sum::<u64>() as f64 / delays.len() as f64
    };
    Ok(DelayResult {
        trials: cfg.trials,
        delays,
        mean_delay,
        predicted,
        pre_change_alarms,
        missed,
    })
}
