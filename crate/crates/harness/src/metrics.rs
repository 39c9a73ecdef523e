//! Regret, detection delays and per-run summaries.

use serde::{Deserialize, Serialize};

use crate::config::Variant;
use crate::error::{HarnessError, Result};
use crate::runlog::{RunLog, StepRecord};

fn check_aligned(agent: &[StepRecord], oracle: &[StepRecord]) -> Result<()> {
    if agent.len() != oracle.len() {
        return Err(HarnessError::Misaligned(format!(
            "{} agent records vs {} oracle records",
            agent.len(),
            oracle.len()
        )));
    }
    if let Some((a, o)) = agent.iter().zip(oracle).find(|(a, o)| a.t != o.t) {
        return Err(HarnessError::Misaligned(format!("agent t = {} meets oracle t = {}", a.t, o.t)));
    }
    Ok(())
}

/// Running discounted regret: entry `i` is `sum_{j <= i} gamma^j (r_o - r_a)`,
/// with `j` counted from the first aligned record.
pub fn regret_curve(agent: &[StepRecord], oracle: &[StepRecord], gamma: f64) -> Result<Vec<f64>> {
    check_aligned(agent, oracle)?;
    let mut total = 0.0;
    let mut discount = 1.0;
    Ok(agent
        .iter()
        .zip(oracle)
        .map(|(a, o)| {
            total += discount * (o.reward - a.reward);
            discount *= gamma;
            total
        })
        .collect())
}

/// Discounted reward lost against the oracle over aligned records.
pub fn regret(agent: &[StepRecord], oracle: &[StepRecord], gamma: f64) -> Result<f64> {
    Ok(regret_curve(agent, oracle, gamma)?.last().copied().unwrap_or(0.0))
}

pub fn discounted_return(records: &[StepRecord], gamma: f64) -> f64 {
    let mut discount = 1.0;
    records
        .iter()
        .map(|r| {
            let v = discount * r.reward;
            discount *= gamma;
            v
        })
        .sum()
}

pub fn cumulative_reward(records: &[StepRecord]) -> f64 {
    records.iter().map(|r| r.reward).sum()
}

/// `(R - R_random) / (R_oracle - R_random)`: 0 for random play, 1 for the
/// oracle.
pub fn normalized_score(value: f64, random: f64, oracle: f64) -> f64 {
    (value - random) / (oracle - random)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayRow {
    pub change_point: u64,
    pub detected_at: Option<u64>,
    /// Steps from the change to its detection; for censored rows, to the end
    /// of the change's window.
    pub delay: u64,
    pub censored: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionReport {
    pub rows: Vec<DelayRow>,
    /// Steps of detections that no true change accounts for.
    pub false_alarms: Vec<u64>,
    /// Over detected changes only.
    pub mean_delay: Option<f64>,
    pub max_delay: Option<f64>,
}

impl DetectionReport {
    pub fn censored(&self) -> usize {
        self.rows.iter().filter(|r| r.censored).count()
    }
}

/// Matches each change point `C_i` to the first detection in
/// `[C_i, C_{i+1})`. Other detections are false alarms.
pub fn detection_report(records: &[StepRecord], change_points: &[u64], run_length: u64) -> DetectionReport {
    let detections: Vec<u64> = records
        .iter()
        .filter(|r| r.detection.is_some())
        .map(|r| r.t)
        .collect();
    let mut matched = vec![false; detections.len()];
    let mut rows = Vec::with_capacity(change_points.len());
    for (i, &c) in change_points.iter().enumerate() {
        let end = change_points.get(i + 1).copied().unwrap_or(run_length).max(c);
        let hit = detections.iter().position(|&d| d >= c && d < end);
        let row = match hit {
            Some(j) => {
                matched[j] = true;
                DelayRow {
                    change_point: c,
                    detected_at: Some(detections[j]),
                    delay: detections[j] - c,
                    censored: false,
                }
            }
            None => DelayRow {
                change_point: c,
                detected_at: None,
                delay: end - c,
                censored: true,
            },
        };
        rows.push(row);
    }
    let false_alarms = detections
        .iter()
        .zip(&matched)
        .filter(|(_, &m)| !m)
        .map(|(&d, _)| d)
        .collect();
    let delays: Vec<f64> = rows.iter().filter(|r| !r.censored).map(|r| r.delay as f64).collect();
    let mean_delay = (!delays.is_empty()).then(|| delays.iter().sum::<f64>() / delays.len() as f64);
    let max_delay = delays.iter().copied().reduce(f64::max);
    DetectionReport {
        rows,
        false_alarms,
        mean_delay,
        max_delay,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub seed: u64,
    pub steps: u64,
    pub measured_steps: u64,
    pub cumulative_reward: f64,
    pub discounted_return: f64,
    /// Library size after the last step; 0 for an empty log.
    pub final_k: usize,
    pub detections: usize,
    pub detection: DetectionReport,
}

impl RunSummary {
    pub fn compute(log: &RunLog) -> Self {
        let measured = log.measured();
        Self {
            variant: log.meta.variant,
            seed: log.meta.seed,
            steps: log.records.len() as u64,
            measured_steps: measured.len() as u64,
            cumulative_reward: cumulative_reward(measured),
            discounted_return: discounted_return(measured, log.meta.gamma),
            final_k: log.records.last().map_or(0, |r| r.k),
            detections: log.records.iter().filter(|r| r.detection.is_some()).count(),
            detection: detection_report(&log.records, &log.meta.change_points, log.meta.steps),
        }
    }
}
