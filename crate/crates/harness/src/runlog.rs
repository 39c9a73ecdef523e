//! Run logs.
//!
//! A run directory holds:
//!
//! * `run.json`: [`RunMeta`], including the schema tag [`SCHEMA`].
//! * `records.jsonl`: one [`StepRecord`] per environment step, in order.
//! * `summary.csv`, `delays.csv`, `k_trace.csv`: tables derived from the
//!   records (columns in [`SUMMARY_COLUMNS`], [`DELAY_COLUMNS`],
//!   [`K_TRACE_COLUMNS`]).
//!
//! Records carry no wall-clock data, so a seeded run always produces the
//! same bytes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use mbcd_core::agent::StepReport;
use mbcd_core::changepoint::DetectionEvent;
use serde::{Deserialize, Serialize};

use crate::config::Variant;
use crate::error::{HarnessError, IoContext, Result};
use crate::metrics::{DetectionReport, RunSummary};

pub const SCHEMA: &str = "mbcd-runlog/1";
pub const SUMMARY_COLUMNS: &[&str] = &[
    "variant",
    "seed",
    "steps",
    "measured_steps",
    "cumulative_reward",
    "discounted_return",
    "final_k",
    "detections",
    "false_alarms",
    "censored",
    "mean_delay",
    "max_delay",
];
pub const DELAY_COLUMNS: &[&str] = &["change_point", "detected_at", "delay", "censored"];
pub const K_TRACE_COLUMNS: &[&str] = &["t", "k"];

/// One environment step as seen by the agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u64,
    /// True context id from the schedule.
    pub context: usize,
    /// Context the agent acted under after this step's decision.
    pub z: usize,
    /// Library size.
    pub k: usize,
    pub action: Vec<f64>,
    pub reward: f64,
    /// CUSUM statistic per library context.
    pub w: Vec<f64>,
    pub w_new: f64,
    /// Log-likelihood of the observed transition under each library model.
    pub ll: Vec<f64>,
    pub ll_new: f64,
    pub disagreement: f64,
    pub warmup: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionEvent>,
}

impl StepRecord {
    pub fn from_report(report: StepReport, context: usize) -> Self {
        Self {
            t: report.t,
            context,
            z: report.z,
            k: report.k,
            action: report.action,
            reward: report.reward,
            w: report.w,
            w_new: report.w_new,
            ll: report.log_likelihood,
            ll_new: report.log_likelihood_new,
            disagreement: report.disagreement,
            warmup: report.warmup,
            detection: report.detection,
        }
    }

    /// A record for agents without a detector.
    pub fn plain(t: u64, context: usize, z: usize, action: Vec<f64>, reward: f64) -> Self {
        Self {
            t,
            context,
            z,
            k: 1,
            action,
            reward,
            w: Vec::new(),
            w_new: 0.0,
            ll: Vec::new(),
            ll_new: 0.0,
            disagreement: 0.0,
            warmup: false,
            detection: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub schema: String,
    pub experiment: String,
    pub variant: Variant,
    pub seed: u64,
    pub steps: u64,
    pub metrics_from: u64,
    pub gamma: f64,
    pub contexts: Vec<String>,
    pub change_points: Vec<u64>,
}

impl RunMeta {
    pub fn check_schema(&self) -> Result<()> {
        if self.schema == SCHEMA {
            Ok(())
        } else {
            Err(HarnessError::Schema {
                found: self.schema.clone(),
                expected: SCHEMA.into(),
            })
        }
    }
}

/// Serializes records as JSON lines.
pub fn write_jsonl<W: Write>(out: W, records: &[StepRecord]) -> Result<()> {
    let mut out = BufWriter::new(out);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(serde_json::Error::io)?;
    }
    out.flush().map_err(serde_json::Error::io)?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<StepRecord>> {
    let file = File::open(path).at(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StepRecord = serde_json::from_str(&line)?;
        if let Some(prev) = out.last().map(|r: &StepRecord| r.t) {
            if rec.t <= prev {
                return Err(HarnessError::Misaligned(format!(
                    "{}: line {} has t = {} after t = {prev}",
                    path.display(),
                    i + 1,
                    rec.t
                )));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_meta(dir: &Path) -> Result<RunMeta> {
    let path = dir.join("run.json");
    let text = std::fs::read_to_string(&path).at(&path)?;
    let meta: RunMeta = serde_json::from_str(&text)?;
    meta.check_schema()?;
    Ok(meta)
}

/// A run directory loaded back from disk.
#[derive(Debug, Clone)]
pub struct RunLog {
    pub meta: RunMeta,
    pub records: Vec<StepRecord>,
}

impl RunLog {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            meta: read_meta(dir)?,
            records: read_jsonl(&dir.join("records.jsonl"))?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).at(dir)?;
        let meta_path = dir.join("run.json");
        std::fs::write(&meta_path, serde_json::to_string_pretty(&self.meta)?).at(&meta_path)?;
        let rec_path = dir.join("records.jsonl");
        write_jsonl(File::create(&rec_path).at(&rec_path)?, &self.records)?;
        let summary = RunSummary::compute(self);
        write_summaries(&dir.join("summary.csv"), std::slice::from_ref(&summary))?;
        write_delays(&dir.join("delays.csv"), &summary.detection)?;
        write_k_trace(&dir.join("k_trace.csv"), &self.records)?;
        Ok(())
    }

    /// Records with `t >= metrics_from`.
    pub fn measured(&self) -> &[StepRecord] {
        let i = self.records.partition_point(|r| r.t < self.meta.metrics_from);
        &self.records[i..]
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_summaries(path: &Path, rows: &[RunSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_COLUMNS)?;
    for s in rows {
        w.write_record([
            s.variant.name().to_string(),
            s.seed.to_string(),
            s.steps.to_string(),
            s.measured_steps.to_string(),
            s.cumulative_reward.to_string(),
            s.discounted_return.to_string(),
            s.final_k.to_string(),
            s.detections.to_string(),
            s.detection.false_alarms.len().to_string(),
            s.detection.censored().to_string(),
            fmt_opt(s.detection.mean_delay),
            fmt_opt(s.detection.max_delay),
        ])?;
    }
    w.flush().at(path)?;
    Ok(())
}

pub fn write_delays(path: &Path, report: &DetectionReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(DELAY_COLUMNS)?;
    for row in &report.rows {
        w.write_record([
            row.change_point.to_string(),
            row.detected_at.map(|v| v.to_string()).unwrap_or_default(),
            row.delay.to_string(),
            row.censored.to_string(),
        ])?;
    }
    w.flush().at(path)?;
    Ok(())
}

/// Library size at t = 0 and at every step where it changes.
pub fn write_k_trace(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(K_TRACE_COLUMNS)?;
    let mut last = None;
    for r in records {
        if last != Some(r.k) {
            w.write_record([r.t.to_string(), r.k.to_string()])?;
            last = Some(r.k);
        }
    }
    w.flush().at(path)?;
    Ok(())
}
