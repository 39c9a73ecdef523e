//! Tables and figure data computed from saved run logs only.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, IoContext, Result};
use crate::metrics::{regret, regret_curve, RunSummary};
use crate::runlog::{RunLog, StepRecord, SUMMARY_COLUMNS};

/// Every directory under `root` (inclusive) holding a `run.json`, sorted.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join("run.json").is_file() {
            out.push(dir.clone());
        }
        for entry in std::fs::read_dir(&dir).at(&dir)? {
            let path = entry.at(&dir)?.path();
            if path.is_dir() {
                stack.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ReportRow {
    pub dir: PathBuf,
    pub summary: RunSummary,
    /// Discounted regret against the oracle run with the same seed, over the
    /// measured window.
    pub regret: Option<f64>,
}

/// Summaries of every run under `root`, with regret when oracle runs are
/// given.
pub fn report(root: &Path, oracle_root: Option<&Path>) -> Result<Vec<ReportRow>> {
    let mut oracles = BTreeMap::new();
    if let Some(o) = oracle_root {
        for dir in find_runs(o)? {
            let log = RunLog::load(&dir)?;
            oracles.insert(log.meta.seed, log);
        }
    }
    let mut rows = Vec::new();
    for dir in find_runs(root)? {
        let log = RunLog::load(&dir)?;
        let regret = match oracles.get(&log.meta.seed) {
            Some(o) => Some(regret(log.measured(), o.measured(), log.meta.gamma)?),
            None if oracle_root.is_some() => {
                return Err(HarnessError::Misaligned(format!(
                    "no oracle run for seed {} ({})",
                    log.meta.seed,
                    dir.display()
                )))
            }
            None => None,
        };
        rows.push(ReportRow {
            summary: RunSummary::compute(&log),
            dir,
            regret,
        });
    }
    Ok(rows)
}

pub fn write_report<W: Write>(out: W, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = SUMMARY_COLUMNS.to_vec();
    header.extend(["regret", "dir"]);
    w.write_record(&header)?;
    for r in rows {
        let s = &r.summary;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
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
            opt(s.detection.mean_delay),
            opt(s.detection.max_delay),
            opt(r.regret),
            r.dir.display().to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Figure {
    /// `t, context, z, k, reward`
    Rewards,
    /// `t, w_0 .. w_{K-1}, w_new`
    Statistics,
    /// `t, ll_0 .. ll_{K-1}, ll_new`
    LogLikelihood,
    /// `t, regret` (cumulative, discounted); needs an oracle log.
    Regret,
}

fn padded(values: &[f64], width: usize) -> impl Iterator<Item = String> + '_ {
    (0..width).map(move |i| values.get(i).map(|v| v.to_string()).unwrap_or_default())
}

/// Writes one figure's data series as CSV.
pub fn write_figure<W: Write>(
    out: W,
    figure: Figure,
    records: &[StepRecord],
    oracle: Option<&[StepRecord]>,
    gamma: f64,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let width = records.iter().map(|r| r.w.len().max(r.ll.len())).max().unwrap_or(0);
    match figure {
        Figure::Rewards => {
            w.write_record(["t", "context", "z", "k", "reward"])?;
            for r in records {
                w.write_record([
                    r.t.to_string(),
                    r.context.to_string(),
                    r.z.to_string(),
                    r.k.to_string(),
                    r.reward.to_string(),
                ])?;
            }
        }
        Figure::Statistics | Figure::LogLikelihood => {
            let (prefix, last) = if figure == Figure::Statistics { ("w", "w_new") } else { ("ll", "ll_new") };
            let mut header = vec!["t".to_string()];
            header.extend((0..width).map(|k| format!("{prefix}_{k}")));
            header.push(last.into());
            w.write_record(&header)?;
            for r in records {
                let (vals, tail) = if figure == Figure::Statistics { (&r.w, r.w_new) } else { (&r.ll, r.ll_new) };
                let mut row = vec![r.t.to_string()];
                row.extend(padded(vals, width));
                row.push(tail.to_string());
                w.write_record(&row)?;
            }
        }
        Figure::Regret => {
            let oracle = oracle.ok_or_else(|| HarnessError::Config("the regret figure needs an oracle log".into()))?;
            let curve = regret_curve(records, oracle, gamma)?;
            w.write_record(["t", "regret"])?;
            for (r, v) in records.iter().zip(curve) {
                w.write_record([r.t.to_string(), v.to_string()])?;
            }
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs() -> Vec<StepRecord> {
        (0..3)
            .map(|t| {
                let mut r = StepRecord::plain(t, 0, 0, vec![0.0, 0.0], -(t as f64));
                r.w = vec![0.0; t as usize + 1];
                r.ll = vec![1.0; t as usize + 1];
                r
            })
            .collect()
    }

    #[test]
    fn statistics_columns_grow_with_the_library() {
        let mut buf = Vec::new();
        write_figure(&mut buf, Figure::Statistics, &recs(), None, 0.99).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,w_0,w_1,w_2,w_new");
        assert_eq!(lines[1], "0,0,,,0");
    }

    #[test]
    fn regret_figure_needs_oracle() {
        let r = recs();
        assert!(write_figure(Vec::new(), Figure::Regret, &r, None, 0.9).is_err());
        let mut buf = Vec::new();
        write_figure(&mut buf, Figure::Regret, &r, Some(&r), 0.9).unwrap();
        assert!(String::from_utf8(buf).unwrap().ends_with("2,0\n"));
    }
}
