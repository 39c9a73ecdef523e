use std::fs::File;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use mbcd_harness::bench::{delay_bench, false_alarm_bench, BenchConfig};
use mbcd_harness::config::ExperimentConfig;
use mbcd_harness::presets;
use mbcd_harness::report::{report, write_figure, write_report, Figure};
use mbcd_harness::runner::{export_schedule, run_experiment};
use mbcd_harness::RunLog;

#[derive(Parser)]
#[command(name = "mbcd", version, about = "Model-based context detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment for every configured seed.
    Run {
        /// TOML config; without it the preset is used as is.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Experiment preset to start from when no config file is given.
        #[arg(long, default_value = "reidentify")]
        preset: String,
        /// Overrides such as `variant=single-model` or `agent.detector.threshold=500`.
        overrides: Vec<String>,
    },
    /// Summarize saved runs as CSV.
    Report {
        dir: PathBuf,
        /// Oracle runs to compute regret against (matched by seed).
        #[arg(long)]
        oracle: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// False-alarm and delay benchmarks on Gaussian streams.
    DetectBench {
        #[arg(long, default_value = "shift")]
        streams_preset: String,
        #[arg(long, default_value_t = 5.0)]
        threshold: f64,
        #[arg(long, default_value_t = 2.0)]
        delta: f64,
        #[arg(long, default_value_t = 200)]
        streams: usize,
        #[arg(long, default_value_t = 2000)]
        stream_steps: u64,
        #[arg(long, default_value_t = 500)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Extract figure data from a saved run.
    Replay {
        run: PathBuf,
        #[arg(long, value_enum)]
        figure: FigureArg,
        #[arg(long)]
        oracle: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the schedule an experiment would follow as JSON.
    Schedule {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "reidentify")]
        preset: String,
        #[arg(long)]
        out: PathBuf,
        overrides: Vec<String>,
    },
    /// List the built-in presets.
    Presets,
}

#[derive(Clone, Copy, ValueEnum)]
enum FigureArg {
    Rewards,
    Statistics,
    LogLikelihood,
    Regret,
}

impl From<FigureArg> for Figure {
    fn from(f: FigureArg) -> Self {
        match f {
            FigureArg::Rewards => Figure::Rewards,
            FigureArg::Statistics => Figure::Statistics,
            FigureArg::LogLikelihood => Figure::LogLikelihood,
            FigureArg::Regret => Figure::Regret,
        }
    }
}

fn load(config: Option<PathBuf>, preset: &str, overrides: &[String]) -> anyhow::Result<ExperimentConfig> {
    Ok(match config {
        Some(path) => ExperimentConfig::load(&path, overrides)
            .with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::preset(preset)?.with_overrides(overrides)?,
    })
}

fn sink(out: Option<PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run { config, preset, overrides } => {
            let cfg = load(config, &preset, &overrides)?;
            let outcome = run_experiment(&cfg)?;
            println!("variant,seed,cumulative_reward,final_k,detections,false_alarms,mean_delay");
            for s in &outcome.summaries {
                println!(
                    "{},{},{:.3},{},{},{},{}",
                    s.variant,
                    s.seed,
                    s.cumulative_reward,
                    s.final_k,
                    s.detections,
                    s.detection.false_alarms.len(),
                    s.detection.mean_delay.map(|d| format!("{d:.1}")).unwrap_or_default()
                );
            }
        }
        Command::Report { dir, oracle, out } => {
            let rows = report(&dir, oracle.as_deref())?;
            if rows.is_empty() {
                bail!("no runs found under {}", dir.display());
            }
            write_report(sink(out)?, &rows)?;
        }
        Command::DetectBench {
            streams_preset,
            threshold,
            delta,
            streams,
            stream_steps,
            trials,
            seed,
        } => {
            let contexts = presets::stream_contexts(&streams_preset)
                .with_context(|| format!("unknown stream preset {streams_preset:?}"))?;
            let cfg = BenchConfig {
                threshold,
                delta,
                streams,
                stream_steps,
                trials,
                seed,
                ..BenchConfig::default()
            };
            let far = false_alarm_bench(&contexts, &cfg)?;
            let delay = delay_bench(&contexts, &cfg)?;
            println!(
                "false alarms: {} in {} observations (rate {:.3e}, mean run length {:.1}, bound e^h = {:.1})",
                far.alarms,
                far.observed_steps,
                far.false_alarm_rate,
                far.mean_run_length,
                threshold.exp()
            );
            println!(
                "delay: mean {:.2} observations over {} detected trials (predicted {:.2}, missed {}, pre-change alarms {})",
                delay.mean_delay,
                delay.delays.len(),
                delay.predicted,
                delay.missed,
                delay.pre_change_alarms
            );
        }
        Command::Replay { run, figure, oracle, out } => {
            let log = RunLog::load(&run)?;
            let oracle_log = oracle.map(|o| RunLog::load(&o)).transpose()?;
            write_figure(
                sink(out)?,
                figure.into(),
                &log.records,
                oracle_log.as_ref().map(|o| o.records.as_slice()),
                log.meta.gamma,
            )?;
        }
        Command::Schedule { config, preset, out, overrides } => {
            let cfg = load(config, &preset, &overrides)?;
            export_schedule(&cfg, &out)?;
        }
        Command::Presets => {
            println!("experiments: {}", presets::EXPERIMENTS.join(", "));
            println!("maze contexts: {}", presets::MAZE_CONTEXTS.join(", "));
            println!("stream contexts: shift, small-shift");
        }
    }
    Ok(())
}
