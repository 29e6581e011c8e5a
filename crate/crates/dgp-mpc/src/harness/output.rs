//! CSV persistence: episode logs, metrics, the resolved-config echo, and
//! the warnings log. Floats use Rust's shortest round-trip formatting, so
//! re-parsing a file reconstructs the exact values.

use super::config::RunConfig;
use super::metrics::MetricsReport;
use super::EpisodeLog;
use crate::error::{Error, Result};
use crate::inference::TrainingTrace;
use ndarray::Array1;
use std::fmt::Write as _;
use std::path::Path;

/// Writes `episodes.csv`, `metrics.csv`, `metrics_summary.csv`,
/// `config.echo.toml` and `warnings.log` into `dir`.
pub fn write_outputs(
    logs: &[EpisodeLog],
    metrics: &MetricsReport,
    config: &RunConfig,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (state_dim, action_dim) = logs
        .first()
        .and_then(|l| l.records.first())
        .map(|r| (r.state.len(), r.action.len()))
        .unwrap_or((0, 0));

    let mut episodes = String::from("seed,episode,step,t");
    for j in 0..action_dim {
        write!(episodes, ",action_{j}").unwrap();
    }
    for j in 0..state_dim {
        write!(episodes, ",state_{j}").unwrap();
    }
    episodes.push_str(",reward\n");
    for log in logs {
        for (i, rec) in log.records.iter().enumerate() {
            let step = log.episode * log.records.len() + i;
            write!(episodes, "{},{},{},{}", log.seed, log.episode, step, rec.t).unwrap();
            for v in rec.action.iter() {
                write!(episodes, ",{v}").unwrap();
            }
            for v in rec.state.iter() {
                write!(episodes, ",{v}").unwrap();
            }
            writeln!(episodes, ",{}", rec.reward).unwrap();
        }
    }
    let path = dir.join("episodes.csv");
    std::fs::write(&path, episodes).map_err(|e| Error::io(&path, e))?;

    let mut mcsv = String::from("seed,episode,steps_cumulative,episode_reward,max_seen_reward\n");
    for row in &metrics.per_episode {
        writeln!(
            mcsv,
            "{},{},{},{},{}",
            row.seed, row.episode, row.steps_cumulative, row.episode_reward, row.max_seen_reward
        )
        .unwrap();
    }
    let path = dir.join("metrics.csv");
    std::fs::write(&path, mcsv).map_err(|e| Error::io(&path, e))?;

    let mut summary = String::from("seed,episodes_counted,average_episode_reward\n");
    for s in &metrics.per_seed {
        writeln!(
            summary,
            "{},{},{}",
            s.seed, s.episodes_counted, s.average_episode_reward
        )
        .unwrap();
    }
    writeln!(
        summary,
        "all,{},{} ± {}",
        metrics.average_over_episodes, metrics.mean_average_reward, metrics.std_average_reward
    )
    .unwrap();
    let path = dir.join("metrics_summary.csv");
    std::fs::write(&path, summary).map_err(|e| Error::io(&path, e))?;

    let echo = toml::to_string(config)
        .map_err(|e| Error::Config(format!("config echo serialization failed: {e}")))?;
    let path = dir.join("config.echo.toml");
    std::fs::write(&path, echo).map_err(|e| Error::io(&path, e))?;

    let mut warnings = String::new();
    for log in logs {
        for w in &log.warnings {
            writeln!(warnings, "seed {} episode {}: {w}", log.seed, log.episode).unwrap();
        }
    }
    let path = dir.join("warnings.log");
    std::fs::write(&path, warnings).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Appends per-episode training traces into one `training.csv`.
pub fn write_training_traces(traces: &[(usize, TrainingTrace)], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let num_layers = traces
        .iter()
        .find_map(|(_, t)| t.rows.first().map(|r| r.mean_lengthscales.len()))
        .unwrap_or(0);
    let mut out = String::from("episode,step,neg_log_joint,beta");
    for l in 1..=num_layers {
        write!(out, ",mean_lengthscale_l{l}").unwrap();
    }
    out.push_str(",jitter_warnings\n");
    for (episode, trace) in traces {
        for r in &trace.rows {
            write!(out, "{episode},{},{},{}", r.step, r.neg_log_joint, r.beta).unwrap();
            for v in &r.mean_lengthscales {
                write!(out, ",{v}").unwrap();
            }
            writeln!(out, ",{}", r.jitter_warnings).unwrap();
        }
    }
    let path = dir.join("training.csv");
    std::fs::write(&path, out).map_err(|e| Error::io(&path, e))
}

/// Per-CEM-iteration planner diagnostics.
pub fn write_planner_debug(
    rows: &[(usize, usize, crate::planning::CemIterStats)],
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = String::from(
        "episode,step,iteration,best_reward,mean_reward,worst_reward,proposal_mean_norm\n",
    );
    for (episode, step, s) in rows {
        writeln!(
            out,
            "{episode},{step},{},{},{},{},{}",
            s.iteration, s.best_reward, s.mean_reward, s.worst_reward, s.proposal_mean_norm
        )
        .unwrap();
    }
    let path = dir.join("planner_debug.csv");
    std::fs::write(&path, out).map_err(|e| Error::io(&path, e))
}

/// Minimal episode view reconstructed from `episodes.csv` (enough for the
/// metrics subcommand).
pub fn read_episodes_csv(path: &Path) -> Result<Vec<EpisodeLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Config(format!("{}: empty episodes.csv", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    let action_dim = cols.iter().filter(|c| c.starts_with("action_")).count();
    let state_dim = cols.iter().filter(|c| c.starts_with("state_")).count();
    let expected = 4 + action_dim + state_dim + 1;
    if cols.len() != expected {
        return Err(Error::Config(format!(
            "{}: unexpected header layout ({} columns)",
            path.display(),
            cols.len()
        )));
    }

    let mut logs: Vec<EpisodeLog> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected {
            return Err(Error::Config(format!(
                "{}:{}: expected {} fields, got {}",
                path.display(),
                lineno + 2,
                expected,
                fields.len()
            )));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| {
                Error::Config(format!("{}:{}: bad float '{s}': {e}", path.display(), lineno + 2))
            })
        };
        let seed: u64 = fields[0]
            .parse()
            .map_err(|e| Error::Config(format!("{}:{}: bad seed: {e}", path.display(), lineno + 2)))?;
        let episode: usize = fields[1]
            .parse()
            .map_err(|e| Error::Config(format!("{}:{}: bad episode: {e}", path.display(), lineno + 2)))?;
        let t: usize = fields[3]
            .parse()
            .map_err(|e| Error::Config(format!("{}:{}: bad t: {e}", path.display(), lineno + 2)))?;
        let action: Array1<f64> = fields[4..4 + action_dim]
            .iter()
            .map(|s| parse_f(s))
            .collect::<Result<Vec<_>>>()?
            .into();
        let state: Array1<f64> = fields[4 + action_dim..4 + action_dim + state_dim]
            .iter()
            .map(|s| parse_f(s))
            .collect::<Result<Vec<_>>>()?
            .into();
        let reward = parse_f(fields[expected - 1])?;

        let need_new = logs
            .last()
            .map(|l| l.seed != seed || l.episode != episode)
            .unwrap_or(true);
        if need_new {
            logs.push(EpisodeLog {
                seed,
                episode,
                records: Vec::new(),
                total_reward: 0.0,
                wall_clock_s: 0.0,
                warnings: Vec::new(),
            });
        }
        let log = logs.last_mut().unwrap();
        log.records.push(super::StepRecord {
            t,
            state,
            action,
            reward,
        });
        log.total_reward += reward;
    }
    Ok(logs)
}
