//! Experiment CLI: `dgp-mpc run` executes the episode loop and writes
//! CSVs; `dgp-mpc metrics` aggregates episode files across run
//! directories. Exit codes: 0 success, 1 configuration error, 2 numerical
//! failure.

use clap::{Parser, Subcommand};
use dgp_mpc::harness::{
    compute_metrics, load_config, read_episodes_csv, ConfigPatch, DEFAULT_METRIC_EPISODES,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dgp-mpc", version, about = "Model-based RL with a sparse deep GP dynamics model and CEM planning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the episode loop and write CSV outputs.
    Run {
        /// Environment: cartpole-modified | cartpole-center | reacher.
        #[arg(long)]
        env: Option<String>,
        /// Number of GP layers.
        #[arg(long)]
        layers: Option<usize>,
        /// Kernel family for every layer: sexp | matern52 | matern32 | matern12.
        #[arg(long)]
        kernel: Option<String>,
        /// Episodes to run (episode 0 takes random actions).
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Inducing points per layer.
        #[arg(long)]
        inducing: Option<usize>,
        /// Trajectory-sampling particles.
        #[arg(long)]
        particles: Option<usize>,
        /// CEM population size.
        #[arg(long)]
        popsize: Option<usize>,
        /// Planning horizon.
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        cem_iters: Option<usize>,
        #[arg(long)]
        elite_frac: Option<f64>,
        #[arg(long)]
        actions_per_replan: Option<usize>,
        /// Plan against the true simulator instead of the learned model.
        #[arg(long)]
        oracle_dynamics: bool,
        /// Output directory for CSVs.
        #[arg(long)]
        out: PathBuf,
        /// TOML config file (CLI flags override file values).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Episode steps per episode (defaults to the environment's).
        #[arg(long)]
        task_horizon: Option<usize>,
        /// Collect the per-iteration planner debug CSV.
        #[arg(long)]
        planner_debug: bool,
    },
    /// Aggregate metrics across one or more run directories.
    Metrics {
        /// Run directories containing episodes.csv.
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        /// Episodes entering the per-seed averages.
        #[arg(long, default_value_t = DEFAULT_METRIC_EPISODES)]
        average_over: usize,
        /// Where to write the aggregated metrics CSVs (defaults to stdout
        /// summary only).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> dgp_mpc::Result<()> {
    match cli.command {
        Command::Run {
            env,
            layers,
            kernel,
            episodes,
            seed,
            inducing,
            particles,
            popsize,
            horizon,
            cem_iters,
            elite_frac,
            actions_per_replan,
            oracle_dynamics,
            out,
            config,
            task_horizon,
            planner_debug,
        } => {
            let patch = ConfigPatch {
                env,
                layers,
                kernel,
                episodes,
                seed,
                inducing,
                particles,
                popsize,
                horizon,
                cem_iters,
                elite_frac,
                actions_per_replan,
                oracle_dynamics: oracle_dynamics.then_some(true),
                task_horizon,
                ..ConfigPatch::default()
            };
            let resolved = load_config(config.as_deref(), &patch)?;
            let mut run = dgp_mpc::harness::Experiment::new(resolved.clone())?;
            run.collect_planner_debug = planner_debug;
            let mut logs = Vec::new();
            for e in 0..resolved.episodes {
                let log = run.run_episode()?;
                println!(
                    "episode {e}: reward {:.3} ({} steps, {:.1}s)",
                    log.total_reward,
                    log.records.len(),
                    log.wall_clock_s
                );
                let failed = run.failure().is_some();
                logs.push(log);
                if failed {
                    break;
                }
            }
            let metrics = compute_metrics(&logs, DEFAULT_METRIC_EPISODES);
            dgp_mpc::harness::write_outputs(&logs, &metrics, &resolved, &out)?;
            if !run.training_traces.is_empty() {
                dgp_mpc::harness::write_training_traces(&run.training_traces, &out)?;
            }
            if !run.planner_debug.is_empty() {
                dgp_mpc::harness::write_planner_debug(&run.planner_debug, &out)?;
            }
            println!(
                "average episode reward: {:.3} ± {:.3} (over first {} episodes)",
                metrics.mean_average_reward,
                metrics.std_average_reward,
                metrics.average_over_episodes
            );
            if let Some(f) = run.failure() {
                return Err(dgp_mpc::Error::Numerical(f.to_string()));
            }
            Ok(())
        }
        Command::Metrics {
            inputs,
            average_over,
            out,
        } => {
            let mut logs = Vec::new();
            for dir in &inputs {
                let path = dir.join("episodes.csv");
                logs.extend(read_episodes_csv(&path)?);
            }
            let metrics = compute_metrics(&logs, average_over);
            for s in &metrics.per_seed {
                println!(
                    "seed {}: average episode reward {:.3} over {} episodes",
                    s.seed, s.average_episode_reward, s.episodes_counted
                );
            }
            println!(
                "across seeds: {:.3} ± {:.3}",
                metrics.mean_average_reward, metrics.std_average_reward
            );
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| dgp_mpc::Error::io(&dir, e))?;
                let mut mcsv =
                    String::from("seed,episode,steps_cumulative,episode_reward,max_seen_reward\n");
                for row in &metrics.per_episode {
                    use std::fmt::Write as _;
                    writeln!(
                        mcsv,
                        "{},{},{},{},{}",
                        row.seed,
                        row.episode,
                        row.steps_cumulative,
                        row.episode_reward,
                        row.max_seen_reward
                    )
                    .unwrap();
                }
                let path = dir.join("metrics.csv");
                std::fs::write(&path, mcsv).map_err(|e| dgp_mpc::Error::io(&path, e))?;
            }
            Ok(())
        }
    }
}

