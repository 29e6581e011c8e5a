//! The episode loop: seed with one random-action episode, then alternate
//! model training and MPC control, logging every step.

pub mod config;
pub mod metrics;
pub mod output;

pub use config::{load_config, ConfigPatch, RunConfig};
pub use metrics::{compute_metrics, EpisodeMetric, MetricsReport, SeedSummary};
pub use output::{read_episodes_csv, write_outputs, write_planner_debug, write_training_traces};

use crate::data::{Dataset, TransitionTuple};
use crate::dgp::DgpModel;
use crate::envs::{env_from_name, Environment};
use crate::error::{Error, Result};
use crate::inference::{init_model, train_model, PosteriorReservoir, TrainingTrace};
use crate::planning::{
    plan, plan_with_model, shift_proposal, CemIterStats, CemProposal, FnSampler, PlanOutcome,
};
use crate::rng::{scope, stream};
use ndarray::Array1;
use std::time::Instant;

/// One logged control step: the state the action was taken in, the action,
/// and the reward `r(s_{t+1}, a_t)`.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: usize,
    pub state: Array1<f64>,
    pub action: Array1<f64>,
    pub reward: f64,
}

/// Per-episode record with seed/config provenance.
#[derive(Debug, Clone)]
pub struct EpisodeLog {
    pub seed: u64,
    pub episode: usize,
    pub records: Vec<StepRecord>,
    pub total_reward: f64,
    pub wall_clock_s: f64,
    pub warnings: Vec<String>,
}

/// Stateful experiment driver; episodes run one at a time so callers can
/// stop early (e.g. once a learning-trend criterion is met).
pub struct Experiment {
    config: RunConfig,
    env: Box<dyn Environment>,
    dataset: Dataset,
    model: Option<DgpModel>,
    reservoir: Option<PosteriorReservoir>,
    next_episode: usize,
    failure: Option<String>,
    pub training_traces: Vec<(usize, TrainingTrace)>,
    /// `(episode, step, stats)` rows, collected when enabled.
    pub planner_debug: Vec<(usize, usize, CemIterStats)>,
    pub collect_planner_debug: bool,
}

impl Experiment {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let env = env_from_name(&config.env)?;
        let dataset = Dataset::new(env.state_dim(), env.action_dim());
        Ok(Experiment {
            config,
            env,
            dataset,
            model: None,
            reservoir: None,
            next_episode: 0,
            failure: None,
            training_traces: Vec::new(),
            planner_debug: Vec::new(),
            collect_planner_debug: false,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn model(&self) -> Option<&DgpModel> {
        self.model.as_ref()
    }

    pub fn reservoir(&self) -> Option<&PosteriorReservoir> {
        self.reservoir.as_ref()
    }

    pub fn episodes_run(&self) -> usize {
        self.next_episode
    }

    pub fn failure(&self) -> Option<&str> {
        self.failure.as_deref()
    }

    /// Runs the next episode. Numerical failures mid-episode produce a
    /// partial log (flagged in `failure()`); later calls refuse to run.
    pub fn run_episode(&mut self) -> Result<EpisodeLog> {
        if let Some(f) = &self.failure {
            return Err(Error::InvalidState(format!(
                "experiment already failed: {f}"
            )));
        }
        let episode = self.next_episode;
        self.next_episode += 1;
        let started = Instant::now();

        let mut log = EpisodeLog {
            seed: self.config.seed,
            episode,
            records: Vec::new(),
            total_reward: 0.0,
            wall_clock_s: 0.0,
            warnings: Vec::new(),
        };

        let outcome = if self.config.oracle_dynamics {
            self.run_controlled_episode(episode, &mut log, true)
        } else if episode == 0 {
            self.run_random_episode(episode, &mut log)
        } else {
            match self.train_for_episode(episode, &mut log) {
                Ok(()) => self.run_controlled_episode(episode, &mut log, false),
                Err(e) => Err(e),
            }
        };
        if let Err(e) = outcome {
            let msg = format!("episode {episode} aborted: {e}");
            log.warnings.push(msg.clone());
            self.failure = Some(msg);
        }
        log.wall_clock_s = started.elapsed().as_secs_f64();
        Ok(log)
    }

    /// Uniform-random actions within bounds to seed the dataset.
    fn run_random_episode(&mut self, episode: usize, log: &mut EpisodeLog) -> Result<()> {
        let mut env_rng = stream(self.config.seed, &[scope::ENV, episode as u64]);
        let mut state = self.env.reset(&mut env_rng);
        let (low, high) = (self.env.action_low(), self.env.action_high());
        for t in 0..self.config.task_horizon {
            let action: Array1<f64> = (0..low.len())
                .map(|j| {
                    use rand::Rng;
                    low[j] + (high[j] - low[j]) * env_rng.random::<f64>()
                })
                .collect();
            self.execute_action(&mut state, &action, t, log)?;
        }
        Ok(())
    }

    /// Refreshes the model and posterior window on all data so far.
    fn train_for_episode(&mut self, episode: usize, log: &mut EpisodeLog) -> Result<()> {
        let mut train_rng = stream(self.config.seed, &[scope::TRAIN, episode as u64]);
        if self.model.is_none() {
            let mut init_rng = stream(self.config.seed, &[scope::INIT]);
            let model = init_model(
                self.env.state_dim(),
                self.env.action_dim(),
                &self.config.kernels,
                self.config.inducing,
                self.config.initial_beta,
                &self.dataset,
                &mut init_rng,
            )?;
            let reservoir = PosteriorReservoir::new(&model, &self.config.sghmc)?;
            self.model = Some(model);
            self.reservoir = Some(reservoir);
        }
        let model = self.model.as_mut().expect("model initialized");
        let reservoir = self.reservoir.as_mut().expect("reservoir initialized");
        reservoir.begin_fresh_window();
        let trace = train_model(
            model,
            reservoir,
            &self.dataset,
            &self.config.sghmc,
            &self.config.hyper,
            &mut train_rng,
        )?;
        log.warnings.append(&mut reservoir.warnings);
        if reservoir.is_empty() {
            return Err(Error::InvalidState(
                "training produced no posterior samples (budget below burn-in + thinning?)".into(),
            ));
        }
        self.training_traces.push((episode, trace));
        Ok(())
    }

    /// MPC loop: replan every `actions_per_replan` steps, executing the
    /// head of the planned sequence.
    fn run_controlled_episode(
        &mut self,
        episode: usize,
        log: &mut EpisodeLog,
        oracle: bool,
    ) -> Result<()> {
        let mut env_rng = stream(self.config.seed, &[scope::ENV, episode as u64]);
        let mut state = self.env.reset(&mut env_rng);
        let mut proposal = CemProposal::initial(
            self.config.planner.horizon,
            self.env.action_low(),
            self.env.action_high(),
        );
        let apr = self.config.planner.actions_per_replan;
        let mut t = 0;
        while t < self.config.task_horizon {
            let mut plan_rng =
                stream(self.config.seed, &[scope::PLAN, episode as u64, t as u64]);
            let env = &self.env;
            let reward_fn =
                |next: &ndarray::ArrayView1<f64>, a: &ndarray::ArrayView1<f64>| env.reward(next, a);
            let outcome: PlanOutcome = if oracle {
                let sampler = FnSampler::new(env.state_dim(), |s: &ndarray::ArrayView1<f64>, a: &ndarray::ArrayView1<f64>| {
                    env.step(s, a)
                });
                plan(
                    &sampler,
                    &state.view(),
                    &proposal,
                    &self.config.planner,
                    &reward_fn,
                    &mut plan_rng,
                )?
            } else {
                plan_with_model(
                    self.model.as_ref().expect("trained model"),
                    self.reservoir.as_ref().expect("posterior window"),
                    &state.view(),
                    &proposal,
                    &self.config.planner,
                    &reward_fn,
                    &mut plan_rng,
                )?
            };
            log.warnings.extend(outcome.warnings.iter().cloned());
            if self.collect_planner_debug {
                for s in &outcome.iter_stats {
                    self.planner_debug.push((episode, t, s.clone()));
                }
            }
            let executed = apr.min(self.config.task_horizon - t);
            for i in 0..executed {
                let action = outcome.actions.row(i).to_owned();
                self.execute_action(&mut state, &action, t + i, log)?;
            }
            proposal = shift_proposal(&outcome.proposal, executed);
            t += executed;
        }
        Ok(())
    }

    fn execute_action(
        &mut self,
        state: &mut Array1<f64>,
        action: &Array1<f64>,
        t: usize,
        log: &mut EpisodeLog,
    ) -> Result<()> {
        let next = self.env.step(&state.view(), &action.view())?;
        let reward = self.env.reward(&next.view(), &action.view());
        log.records.push(StepRecord {
            t,
            state: state.clone(),
            action: action.clone(),
            reward,
        });
        log.total_reward += reward;
        self.dataset.push(TransitionTuple {
            state: state.clone(),
            action: action.clone(),
            next_state: next.clone(),
        })?;
        *state = next;
        Ok(())
    }
}

/// Complete run output.
pub struct ExperimentRun {
    pub config: RunConfig,
    pub logs: Vec<EpisodeLog>,
    pub metrics: MetricsReport,
    pub training_traces: Vec<(usize, TrainingTrace)>,
    pub planner_debug: Vec<(usize, usize, CemIterStats)>,
    /// Set when an episode aborted on a numerical failure (the logs up to
    /// and including the partial episode are kept).
    pub failure: Option<String>,
}

/// Episodes entering the across-seed averages (parameter-table value).
pub const DEFAULT_METRIC_EPISODES: usize = 15;

/// Runs every configured episode, stopping early only on a numerical
/// failure (recorded in `failure`, partial logs retained).
pub fn run_experiment(config: &RunConfig) -> Result<ExperimentRun> {
    let mut experiment = Experiment::new(config.clone())?;
    let mut logs = Vec::with_capacity(config.episodes);
    for _ in 0..config.episodes {
        let log = experiment.run_episode()?;
        let failed = experiment.failure().is_some();
        logs.push(log);
        if failed {
            break;
        }
    }
    let metrics = compute_metrics(&logs, DEFAULT_METRIC_EPISODES);
    Ok(ExperimentRun {
        config: config.clone(),
        logs,
        metrics,
        training_traces: std::mem::take(&mut experiment.training_traces),
        planner_debug: std::mem::take(&mut experiment.planner_debug),
        failure: experiment.failure.clone(),
    })
}

/// [`run_experiment`] plus CSV persistence into `dir`.
pub fn run_and_write(config: &RunConfig, dir: &std::path::Path) -> Result<ExperimentRun> {
    let run = run_experiment(config)?;
    write_outputs(&run.logs, &run.metrics, &run.config, dir)?;
    if !run.training_traces.is_empty() {
        write_training_traces(&run.training_traces, dir)?;
    }
    if !run.planner_debug.is_empty() {
        write_planner_debug(&run.planner_debug, dir)?;
    }
    Ok(run)
}
