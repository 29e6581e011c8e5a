//! Particle-based trajectory sampling through the model, expected-reward
//! evaluation, and cross-entropy-method action optimization.
//!
//! Each particle fixes one posterior draw of the dynamics for its whole
//! rollout and propagates all candidate action sequences jointly (one
//! Gaussian per layer across the batch), so similar sequences see
//! consistent dynamics. Particles run on disjoint counter-derived RNG
//! streams; results are identical for any worker count.

use crate::dgp::{DgpModel, SampledDynamics};
use crate::error::{Error, Result};
use crate::inference::{resample_posterior, PosteriorReservoir};
use crate::rng::stream;
use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, s};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// Variance floor preventing premature proposal collapse.
pub const V_FLOOR: f64 = 1e-6;

/// Reward of a `(next_state, action)` pair.
pub type RewardFn<'a> = &'a (dyn Fn(&ArrayView1<f64>, &ArrayView1<f64>) -> f64 + Sync);

/// Per-timestep Gaussian action proposal over a planning horizon.
#[derive(Debug, Clone)]
pub struct CemProposal {
    /// `H x A` mean.
    pub mean: Array2<f64>,
    /// `H x A` per-entry variance.
    pub variance: Array2<f64>,
    pub action_low: Array1<f64>,
    pub action_high: Array1<f64>,
}

impl CemProposal {
    /// Midpoint mean with variance `((high - low) / 4)^2`.
    pub fn initial(horizon: usize, action_low: Array1<f64>, action_high: Array1<f64>) -> Self {
        let a = action_low.len();
        let mut mean = Array2::zeros((horizon, a));
        let mut variance = Array2::zeros((horizon, a));
        for t in 0..horizon {
            for j in 0..a {
                mean[[t, j]] = 0.5 * (action_low[j] + action_high[j]);
                let quarter = 0.25 * (action_high[j] - action_low[j]);
                variance[[t, j]] = (quarter * quarter).max(V_FLOOR);
            }
        }
        CemProposal {
            mean,
            variance,
            action_low,
            action_high,
        }
    }

    pub fn horizon(&self) -> usize {
        self.mean.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.mean.ncols()
    }
}

/// Planner settings (population size, particles, CEM schedule).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub horizon: usize,
    pub num_sequences: usize,
    pub num_particles: usize,
    pub cem_iterations: usize,
    pub elite_fraction: f64,
    pub actions_per_replan: usize,
    pub include_noise: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            horizon: 30,
            num_sequences: 300,
            num_particles: 5,
            cem_iterations: 5,
            elite_fraction: 0.1,
            actions_per_replan: 1,
            include_noise: false,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.num_sequences == 0 || self.num_particles == 0 {
            return Err(Error::Config(
                "horizon, num_sequences and num_particles must be >= 1".into(),
            ));
        }
        if !(self.elite_fraction > 0.0 && self.elite_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "elite_fraction must be in (0, 1], got {}",
                self.elite_fraction
            )));
        }
        if self.actions_per_replan == 0 || self.actions_per_replan > self.horizon {
            return Err(Error::Config(format!(
                "actions_per_replan must be in [1, horizon], got {}",
                self.actions_per_replan
            )));
        }
        Ok(())
    }

    pub fn elite_count(&self) -> usize {
        ((self.elite_fraction * self.num_sequences as f64).round() as usize).max(1)
    }
}

/// Sampled trajectories for a population of action sequences.
#[derive(Debug, Clone)]
pub struct TrajectoryBatch {
    /// `P x K x (H+1) x S`; index 0 along the step axis is the shared
    /// initial state.
    pub states: Array4<f64>,
    /// `K x H x A`.
    pub actions: Array3<f64>,
}

/// Anything able to push a population of action sequences through its
/// dynamics: the learned model or an oracle simulator.
pub trait TrajectorySampler: Sync {
    fn num_particles(&self) -> usize;
    fn state_dim(&self) -> usize;

    /// Returns the `P x K x (H+1) x S` state tensor for the given
    /// `K x H x A` action tensor.
    fn sample_trajectories(
        &self,
        s0: &ArrayView1<f64>,
        actions: &Array3<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array4<f64>>;
}

/// Learned-dynamics sampler: one fixed posterior draw per particle.
pub struct DgpSampler {
    particles: Vec<SampledDynamics>,
    include_noise: bool,
    state_dim: usize,
}

impl DgpSampler {
    /// Draws one posterior sample per particle from the reservoir and
    /// prepares its factorizations.
    pub fn from_reservoir(
        model: &DgpModel,
        reservoir: &PosteriorReservoir,
        num_particles: usize,
        include_noise: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let draws: Vec<_> = (0..num_particles)
            .map(|_| resample_posterior(reservoir, rng).cloned())
            .collect::<Result<Vec<_>>>()?;
        let particles = draws
            .par_iter()
            .map(|sample| SampledDynamics::new(model, sample))
            .collect::<Result<Vec<_>>>()?;
        Ok(DgpSampler {
            particles,
            include_noise,
            state_dim: model.state_dim(),
        })
    }
}

impl TrajectorySampler for DgpSampler {
    fn num_particles(&self) -> usize {
        self.particles.len()
    }

    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn sample_trajectories(
        &self,
        s0: &ArrayView1<f64>,
        actions: &Array3<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array4<f64>> {
        let (k, h, _a) = actions.dim();
        let s_dim = self.state_dim;
        let base: u64 = rng.random();
        let per_particle: Vec<Result<Array3<f64>>> = self
            .particles
            .par_iter()
            .enumerate()
            .map(|(p, dynamics)| {
                let mut prng = stream(base, &[p as u64]);
                let mut states = Array3::<f64>::zeros((k, h + 1, s_dim));
                for ki in 0..k {
                    states.slice_mut(s![ki, 0, ..]).assign(s0);
                }
                for t in 0..h {
                    let cur = states.slice(s![.., t, ..]).to_owned();
                    let act = actions.slice(s![.., t, ..]).to_owned();
                    let next = dynamics
                        .predict_next(&cur.view(), &act.view(), self.include_noise, &mut prng)
                        .map_err(|e| {
                            Error::Numerical(format!("rollout particle {p} step {t}: {e}"))
                        })?;
                    states.slice_mut(s![.., t + 1, ..]).assign(&next);
                }
                Ok(states)
            })
            .collect();

        let mut out = Array4::<f64>::zeros((self.particles.len(), k, h + 1, s_dim));
        for (p, r) in per_particle.into_iter().enumerate() {
            out.slice_mut(s![p, .., .., ..]).assign(&r?);
        }
        Ok(out)
    }
}

/// Deterministic-dynamics sampler wrapping a step function (oracle mode).
pub struct FnSampler<F> {
    step_fn: F,
    state_dim: usize,
}

impl<F> FnSampler<F>
where
    F: Fn(&ArrayView1<f64>, &ArrayView1<f64>) -> Result<Array1<f64>> + Sync,
{
    pub fn new(state_dim: usize, step_fn: F) -> Self {
        FnSampler { step_fn, state_dim }
    }
}

impl<F> TrajectorySampler for FnSampler<F>
where
    F: Fn(&ArrayView1<f64>, &ArrayView1<f64>) -> Result<Array1<f64>> + Sync,
{
    fn num_particles(&self) -> usize {
        1
    }

    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn sample_trajectories(
        &self,
        s0: &ArrayView1<f64>,
        actions: &Array3<f64>,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Array4<f64>> {
        let (k, h, _a) = actions.dim();
        let mut out = Array4::<f64>::zeros((1, k, h + 1, self.state_dim));
        for ki in 0..k {
            out.slice_mut(s![0, ki, 0, ..]).assign(s0);
            for t in 0..h {
                let cur = out.slice(s![0, ki, t, ..]).to_owned();
                let act = actions.slice(s![ki, t, ..]);
                let next = (self.step_fn)(&cur.view(), &act)
                    .map_err(|e| Error::Numerical(format!("oracle rollout seq {ki} step {t}: {e}")))?;
                out.slice_mut(s![0, ki, t + 1, ..]).assign(&next);
            }
        }
        Ok(out)
    }
}

/// Draws `K` action sequences from the proposal, clipped to bounds.
pub fn sample_action_sequences(
    proposal: &CemProposal,
    num_sequences: usize,
    rng: &mut ChaCha8Rng,
) -> Array3<f64> {
    let (h, a) = (proposal.horizon(), proposal.action_dim());
    let mut out = Array3::zeros((num_sequences, h, a));
    for k in 0..num_sequences {
        for t in 0..h {
            for j in 0..a {
                let e: f64 = rng.sample(StandardNormal);
                let v = proposal.mean[[t, j]] + proposal.variance[[t, j]].sqrt() * e;
                out[[k, t, j]] = v.clamp(proposal.action_low[j], proposal.action_high[j]);
            }
        }
    }
    out
}

/// Spec rollout entry point: draws one posterior sample per particle from
/// the reservoir, then samples trajectories jointly across sequences.
pub fn rollout(
    model: &DgpModel,
    reservoir: &PosteriorReservoir,
    s0: &ArrayView1<f64>,
    actions: &Array3<f64>,
    config: &PlannerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrajectoryBatch> {
    config.validate()?;
    let sampler = DgpSampler::from_reservoir(
        model,
        reservoir,
        config.num_particles,
        config.include_noise,
        rng,
    )?;
    let states = sampler.sample_trajectories(s0, actions, rng)?;
    Ok(TrajectoryBatch {
        states,
        actions: actions.clone(),
    })
}

/// Particle-averaged long-term reward per sequence:
/// `sum_t (1/P) sum_p r(s[p][k][t+1], a[k][t])`.
///
/// Sequences with any non-finite reward are demoted to `-inf` with a
/// warning so they can never become elites.
pub fn expected_reward(
    batch: &TrajectoryBatch,
    reward_fn: RewardFn,
) -> (Array1<f64>, Vec<String>) {
    let (p, k, h_plus_1, _s) = batch.states.dim();
    let h = h_plus_1 - 1;
    let mut rewards = Array1::zeros(k);
    let mut warnings = Vec::new();
    for ki in 0..k {
        let mut total = 0.0;
        'steps: for t in 0..h {
            let action = batch.actions.slice(s![ki, t, ..]);
            let mut acc = 0.0;
            for pi in 0..p {
                let next = batch.states.slice(s![pi, ki, t + 1, ..]);
                let r = reward_fn(&next, &action);
                if !r.is_finite() {
                    warnings.push(format!(
                        "non-finite reward for sequence {ki} at step {t}; sequence demoted"
                    ));
                    total = f64::NEG_INFINITY;
                    break 'steps;
                }
                acc += r;
            }
            total += acc / p as f64;
        }
        rewards[ki] = total;
    }
    (rewards, warnings)
}

/// Refits the proposal to the elite set (ties broken by lower sequence
/// index). Returns the proposal unchanged with a warning when every
/// sequence was demoted.
pub fn cem_refit(
    proposal: &CemProposal,
    actions: &Array3<f64>,
    rewards: &Array1<f64>,
    elite_fraction: f64,
) -> (CemProposal, Option<String>) {
    let k = rewards.len();
    let elite_count = ((elite_fraction * k as f64).round() as usize).max(1).min(k);
    let mut order: Vec<usize> = (0..k).collect();
    // Stable sort: equal rewards keep ascending index order.
    order.sort_by(|&a, &b| rewards[b].total_cmp(&rewards[a]));
    if rewards[order[0]] == f64::NEG_INFINITY {
        return (
            proposal.clone(),
            Some("cem_refit skipped: every sequence had non-finite reward".into()),
        );
    }
    let elites = &order[..elite_count];

    let (h, a) = (proposal.horizon(), proposal.action_dim());
    let mut mean = Array2::<f64>::zeros((h, a));
    let mut variance = Array2::<f64>::zeros((h, a));
    for &e in elites {
        mean += &actions.slice(s![e, .., ..]);
    }
    mean.mapv_inplace(|v| v / elite_count as f64);
    for &e in elites {
        for t in 0..h {
            for j in 0..a {
                let d = actions[[e, t, j]] - mean[[t, j]];
                variance[[t, j]] += d * d;
            }
        }
    }
    for t in 0..h {
        for j in 0..a {
            variance[[t, j]] = (variance[[t, j]] / elite_count as f64).max(V_FLOOR);
            mean[[t, j]] = mean[[t, j]].clamp(proposal.action_low[j], proposal.action_high[j]);
        }
    }
    (
        CemProposal {
            mean,
            variance,
            action_low: proposal.action_low.clone(),
            action_high: proposal.action_high.clone(),
        },
        None,
    )
}

/// Per-iteration planner diagnostics (optional debug dump).
#[derive(Debug, Clone)]
pub struct CemIterStats {
    pub iteration: usize,
    pub best_reward: f64,
    pub mean_reward: f64,
    pub worst_reward: f64,
    pub proposal_mean_norm: f64,
}

/// Result of one planning call.
#[derive(Debug, Clone)]
pub struct PlanOutcome {
    /// Chosen `H x A` action sequence (the final proposal mean).
    pub actions: Array2<f64>,
    /// Refined proposal for warm-starting the next replan.
    pub proposal: CemProposal,
    pub iter_stats: Vec<CemIterStats>,
    pub warnings: Vec<String>,
}

/// CEM loop: sample sequences, roll them out, score, refit; returns the
/// final proposal mean as the chosen sequence.
pub fn plan<S: TrajectorySampler>(
    sampler: &S,
    s0: &ArrayView1<f64>,
    proposal: &CemProposal,
    config: &PlannerConfig,
    reward_fn: RewardFn,
    rng: &mut ChaCha8Rng,
) -> Result<PlanOutcome> {
    config.validate()?;
    let mut current = proposal.clone();
    let mut iter_stats = Vec::with_capacity(config.cem_iterations);
    let mut warnings = Vec::new();
    for iteration in 0..config.cem_iterations {
        let actions = sample_action_sequences(&current, config.num_sequences, rng);
        let states = sampler.sample_trajectories(s0, &actions, rng)?;
        let batch = TrajectoryBatch { states, actions };
        let (rewards, mut reward_warnings) = expected_reward(&batch, reward_fn);
        warnings.append(&mut reward_warnings);
        let (next, refit_warning) =
            cem_refit(&current, &batch.actions, &rewards, config.elite_fraction);
        if let Some(w) = refit_warning {
            warnings.push(w);
        }
        current = next;
        let best = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let worst = rewards.iter().copied().fold(f64::INFINITY, f64::min);
        let mean = rewards.sum() / rewards.len() as f64;
        iter_stats.push(CemIterStats {
            iteration,
            best_reward: best,
            mean_reward: mean,
            worst_reward: worst,
            proposal_mean_norm: current.mean.iter().map(|v| v * v).sum::<f64>().sqrt(),
        });
    }
    Ok(PlanOutcome {
        actions: current.mean.clone(),
        proposal: current,
        iter_stats,
        warnings,
    })
}

/// Planning against the learned model: the posterior draws are taken once
/// per call (one per particle) and held fixed across CEM iterations.
pub fn plan_with_model(
    model: &DgpModel,
    reservoir: &PosteriorReservoir,
    s0: &ArrayView1<f64>,
    proposal: &CemProposal,
    config: &PlannerConfig,
    reward_fn: RewardFn,
    rng: &mut ChaCha8Rng,
) -> Result<PlanOutcome> {
    config.validate()?;
    let sampler = DgpSampler::from_reservoir(
        model,
        reservoir,
        config.num_particles,
        config.include_noise,
        rng,
    )?;
    plan(&sampler, s0, proposal, config, reward_fn, rng)
}

/// Drops executed steps from the proposal and pads the tail with the
/// initial (midpoint mean, wide variance) rows.
pub fn shift_proposal(proposal: &CemProposal, steps_executed: usize) -> CemProposal {
    let h = proposal.horizon();
    let steps = steps_executed.min(h);
    let fresh = CemProposal::initial(
        h,
        proposal.action_low.clone(),
        proposal.action_high.clone(),
    );
    let mut mean = fresh.mean.clone();
    let mut variance = fresh.variance.clone();
    for t in 0..h - steps {
        mean.row_mut(t).assign(&proposal.mean.row(t + steps));
        variance.row_mut(t).assign(&proposal.variance.row(t + steps));
    }
    CemProposal {
        mean,
        variance,
        action_low: proposal.action_low.clone(),
        action_high: proposal.action_high.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Normalizer;
    use crate::dgp::{GpLayer, MeanKind, PosteriorSample};
    use crate::inference::{sghmc_step, PosteriorReservoir, SghmcConfig};
    use crate::kernels::{KernelFamily, KernelSpec};
    use crate::rng::stream;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn bounds1() -> (Array1<f64>, Array1<f64>) {
        (array![-1.0], array![1.0])
    }

    #[test]
    fn initial_proposal_uses_midpoint_and_quarter_range() {
        let (lo, hi) = (array![-2.0, 0.0], array![2.0, 4.0]);
        let p = CemProposal::initial(3, lo, hi);
        assert_eq!(p.mean[[0, 0]], 0.0);
        assert_eq!(p.mean[[0, 1]], 2.0);
        assert_eq!(p.variance[[2, 0]], 1.0);
        assert_eq!(p.variance[[2, 1]], 1.0);
    }

    #[test]
    fn sampling_respects_bounds_and_concentration() {
        let (lo, hi) = bounds1();
        // Mean pinned at the upper bound: no sample may exceed it.
        let mut p = CemProposal::initial(4, lo.clone(), hi.clone());
        p.mean.fill(1.0);
        let mut rng = stream(1, &[0]);
        let a = sample_action_sequences(&p, 200, &mut rng);
        assert!(a.iter().all(|&v| v <= 1.0));

        // Floor variance: everything hugs the mean.
        let mut p2 = CemProposal::initial(4, lo, hi);
        p2.mean.fill(0.25);
        p2.variance.fill(V_FLOOR);
        let a2 = sample_action_sequences(&p2, 200, &mut rng);
        let tol = 5.0 * V_FLOOR.sqrt();
        assert!(a2.iter().all(|&v| (v - 0.25).abs() <= tol));
    }

    #[test]
    fn sampling_clt_mean_bound() {
        let (lo, hi) = bounds1();
        let mut p = CemProposal::initial(2, lo, hi);
        p.mean.fill(0.3);
        p.variance.fill(0.04);
        let k = 10_000;
        let mut rng = stream(2, &[1]);
        let a = sample_action_sequences(&p, k, &mut rng);
        for t in 0..2 {
            let mean = a.slice(s![.., t, 0]).sum() / k as f64;
            let bound = 3.0 * (0.04_f64 / k as f64).sqrt();
            assert!((mean - 0.3).abs() <= bound, "mean {mean}");
        }
    }

    #[test]
    fn expected_reward_constant_and_single_particle() {
        let (k, h, p, s_dim) = (3, 4, 2, 1);
        let batch = TrajectoryBatch {
            states: Array4::zeros((p, k, h + 1, s_dim)),
            actions: Array3::zeros((k, h, 1)),
        };
        let (r, w) = expected_reward(&batch, &|_s, _a| 1.0);
        assert!(w.is_empty());
        for v in r.iter() {
            assert_abs_diff_eq!(*v, h as f64, epsilon = 1e-12);
        }
    }

    #[test]
    fn expected_reward_matches_hand_computed_average() {
        // P=2, K=1, H=2, reward = next_state[0].
        let mut states = Array4::zeros((2, 1, 3, 1));
        states[[0, 0, 1, 0]] = 1.0;
        states[[0, 0, 2, 0]] = 2.0;
        states[[1, 0, 1, 0]] = 3.0;
        states[[1, 0, 2, 0]] = 5.0;
        let batch = TrajectoryBatch {
            states,
            actions: Array3::zeros((1, 2, 1)),
        };
        let (r, _) = expected_reward(&batch, &|next, _a| next[0]);
        // ((1+3)/2) + ((2+5)/2) = 2 + 3.5.
        assert_abs_diff_eq!(r[0], 5.5, epsilon = 1e-12);
    }

    #[test]
    fn non_finite_rewards_are_demoted() {
        let mut states = Array4::zeros((1, 2, 2, 1));
        states[[0, 1, 1, 0]] = f64::INFINITY;
        let batch = TrajectoryBatch {
            states,
            actions: Array3::zeros((2, 1, 1)),
        };
        let (r, w) = expected_reward(&batch, &|next, _a| next[0]);
        assert_eq!(r[0], 0.0);
        assert_eq!(r[1], f64::NEG_INFINITY);
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn refit_single_elite_copies_best_sequence() {
        let (lo, hi) = bounds1();
        let p = CemProposal::initial(2, lo, hi);
        let mut actions = Array3::zeros((2, 2, 1));
        actions[[0, 0, 0]] = 0.1;
        actions[[0, 1, 0]] = -0.2;
        actions[[1, 0, 0]] = 0.5;
        actions[[1, 1, 0]] = 0.7;
        let rewards = array![5.0, 7.0];
        let (refit, w) = cem_refit(&p, &actions, &rewards, 0.5);
        assert!(w.is_none());
        assert_eq!(refit.mean[[0, 0]], 0.5);
        assert_eq!(refit.mean[[1, 0]], 0.7);
        assert_eq!(refit.variance[[0, 0]], V_FLOOR);
    }

    #[test]
    fn refit_breaks_ties_by_lower_index() {
        let (lo, hi) = bounds1();
        let p = CemProposal::initial(1, lo, hi);
        let mut actions = Array3::zeros((4, 1, 1));
        for k in 0..4 {
            actions[[k, 0, 0]] = k as f64 * 0.1;
        }
        let rewards = array![1.0, 1.0, 1.0, 1.0];
        let (refit, _) = cem_refit(&p, &actions, &rewards, 0.5);
        // Elites are sequences 0 and 1.
        assert_abs_diff_eq!(refit.mean[[0, 0]], 0.05, epsilon = 1e-12);
    }

    #[test]
    fn refit_with_all_demoted_keeps_proposal() {
        let (lo, hi) = bounds1();
        let p = CemProposal::initial(1, lo, hi);
        let actions = Array3::zeros((2, 1, 1));
        let rewards = array![f64::NEG_INFINITY, f64::NEG_INFINITY];
        let (refit, w) = cem_refit(&p, &actions, &rewards, 0.5);
        assert!(w.is_some());
        assert_eq!(refit.mean, p.mean);
    }

    #[test]
    fn refit_is_invariant_to_reward_shifts() {
        let (lo, hi) = bounds1();
        let p = CemProposal::initial(2, lo, hi);
        let mut rng = stream(3, &[2]);
        let actions = sample_action_sequences(&p, 50, &mut rng);
        let rewards: Array1<f64> =
            (0..50).map(|i| ((i * 7919) % 50) as f64 * 0.1).collect();
        let shifted = rewards.mapv(|r| r + 123.456);
        let (a, _) = cem_refit(&p, &actions, &rewards, 0.1);
        let (b, _) = cem_refit(&p, &actions, &shifted, 0.1);
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.variance, b.variance);
    }

    /// CEM on an exact quadratic objective: the proposal mean converges to
    /// the known optimum.
    #[test]
    fn cem_quadratic_toy_converges() {
        let (lo, hi) = bounds1();
        let target = 0.37;
        let mut failures = 0;
        for seed in 0..5u64 {
            let mut proposal = CemProposal::initial(5, lo.clone(), hi.clone());
            let mut rng = stream(seed, &[3]);
            for _ in 0..10 {
                let actions = sample_action_sequences(&proposal, 300, &mut rng);
                let rewards: Array1<f64> = (0..300)
                    .map(|k| {
                        -(0..5)
                            .map(|t| (actions[[k, t, 0]] - target).powi(2))
                            .sum::<f64>()
                    })
                    .collect();
                let (next, _) = cem_refit(&proposal, &actions, &rewards, 0.1);
                proposal = next;
            }
            let err = proposal
                .mean
                .iter()
                .map(|m| (m - target).abs())
                .fold(0.0_f64, f64::max);
            if err > 1e-2 {
                failures += 1;
            }
        }
        assert_eq!(failures, 0);
    }

    /// Best sampled reward is non-decreasing across iterations in at least
    /// 90% of cases over seeded quadratic runs.
    #[test]
    fn cem_best_reward_mostly_monotone() {
        let (lo, hi) = bounds1();
        let target = 0.37;
        let mut good = 0;
        let mut total = 0;
        for seed in 0..100u64 {
            let mut proposal = CemProposal::initial(5, lo.clone(), hi.clone());
            let mut rng = stream(seed, &[4]);
            let mut last_best = f64::NEG_INFINITY;
            for _ in 0..10 {
                let actions = sample_action_sequences(&proposal, 300, &mut rng);
                let rewards: Array1<f64> = (0..300)
                    .map(|k| {
                        -(0..5)
                            .map(|t| (actions[[k, t, 0]] - target).powi(2))
                            .sum::<f64>()
                    })
                    .collect();
                let best = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if last_best > f64::NEG_INFINITY {
                    total += 1;
                    if best >= last_best - 1e-12 {
                        good += 1;
                    }
                }
                last_best = best;
                let (next, _) = cem_refit(&proposal, &actions, &rewards, 0.1);
                proposal = next;
            }
        }
        let frac = good as f64 / total as f64;
        assert!(frac >= 0.9, "monotone fraction {frac}");
    }

    #[test]
    fn shift_proposal_moves_rows_and_resets_tail() {
        let (lo, hi) = bounds1();
        let mut p = CemProposal::initial(4, lo, hi);
        for t in 0..4 {
            p.mean[[t, 0]] = t as f64 * 0.1;
            p.variance[[t, 0]] = 0.01 + t as f64 * 0.001;
        }
        let s1 = shift_proposal(&p, 1);
        for t in 0..3 {
            assert_eq!(s1.mean[[t, 0]], p.mean[[t + 1, 0]]);
            assert_eq!(s1.variance[[t, 0]], p.variance[[t + 1, 0]]);
        }
        assert_eq!(s1.mean[[3, 0]], 0.0);
        assert_eq!(s1.variance[[3, 0]], 0.25);

        // Full shift resets everything.
        let sh = shift_proposal(&p, 4);
        let fresh = CemProposal::initial(4, array![-1.0], array![1.0]);
        assert_eq!(sh.mean, fresh.mean);
        assert_eq!(sh.variance, fresh.variance);

        // Composition: H single shifts == one shift by H.
        let mut acc = p.clone();
        for _ in 0..4 {
            acc = shift_proposal(&acc, 1);
        }
        assert_eq!(acc.mean, sh.mean);
        assert_eq!(acc.variance, sh.variance);
    }

    fn trained_toy_reservoir() -> (DgpModel, PosteriorReservoir) {
        let mut dataset = crate::data::Dataset::new(1, 1);
        let mut rng = stream(8, &[5]);
        let mut s = 0.0_f64;
        for _ in 0..60 {
            let a = rng.random::<f64>() * 2.0 - 1.0;
            let next = 0.85 * s + 0.3 * a;
            dataset
                .push(crate::data::TransitionTuple {
                    state: array![s],
                    action: array![a],
                    next_state: array![next],
                })
                .unwrap();
            s = next;
        }
        let model =
            crate::inference::init_model(1, 1, &[KernelFamily::Sexp], 10, 50.0, &dataset, &mut rng)
                .unwrap();
        let cfg = SghmcConfig {
            burn_in_steps: 20,
            thinning: 5,
            reservoir_size: 5,
            minibatch_size: 30,
            ..SghmcConfig::default()
        };
        let mut reservoir = PosteriorReservoir::new(&model, &cfg).unwrap();
        for _ in 0..60 {
            sghmc_step(&mut reservoir, &model, &dataset, &cfg, &mut rng).unwrap();
        }
        (model, reservoir)
    }

    /// Duplicate sequences and shared prefixes map to identical states
    /// within every particle.
    #[test]
    fn rollout_joint_sampling_consistency() {
        let (model, reservoir) = trained_toy_reservoir();
        let config = PlannerConfig {
            horizon: 5,
            num_sequences: 6,
            num_particles: 3,
            ..PlannerConfig::default()
        };
        let mut rng = stream(9, &[6]);
        let mut actions = sample_action_sequences(
            &CemProposal::initial(5, array![-1.0], array![1.0]),
            6,
            &mut rng,
        );
        // Sequence 2 duplicates sequence 0; sequence 3 shares its first 3
        // actions with sequence 1.
        let dup = actions.slice(s![0, .., ..]).to_owned();
        actions.slice_mut(s![2, .., ..]).assign(&dup);
        for t in 0..3 {
            let v = actions[[1, t, 0]];
            actions[[3, t, 0]] = v;
        }

        let s0 = array![0.2];
        let batch = rollout(&model, &reservoir, &s0.view(), &actions, &config, &mut rng).unwrap();
        for p in 0..3 {
            for t in 0..=5 {
                assert_eq!(
                    batch.states[[p, 0, t, 0]].to_bits(),
                    batch.states[[p, 2, t, 0]].to_bits(),
                    "duplicate sequences diverged at particle {p} step {t}"
                );
            }
            for t in 0..=3 {
                assert_eq!(
                    batch.states[[p, 1, t, 0]].to_bits(),
                    batch.states[[p, 3, t, 0]].to_bits(),
                    "shared prefix diverged at particle {p} step {t}"
                );
            }
            assert_ne!(
                batch.states[[p, 1, 5, 0]].to_bits(),
                batch.states[[p, 3, 5, 0]].to_bits()
            );
        }
    }

    /// One-step Monte-Carlo moments against the analytic sparse-GP
    /// conditional at the rollout's initial state.
    #[test]
    fn rollout_one_step_moments_match_analytic() {
        // Single inducing point, S=1, A=1; analytic mean/cov at (s0, a0).
        let sigma2 = 0.6;
        let z = array![[0.5, 0.0]];
        let u0 = 0.4;
        let layer = GpLayer::new(
            KernelSpec::new(KernelFamily::Sexp, &[1.0, 1.0], sigma2).unwrap(),
            z,
            1,
            MeanKind::Zero,
        )
        .unwrap();
        let jitter = layer.kernel.base_jitter();
        let model =
            DgpModel::new(vec![layer], 1e9, 1, 1, Normalizer::identity(1, 1)).unwrap();
        let sample = PosteriorSample {
            inducing_outputs: vec![array![[u0]]],
        };
        let dynamics = SampledDynamics::new(&model, &sample).unwrap();

        let (s0, a0) = (0.2_f64, 0.3_f64);
        // k(x, z) with x = (0.2, 0.3), z = (0.5, 0.0).
        let r2 = (s0 - 0.5_f64).powi(2) + (a0 - 0.0_f64).powi(2);
        let kxz = sigma2 * (-0.5 * r2).exp();
        let mean_delta = kxz / (sigma2 + jitter) * u0;
        let var_delta = sigma2 - kxz * kxz / (sigma2 + jitter);

        let n = 10_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        let states = array![[s0]];
        let actions = array![[a0]];
        let mut rng = stream(10, &[7]);
        for _ in 0..n {
            let next = dynamics
                .predict_next(&states.view(), &actions.view(), false, &mut rng)
                .unwrap()[[0, 0]];
            let delta = next - s0;
            sum += delta;
            sum2 += delta * delta;
        }
        let mc_mean = sum / n as f64;
        let mc_var = sum2 / n as f64 - mc_mean * mc_mean;
        let se_mean = (var_delta / n as f64).sqrt();
        let se_var = var_delta * (2.0 / n as f64).sqrt();
        assert!(
            (mc_mean - mean_delta).abs() <= 3.0 * se_mean,
            "mean {mc_mean} vs {mean_delta}"
        );
        assert!(
            (mc_var - var_delta).abs() <= 3.0 * se_var,
            "var {mc_var} vs {var_delta}"
        );
    }

    /// Oracle-dynamics planning on a double integrator moves the state
    /// toward the goal better than doing nothing.
    #[test]
    fn plan_with_oracle_dynamics_improves_over_idle() {
        let dt = 0.1;
        let goal = 1.0;
        // Semi-implicit Euler so the first action already moves position.
        let step = move |s: &ArrayView1<f64>, a: &ArrayView1<f64>| -> Result<Array1<f64>> {
            let vel = s[1] + dt * a[0].clamp(-1.0, 1.0);
            Ok(array![s[0] + dt * vel, vel])
        };
        let sampler = FnSampler::new(2, step);
        let reward = move |next: &ArrayView1<f64>, _a: &ArrayView1<f64>| -> f64 {
            -(next[0] - goal).powi(2)
        };
        let config = PlannerConfig {
            horizon: 10,
            num_sequences: 100,
            num_particles: 1,
            cem_iterations: 4,
            ..PlannerConfig::default()
        };
        let proposal = CemProposal::initial(10, array![-1.0], array![1.0]);
        let s0 = array![0.0, 0.0];
        let mut rng = stream(11, &[8]);
        let outcome = plan(&sampler, &s0.view(), &proposal, &config, &reward, &mut rng).unwrap();

        let planned_next = step(&s0.view(), &outcome.actions.row(0)).unwrap();
        let idle_next = step(&s0.view(), &array![0.0].view()).unwrap();
        let r_planned = reward(&planned_next.view(), &outcome.actions.row(0));
        let r_idle = reward(&idle_next.view(), &array![0.0].view());
        assert!(
            r_planned > r_idle,
            "planned {r_planned} not better than idle {r_idle}"
        );
    }

    #[test]
    fn plan_zero_iterations_returns_initial_mean() {
        let sampler = FnSampler::new(1, |s: &ArrayView1<f64>, _a: &ArrayView1<f64>| {
            Ok(s.to_owned())
        });
        let proposal = CemProposal::initial(3, array![-1.0], array![1.0]);
        let config = PlannerConfig {
            horizon: 3,
            num_sequences: 10,
            num_particles: 1,
            cem_iterations: 0,
            ..PlannerConfig::default()
        };
        let s0 = array![0.0];
        let mut rng = stream(12, &[9]);
        let outcome =
            plan(&sampler, &s0.view(), &proposal, &config, &|_s, _a| 0.0, &mut rng).unwrap();
        assert_eq!(outcome.actions, proposal.mean);
    }

    /// Same seed, different rayon pool sizes: identical plans.
    #[test]
    fn plan_is_worker_count_independent() {
        let (model, reservoir) = trained_toy_reservoir();
        let config = PlannerConfig {
            horizon: 4,
            num_sequences: 12,
            num_particles: 4,
            cem_iterations: 2,
            ..PlannerConfig::default()
        };
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                let proposal = CemProposal::initial(4, array![-1.0], array![1.0]);
                let s0 = array![0.1];
                let mut rng = stream(13, &[10]);
                plan_with_model(
                    &model,
                    &reservoir,
                    &s0.view(),
                    &proposal,
                    &config,
                    &|next, _a| -next[0].powi(2),
                    &mut rng,
                )
                .unwrap()
                .actions
            })
        };
        let a1 = run(1);
        let a4 = run(4);
        assert_eq!(a1, a4);
    }
}
