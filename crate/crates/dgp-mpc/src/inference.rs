//! SG-HMC posterior sampling over inducing outputs with moving-window
//! empirical-Bayes updates of the hyperparameters.
//!
//! The sampler runs on the flattened inducing outputs with minibatch
//! gradients of the negative pathwise log-joint. Post-burn-in, thinned
//! chain positions fill a fixed-capacity ring buffer (the moving window);
//! hyperparameter steps ascend the window-averaged log-joint in log-space
//! with Adam preconditioning.

use crate::data::{Dataset, Normalizer, TransitionTuple};
use crate::dgp::{DgpModel, GpLayer, MeanKind, PosteriorSample};
use crate::error::{Error, Result};
use crate::joint::{backward, log_joint_scaled, GradRequest};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::rng::stream;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::collections::VecDeque;
use std::path::Path;

/// SG-HMC sampler settings.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SghmcConfig {
    /// Leapfrog step size (standardized coordinates).
    pub step_size: f64,
    /// Friction coefficient.
    pub friction: f64,
    /// Estimate of the minibatch gradient-noise contribution.
    pub grad_noise_est: f64,
    pub mass: f64,
    pub burn_in_steps: usize,
    pub thinning: usize,
    pub reservoir_size: usize,
    pub minibatch_size: usize,
}

impl Default for SghmcConfig {
    fn default() -> Self {
        let step_size = 5e-4;
        SghmcConfig {
            step_size,
            friction: 0.05 / step_size,
            grad_noise_est: 0.0,
            mass: 1.0,
            burn_in_steps: 500,
            thinning: 20,
            reservoir_size: 20,
            minibatch_size: 100,
        }
    }
}

impl SghmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step_size must be positive, got {}", self.step_size)));
        }
        if !(self.mass > 0.0) {
            return Err(Error::Config(format!("mass must be positive, got {}", self.mass)));
        }
        if self.friction < self.grad_noise_est {
            return Err(Error::Config(format!(
                "injected noise variance 2*eps*(C - B) must be non-negative: C={} < B={}",
                self.friction, self.grad_noise_est
            )));
        }
        if self.reservoir_size == 0 {
            return Err(Error::Config("reservoir_size must be >= 1".into()));
        }
        if self.thinning == 0 {
            return Err(Error::Config("thinning must be >= 1".into()));
        }
        if self.minibatch_size == 0 {
            return Err(Error::Config("minibatch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Hyperparameter-optimization settings.
///
/// `steps_per_episode` counts hyper steps per training call; the sampler
/// takes `hyper_interval` SG-HMC steps between consecutive hyper steps, so
/// one training call runs `steps_per_episode * hyper_interval` sampler
/// steps (defaults: 200 x 10 = 2000).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperOptConfig {
    pub learning_rate: f64,
    pub steps_per_episode: usize,
    pub optimize_inducing: bool,
    pub hyper_interval: usize,
}

impl Default for HyperOptConfig {
    fn default() -> Self {
        HyperOptConfig {
            learning_rate: 0.05,
            steps_per_episode: 200,
            optimize_inducing: false,
            hyper_interval: 10,
        }
    }
}

impl HyperOptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.hyper_interval == 0 {
            return Err(Error::Config("hyper_interval must be >= 1".into()));
        }
        Ok(())
    }

    pub fn sampler_steps(&self) -> usize {
        self.steps_per_episode * self.hyper_interval
    }
}

/// Divergence guard threshold on chain coordinates.
const DIVERGENCE_LIMIT: f64 = 1e6;

/// One SG-HMC position/momentum update on flat coordinates.
///
/// `r <- r - eps * grad - eps * C * mass^{-1} * r + N(0, 2 eps (C - B))`,
/// `u <- u + eps * mass^{-1} * r`, with `grad` the gradient of the negative
/// log-target. `step_scale` multiplies the configured step size (divergence
/// guard).
pub fn sghmc_update(
    position: &mut Array1<f64>,
    momentum: &mut Array1<f64>,
    grad_neg: &ArrayView1<f64>,
    config: &SghmcConfig,
    step_scale: f64,
    rng: &mut ChaCha8Rng,
) {
    let eps = config.step_size * step_scale;
    let noise_sd = (2.0 * eps * (config.friction - config.grad_noise_est)).max(0.0).sqrt();
    let damp = eps * config.friction / config.mass;
    for i in 0..position.len() {
        let n: f64 = rng.sample(StandardNormal);
        momentum[i] += -eps * grad_neg[i] - damp * momentum[i] + noise_sd * n;
        position[i] += eps * momentum[i] / config.mass;
    }
}

/// Moving window of posterior samples plus the live chain state.
#[derive(Debug, Clone)]
pub struct PosteriorReservoir {
    samples: VecDeque<PosteriorSample>,
    capacity: usize,
    position: Array1<f64>,
    momentum: Array1<f64>,
    steps_taken: usize,
    post_burn_in: usize,
    step_scale: f64,
    pub warnings: Vec<String>,
}

impl PosteriorReservoir {
    /// Fresh reservoir with the chain at the prior mean, zero momentum.
    pub fn new(model: &DgpModel, config: &SghmcConfig) -> Result<Self> {
        config.validate()?;
        let start = PosteriorSample::at_prior_mean(model).flatten();
        let dim = start.len();
        Ok(PosteriorReservoir {
            samples: VecDeque::with_capacity(config.reservoir_size),
            capacity: config.reservoir_size,
            position: start,
            momentum: Array1::zeros(dim),
            steps_taken: 0,
            post_burn_in: 0,
            step_scale: 1.0,
            warnings: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn samples(&self) -> impl Iterator<Item = &PosteriorSample> {
        self.samples.iter()
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    /// Current chain position as a structured sample.
    pub fn chain_sample(&self, model: &DgpModel) -> Result<PosteriorSample> {
        PosteriorSample::from_flat(model, &self.position)
    }

    pub fn chain_position(&self) -> &Array1<f64> {
        &self.position
    }

    pub fn chain_momentum(&self) -> &Array1<f64> {
        &self.momentum
    }

    /// Restores a previously saved window and chain state.
    pub fn restore(
        model: &DgpModel,
        config: &SghmcConfig,
        samples: Vec<PosteriorSample>,
        position: Array1<f64>,
        momentum: Array1<f64>,
    ) -> Result<Self> {
        let mut reservoir = PosteriorReservoir::new(model, config)?;
        if position.len() != reservoir.position.len() || momentum.len() != position.len() {
            return Err(Error::dim(
                "PosteriorReservoir::restore",
                reservoir.position.len(),
                position.len(),
            ));
        }
        for s in &samples {
            s.validate_shapes(model)?;
        }
        reservoir.samples = samples.into();
        reservoir.position = position;
        reservoir.momentum = momentum;
        Ok(reservoir)
    }

    /// Resets burn-in/thinning counters and clears the window; the chain
    /// position persists (warm start into a fresh window).
    pub fn begin_fresh_window(&mut self) {
        self.samples.clear();
        self.steps_taken = 0;
        self.post_burn_in = 0;
        self.step_scale = 1.0;
        self.momentum.fill(0.0);
    }
}

/// Uniform draw from the stored window; the reservoir is not mutated.
pub fn resample_posterior<'a>(
    reservoir: &'a PosteriorReservoir,
    rng: &mut ChaCha8Rng,
) -> Result<&'a PosteriorSample> {
    if reservoir.is_empty() {
        return Err(Error::InvalidState("posterior reservoir is empty".into()));
    }
    let idx = rng.random_range(0..reservoir.len());
    Ok(&reservoir.samples[idx])
}

/// Stochastic gradient of the negative log-joint with respect to the
/// inducing outputs, with the minibatch likelihood reweighted to the full
/// dataset size. Returns the gradient and the negative pathwise log-joint.
pub fn grad_neg_log_joint(
    model: &DgpModel,
    u: &[Array2<f64>],
    batch: &[TransitionTuple],
    dataset_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Array2<f64>>, f64)> {
    let lik_scale = dataset_size as f64 / batch.len().max(1) as f64;
    let (value, record) = log_joint_scaled(model, u, batch, lik_scale, rng)?;
    let grads = backward(&record, GradRequest::default());
    let neg = grads.u.into_iter().map(|g| g.mapv(|v| -v)).collect();
    Ok((neg, -value))
}

/// Outcome summary of one sampler step.
#[derive(Debug, Clone, Copy)]
pub struct SghmcStepInfo {
    pub neg_log_joint: f64,
    pub pushed_sample: bool,
    pub max_jitter: f64,
}

/// One SG-HMC step: minibatch gradient, momentum update, divergence guard,
/// and (post-burn-in, thinned) window push.
pub fn sghmc_step(
    reservoir: &mut PosteriorReservoir,
    model: &DgpModel,
    dataset: &Dataset,
    config: &SghmcConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SghmcStepInfo> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("sghmc_step needs a non-empty dataset".into()));
    }
    let batch = dataset.sample_minibatch(config.minibatch_size.min(dataset.len()), rng);
    let u = PosteriorSample::from_flat(model, &reservoir.position)?;
    let lik_scale = dataset.len() as f64 / batch.len() as f64;
    let (value, record) = log_joint_scaled(model, &u.inducing_outputs, &batch, lik_scale, rng)?;
    let grads = backward(&record, GradRequest::default());
    let mut flat_grad = Array1::<f64>::zeros(reservoir.position.len());
    let mut offset = 0;
    for g in &grads.u {
        for (i, v) in g.iter().enumerate() {
            flat_grad[offset + i] = -v;
        }
        offset += g.len();
    }

    sghmc_update(
        &mut reservoir.position,
        &mut reservoir.momentum,
        &flat_grad.view(),
        config,
        reservoir.step_scale,
        rng,
    );

    if reservoir.position.iter().any(|v| v.abs() > DIVERGENCE_LIMIT) {
        reservoir.momentum.fill(0.0);
        reservoir.step_scale *= 0.5;
        reservoir.warnings.push(format!(
            "divergence guard at step {}: position exceeded {DIVERGENCE_LIMIT:.0e}, step size halved to {:.3e}",
            reservoir.steps_taken,
            config.step_size * reservoir.step_scale
        ));
    }

    reservoir.steps_taken += 1;
    let mut pushed = false;
    if reservoir.steps_taken > config.burn_in_steps {
        reservoir.post_burn_in += 1;
        if reservoir.post_burn_in % config.thinning == 0 {
            if reservoir.samples.len() == reservoir.capacity {
                reservoir.samples.pop_front();
            }
            reservoir
                .samples
                .push_back(PosteriorSample::from_flat(model, &reservoir.position)?);
            pushed = true;
        }
    }

    Ok(SghmcStepInfo {
        neg_log_joint: -value,
        pushed_sample: pushed,
        max_jitter: record.max_jitter(),
    })
}

/// Adam state over the flattened hyperparameter vector.
#[derive(Debug, Clone)]
pub struct HyperOptimizer {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl HyperOptimizer {
    pub fn new() -> Self {
        HyperOptimizer {
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    fn update(&mut self, grad: &[f64], lr: f64) -> Vec<f64> {
        if self.m.len() != grad.len() {
            self.m = vec![0.0; grad.len()];
            self.v = vec![0.0; grad.len()];
            self.t = 0;
        }
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        grad.iter()
            .enumerate()
            .map(|(i, &g)| {
                self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
                self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
                let mhat = self.m[i] / bc1;
                let vhat = self.v[i] / bc2;
                lr * mhat / (vhat.sqrt() + ADAM_EPS)
            })
            .collect()
    }
}

impl Default for HyperOptimizer {
    fn default() -> Self {
        Self::new()
    }
}

/// One empirical-Bayes ascent step on the window-averaged log-joint with
/// respect to log-hyperparameters (and inducing inputs when enabled).
///
/// Returns the averaged objective. Skips the update (with a warning pushed
/// onto the reservoir) when every window sample yields a non-finite
/// objective.
pub fn hyper_step(
    model: &mut DgpModel,
    optimizer: &mut HyperOptimizer,
    reservoir: &mut PosteriorReservoir,
    dataset: &Dataset,
    config: &HyperOptConfig,
    minibatch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if reservoir.is_empty() && reservoir.steps_taken == 0 {
        return Err(Error::InvalidState("hyper_step needs a started chain".into()));
    }
    config.validate()?;
    let batch = dataset.sample_minibatch(minibatch_size.min(dataset.len()), rng);
    let lik_scale = dataset.len() as f64 / batch.len() as f64;
    // Window average; the live chain position stands in while the window
    // is still empty during early burn-in.
    let chain_fallback;
    let windows: Vec<&PosteriorSample> = if reservoir.is_empty() {
        chain_fallback = reservoir.chain_sample(model)?;
        vec![&chain_fallback]
    } else {
        reservoir.samples().collect()
    };

    let base_seed: u64 = rng.random();
    let request = GradRequest {
        hyperparameters: true,
        inducing_inputs: config.optimize_inducing,
    };
    let results: Vec<Result<(f64, crate::joint::JointGrads)>> = windows
        .par_iter()
        .enumerate()
        .map(|(w, sample)| {
            let mut wrng = stream(base_seed, &[w as u64]);
            let (value, record) =
                log_joint_scaled(model, &sample.inducing_outputs, &batch, lik_scale, &mut wrng)?;
            Ok((value, backward(&record, request)))
        })
        .collect();

    let mut values = Vec::new();
    let mut grads = Vec::new();
    for r in results {
        let (value, g) = r?;
        if value.is_finite() {
            values.push(value);
            grads.push(g);
        }
    }
    if values.is_empty() {
        reservoir
            .warnings
            .push("hyper_step skipped: all window objectives non-finite".into());
        return Ok(f64::NAN);
    }
    let w = values.len() as f64;
    let objective = values.iter().sum::<f64>() / w;

    // Flatten averaged gradients: per layer [log_ls..., log_s2], then
    // log_beta, then inducing inputs when enabled.
    let mut flat = Vec::new();
    for l in 0..model.num_layers() {
        let d = model.layers()[l].input_dim();
        for t in 0..d {
            flat.push(grads.iter().map(|g| g.log_lengthscales[l][t]).sum::<f64>() / w);
        }
        flat.push(grads.iter().map(|g| g.log_signal_variance[l]).sum::<f64>() / w);
    }
    flat.push(grads.iter().map(|g| g.log_beta).sum::<f64>() / w);
    if config.optimize_inducing {
        for l in 0..model.num_layers() {
            let len = model.layers()[l].inducing_inputs.len();
            for i in 0..len {
                flat.push(
                    grads
                        .iter()
                        .map(|g| g.inducing_inputs.as_ref().unwrap()[l].as_slice().unwrap()[i])
                        .sum::<f64>()
                        / w,
                );
            }
        }
    }
    if flat.iter().any(|v| !v.is_finite()) {
        reservoir
            .warnings
            .push("hyper_step skipped: non-finite gradient".into());
        return Ok(objective);
    }

    let step = optimizer.update(&flat, config.learning_rate);
    let mut idx = 0;
    for l in 0..model.num_layers() {
        let d = model.layers()[l].input_dim();
        let dls = Array1::from_iter(step[idx..idx + d].iter().copied());
        idx += d;
        let ds2 = step[idx];
        idx += 1;
        model.layers_mut()[l].kernel.update_logs(&dls.view(), ds2);
    }
    let new_beta = model.noise_precision() * step[idx].exp();
    idx += 1;
    model.set_noise_precision(new_beta)?;
    if config.optimize_inducing {
        for l in 0..model.num_layers() {
            let z = &mut model.layers_mut()[l].inducing_inputs;
            for v in z.iter_mut() {
                *v += step[idx];
                idx += 1;
            }
        }
    }
    Ok(objective)
}

/// One row of the training trace.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub step: usize,
    pub neg_log_joint: f64,
    pub beta: f64,
    pub mean_lengthscales: Vec<f64>,
    pub jitter_warnings: usize,
}

/// Per-step training diagnostics, writable as CSV.
#[derive(Debug, Clone, Default)]
pub struct TrainingTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainingTrace {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let num_layers = self.rows.first().map_or(0, |r| r.mean_lengthscales.len());
        let mut out = String::from("step,neg_log_joint,beta");
        for l in 1..=num_layers {
            out.push_str(&format!(",mean_lengthscale_l{l}"));
        }
        out.push_str(",jitter_warnings\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}", r.step, r.neg_log_joint, r.beta));
            for v in &r.mean_lengthscales {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", r.jitter_warnings));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Interleaved SG-HMC sampling and hyperparameter optimization for one
/// training call (one hyper step per `hyper_interval` sampler steps).
pub fn train_model(
    model: &mut DgpModel,
    reservoir: &mut PosteriorReservoir,
    dataset: &Dataset,
    sghmc: &SghmcConfig,
    hyper: &HyperOptConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingTrace> {
    sghmc.validate()?;
    hyper.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("train_model needs a non-empty dataset".into()));
    }
    let total = hyper.sampler_steps();
    let mut optimizer = HyperOptimizer::new();
    let mut trace = TrainingTrace::default();
    let mut jitter_events = 0usize;
    for step in 0..total {
        let info = sghmc_step(reservoir, model, dataset, sghmc, rng)?;
        if info.max_jitter > model.layers()[0].kernel.base_jitter() * 10.0 {
            jitter_events += 1;
        }
        if (step + 1) % hyper.hyper_interval == 0 {
            hyper_step(model, &mut optimizer, reservoir, dataset, hyper, sghmc.minibatch_size, rng)?;
        }
        trace.rows.push(TraceRow {
            step,
            neg_log_joint: info.neg_log_joint,
            beta: model.noise_precision(),
            mean_lengthscales: model
                .layers()
                .iter()
                .map(|l| l.kernel.lengthscales().mean().unwrap_or(0.0))
                .collect(),
            jitter_warnings: jitter_events,
        });
    }
    Ok(trace)
}

/// Greedy max-min (k-means++ style) selection of inducing inputs from the
/// standardized training inputs; short datasets are padded with jittered
/// duplicates.
pub fn init_inducing_inputs(
    inputs: &ArrayView2<f64>,
    num_inducing: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    let n = inputs.nrows();
    let d = inputs.ncols();
    if n == 0 || num_inducing == 0 {
        return Err(Error::InvalidArgument(
            "inducing initialization needs data and num_inducing >= 1".into(),
        ));
    }
    let mut z = Array2::zeros((num_inducing, d));
    if n <= num_inducing {
        for i in 0..num_inducing {
            let src = if i < n { i } else { rng.random_range(0..n) };
            let jitter = i >= n;
            for j in 0..d {
                let noise: f64 = if jitter { rng.sample::<f64, _>(StandardNormal) * 0.01 } else { 0.0 };
                z[[i, j]] = inputs[[src, j]] + noise;
            }
        }
        return Ok(z);
    }

    let first = rng.random_range(0..n);
    z.row_mut(0).assign(&inputs.row(first));
    let mut min_d2 = vec![f64::INFINITY; n];
    for pick in 1..num_inducing {
        let prev = z.row(pick - 1);
        let mut total = 0.0;
        for i in 0..n {
            let mut d2 = 0.0;
            for j in 0..d {
                let diff = inputs[[i, j]] - prev[j];
                d2 += diff * diff;
            }
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
            total += min_d2[i];
        }
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in min_d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        z.row_mut(pick).assign(&inputs.row(idx));
    }
    Ok(z)
}

/// Builds a fresh model for a dataset: fits the normalizer, selects
/// inducing inputs per layer, and installs unit starting hyperparameters.
pub fn init_model(
    state_dim: usize,
    action_dim: usize,
    families: &[KernelFamily],
    num_inducing: usize,
    initial_beta: f64,
    dataset: &Dataset,
    rng: &mut ChaCha8Rng,
) -> Result<DgpModel> {
    if families.is_empty() {
        return Err(Error::Config("need at least one layer kernel family".into()));
    }
    let normalizer = Normalizer::fit(dataset)?;
    let inputs = dataset.inputs();
    let states = inputs.slice(ndarray::s![.., ..state_dim]);
    let actions = inputs.slice(ndarray::s![.., state_dim..]);
    let normalized = normalizer.normalize_inputs(&states, &actions);

    let sa = state_dim + action_dim;
    let num_layers = families.len();
    let mut layers = Vec::with_capacity(num_layers);
    for (i, family) in families.iter().enumerate() {
        let z = init_inducing_inputs(&normalized.view(), num_inducing, rng)?;
        let kernel = KernelSpec::new(*family, &vec![1.0; sa], 1.0)?;
        let (out_dim, mean_kind) = if i == num_layers - 1 {
            (state_dim, MeanKind::Zero)
        } else {
            (sa, MeanKind::Identity)
        };
        layers.push(GpLayer::new(kernel, z, out_dim, mean_kind)?);
    }
    DgpModel::new(layers, initial_beta, state_dim, action_dim, normalizer)
}
