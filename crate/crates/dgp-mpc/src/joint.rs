//! Pathwise log-density of the sparse model joint and its gradients.
//!
//! The forward pass draws a reparameterized sample through the inner
//! layers (`F = mean + L_c E` with `E` standard normal), evaluates the
//! Gaussian likelihood of the observed deltas at the final layer's mean,
//! and adds the inducing prior `N(vec U_l | m(Z_l), K_zz)` per layer. The
//! recorded intermediates support exact reverse-mode gradients of the same
//! fixed-path objective with respect to the inducing outputs, the log
//! hyperparameters, the log noise precision, and the inducing inputs.

use crate::data::TransitionTuple;
use crate::dgp::{DgpModel, GpLayer, MeanKind};
use crate::error::{Error, Result};
use crate::kernels::{self, kernel_gram, scaled_sqdist, stabilized_cholesky, KernelSpec};
use crate::linalg::{
    cholesky_backward, inv_from_cholesky, logdet_from_cholesky, solve_lower, solve_lower_transpose,
    solve_psd, symmetrize, tril,
};
use crate::rng::standard_normal_matrix;
use ndarray::{Array1, Array2, ArrayView2};
use rand_chacha::ChaCha8Rng;

const LN_2PI: f64 = 1.837_877_066_409_345_6;

/// Which gradients [`backward`] should assemble beyond the inducing
/// outputs.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradRequest {
    pub hyperparameters: bool,
    pub inducing_inputs: bool,
}

/// Gradients of the pathwise log-joint (ascent direction).
#[derive(Debug, Clone)]
pub struct JointGrads {
    /// Per-layer gradient with respect to `U_l`.
    pub u: Vec<Array2<f64>>,
    /// Per-layer gradient with respect to the log lengthscales.
    pub log_lengthscales: Vec<Array1<f64>>,
    /// Per-layer gradient with respect to the log signal variance.
    pub log_signal_variance: Vec<f64>,
    /// Gradient with respect to the log noise precision.
    pub log_beta: f64,
    /// Per-layer gradient with respect to `Z_l` (when requested).
    pub inducing_inputs: Option<Vec<Array2<f64>>>,
}

struct InnerRecord {
    kff: Array2<f64>,
    r2_ff: Array2<f64>,
    v: Array2<f64>,
    l_cov: Array2<f64>,
    cov_jitter: f64,
    noise: Array2<f64>,
}

struct LayerRecord {
    layer: GpLayer,
    f_prev: Array2<f64>,
    kfz: Array2<f64>,
    r2_fz: Array2<f64>,
    kzz: Array2<f64>,
    r2_zz: Array2<f64>,
    l_zz: Array2<f64>,
    kzz_jitter: f64,
    weights: Array2<f64>,
    inner: Option<InnerRecord>,
}

/// Intermediates of one pathwise evaluation, retained for [`backward`].
pub struct PathRecord {
    layers: Vec<LayerRecord>,
    resid: Array2<f64>,
    beta: f64,
    lik_scale: f64,
    batch_size: usize,
}

/// Pathwise log-joint with the likelihood term scaled by `lik_scale`
/// (`N / |batch|` for stochastic gradients, 1 for the plain density).
pub fn log_joint_scaled(
    model: &DgpModel,
    u: &[Array2<f64>],
    batch: &[TransitionTuple],
    lik_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, PathRecord)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("log_joint needs a non-empty batch".into()));
    }
    if u.len() != model.num_layers() {
        return Err(Error::dim("log_joint U layers", model.num_layers(), u.len()));
    }
    let n = batch.len();
    let (s_dim, a_dim) = (model.state_dim(), model.action_dim());
    let mut states = Array2::zeros((n, s_dim));
    let mut actions = Array2::zeros((n, a_dim));
    let mut targets = Array2::zeros((n, s_dim));
    for (i, t) in batch.iter().enumerate() {
        if t.state.len() != s_dim || t.action.len() != a_dim || t.next_state.len() != s_dim {
            return Err(Error::dim(
                "log_joint batch tuple",
                format!("{s_dim}+{a_dim}"),
                format!("{}+{}", t.state.len(), t.action.len()),
            ));
        }
        states.row_mut(i).assign(&t.state);
        actions.row_mut(i).assign(&t.action);
        targets
            .row_mut(i)
            .assign(&model.normalizer.normalize_delta_row(&t.delta().view()));
    }
    let inputs = model.normalizer.normalize_inputs(&states.view(), &actions.view());

    let num_layers = model.num_layers();
    let mut records = Vec::with_capacity(num_layers);
    let mut f_prev = inputs;
    let mut value = 0.0;
    let mut resid = Array2::zeros((0, 0));

    for (idx, layer) in model.layers().iter().enumerate() {
        let uu = &u[idx];
        if uu.nrows() != layer.num_inducing() || uu.ncols() != layer.output_dim {
            return Err(Error::dim(
                format!("log_joint U[{idx}]"),
                format!("{}x{}", layer.num_inducing(), layer.output_dim),
                format!("{}x{}", uu.nrows(), uu.ncols()),
            ));
        }
        let z = layer.inducing_inputs.view();
        let m = layer.num_inducing();
        let d_out = layer.output_dim;

        let r2_zz = scaled_sqdist(&layer.kernel, &z, &z);
        let kzz = kernel_gram(&layer.kernel, &z)?;
        let zfact = stabilized_cholesky(&kzz.view(), layer.kernel.base_jitter())?;
        let r2_fz = scaled_sqdist(&layer.kernel, &f_prev.view(), &z);
        let kfz = apply_kernel(&layer.kernel, &r2_fz);
        let centered = uu - &layer.inducing_mean();
        let weights = solve_psd(&zfact.l.view(), &centered.view());
        let mean = layer.mean_of(&f_prev.view()) + kfz.dot(&weights);

        // Inducing prior: N(vec U | m(Z), K_zz + jitter I) per output dim.
        let logdet = logdet_from_cholesky(&zfact.l.view());
        let quad: f64 = (&centered * &weights).sum();
        value += -0.5 * ((m * d_out) as f64 * LN_2PI + d_out as f64 * logdet + quad);

        let is_final = idx == num_layers - 1;
        let inner = if is_final {
            resid = &targets - &mean;
            let beta = model.noise_precision();
            let sq: f64 = resid.iter().map(|v| v * v).sum();
            value +=
                lik_scale * (0.5 * (n * s_dim) as f64 * (beta.ln() - LN_2PI) - 0.5 * beta * sq);
            None
        } else {
            let r2_ff = scaled_sqdist(&layer.kernel, &f_prev.view(), &f_prev.view());
            let kff = apply_kernel(&layer.kernel, &r2_ff);
            let v = solve_lower(&zfact.l.view(), &kfz.t().to_owned().view());
            let cov = &kff - &v.t().dot(&v);
            let cfact = stabilized_cholesky(&cov.view(), layer.kernel.base_jitter())?;
            let noise = standard_normal_matrix(n, d_out, rng);
            let f_next = &mean + &cfact.l.dot(&noise);
            let rec = InnerRecord {
                kff,
                r2_ff,
                v,
                l_cov: cfact.l,
                cov_jitter: cfact.jitter_applied,
                noise,
            };
            records.push(LayerRecord {
                layer: layer.clone(),
                f_prev: std::mem::replace(&mut f_prev, f_next),
                kfz,
                r2_fz,
                kzz,
                r2_zz,
                l_zz: zfact.l,
                kzz_jitter: zfact.jitter_applied,
                weights,
                inner: Some(rec),
            });
            continue;
        };
        records.push(LayerRecord {
            layer: layer.clone(),
            f_prev: f_prev.clone(),
            kfz,
            r2_fz,
            kzz,
            r2_zz,
            l_zz: zfact.l,
            kzz_jitter: zfact.jitter_applied,
            weights,
            inner,
        });
    }

    Ok((
        value,
        PathRecord {
            layers: records,
            resid,
            beta: model.noise_precision(),
            lik_scale,
            batch_size: n,
        },
    ))
}

/// Plain pathwise log-joint of a batch (likelihood unscaled).
pub fn log_joint(
    model: &DgpModel,
    u: &[Array2<f64>],
    batch: &[TransitionTuple],
    rng: &mut ChaCha8Rng,
) -> Result<(f64, PathRecord)> {
    log_joint_scaled(model, u, batch, 1.0, rng)
}

fn apply_kernel(spec: &KernelSpec, r2: &Array2<f64>) -> Array2<f64> {
    let s2 = spec.signal_variance();
    r2.mapv(|r| kernels::eval_r2(spec.family(), s2, r))
}

/// Accumulates kernel-matrix adjoints into hyperparameter and input
/// gradients for a cross matrix `K[i,j] = k(x_i, y_j)`.
#[allow(clippy::too_many_arguments)]
fn kernel_backward_cross(
    spec: &KernelSpec,
    x: &ArrayView2<f64>,
    y: &ArrayView2<f64>,
    k: &Array2<f64>,
    r2: &Array2<f64>,
    kbar: &Array2<f64>,
    grad_log_ls: Option<&mut Array1<f64>>,
    grad_log_s2: Option<&mut f64>,
    mut xbar: Option<&mut Array2<f64>>,
    mut ybar: Option<&mut Array2<f64>>,
) {
    let s2 = spec.signal_variance();
    let inv_ls2: Vec<f64> = spec.lengthscales().iter().map(|l| 1.0 / (l * l)).collect();
    let d = x.ncols();
    let mut gls = grad_log_ls;
    if let Some(gs2) = grad_log_s2 {
        *gs2 += (kbar * k).sum();
    }
    if gls.is_none() && xbar.is_none() && ybar.is_none() {
        return;
    }
    for i in 0..x.nrows() {
        let xi = x.row(i);
        for j in 0..y.nrows() {
            let c = kbar[[i, j]];
            if c == 0.0 {
                continue;
            }
            let dk = kernels::dk_dr2(spec.family(), s2, r2[[i, j]]);
            let cf = c * dk;
            if cf == 0.0 {
                continue;
            }
            let yj = y.row(j);
            for t in 0..d {
                let raw = xi[t] - yj[t];
                let diff = raw * inv_ls2[t];
                if let Some(g) = gls.as_mut() {
                    g[t] += cf * (-2.0) * diff * raw;
                }
                if let Some(xb) = xbar.as_mut() {
                    xb[[i, t]] += cf * 2.0 * diff;
                }
                if let Some(yb) = ybar.as_mut() {
                    yb[[j, t]] -= cf * 2.0 * diff;
                }
            }
        }
    }
}

/// Same as [`kernel_backward_cross`] for a symmetric gram matrix with a
/// symmetrized adjoint; the two argument slots coincide.
fn kernel_backward_gram(
    spec: &KernelSpec,
    x: &ArrayView2<f64>,
    k: &Array2<f64>,
    r2: &Array2<f64>,
    kbar_sym: &Array2<f64>,
    grad_log_ls: Option<&mut Array1<f64>>,
    grad_log_s2: Option<&mut f64>,
    mut xbar: Option<&mut Array2<f64>>,
) {
    let s2 = spec.signal_variance();
    let inv_ls2: Vec<f64> = spec.lengthscales().iter().map(|l| 1.0 / (l * l)).collect();
    let d = x.ncols();
    let mut gls = grad_log_ls;
    if let Some(gs2) = grad_log_s2 {
        *gs2 += (kbar_sym * k).sum();
    }
    if gls.is_none() && xbar.is_none() {
        return;
    }
    // All ordered pairs, each slot of the symmetric adjoint counted once.
    for i in 0..x.nrows() {
        let xi = x.row(i);
        for j in 0..x.nrows() {
            let c = kbar_sym[[i, j]];
            if c == 0.0 || i == j {
                continue;
            }
            let dk = kernels::dk_dr2(spec.family(), s2, r2[[i, j]]);
            let cf = c * dk;
            if cf == 0.0 {
                continue;
            }
            let xj = x.row(j);
            for t in 0..d {
                let raw = xi[t] - xj[t];
                let diff = raw * inv_ls2[t];
                if let Some(g) = gls.as_mut() {
                    g[t] += cf * (-2.0) * diff * raw;
                }
                if let Some(xb) = xbar.as_mut() {
                    xb[[i, t]] += cf * 2.0 * diff;
                    xb[[j, t]] -= cf * 2.0 * diff;
                }
            }
        }
    }
}

/// Reverse pass over a [`PathRecord`]: exact gradients of the recorded
/// fixed-path objective.
pub fn backward(record: &PathRecord, request: GradRequest) -> JointGrads {
    let num_layers = record.layers.len();
    let mut u_grads: Vec<Array2<f64>> = Vec::with_capacity(num_layers);
    let mut ls_grads: Vec<Array1<f64>> = Vec::with_capacity(num_layers);
    let mut s2_grads: Vec<f64> = vec![0.0; num_layers];
    let mut z_grads: Vec<Array2<f64>> = Vec::new();
    for rec in &record.layers {
        u_grads.push(Array2::zeros((rec.layer.num_inducing(), rec.layer.output_dim)));
        ls_grads.push(Array1::zeros(rec.layer.input_dim()));
        if request.inducing_inputs {
            z_grads.push(Array2::zeros(rec.layer.inducing_inputs.raw_dim()));
        }
    }

    // Likelihood seed.
    let (n, s_dim) = (record.resid.nrows(), record.resid.ncols());
    let beta = record.beta;
    let sq: f64 = record.resid.iter().map(|v| v * v).sum();
    let dbeta = record.lik_scale * (0.5 * (n * s_dim) as f64 / beta - 0.5 * sq);
    let log_beta_grad = beta * dbeta;
    let mut fbar_next = record.resid.mapv(|r| record.lik_scale * beta * r);

    for idx in (0..num_layers).rev() {
        let rec = &record.layers[idx];
        let layer = &rec.layer;
        let spec = &layer.kernel;
        let z = layer.inducing_inputs.view();
        let f_prev = rec.f_prev.view();
        let d_out = layer.output_dim as f64;

        let mut fbar_prev = Array2::<f64>::zeros(rec.f_prev.raw_dim());
        let mut kfz_bar = Array2::<f64>::zeros(rec.kfz.raw_dim());
        let mut kzz_bar: Array2<f64>;
        let mut lz_bar: Option<Array2<f64>> = None;

        // meanbar: the likelihood residual for the final layer, the sampled
        // output's adjoint for inner layers (F = mean + L_c E).
        let meanbar = fbar_next;
        if let Some(inner) = &rec.inner {
            let lc_bar = tril(&meanbar.dot(&inner.noise.t()).view());
            let cov_bar = cholesky_backward(&inner.l_cov.view(), &lc_bar.view());
            // Cov = K_ff - V^T V.
            let v_bar = inner.v.dot(&cov_bar).mapv(|v| -2.0 * v);
            // V = L_zz^{-1} K_zf.
            let kzf_bar = solve_lower_transpose(&rec.l_zz.view(), &v_bar.view());
            kfz_bar += &kzf_bar.t();
            lz_bar = Some(tril(&kzf_bar.dot(&inner.v.t()).mapv(|v| -v).view()));
            // Jitter on Cov scales with the signal variance.
            if request.hyperparameters {
                s2_grads[idx] += inner.cov_jitter * cov_bar.diag().sum();
            }
            kernel_backward_gram(
                spec,
                &f_prev,
                &inner.kff,
                &inner.r2_ff,
                &cov_bar,
                request.hyperparameters.then(|| &mut ls_grads[idx]),
                request.hyperparameters.then(|| &mut s2_grads[idx]),
                Some(&mut fbar_prev),
            );
        }

        // mean = m(F_prev) + K_fz W.
        kfz_bar += &meanbar.dot(&rec.weights.t());
        let w_bar = rec.kfz.t().dot(&meanbar);
        if layer.mean_kind == MeanKind::Identity {
            fbar_prev += &meanbar;
        }

        // Prior: -1/2 (M D ln 2pi + D logdet K_zz + sum(centered * W)).
        let mut dl_bar = rec.weights.mapv(|w| -w);
        kzz_bar = rec.weights.dot(&rec.weights.t()).mapv(|v| 0.5 * v);
        let kinv = inv_from_cholesky(&rec.l_zz.view());
        kzz_bar.scaled_add(-0.5 * d_out, &kinv);

        // W = (K_zz + j I)^{-1} centered, pulled back through the solve.
        let s = solve_psd(&rec.l_zz.view(), &w_bar.view());
        dl_bar += &s;
        kzz_bar -= &s.dot(&rec.weights.t());

        // centered = U - m(Z).
        u_grads[idx] += &dl_bar;
        if request.inducing_inputs && layer.mean_kind == MeanKind::Identity {
            z_grads[idx] -= &dl_bar;
        }

        if let Some(lb) = lz_bar {
            kzz_bar += &cholesky_backward(&rec.l_zz.view(), &lb.view());
        }
        let kzz_bar = symmetrize(&kzz_bar.view());
        if request.hyperparameters {
            // Jitter on K_zz scales with the signal variance.
            s2_grads[idx] += rec.kzz_jitter * kzz_bar.diag().sum();
        }
        kernel_backward_gram(
            spec,
            &z,
            &rec.kzz,
            &rec.r2_zz,
            &kzz_bar,
            request.hyperparameters.then(|| &mut ls_grads[idx]),
            request.hyperparameters.then(|| &mut s2_grads[idx]),
            request.inducing_inputs.then(|| &mut z_grads[idx]),
        );
        kernel_backward_cross(
            spec,
            &f_prev,
            &z,
            &rec.kfz,
            &rec.r2_fz,
            &kfz_bar,
            request.hyperparameters.then(|| &mut ls_grads[idx]),
            request.hyperparameters.then(|| &mut s2_grads[idx]),
            Some(&mut fbar_prev),
            request.inducing_inputs.then(|| &mut z_grads[idx]),
        );

        fbar_next = fbar_prev;
    }

    JointGrads {
        u: u_grads,
        log_lengthscales: ls_grads,
        log_signal_variance: s2_grads,
        log_beta: log_beta_grad,
        inducing_inputs: request.inducing_inputs.then_some(z_grads),
    }
}

impl PathRecord {
    /// Batch size the record was evaluated on.
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Largest jitter any covariance needed during the forward pass.
    pub fn max_jitter(&self) -> f64 {
        self.layers
            .iter()
            .map(|r| {
                r.kzz_jitter
                    .max(r.inner.as_ref().map(|i| i.cov_jitter).unwrap_or(0.0))
            })
            .fold(0.0, f64::max)
    }
}
