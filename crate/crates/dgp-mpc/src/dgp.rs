//! Sparse deep GP dynamics model: layer definitions, conditionals given
//! inducing outputs, and pathwise sampling of next-state predictions.
//!
//! The model predicts state deltas; `s_{t+1} = s_t + f(s_t, a_t)` with `f`
//! a composition of GP layers. All but the last layer warp the state-action
//! space (identity mean), the last maps to state deltas (zero mean).
//! Prediction draws one joint Gaussian per layer across the whole input
//! batch, so equal input rows always receive equal outputs — rows are
//! deduplicated before sampling and scattered back afterwards.

use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::kernels::{kernel_gram, kernel_matrix, stabilized_cholesky, KernelSpec};
use crate::linalg::{dedup_rows, solve_lower, solve_psd};
use crate::rng::standard_normal_matrix;
use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Layer mean function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanKind {
    /// `m(x) = x`; warping layers keep the state-action geometry.
    Identity,
    /// `m(x) = 0`; the final layer models pure deltas.
    Zero,
}

/// One GP layer: kernel hyperparameters plus inducing inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpLayer {
    pub kernel: KernelSpec,
    /// `M x D_in` state-action support vectors (in normalized coordinates).
    pub inducing_inputs: Array2<f64>,
    pub output_dim: usize,
    pub mean_kind: MeanKind,
}

impl GpLayer {
    pub fn new(
        kernel: KernelSpec,
        inducing_inputs: Array2<f64>,
        output_dim: usize,
        mean_kind: MeanKind,
    ) -> Result<Self> {
        if inducing_inputs.nrows() == 0 {
            return Err(Error::InvalidArgument(
                "layer needs at least one inducing input".into(),
            ));
        }
        if inducing_inputs.ncols() != kernel.input_dim() {
            return Err(Error::dim(
                "GpLayer inducing inputs",
                kernel.input_dim(),
                inducing_inputs.ncols(),
            ));
        }
        if mean_kind == MeanKind::Identity && output_dim != kernel.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "identity-mean layer needs output_dim == input_dim ({} != {})",
                output_dim,
                kernel.input_dim()
            )));
        }
        Ok(GpLayer {
            kernel,
            inducing_inputs,
            output_dim,
            mean_kind,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.kernel.input_dim()
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing_inputs.nrows()
    }

    /// Mean function applied to a batch of inputs.
    pub fn mean_of(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        match self.mean_kind {
            MeanKind::Identity => x.to_owned(),
            MeanKind::Zero => Array2::zeros((x.nrows(), self.output_dim)),
        }
    }

    /// `m(Z)`, the prior mean of the inducing outputs.
    pub fn inducing_mean(&self) -> Array2<f64> {
        self.mean_of(&self.inducing_inputs.view())
    }
}

/// The full dynamics model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DgpModel {
    layers: Vec<GpLayer>,
    /// Observation-noise precision on the final layer (normalized-delta
    /// space).
    noise_precision: f64,
    state_dim: usize,
    action_dim: usize,
    pub normalizer: Normalizer,
}

impl DgpModel {
    pub fn new(
        layers: Vec<GpLayer>,
        noise_precision: f64,
        state_dim: usize,
        action_dim: usize,
        normalizer: Normalizer,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one layer".into()));
        }
        if !(noise_precision.is_finite() && noise_precision > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise precision must be positive, got {noise_precision}"
            )));
        }
        let sa = state_dim + action_dim;
        let last = layers.len() - 1;
        for (i, layer) in layers.iter().enumerate() {
            if layer.input_dim() != sa {
                return Err(Error::dim(format!("layer {i} input"), sa, layer.input_dim()));
            }
            let (want_out, want_mean) = if i == last {
                (state_dim, MeanKind::Zero)
            } else {
                (sa, MeanKind::Identity)
            };
            if layer.output_dim != want_out {
                return Err(Error::dim(format!("layer {i} output"), want_out, layer.output_dim));
            }
            if layer.mean_kind != want_mean {
                return Err(Error::InvalidArgument(format!(
                    "layer {i} must use {:?} mean",
                    want_mean
                )));
            }
        }
        if normalizer.state_dim() != state_dim || normalizer.action_dim() != action_dim {
            return Err(Error::dim(
                "normalizer dims",
                format!("{state_dim}+{action_dim}"),
                format!("{}+{}", normalizer.state_dim(), normalizer.action_dim()),
            ));
        }
        Ok(DgpModel {
            layers,
            noise_precision,
            state_dim,
            action_dim,
            normalizer,
        })
    }

    pub fn layers(&self) -> &[GpLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [GpLayer] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + self.action_dim
    }

    pub fn noise_precision(&self) -> f64 {
        self.noise_precision
    }

    pub fn set_noise_precision(&mut self, beta: f64) -> Result<()> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise precision must be positive, got {beta}"
            )));
        }
        self.noise_precision = beta;
        Ok(())
    }
}

/// One draw of all inducing outputs `{U_l}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorSample {
    pub inducing_outputs: Vec<Array2<f64>>,
}

impl PosteriorSample {
    /// Sample located at the prior mean `m(Z_l)` of every layer.
    pub fn at_prior_mean(model: &DgpModel) -> Self {
        PosteriorSample {
            inducing_outputs: model.layers().iter().map(|l| l.inducing_mean()).collect(),
        }
    }

    pub fn validate_shapes(&self, model: &DgpModel) -> Result<()> {
        if self.inducing_outputs.len() != model.num_layers() {
            return Err(Error::dim(
                "PosteriorSample layers",
                model.num_layers(),
                self.inducing_outputs.len(),
            ));
        }
        for (i, (u, layer)) in self.inducing_outputs.iter().zip(model.layers()).enumerate() {
            if u.nrows() != layer.num_inducing() || u.ncols() != layer.output_dim {
                return Err(Error::dim(
                    format!("PosteriorSample layer {i}"),
                    format!("{}x{}", layer.num_inducing(), layer.output_dim),
                    format!("{}x{}", u.nrows(), u.ncols()),
                ));
            }
        }
        Ok(())
    }

    /// Total number of scalar entries across layers.
    pub fn num_entries(model: &DgpModel) -> usize {
        model
            .layers()
            .iter()
            .map(|l| l.num_inducing() * l.output_dim)
            .sum()
    }

    /// Row-major flattening, layer by layer (SG-HMC chain coordinates).
    pub fn flatten(&self) -> Array1<f64> {
        let mut out = Vec::new();
        for u in &self.inducing_outputs {
            out.extend(u.iter().copied());
        }
        Array1::from_vec(out)
    }

    pub fn from_flat(model: &DgpModel, flat: &Array1<f64>) -> Result<Self> {
        if flat.len() != Self::num_entries(model) {
            return Err(Error::dim(
                "PosteriorSample::from_flat",
                Self::num_entries(model),
                flat.len(),
            ));
        }
        let mut outputs = Vec::with_capacity(model.num_layers());
        let mut offset = 0;
        for layer in model.layers() {
            let (m, d) = (layer.num_inducing(), layer.output_dim);
            let block = flat.slice(ndarray::s![offset..offset + m * d]).to_owned();
            outputs.push(Array2::from_shape_vec((m, d), block.to_vec()).expect("shape"));
            offset += m * d;
        }
        Ok(PosteriorSample {
            inducing_outputs: outputs,
        })
    }
}

/// Joint Gaussian over a batch of layer inputs, shared across output
/// dimensions.
#[derive(Debug, Clone)]
pub struct LayerConditional {
    pub mean: Array2<f64>,
    /// Schur complement `K_ff - K_fz K_zz^{-1} K_zf` (pre-jitter).
    pub cov: Array2<f64>,
    /// Lower factor of `cov + jitter I`.
    pub chol: Array2<f64>,
    pub jitter_applied: f64,
}

/// Per-layer quantities that depend only on `(Z, theta, U)`: the factorized
/// inducing covariance and the projected weights `K_zz^{-1}(U - m(Z))`.
/// Building this once per posterior draw makes repeated conditionals cheap.
#[derive(Debug, Clone)]
pub struct LayerPosterior {
    layer: GpLayer,
    l_zz: Array2<f64>,
    weights: Array2<f64>,
    pub kzz_jitter: f64,
}

impl LayerPosterior {
    pub fn new(layer: &GpLayer, u: &Array2<f64>) -> Result<Self> {
        if u.nrows() != layer.num_inducing() || u.ncols() != layer.output_dim {
            return Err(Error::dim(
                "LayerPosterior inducing outputs",
                format!("{}x{}", layer.num_inducing(), layer.output_dim),
                format!("{}x{}", u.nrows(), u.ncols()),
            ));
        }
        let kzz = kernel_gram(&layer.kernel, &layer.inducing_inputs.view())?;
        let fact = stabilized_cholesky(&kzz.view(), layer.kernel.base_jitter())?;
        let centered = u - &layer.inducing_mean();
        let weights = solve_psd(&fact.l.view(), &centered.view());
        Ok(LayerPosterior {
            layer: layer.clone(),
            l_zz: fact.l,
            weights,
            kzz_jitter: fact.jitter_applied,
        })
    }

    pub fn layer(&self) -> &GpLayer {
        &self.layer
    }

    /// Conditional `p(f(F_in) | U)` as one joint Gaussian over the batch.
    pub fn conditional(&self, f_in: &ArrayView2<f64>) -> Result<LayerConditional> {
        if f_in.nrows() == 0 {
            return Err(Error::InvalidArgument(
                "layer conditional needs at least one input row".into(),
            ));
        }
        if f_in.ncols() != self.layer.input_dim() {
            return Err(Error::dim(
                "layer conditional input",
                self.layer.input_dim(),
                f_in.ncols(),
            ));
        }
        let kfz = kernel_matrix(&self.layer.kernel, f_in, &self.layer.inducing_inputs.view())?;
        let mean = self.layer.mean_of(f_in) + kfz.dot(&self.weights);
        let v = solve_lower(&self.l_zz.view(), &kfz.t().to_owned().view());
        let kff = kernel_gram(&self.layer.kernel, f_in)?;
        let cov = kff - v.t().dot(&v);
        let fact = stabilized_cholesky(&cov.view(), self.layer.kernel.base_jitter())?;
        Ok(LayerConditional {
            mean,
            cov,
            chol: fact.l,
            jitter_applied: fact.jitter_applied,
        })
    }
}

/// Conditional of a single layer given inducing outputs (uncached form).
pub fn layer_conditional(
    layer: &GpLayer,
    u: &Array2<f64>,
    f_in: &ArrayView2<f64>,
) -> Result<LayerConditional> {
    LayerPosterior::new(layer, u)?.conditional(f_in)
}

/// Draws one joint sample: `mean + chol * E`, with independent standard
/// normal columns per output dimension.
pub fn sample_layer_output(cond: &LayerConditional, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (n, d) = (cond.mean.nrows(), cond.mean.ncols());
    let e = standard_normal_matrix(n, d, rng);
    &cond.mean + &cond.chol.dot(&e)
}

/// One particle's realized dynamics: a posterior draw with its per-layer
/// factorizations, ready for repeated batched prediction.
#[derive(Debug, Clone)]
pub struct SampledDynamics {
    layers: Vec<LayerPosterior>,
    noise_precision: f64,
    state_dim: usize,
    action_dim: usize,
    normalizer: Normalizer,
}

impl SampledDynamics {
    pub fn new(model: &DgpModel, sample: &PosteriorSample) -> Result<Self> {
        sample.validate_shapes(model)?;
        let layers = model
            .layers()
            .iter()
            .zip(&sample.inducing_outputs)
            .map(|(layer, u)| LayerPosterior::new(layer, u))
            .collect::<Result<Vec<_>>>()?;
        Ok(SampledDynamics {
            layers,
            noise_precision: model.noise_precision(),
            state_dim: model.state_dim(),
            action_dim: model.action_dim(),
            normalizer: model.normalizer.clone(),
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Samples state deltas for a raw `(states, actions)` batch.
    ///
    /// Inputs are standardized, deduplicated, pushed jointly through every
    /// layer, scattered back, and de-standardized. Equal input rows are
    /// guaranteed bitwise-equal outputs when `include_noise` is off.
    pub fn sample_deltas(
        &self,
        states: &ArrayView2<f64>,
        actions: &ArrayView2<f64>,
        include_noise: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array2<f64>> {
        let n = states.nrows();
        if actions.nrows() != n {
            return Err(Error::dim("sample_deltas rows", n, actions.nrows()));
        }
        if n == 0 {
            return Ok(Array2::zeros((0, self.state_dim)));
        }
        if states.ncols() != self.state_dim || actions.ncols() != self.action_dim {
            return Err(Error::dim(
                "sample_deltas dims",
                format!("{}+{}", self.state_dim, self.action_dim),
                format!("{}+{}", states.ncols(), actions.ncols()),
            ));
        }
        let inputs = self.normalizer.normalize_inputs(states, actions);
        let (unique, scatter) = dedup_rows(&inputs.view());

        let mut f = unique;
        for lp in &self.layers {
            let cond = lp.conditional(&f.view())?;
            f = sample_layer_output(&cond, rng);
        }

        let mut out = Array2::zeros((n, self.state_dim));
        for (i, &u) in scatter.iter().enumerate() {
            out.row_mut(i).assign(&f.row(u));
        }
        if include_noise {
            let sigma = self.noise_precision.recip().sqrt();
            let e = standard_normal_matrix(n, self.state_dim, rng);
            out.scaled_add(sigma, &e);
        }
        Ok(self.normalizer.denormalize_deltas(&out.view()))
    }

    /// `s_{t+1} = s_t + f(s_t, a_t)` for a raw batch.
    pub fn predict_next(
        &self,
        states: &ArrayView2<f64>,
        actions: &ArrayView2<f64>,
        include_noise: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array2<f64>> {
        let deltas = self.sample_deltas(states, actions, include_noise, rng)?;
        Ok(states.to_owned() + deltas)
    }

    /// Deterministic mean-path prediction: composes the conditional means
    /// of every layer (exact predictive mean for single-layer models,
    /// a diagnostic for deeper ones).
    pub fn predict_mean(
        &self,
        states: &ArrayView2<f64>,
        actions: &ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        let n = states.nrows();
        if n == 0 {
            return Ok(Array2::zeros((0, self.state_dim)));
        }
        let mut f = self.normalizer.normalize_inputs(states, actions);
        for lp in &self.layers {
            let cond = lp.conditional(&f.view())?;
            f = cond.mean;
        }
        let deltas = self.normalizer.denormalize_deltas(&f.view());
        Ok(states.to_owned() + deltas)
    }
}

/// Composes all layers over a raw `n x (S+A)` input batch and returns the
/// sampled state deltas.
pub fn dgp_forward(
    model: &DgpModel,
    sample: &PosteriorSample,
    inputs: &ArrayView2<f64>,
    include_noise: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    if inputs.ncols() != model.input_dim() && inputs.nrows() > 0 {
        return Err(Error::dim("dgp_forward inputs", model.input_dim(), inputs.ncols()));
    }
    let dynamics = SampledDynamics::new(model, sample)?;
    if inputs.nrows() == 0 {
        return Ok(Array2::zeros((0, model.state_dim())));
    }
    let states = inputs.slice(ndarray::s![.., ..model.state_dim()]);
    let actions = inputs.slice(ndarray::s![.., model.state_dim()..]);
    dynamics.sample_deltas(&states, &actions, include_noise, rng)
}

/// Residual transition: `states + dgp_forward(concat(states, actions))`.
pub fn predict_next_states(
    model: &DgpModel,
    sample: &PosteriorSample,
    states: &ArrayView2<f64>,
    actions: &ArrayView2<f64>,
    include_noise: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    if states.nrows() != actions.nrows() {
        return Err(Error::dim(
            "predict_next_states rows",
            states.nrows(),
            actions.nrows(),
        ));
    }
    let inputs = concatenate![Axis(1), states.to_owned(), actions.to_owned()];
    let deltas = dgp_forward(model, sample, &inputs.view(), include_noise, rng)?;
    Ok(states.to_owned() + deltas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{KernelFamily, KernelSpec};
    use crate::linalg::inv_from_cholesky;
    use crate::rng::stream;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use rand::Rng;

    fn final_layer(z: Array2<f64>, out_dim: usize, ls: &[f64], s2: f64) -> GpLayer {
        GpLayer::new(
            KernelSpec::new(KernelFamily::Sexp, ls, s2).unwrap(),
            z,
            out_dim,
            MeanKind::Zero,
        )
        .unwrap()
    }

    /// Single-layer model with S=1, A=1 and identity normalization.
    fn tiny_model(z: Array2<f64>, s2: f64, beta: f64) -> DgpModel {
        let layer = final_layer(z, 1, &[1.0, 1.0], s2);
        DgpModel::new(vec![layer], beta, 1, 1, Normalizer::identity(1, 1)).unwrap()
    }

    #[test]
    fn model_validates_layer_chain() {
        let z = Array2::zeros((3, 2));
        let bad = GpLayer::new(
            KernelSpec::new(KernelFamily::Sexp, &[1.0, 1.0], 1.0).unwrap(),
            z.clone(),
            2,
            MeanKind::Identity,
        )
        .unwrap();
        // Final layer must be zero-mean with state_dim outputs.
        assert!(DgpModel::new(vec![bad], 1.0, 1, 1, Normalizer::identity(1, 1)).is_err());
    }

    #[test]
    fn interpolates_at_inducing_inputs_in_small_jitter_limit() {
        let z = array![[0.0, 0.0], [1.0, -0.5], [-0.7, 0.9]];
        let layer = final_layer(z.clone(), 1, &[0.8, 1.1], 2.0);
        let u = array![[0.4], [-1.2], [0.7]];
        let f_in = z.slice(ndarray::s![1..2, ..]).to_owned();
        let cond = layer_conditional(&layer, &u, &f_in.view()).unwrap();
        assert_abs_diff_eq!(cond.mean[[0, 0]], -1.2, epsilon = 1e-4);
        assert!(cond.cov[[0, 0]].abs() < 1e-4);
    }

    /// Warping layers add the identity mean, so interpolation at a support
    /// point reproduces U with the mean-function offset cancelling.
    #[test]
    fn identity_mean_layer_interpolates() {
        let z = array![[0.0, 0.0], [1.0, -0.5]];
        let layer = GpLayer::new(
            KernelSpec::new(KernelFamily::Matern52, &[1.0, 1.0], 1.5).unwrap(),
            z.clone(),
            2,
            MeanKind::Identity,
        )
        .unwrap();
        let u = array![[0.3, -0.1], [0.9, -0.4]];
        let cond = layer_conditional(&layer, &u, &z.slice(ndarray::s![0..1, ..])).unwrap();
        assert_abs_diff_eq!(cond.mean[[0, 0]], 0.3, epsilon = 1e-4);
        assert_abs_diff_eq!(cond.mean[[0, 1]], -0.1, epsilon = 1e-4);
    }

    /// With Z = training inputs the sparse conditional must match a dense
    /// GP conditional computed by an independent inverse-based solve.
    #[test]
    fn matches_dense_gp_conditional_when_m_equals_n() {
        let mut rng = stream(5, &[1]);
        let n = 8;
        let z = Array2::from_shape_fn((n, 2), |_| rng.random::<f64>() * 3.0 - 1.5);
        let u = Array2::from_shape_fn((n, 1), |_| rng.random::<f64>() * 2.0 - 1.0);
        let layer = final_layer(z.clone(), 1, &[0.9, 1.3], 1.7);
        let x_test = Array2::from_shape_fn((4, 2), |_| rng.random::<f64>() * 3.0 - 1.5);

        let cond = layer_conditional(&layer, &u, &x_test.view()).unwrap();

        // Dense route: explicit inverse of K_zz + jitter.
        let kzz = kernel_gram(&layer.kernel, &z.view()).unwrap();
        let lp = LayerPosterior::new(&layer, &u).unwrap();
        let mut kj = kzz.clone();
        for i in 0..n {
            kj[[i, i]] += lp.kzz_jitter;
        }
        let l = crate::linalg::cholesky(&kj.view()).unwrap();
        let kinv = inv_from_cholesky(&l.view());
        let kfz = kernel_matrix(&layer.kernel, &x_test.view(), &z.view()).unwrap();
        let mean = kfz.dot(&kinv).dot(&u);
        let kff = kernel_gram(&layer.kernel, &x_test.view()).unwrap();
        let cov = &kff - &kfz.dot(&kinv).dot(&kfz.t());

        for (a, b) in cond.mean.iter().zip(mean.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8 * b.abs().max(1.0));
        }
        for (a, b) in cond.cov.iter().zip(cov.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn duplicate_input_rows_duplicate_conditional_rows() {
        let z = array![[0.0, 0.0], [1.0, 1.0], [2.0, -1.0]];
        let layer = final_layer(z, 1, &[1.0, 1.0], 1.0);
        let u = array![[0.5], [-0.3], [0.2]];
        let f_in = array![[0.4, 0.2], [0.4, 0.2], [1.5, 0.0]];
        let cond = layer_conditional(&layer, &u, &f_in.view()).unwrap();
        assert_eq!(cond.mean[[0, 0]].to_bits(), cond.mean[[1, 0]].to_bits());
        for j in 0..3 {
            assert_eq!(cond.cov[[0, j]].to_bits(), cond.cov[[1, j]].to_bits());
            assert_eq!(cond.cov[[j, 0]].to_bits(), cond.cov[[j, 1]].to_bits());
        }
    }

    #[test]
    fn near_zero_cov_sample_sticks_to_mean() {
        let cond = LayerConditional {
            mean: array![[1.5], [-2.0]],
            cov: Array2::zeros((2, 2)),
            chol: Array2::from_diag(&array![1e-8, 1e-8]),
            jitter_applied: 1e-16,
        };
        let mut rng = stream(0, &[2]);
        let s = sample_layer_output(&cond, &mut rng);
        assert_abs_diff_eq!(s[[0, 0]], 1.5, epsilon = 1e-6);
        assert_abs_diff_eq!(s[[1, 0]], -2.0, epsilon = 1e-6);
    }

    /// Monte-Carlo moments of a unit-variance scalar conditional.
    #[test]
    fn sample_layer_output_moments() {
        let cond = LayerConditional {
            mean: array![[0.0]],
            cov: array![[1.0]],
            chol: array![[1.0]],
            jitter_applied: 0.0,
        };
        let mut rng = stream(7, &[3]);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let v = sample_layer_output(&cond, &mut rng)[[0, 0]];
            sum += v;
            sum2 += v * v;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((0.97..=1.03).contains(&var), "var {var}");
    }

    #[test]
    fn forward_empty_batch_is_empty() {
        let model = tiny_model(array![[0.0, 0.0]], 1.0, 100.0);
        let sample = PosteriorSample::at_prior_mean(&model);
        let mut rng = stream(1, &[4]);
        let out = dgp_forward(
            &model,
            &sample,
            &Array2::zeros((0, 2)).view(),
            false,
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.shape(), &[0, 1]);
    }

    #[test]
    fn identical_rows_get_identical_outputs_without_noise() {
        let model = tiny_model(array![[0.0, 0.0], [1.0, 0.5]], 1.0, 100.0);
        let sample = PosteriorSample {
            inducing_outputs: vec![array![[0.7], [-0.4]]],
        };
        let mut rng = stream(9, &[5]);
        let states = array![[0.3], [0.3], [0.9]];
        let actions = array![[0.1], [0.1], [0.0]];
        let next =
            predict_next_states(&model, &sample, &states.view(), &actions.view(), false, &mut rng)
                .unwrap();
        assert_eq!(next[[0, 0]].to_bits(), next[[1, 0]].to_bits());
        assert_ne!(next[[0, 0]].to_bits(), next[[2, 0]].to_bits());
    }

    /// Residual connection: a final layer pinned near zero yields
    /// next_state ~ current state.
    #[test]
    fn zero_delta_model_returns_current_state() {
        let model = tiny_model(array![[50.0, 50.0]], 1e-14, 1e12);
        let sample = PosteriorSample {
            inducing_outputs: vec![array![[0.0]]],
        };
        let mut rng = stream(2, &[6]);
        let states = array![[0.25]];
        let actions = array![[-0.5]];
        let next =
            predict_next_states(&model, &sample, &states.view(), &actions.view(), false, &mut rng)
                .unwrap();
        assert_abs_diff_eq!(next[[0, 0]], 0.25, epsilon = 1e-6);
    }

    /// Turning the nugget on adds beta^{-1} variance per dimension.
    #[test]
    fn noise_layering_variance_gap() {
        let beta = 4.0;
        let model = tiny_model(array![[0.0, 0.0]], 0.5, beta);
        let sample = PosteriorSample {
            inducing_outputs: vec![array![[0.2]]],
        };
        let states = array![[8.0]]; // far from the single inducing point
        let actions = array![[0.0]];
        let draws = 100_000;
        let mut var = [0.0_f64; 2];
        for (slot, include_noise) in [(0, false), (1, true)] {
            let mut rng = stream(31, &[slot as u64]);
            let mut sum = 0.0;
            let mut sum2 = 0.0;
            for _ in 0..draws {
                let v = model_predict_one(&model, &sample, &states, &actions, include_noise, &mut rng);
                sum += v;
                sum2 += v * v;
            }
            let mean = sum / draws as f64;
            var[slot] = sum2 / draws as f64 - mean * mean;
        }
        let gap = var[1] - var[0];
        assert!(
            (gap - beta.recip()).abs() <= 0.05 * beta.recip(),
            "variance gap {gap} vs {}",
            beta.recip()
        );
    }

    fn model_predict_one(
        model: &DgpModel,
        sample: &PosteriorSample,
        states: &Array2<f64>,
        actions: &Array2<f64>,
        include_noise: bool,
        rng: &mut ChaCha8Rng,
    ) -> f64 {
        predict_next_states(model, sample, &states.view(), &actions.view(), include_noise, rng)
            .unwrap()[[0, 0]]
    }

    #[test]
    fn flatten_round_trips() {
        let z = Array2::zeros((3, 2));
        let model = tiny_model(z, 1.0, 10.0);
        let sample = PosteriorSample {
            inducing_outputs: vec![array![[0.1], [0.2], [0.3]]],
        };
        let flat = sample.flatten();
        let back = PosteriorSample::from_flat(&model, &flat).unwrap();
        assert_eq!(back.inducing_outputs[0], sample.inducing_outputs[0]);
    }
}
