//! Transition datasets and the per-dimension standardization applied before
//! training.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One observed environment transition.
#[derive(Debug, Clone)]
pub struct TransitionTuple {
    pub state: Array1<f64>,
    pub action: Array1<f64>,
    pub next_state: Array1<f64>,
}

impl TransitionTuple {
    /// Regression target: the state delta.
    pub fn delta(&self) -> Array1<f64> {
        &self.next_state - &self.state
    }
}

/// Growing collection of transitions with fixed state/action dimensions.
#[derive(Debug, Clone)]
pub struct Dataset {
    state_dim: usize,
    action_dim: usize,
    tuples: Vec<TransitionTuple>,
}

impl Dataset {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        Dataset {
            state_dim,
            action_dim,
            tuples: Vec::new(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn tuples(&self) -> &[TransitionTuple] {
        &self.tuples
    }

    pub fn push(&mut self, tuple: TransitionTuple) -> Result<()> {
        if tuple.state.len() != self.state_dim
            || tuple.next_state.len() != self.state_dim
            || tuple.action.len() != self.action_dim
        {
            return Err(Error::dim(
                "Dataset::push",
                format!("state {} action {}", self.state_dim, self.action_dim),
                format!(
                    "state {} action {} next {}",
                    tuple.state.len(),
                    tuple.action.len(),
                    tuple.next_state.len()
                ),
            ));
        }
        self.tuples.push(tuple);
        Ok(())
    }

    /// Stacked raw inputs `(s, a)` as an `n x (S+A)` matrix.
    pub fn inputs(&self) -> Array2<f64> {
        let n = self.tuples.len();
        let d = self.state_dim + self.action_dim;
        let mut out = Array2::zeros((n, d));
        for (i, t) in self.tuples.iter().enumerate() {
            for (j, v) in t.state.iter().chain(t.action.iter()).enumerate() {
                out[[i, j]] = *v;
            }
        }
        out
    }

    /// Stacked raw deltas as an `n x S` matrix.
    pub fn deltas(&self) -> Array2<f64> {
        let n = self.tuples.len();
        let mut out = Array2::zeros((n, self.state_dim));
        for (i, t) in self.tuples.iter().enumerate() {
            out.row_mut(i).assign(&t.delta());
        }
        out
    }

    /// Uniform minibatch without replacement (full dataset when smaller).
    pub fn sample_minibatch(&self, size: usize, rng: &mut ChaCha8Rng) -> Vec<TransitionTuple> {
        let n = self.tuples.len();
        if n <= size {
            return self.tuples.clone();
        }
        rand::seq::index::sample(rng, n, size)
            .into_iter()
            .map(|i| self.tuples[i].clone())
            .collect()
    }
}

/// Per-dimension affine standardization of states, actions and deltas.
///
/// The model operates on standardized quantities; a single scalar noise
/// precision is adequate only because targets are scaled to unit-ish
/// variance.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Normalizer {
    pub state_mean: Array1<f64>,
    pub state_std: Array1<f64>,
    pub action_mean: Array1<f64>,
    pub action_std: Array1<f64>,
    pub delta_mean: Array1<f64>,
    pub delta_std: Array1<f64>,
}

const MIN_STD: f64 = 1e-8;

fn column_stats(m: &ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
    let n = m.nrows().max(1) as f64;
    let mean = m.sum_axis(Axis(0)) / n;
    let mut var = Array1::<f64>::zeros(m.ncols());
    for row in m.outer_iter() {
        for (j, v) in row.iter().enumerate() {
            let d = v - mean[j];
            var[j] += d * d;
        }
    }
    let std = var.mapv(|v| (v / n).sqrt().max(MIN_STD));
    (mean, std)
}

impl Normalizer {
    /// No-op normalizer (used by tests and hand-built models).
    pub fn identity(state_dim: usize, action_dim: usize) -> Self {
        Normalizer {
            state_mean: Array1::zeros(state_dim),
            state_std: Array1::ones(state_dim),
            action_mean: Array1::zeros(action_dim),
            action_std: Array1::ones(action_dim),
            delta_mean: Array1::zeros(state_dim),
            delta_std: Array1::ones(state_dim),
        }
    }

    /// Fits per-dimension statistics from every tuple in the dataset.
    pub fn fit(dataset: &Dataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot fit a normalizer on an empty dataset".into(),
            ));
        }
        let inputs = dataset.inputs();
        let states = inputs.slice(ndarray::s![.., ..dataset.state_dim()]);
        let actions = inputs.slice(ndarray::s![.., dataset.state_dim()..]);
        let deltas = dataset.deltas();
        let (state_mean, state_std) = column_stats(&states);
        let (action_mean, action_std) = column_stats(&actions);
        let (delta_mean, delta_std) = column_stats(&deltas.view());
        Ok(Normalizer {
            state_mean,
            state_std,
            action_mean,
            action_std,
            delta_mean,
            delta_std,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_mean.len()
    }

    pub fn action_dim(&self) -> usize {
        self.action_mean.len()
    }

    /// Standardizes a raw `(s, a)` input batch into one row-major matrix.
    pub fn normalize_inputs(&self, states: &ArrayView2<f64>, actions: &ArrayView2<f64>) -> Array2<f64> {
        let (n, s, a) = (states.nrows(), self.state_dim(), self.action_dim());
        let mut out = Array2::zeros((n, s + a));
        for i in 0..n {
            for j in 0..s {
                out[[i, j]] = (states[[i, j]] - self.state_mean[j]) / self.state_std[j];
            }
            for j in 0..a {
                out[[i, s + j]] = (actions[[i, j]] - self.action_mean[j]) / self.action_std[j];
            }
        }
        out
    }

    pub fn normalize_states(&self, states: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = states.to_owned();
        for mut row in out.outer_iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.state_mean[j]) / self.state_std[j];
            }
        }
        out
    }

    pub fn normalize_delta_row(&self, delta: &ArrayView1<f64>) -> Array1<f64> {
        let mut out = delta.to_owned();
        for (j, v) in out.iter_mut().enumerate() {
            *v = (*v - self.delta_mean[j]) / self.delta_std[j];
        }
        out
    }

    /// Maps standardized deltas back to raw state units.
    pub fn denormalize_deltas(&self, deltas: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = deltas.to_owned();
        for mut row in out.outer_iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.delta_std[j] + self.delta_mean[j];
            }
        }
        out
    }

    pub fn is_identity(&self) -> bool {
        let ones = |a: &Array1<f64>| a.iter().all(|&v| v == 1.0);
        let zeros = |a: &Array1<f64>| a.iter().all(|&v| v == 0.0);
        zeros(&self.state_mean)
            && ones(&self.state_std)
            && zeros(&self.action_mean)
            && ones(&self.action_std)
            && zeros(&self.delta_mean)
            && ones(&self.delta_std)
    }
}
