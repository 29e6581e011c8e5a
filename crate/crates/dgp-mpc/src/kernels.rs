//! Stationary ARD kernels and the jitter-stabilized Cholesky used by every
//! GP layer.
//!
//! All families are parameterized by the scaled distance
//! `r^2 = sum_d ((x_d - y_d) / l_d)^2` with one lengthscale per input
//! dimension and a shared signal variance. Hyperparameters are stored in
//! log-space so gradient updates keep them positive.

use crate::error::{Error, Result};
use crate::linalg;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

const SQRT3: f64 = 1.732_050_807_568_877_2;
const SQRT5: f64 = 2.236_067_977_499_79;

/// Jitter for a layer starts at `JITTER_BASE_FACTOR * signal_variance`; the
/// escalation cap is `JITTER_CAP_RATIO` times the base.
pub const JITTER_BASE_FACTOR: f64 = 1e-6;
pub const JITTER_CAP_RATIO: f64 = 1e4;

/// Stationary kernel family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Sexp,
    Matern52,
    Matern32,
    Matern12,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 4] = [
        KernelFamily::Sexp,
        KernelFamily::Matern52,
        KernelFamily::Matern32,
        KernelFamily::Matern12,
    ];
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            KernelFamily::Sexp => "sexp",
            KernelFamily::Matern52 => "matern52",
            KernelFamily::Matern32 => "matern32",
            KernelFamily::Matern12 => "matern12",
        };
        f.write_str(s)
    }
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sexp" | "rbf" | "se" => Ok(KernelFamily::Sexp),
            "matern52" | "m52" => Ok(KernelFamily::Matern52),
            "matern32" | "m32" => Ok(KernelFamily::Matern32),
            "matern12" | "m12" | "exponential" => Ok(KernelFamily::Matern12),
            other => Err(Error::Config(format!(
                "unknown kernel family '{other}' (expected sexp|matern52|matern32|matern12)"
            ))),
        }
    }
}

/// Kernel family plus ARD lengthscales and signal variance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelSpec {
    family: KernelFamily,
    log_lengthscales: Array1<f64>,
    log_signal_variance: f64,
}

impl KernelSpec {
    /// Builds a spec from raw (positive) hyperparameters.
    pub fn new(family: KernelFamily, lengthscales: &[f64], signal_variance: f64) -> Result<Self> {
        if lengthscales.is_empty() {
            return Err(Error::InvalidArgument(
                "kernel needs at least one lengthscale".into(),
            ));
        }
        for (d, &l) in lengthscales.iter().enumerate() {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "lengthscale[{d}] must be positive and finite, got {l}"
                )));
            }
        }
        if !(signal_variance.is_finite() && signal_variance > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "signal variance must be positive and finite, got {signal_variance}"
            )));
        }
        Ok(KernelSpec {
            family,
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
            log_signal_variance: signal_variance.ln(),
        })
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    /// Input dimensionality (one lengthscale per dimension).
    pub fn input_dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn lengthscales(&self) -> Array1<f64> {
        self.log_lengthscales.mapv(f64::exp)
    }

    pub fn signal_variance(&self) -> f64 {
        self.log_signal_variance.exp()
    }

    pub fn log_lengthscales(&self) -> &Array1<f64> {
        &self.log_lengthscales
    }

    pub fn log_signal_variance(&self) -> f64 {
        self.log_signal_variance
    }

    /// Applies an additive update in log-space (gradient steps land here).
    pub fn update_logs(&mut self, dlog_lengthscales: &ArrayView1<f64>, dlog_signal_variance: f64) {
        self.log_lengthscales += dlog_lengthscales;
        self.log_signal_variance += dlog_signal_variance;
    }

    /// Default jitter for matrices built from this kernel.
    pub fn base_jitter(&self) -> f64 {
        JITTER_BASE_FACTOR * self.signal_variance()
    }
}

/// Kernel value as a function of the squared scaled distance.
pub(crate) fn eval_r2(family: KernelFamily, sigma2: f64, r2: f64) -> f64 {
    let r2 = r2.max(0.0);
    match family {
        KernelFamily::Sexp => sigma2 * (-0.5 * r2).exp(),
        KernelFamily::Matern52 => {
            let r = r2.sqrt();
            sigma2 * (1.0 + SQRT5 * r + 5.0 * r2 / 3.0) * (-SQRT5 * r).exp()
        }
        KernelFamily::Matern32 => {
            let r = r2.sqrt();
            sigma2 * (1.0 + SQRT3 * r) * (-SQRT3 * r).exp()
        }
        KernelFamily::Matern12 => sigma2 * (-r2.sqrt()).exp(),
    }
}

/// Derivative of the kernel with respect to `r^2`.
///
/// The Matérn-1/2 form has a cusp at zero distance; its derivative is
/// returned as 0 there (subgradient), which keeps ARD gradients finite when
/// a point coincides with an inducing input.
pub(crate) fn dk_dr2(family: KernelFamily, sigma2: f64, r2: f64) -> f64 {
    let r2 = r2.max(0.0);
    match family {
        KernelFamily::Sexp => -0.5 * sigma2 * (-0.5 * r2).exp(),
        KernelFamily::Matern52 => {
            let r = r2.sqrt();
            -sigma2 * (5.0 / 6.0) * (1.0 + SQRT5 * r) * (-SQRT5 * r).exp()
        }
        KernelFamily::Matern32 => -sigma2 * 1.5 * (-SQRT3 * r2.sqrt()).exp(),
        KernelFamily::Matern12 => {
            let r = r2.sqrt();
            if r < 1e-300 {
                0.0
            } else {
                -sigma2 * (-r).exp() / (2.0 * r)
            }
        }
    }
}

fn check_dim(spec: &KernelSpec, got: usize, context: &str) -> Result<()> {
    if got != spec.input_dim() {
        return Err(Error::dim(context, spec.input_dim(), got));
    }
    Ok(())
}

/// Evaluates `k(x, y)`.
pub fn kernel_eval(spec: &KernelSpec, x: &ArrayView1<f64>, y: &ArrayView1<f64>) -> Result<f64> {
    check_dim(spec, x.len(), "kernel_eval x")?;
    check_dim(spec, y.len(), "kernel_eval y")?;
    let ls = spec.lengthscales();
    let mut r2 = 0.0;
    for d in 0..x.len() {
        let s = (x[d] - y[d]) / ls[d];
        r2 += s * s;
    }
    Ok(eval_r2(spec.family, spec.signal_variance(), r2))
}

/// Standard-layout view of `a`, copying only when the input layout demands
/// it (row slices feed the tight loops below).
fn standard<'a>(a: &ArrayView2<'a, f64>, buf: &'a mut Option<Array2<f64>>) -> ArrayView2<'a, f64> {
    if a.is_standard_layout() {
        a.reborrow()
    } else {
        *buf = Some(a.as_standard_layout().into_owned());
        buf.as_ref().unwrap().view()
    }
}

/// Squared scaled distances between all row pairs of `x` and `y`.
pub(crate) fn scaled_sqdist(
    spec: &KernelSpec,
    x: &ArrayView2<f64>,
    y: &ArrayView2<f64>,
) -> Array2<f64> {
    let (mut bx, mut by) = (None, None);
    let x = standard(x, &mut bx);
    let y = standard(y, &mut by);
    let inv_ls: Vec<f64> = spec.lengthscales().iter().map(|l| 1.0 / l).collect();
    let (n, m, d) = (x.nrows(), y.nrows(), x.ncols());
    let mut out = Array2::<f64>::zeros((n, m));
    for i in 0..n {
        let xi = x.row(i);
        let xi = xi.as_slice().expect("standard layout");
        for j in 0..m {
            let yj = y.row(j);
            let yj = yj.as_slice().expect("standard layout");
            let mut r2 = 0.0;
            for k in 0..d {
                let s = (xi[k] - yj[k]) * inv_ls[k];
                r2 += s * s;
            }
            out[[i, j]] = r2;
        }
    }
    out
}

/// Cross-covariance matrix `K[i, j] = k(x_i, y_j)`.
pub fn kernel_matrix(
    spec: &KernelSpec,
    x: &ArrayView2<f64>,
    y: &ArrayView2<f64>,
) -> Result<Array2<f64>> {
    check_dim(spec, x.ncols(), "kernel_matrix x columns")?;
    check_dim(spec, y.ncols(), "kernel_matrix y columns")?;
    let sigma2 = spec.signal_variance();
    let mut k = scaled_sqdist(spec, x, y);
    k.mapv_inplace(|r2| eval_r2(spec.family, sigma2, r2));
    Ok(k)
}

/// Symmetric covariance matrix `K[i, j] = k(x_i, x_j)` (half the pair
/// evaluations of [`kernel_matrix`], exact signal variance on the diagonal).
pub fn kernel_gram(spec: &KernelSpec, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
    check_dim(spec, x.ncols(), "kernel_gram columns")?;
    let mut bx = None;
    let x = standard(x, &mut bx);
    let inv_ls: Vec<f64> = spec.lengthscales().iter().map(|l| 1.0 / l).collect();
    let sigma2 = spec.signal_variance();
    let (n, d) = (x.nrows(), x.ncols());
    let mut k = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        k[[i, i]] = sigma2;
        let xi = x.row(i);
        let xi = xi.as_slice().expect("standard layout");
        for j in 0..i {
            let xj = x.row(j);
            let xj = xj.as_slice().expect("standard layout");
            let mut r2 = 0.0;
            for t in 0..d {
                let s = (xi[t] - xj[t]) * inv_ls[t];
                r2 += s * s;
            }
            let v = eval_r2(spec.family, sigma2, r2);
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    Ok(k)
}

/// Lower Cholesky factor of `K + jitter * I` plus the jitter that made it
/// succeed.
#[derive(Debug, Clone)]
pub struct CholFactor {
    pub l: Array2<f64>,
    pub jitter_applied: f64,
}

impl CholFactor {
    pub fn dim(&self) -> usize {
        self.l.nrows()
    }
}

/// Factorizes a symmetric covariance matrix, escalating jitter on failure.
///
/// The jitter starts at `base_jitter` and multiplies by 10 per retry up to
/// `JITTER_CAP_RATIO * base_jitter`. Asymmetry beyond a 1e-12 relative
/// tolerance is rejected before any factorization attempt.
pub fn stabilized_cholesky(k: &ArrayView2<f64>, base_jitter: f64) -> Result<CholFactor> {
    let n = k.nrows();
    if n != k.ncols() {
        return Err(Error::dim(
            "stabilized_cholesky",
            format!("square, got {n} rows"),
            format!("{} cols", k.ncols()),
        ));
    }
    if !(base_jitter.is_finite() && base_jitter > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "base_jitter must be positive, got {base_jitter}"
        )));
    }
    let scale = linalg::max_abs(k).max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in 0..i {
            if (k[[i, j]] - k[[j, i]]).abs() > 1e-12 * scale {
                return Err(Error::InvalidArgument(format!(
                    "matrix asymmetric at ({i},{j}): {} vs {}",
                    k[[i, j]],
                    k[[j, i]]
                )));
            }
        }
    }

    let cap = base_jitter * JITTER_CAP_RATIO;
    let mut jitter = base_jitter;
    loop {
        let mut kj = k.to_owned();
        for i in 0..n {
            kj[[i, i]] += jitter;
        }
        if let Some(l) = linalg::cholesky(&kj.view()) {
            return Ok(CholFactor {
                l,
                jitter_applied: jitter,
            });
        }
        if jitter >= cap {
            return Err(Error::Numerical(format!(
                "cholesky failed for {n}x{n} matrix at jitter cap {jitter:.3e}"
            )));
        }
        jitter = (jitter * 10.0).min(cap);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::Rng;

    fn spec(family: KernelFamily, ls: &[f64], s2: f64) -> KernelSpec {
        KernelSpec::new(family, ls, s2).unwrap()
    }

    #[test]
    fn rejects_nonpositive_hyperparameters() {
        assert!(KernelSpec::new(KernelFamily::Sexp, &[0.0], 1.0).is_err());
        assert!(KernelSpec::new(KernelFamily::Sexp, &[1.0], -1.0).is_err());
        assert!(KernelSpec::new(KernelFamily::Sexp, &[], 1.0).is_err());
    }

    #[test]
    fn zero_distance_returns_signal_variance() {
        let s = spec(KernelFamily::Sexp, &[0.7, 2.0], 1.3);
        let x = array![0.4, -0.2];
        assert_eq!(kernel_eval(&s, &x.view(), &x.view()).unwrap(), 1.3);
        let m = spec(KernelFamily::Matern32, &[2.0], 1.5);
        let z = array![0.0];
        assert_eq!(kernel_eval(&m, &z.view(), &z.view()).unwrap(), 1.5);
    }

    /// Closed-form scalar check: Matérn-1/2 at unit scaled distance.
    #[test]
    fn matern12_matches_closed_form() {
        let s = spec(KernelFamily::Matern12, &[1.0], 1.0);
        let v = kernel_eval(&s, &array![0.0].view(), &array![1.0].view()).unwrap();
        assert_abs_diff_eq!(v, (-1.0_f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn ard_weights_distances_per_dimension() {
        let s = spec(KernelFamily::Sexp, &[1.0, 10.0], 1.0);
        let x = array![0.0, 0.0];
        let k1 = kernel_eval(&s, &x.view(), &array![1.0, 0.0].view()).unwrap();
        let k2 = kernel_eval(&s, &x.view(), &array![0.0, 1.0].view()).unwrap();
        assert!(k1 < k2);
    }

    #[test]
    fn kernel_eval_dimension_mismatch_errors() {
        let s = spec(KernelFamily::Sexp, &[1.0, 1.0], 1.0);
        let err = kernel_eval(&s, &array![0.0].view(), &array![0.0, 1.0].view());
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn kernel_matrix_single_point() {
        let s = spec(KernelFamily::Matern52, &[1.0], 2.5);
        let x = array![[0.3]];
        let k = kernel_matrix(&s, &x.view(), &x.view()).unwrap();
        assert_eq!(k.shape(), &[1, 1]);
        assert_abs_diff_eq!(k[[0, 0]], 2.5, epsilon = 1e-12);
    }

    #[test]
    fn kernel_matrix_duplicate_rows() {
        let s = spec(KernelFamily::Sexp, &[1.0, 1.0], 0.8);
        let x = array![[1.0, 2.0], [1.0, 2.0]];
        let k = kernel_matrix(&s, &x.view(), &x.view()).unwrap();
        for v in k.iter() {
            assert_abs_diff_eq!(*v, 0.8, epsilon = 1e-12);
        }
    }

    #[test]
    fn gram_matches_cross_matrix_and_is_symmetric() {
        let mut rng = crate::rng::stream(11, &[1]);
        let x = Array2::from_shape_fn((5, 3), |_| rng.random::<f64>() * 4.0 - 2.0);
        for family in KernelFamily::ALL {
            let s = spec(family, &[0.8, 1.4, 2.2], 1.7);
            let g = kernel_gram(&s, &x.view()).unwrap();
            let c = kernel_matrix(&s, &x.view(), &x.view()).unwrap();
            for (a, b) in g.iter().zip(c.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
            for i in 0..5 {
                for j in 0..5 {
                    assert!((g[[i, j]] - g[[j, i]]).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn family_ordering_at_moderate_distance() {
        // Smoother families dominate in the near field (the ordering
        // reverses past r ~ 2 where the rough families' heavier tails win).
        for &r in &[0.05_f64, 0.3, 0.6, 1.0, 1.5] {
            let r2 = r * r;
            let se = eval_r2(KernelFamily::Sexp, 1.0, r2);
            let m52 = eval_r2(KernelFamily::Matern52, 1.0, r2);
            let m32 = eval_r2(KernelFamily::Matern32, 1.0, r2);
            let m12 = eval_r2(KernelFamily::Matern12, 1.0, r2);
            assert!(se >= m52 && m52 >= m32 && m32 >= m12, "ordering at r={r}");
        }
        for family in KernelFamily::ALL {
            assert_abs_diff_eq!(eval_r2(family, 1.0, 0.0), 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn dk_dr2_matches_finite_differences() {
        for family in KernelFamily::ALL {
            for &r2 in &[0.04_f64, 0.5, 1.9, 6.0] {
                let h = 1e-7;
                let fd = (eval_r2(family, 1.3, r2 + h) - eval_r2(family, 1.3, r2 - h)) / (2.0 * h);
                let an = dk_dr2(family, 1.3, r2);
                assert_abs_diff_eq!(fd, an, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn stabilized_cholesky_identity() {
        let k = Array2::<f64>::eye(3);
        let f = stabilized_cholesky(&k.view(), 1e-6).unwrap();
        assert_eq!(f.jitter_applied, 1e-6);
        for i in 0..3 {
            assert_abs_diff_eq!(f.l[[i, i]], (1.0 + 1e-6_f64).sqrt(), epsilon = 1e-15);
        }
    }

    /// Rank-1 matrix with a base jitter below the pivot floor: the first
    /// attempts must fail and escalation must kick in. The eigenstructure of
    /// v v^T (one eigenvalue |v|^2, rest zero) gives the reconstruction
    /// bound |L L^T - K|_F <= jitter * sqrt(3) up to rounding.
    #[test]
    fn stabilized_cholesky_escalates_on_rank_deficient_input() {
        let v = array![1.0, 2.0, -1.5];
        let mut k = Array2::<f64>::zeros((3, 3));
        for i in 0..3 {
            for j in 0..3 {
                k[[i, j]] = v[i] * v[j];
            }
        }
        let base = 1e-17;
        let f = stabilized_cholesky(&k.view(), base).unwrap();
        assert!(f.jitter_applied > base, "escalation did not trigger");
        let recon = f.l.dot(&f.l.t());
        let mut frob2 = 0.0;
        for (a, b) in recon.iter().zip(k.iter()) {
            frob2 += (a - b) * (a - b);
        }
        assert!(frob2.sqrt() <= f.jitter_applied * 3.0_f64.sqrt() * (1.0 + 1e-6));
    }

    #[test]
    fn stabilized_cholesky_rejects_asymmetry() {
        let k = array![[1.0, 0.5], [0.2, 1.0]];
        assert!(matches!(
            stabilized_cholesky(&k.view(), 1e-6),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn stabilized_cholesky_fails_at_cap_for_garbage() {
        let k = array![[f64::NAN, 0.0], [0.0, 1.0]];
        assert!(matches!(
            stabilized_cholesky(&k.view(), 1e-6),
            Err(Error::Numerical(_))
        ));
    }

    proptest! {
        /// Gram matrix plus 1e-6 I stays factorizable for every family and
        /// random ARD scales (positive-definiteness via factorization).
        #[test]
        fn gram_plus_jitter_is_positive_definite(
            seed in 0u64..200,
            fam_idx in 0usize..4,
            n in 1usize..18,
            d in 1usize..5,
        ) {
            let mut rng = crate::rng::stream(seed, &[99]);
            let ls: Vec<f64> = (0..d).map(|_| 10f64.powf(rng.random::<f64>() * 2.0 - 1.0)).collect();
            let s2 = 10f64.powf(rng.random::<f64>() * 2.0 - 1.0);
            let s = spec(KernelFamily::ALL[fam_idx], &ls, s2);
            let x = Array2::from_shape_fn((n, d), |_| rng.random::<f64>() * 6.0 - 3.0);
            let mut k = kernel_gram(&s, &x.view()).unwrap();
            for i in 0..n {
                k[[i, i]] += 1e-6;
            }
            prop_assert!(linalg::cholesky(&k.view()).is_some());
        }

        /// k(x, y) = k(y, x) within 1e-14 absolute.
        #[test]
        fn kernel_eval_is_exchangeable(seed in 0u64..500, fam_idx in 0usize..4) {
            let mut rng = crate::rng::stream(seed, &[7]);
            let d = 1 + (seed as usize % 4);
            let ls: Vec<f64> = (0..d).map(|_| 0.2 + rng.random::<f64>() * 3.0).collect();
            let s = spec(KernelFamily::ALL[fam_idx], &ls, 0.5 + rng.random::<f64>());
            let x: Array1<f64> = (0..d).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let y: Array1<f64> = (0..d).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let kxy = kernel_eval(&s, &x.view(), &y.view()).unwrap();
            let kyx = kernel_eval(&s, &y.view(), &x.view()).unwrap();
            prop_assert!((kxy - kyx).abs() <= 1e-14);
        }

        /// Scaling inputs and lengthscales together leaves the kernel
        /// unchanged to 1e-12 relative.
        #[test]
        fn kernel_is_scale_invariant(seed in 0u64..500, fam_idx in 0usize..4, scale in 0.1f64..10.0) {
            let mut rng = crate::rng::stream(seed, &[13]);
            let d = 3;
            let ls: Vec<f64> = (0..d).map(|_| 0.2 + rng.random::<f64>() * 3.0).collect();
            let s2 = 0.5 + rng.random::<f64>();
            let s = spec(KernelFamily::ALL[fam_idx], &ls, s2);
            let scaled_ls: Vec<f64> = ls.iter().map(|l| l * scale).collect();
            let s_scaled = spec(KernelFamily::ALL[fam_idx], &scaled_ls, s2);
            let x: Array1<f64> = (0..d).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let y: Array1<f64> = (0..d).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let k1 = kernel_eval(&s, &x.view(), &y.view()).unwrap();
            let xs = x.mapv(|v| v * scale);
            let ys = y.mapv(|v| v * scale);
            let k2 = kernel_eval(&s_scaled, &xs.view(), &ys.view()).unwrap();
            prop_assert!((k1 - k2).abs() <= 1e-12 * k1.abs().max(1e-30));
        }
    }
}
