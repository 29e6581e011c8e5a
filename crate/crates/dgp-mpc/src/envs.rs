//! Analytic benchmark environments: a swing-up cartpole with a hard wall
//! at each end of the rail, a planar two-link reacher with Gaussian
//! targets, and the half-cheetah shaped-reward formula as a pure function.
//!
//! All step functions integrate with RK4 under a zero-order hold on the
//! action and are fully deterministic.

use crate::error::{Error, Result};
use crate::rng::stream;
use ndarray::{array, Array1, ArrayView1};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Common control-environment interface used by the harness.
pub trait Environment: Send + Sync {
    fn name(&self) -> &'static str;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn action_low(&self) -> Array1<f64>;
    fn action_high(&self) -> Array1<f64>;
    /// Control steps per episode.
    fn task_horizon(&self) -> usize;
    fn reset(&self, rng: &mut ChaCha8Rng) -> Array1<f64>;
    fn step(&self, state: &ArrayView1<f64>, action: &ArrayView1<f64>) -> Result<Array1<f64>>;
    /// Reward of arriving in `next_state` after applying `action`.
    fn reward(&self, next_state: &ArrayView1<f64>, action: &ArrayView1<f64>) -> f64;
}

/// Instantiates an environment from its CLI name.
pub fn env_from_name(name: &str) -> Result<Box<dyn Environment>> {
    match name {
        "cartpole-modified" => Ok(Box::new(CartpoleEnv::modified())),
        "cartpole-center" => Ok(Box::new(CartpoleEnv::centered())),
        "reacher" => Ok(Box::new(ReacherEnv::new(ReacherParams::default())?)),
        other => Err(Error::Config(format!(
            "unknown environment '{other}' (expected cartpole-modified|cartpole-center|reacher)"
        ))),
    }
}

fn check_finite(state: &ArrayView1<f64>, context: &str) -> Result<()> {
    if state.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidState(format!("non-finite state in {context}")));
    }
    Ok(())
}

/// Classic RK4 on a fixed-size state vector.
fn rk4<const N: usize>(f: impl Fn(&[f64; N]) -> [f64; N], y: &[f64; N], dt: f64) -> [f64; N] {
    let k1 = f(y);
    let mut y2 = *y;
    for i in 0..N {
        y2[i] = y[i] + 0.5 * dt * k1[i];
    }
    let k2 = f(&y2);
    for i in 0..N {
        y2[i] = y[i] + 0.5 * dt * k2[i];
    }
    let k3 = f(&y2);
    for i in 0..N {
        y2[i] = y[i] + dt * k3[i];
    }
    let k4 = f(&y2);
    let mut out = *y;
    for i in 0..N {
        out[i] = y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Where the cart starts an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StartMode {
    /// Against the left wall (contact-rich swing-up).
    AtEnd,
    /// Middle of the rail.
    AtCenter,
}

/// Cartpole physical constants and task geometry.
///
/// State layout: `[x, x_dot, phi, phi_dot]` with `phi` measured from
/// upright.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CartpoleParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub pole_half_length: f64,
    pub gravity: f64,
    pub rail_half_width: f64,
    pub dt: f64,
    pub force_limit: f64,
    pub start_mode: StartMode,
    /// Cart position the pole tip should balance above.
    pub goal_x: f64,
    /// Length scale of the tip-distance reward.
    pub reward_lengthscale: f64,
    pub action_cost_weight: f64,
    pub task_horizon: usize,
}

impl CartpoleParams {
    /// Contact-rich variant: start at the left wall, goal near it.
    pub fn modified() -> Self {
        let rail_half_width = 1.5;
        CartpoleParams {
            cart_mass: 1.0,
            pole_mass: 0.1,
            pole_half_length: 0.5,
            gravity: 9.81,
            rail_half_width,
            dt: 0.04,
            force_limit: 10.0,
            start_mode: StartMode::AtEnd,
            goal_x: -rail_half_width + 0.3,
            reward_lengthscale: 2.0,
            action_cost_weight: 0.001,
            task_horizon: 200,
        }
    }

    /// Unmodified variant: start and goal at the rail center.
    pub fn centered() -> Self {
        CartpoleParams {
            start_mode: StartMode::AtCenter,
            goal_x: 0.0,
            ..CartpoleParams::modified()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.goal_x.abs() > self.rail_half_width {
            return Err(Error::Config(format!(
                "goal_x {} outside the rail (half width {})",
                self.goal_x, self.rail_half_width
            )));
        }
        if !(self.dt > 0.0 && self.dt <= 0.05) {
            return Err(Error::Config(format!("dt must be in (0, 0.05], got {}", self.dt)));
        }
        Ok(())
    }
}

fn cartpole_derivatives(p: &CartpoleParams, force: f64, y: &[f64; 4]) -> [f64; 4] {
    let [_, x_dot, phi, phi_dot] = *y;
    let total_mass = p.cart_mass + p.pole_mass;
    let l = p.pole_half_length;
    let (sin_phi, cos_phi) = phi.sin_cos();
    let temp = (force + p.pole_mass * l * phi_dot * phi_dot * sin_phi) / total_mass;
    let denom = l * (4.0 / 3.0 - p.pole_mass * cos_phi * cos_phi / total_mass);
    let phi_acc = (p.gravity * sin_phi - cos_phi * temp) / denom;
    let x_acc = temp - p.pole_mass * l * phi_acc * cos_phi / total_mass;
    [x_dot, x_acc, phi_dot, phi_acc]
}

/// One cartpole transition: RK4 integration followed by an inelastic wall
/// clamp (position pinned to the wall, cart velocity zeroed; the pole
/// keeps swinging above the stopped cart).
pub fn cartpole_step(
    state: &ArrayView1<f64>,
    action: &ArrayView1<f64>,
    params: &CartpoleParams,
) -> Result<Array1<f64>> {
    check_finite(state, "cartpole_step")?;
    if state.len() != 4 || action.len() != 1 {
        return Err(Error::dim("cartpole_step", "state 4 / action 1", state.len()));
    }
    let force = action[0].clamp(-params.force_limit, params.force_limit);
    let y = [state[0], state[1], state[2], state[3]];
    let mut next = rk4(|y| cartpole_derivatives(params, force, y), &y, params.dt);
    if next[0].abs() > params.rail_half_width {
        next[0] = next[0].clamp(-params.rail_half_width, params.rail_half_width);
        next[1] = 0.0;
    }
    let out = array![next[0], next[1], next[2], next[3]];
    check_finite(&out.view(), "cartpole_step output")?;
    Ok(out)
}

/// Pole tip position `(x + 2l sin(phi), 2l cos(phi))`.
pub fn cartpole_tip(state: &ArrayView1<f64>, params: &CartpoleParams) -> (f64, f64) {
    let l2 = 2.0 * params.pole_half_length;
    (state[0] + l2 * state[2].sin(), l2 * state[2].cos())
}

/// Squared-exponential tip-distance reward minus a quadratic action cost.
pub fn cartpole_reward(
    state: &ArrayView1<f64>,
    action: &ArrayView1<f64>,
    params: &CartpoleParams,
) -> f64 {
    let (tip_x, tip_y) = cartpole_tip(state, params);
    let goal_y = 2.0 * params.pole_half_length;
    let d2 = (tip_x - params.goal_x).powi(2) + (tip_y - goal_y).powi(2);
    let ls2 = params.reward_lengthscale * params.reward_lengthscale;
    (-d2 / ls2).exp() - params.action_cost_weight * action[0] * action[0]
}

/// Cartpole behind the [`Environment`] interface.
#[derive(Debug, Clone)]
pub struct CartpoleEnv {
    pub params: CartpoleParams,
    name: &'static str,
}

impl CartpoleEnv {
    pub fn modified() -> Self {
        CartpoleEnv {
            params: CartpoleParams::modified(),
            name: "cartpole-modified",
        }
    }

    pub fn centered() -> Self {
        CartpoleEnv {
            params: CartpoleParams::centered(),
            name: "cartpole-center",
        }
    }
}

impl Environment for CartpoleEnv {
    fn name(&self) -> &'static str {
        self.name
    }

    fn state_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn action_low(&self) -> Array1<f64> {
        array![-self.params.force_limit]
    }

    fn action_high(&self) -> Array1<f64> {
        array![self.params.force_limit]
    }

    fn task_horizon(&self) -> usize {
        self.params.task_horizon
    }

    fn reset(&self, rng: &mut ChaCha8Rng) -> Array1<f64> {
        let n = |rng: &mut ChaCha8Rng, sd: f64| -> f64 {
            let e: f64 = rng.sample(StandardNormal);
            sd * e
        };
        let x = match self.params.start_mode {
            StartMode::AtEnd => -self.params.rail_half_width + 0.01,
            StartMode::AtCenter => n(rng, 0.01),
        };
        let x_dot = n(rng, 0.01);
        let phi = std::f64::consts::PI + n(rng, 0.01);
        let phi_dot = n(rng, 0.01);
        array![x, x_dot, phi, phi_dot]
    }

    fn step(&self, state: &ArrayView1<f64>, action: &ArrayView1<f64>) -> Result<Array1<f64>> {
        cartpole_step(state, action, &self.params)
    }

    fn reward(&self, next_state: &ArrayView1<f64>, action: &ArrayView1<f64>) -> f64 {
        cartpole_reward(next_state, action, &self.params)
    }
}

/// Total mechanical energy of the cartpole (test oracle for drift checks).
pub fn cartpole_energy(state: &ArrayView1<f64>, params: &CartpoleParams) -> f64 {
    let [x_dot, phi, phi_dot] = [state[1], state[2], state[3]];
    let (m_c, m_p, l) = (params.cart_mass, params.pole_mass, params.pole_half_length);
    0.5 * (m_c + m_p) * x_dot * x_dot
        + m_p * l * x_dot * phi_dot * phi.cos()
        + (2.0 / 3.0) * m_p * l * l * phi_dot * phi_dot
        + m_p * params.gravity * l * phi.cos()
}

/// Planar two-link reacher constants.
///
/// State layout: `[q1, q2, q1_dot, q2_dot, target_x, target_y]` with
/// absolute/relative joint angles and the target carried in the state.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ReacherParams {
    pub link_lengths: [f64; 2],
    pub dt: f64,
    pub torque_limit: f64,
    pub target_mean: [f64; 2],
    pub target_cov_diag: [f64; 2],
    pub action_cost_weight: f64,
    pub damping: f64,
    pub task_horizon: usize,
}

impl Default for ReacherParams {
    fn default() -> Self {
        ReacherParams {
            link_lengths: [0.2, 0.2],
            dt: 0.02,
            torque_limit: 1.0,
            target_mean: [0.35, 0.05],
            target_cov_diag: [0.05 * 0.05, 0.05 * 0.05],
            action_cost_weight: 0.01,
            damping: 0.1,
            task_horizon: 150,
        }
    }
}

impl ReacherParams {
    pub fn reach_radius(&self) -> f64 {
        self.link_lengths[0] + self.link_lengths[1]
    }
}

fn reacher_derivatives(p: &ReacherParams, torque: [f64; 2], y: &[f64; 4]) -> [f64; 4] {
    let [_, q2, dq1, dq2] = *y;
    let (l1, l2) = (p.link_lengths[0], p.link_lengths[1]);
    let (m1, m2) = (1.0, 1.0);
    let c2 = q2.cos();
    let s2 = q2.sin();
    // Unit point masses at the link ends, no gravity (top-down arm).
    let m11 = (m1 + m2) * l1 * l1 + m2 * l2 * l2 + 2.0 * m2 * l1 * l2 * c2;
    let m12 = m2 * l2 * l2 + m2 * l1 * l2 * c2;
    let m22 = m2 * l2 * l2;
    let h = m2 * l1 * l2 * s2;
    let c_vec = [-h * dq2 * (2.0 * dq1 + dq2), h * dq1 * dq1];
    let rhs = [
        torque[0] - p.damping * dq1 - c_vec[0],
        torque[1] - p.damping * dq2 - c_vec[1],
    ];
    let det = m11 * m22 - m12 * m12;
    let ddq1 = (m22 * rhs[0] - m12 * rhs[1]) / det;
    let ddq2 = (-m12 * rhs[0] + m11 * rhs[1]) / det;
    [dq1, dq2, ddq1, ddq2]
}

/// One reacher transition (RK4 on the arm, target carried unchanged).
pub fn reacher_step(
    state: &ArrayView1<f64>,
    action: &ArrayView1<f64>,
    params: &ReacherParams,
) -> Result<Array1<f64>> {
    check_finite(state, "reacher_step")?;
    if state.len() != 6 || action.len() != 2 {
        return Err(Error::dim("reacher_step", "state 6 / action 2", state.len()));
    }
    let tq = [
        action[0].clamp(-params.torque_limit, params.torque_limit),
        action[1].clamp(-params.torque_limit, params.torque_limit),
    ];
    let y = [state[0], state[1], state[2], state[3]];
    let next = rk4(|y| reacher_derivatives(params, tq, y), &y, params.dt);
    let out = array![next[0], next[1], next[2], next[3], state[4], state[5]];
    check_finite(&out.view(), "reacher_step output")?;
    Ok(out)
}

/// End-effector position from forward kinematics.
pub fn reacher_effector(state: &ArrayView1<f64>, params: &ReacherParams) -> (f64, f64) {
    let (l1, l2) = (params.link_lengths[0], params.link_lengths[1]);
    let q1 = state[0];
    let q12 = state[0] + state[1];
    (l1 * q1.cos() + l2 * q12.cos(), l1 * q1.sin() + l2 * q12.sin())
}

/// Negative effector-to-target distance minus a quadratic torque cost.
pub fn reacher_reward(
    state: &ArrayView1<f64>,
    action: &ArrayView1<f64>,
    params: &ReacherParams,
) -> f64 {
    let (ex, ey) = reacher_effector(state, params);
    let dist = ((ex - state[4]).powi(2) + (ey - state[5]).powi(2)).sqrt();
    let cost = params.action_cost_weight * (action[0] * action[0] + action[1] * action[1]);
    -dist - cost
}

/// Rejection-samples a reachable target from the Gaussian target
/// distribution.
pub fn sample_reacher_target(params: &ReacherParams, rng: &mut ChaCha8Rng) -> Result<[f64; 2]> {
    let radius = params.reach_radius();
    for _ in 0..1000 {
        let ex: f64 = rng.sample(StandardNormal);
        let ey: f64 = rng.sample(StandardNormal);
        let tx = params.target_mean[0] + params.target_cov_diag[0].sqrt() * ex;
        let ty = params.target_mean[1] + params.target_cov_diag[1].sqrt() * ey;
        if (tx * tx + ty * ty).sqrt() <= radius {
            return Ok([tx, ty]);
        }
    }
    Err(Error::Config(format!(
        "reacher target distribution unreachable: no sample within radius {radius} after 1000 draws"
    )))
}

/// Reacher behind the [`Environment`] interface.
#[derive(Debug, Clone)]
pub struct ReacherEnv {
    pub params: ReacherParams,
}

impl ReacherEnv {
    pub fn new(params: ReacherParams) -> Result<Self> {
        // Surface unreachable target configurations at construction.
        let mut probe = stream(0, &[101]);
        sample_reacher_target(&params, &mut probe)?;
        Ok(ReacherEnv { params })
    }
}

impl Environment for ReacherEnv {
    fn name(&self) -> &'static str {
        "reacher"
    }

    fn state_dim(&self) -> usize {
        6
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn action_low(&self) -> Array1<f64> {
        array![-self.params.torque_limit, -self.params.torque_limit]
    }

    fn action_high(&self) -> Array1<f64> {
        array![self.params.torque_limit, self.params.torque_limit]
    }

    fn task_horizon(&self) -> usize {
        self.params.task_horizon
    }

    fn reset(&self, rng: &mut ChaCha8Rng) -> Array1<f64> {
        let q1 = 0.1 * rng.sample::<f64, _>(StandardNormal);
        let q2 = 0.1 * rng.sample::<f64, _>(StandardNormal);
        let target = sample_reacher_target(&self.params, rng)
            .expect("validated at construction");
        array![q1, q2, 0.0, 0.0, target[0], target[1]]
    }

    fn step(&self, state: &ArrayView1<f64>, action: &ArrayView1<f64>) -> Result<Array1<f64>> {
        reacher_step(state, action, &self.params)
    }

    fn reward(&self, next_state: &ArrayView1<f64>, action: &ArrayView1<f64>) -> f64 {
        reacher_reward(next_state, action, &self.params)
    }
}

/// Kinetic energy of the arm (dissipation-test oracle).
pub fn reacher_kinetic_energy(state: &ArrayView1<f64>, params: &ReacherParams) -> f64 {
    let y = [state[0], state[1], state[2], state[3]];
    let (l1, l2) = (params.link_lengths[0], params.link_lengths[1]);
    let (m1, m2) = (1.0, 1.0);
    let c2 = y[1].cos();
    let m11 = (m1 + m2) * l1 * l1 + m2 * l2 * l2 + 2.0 * m2 * l1 * l2 * c2;
    let m12 = m2 * l2 * l2 + m2 * l1 * l2 * c2;
    let m22 = m2 * l2 * l2;
    0.5 * (m11 * y[2] * y[2] + 2.0 * m12 * y[2] * y[3] + m22 * y[3] * y[3])
}

/// Half-cheetah risk-shaped reward `(shaped, raw)`:
/// `shaped = v - floor(|back_angle| / (pi/9)) - 0.1 * sum(a^2)` and
/// `raw` drops the back-angle penalty (reported rewards use `raw`).
pub fn cheetah_shaped_reward(next_state: &ArrayView1<f64>, action: &ArrayView1<f64>) -> (f64, f64) {
    let velocity = next_state[0];
    let back_angle = next_state[2];
    let action_cost = 0.1 * action.iter().map(|a| a * a).sum::<f64>();
    let raw = velocity - action_cost;
    let shaped = raw - (back_angle.abs() / (std::f64::consts::PI / 9.0)).floor();
    (shaped, raw)
}
