//! MPC with the true cartpole dynamics (no learned model): swing the pole
//! up from the wall and hold it over the goal.
//!
//! ```bash
//! cargo run --release --example oracle_swingup [seed]
//! ```

use dgp_mpc::envs::{CartpoleEnv, Environment};
use dgp_mpc::planning::{plan, shift_proposal, CemProposal, FnSampler, PlannerConfig};
use dgp_mpc::rng::{scope, stream};

fn main() {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let getf = |name: &str, default: f64| -> f64 {
        std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
    };
    let mut env = if std::env::args().nth(2).as_deref() == Some("center") {
        CartpoleEnv::centered()
    } else {
        CartpoleEnv::modified()
    };
    env.params.reward_lengthscale = getf("LC", env.params.reward_lengthscale);
    env.params.action_cost_weight = getf("WA", env.params.action_cost_weight);
    env.params.dt = getf("DT", env.params.dt);
    let config = PlannerConfig {
        horizon: getf("H", 30.0) as usize,
        num_sequences: getf("K", 300.0) as usize,
        num_particles: 1,
        cem_iterations: getf("ITERS", 5.0) as usize,
        elite_fraction: 0.1,
        actions_per_replan: 1,
        include_noise: false,
    };
    let sampler = FnSampler::new(env.state_dim(), |s: &ndarray::ArrayView1<f64>, a: &ndarray::ArrayView1<f64>| {
        env.step(s, a)
    });
    let reward = |next: &ndarray::ArrayView1<f64>, a: &ndarray::ArrayView1<f64>| env.reward(next, a);

    let mut rng = stream(seed, &[scope::ENV]);
    let mut state = env.reset(&mut rng);
    let mut proposal = CemProposal::initial(config.horizon, env.action_low(), env.action_high());
    let mut total_reward = 0.0;
    let mut upright_tail = 0;
    for t in 0..env.task_horizon() {
        let mut prng = stream(seed, &[scope::PLAN, t as u64]);
        let outcome = plan(&sampler, &state.view(), &proposal, &config, &reward, &mut prng).unwrap();
        let action = outcome.actions.row(0).to_owned();
        let next = env.step(&state.view(), &action.view()).unwrap();
        total_reward += env.reward(&next.view(), &action.view());
        state = next;
        proposal = shift_proposal(&outcome.proposal, 1);
        let wrapped = (state[2] + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI)
            - std::f64::consts::PI;
        if t >= 150 && wrapped.abs() <= 0.2 {
            upright_tail += 1;
        }

    }
    println!("seed {seed}: episode reward {total_reward:.2}, upright on {upright_tail}/50 tail steps");
}
