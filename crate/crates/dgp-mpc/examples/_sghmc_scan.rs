use dgp_mpc::inference::{sghmc_update, SghmcConfig};
use dgp_mpc::rng::stream;
use ndarray::array;

fn main() {
    let prec = array![[4.0 / 3.0, -2.0 / 3.0], [-2.0 / 3.0, 4.0 / 3.0]];
    let target = [[1.0, 0.5], [0.5, 1.0]];
    for &(eps, c, thin) in &[
        (0.1, 1.0, 5usize), (0.1, 1.0, 10), (0.15, 1.0, 5), (0.15, 1.0, 10),
        (0.2, 1.0, 5), (0.2, 0.5, 5), (0.15, 0.5, 10), (0.2, 1.5, 5),
    ] {
        let mut worst_mean_all: f64 = 0.0;
        let mut worst_rel_all: f64 = 0.0;
        for seed in 0..6u64 {
            let config = SghmcConfig {
                step_size: eps, friction: c, grad_noise_est: 0.0, mass: 1.0,
                burn_in_steps: 2000, thinning: thin, reservoir_size: 1, minibatch_size: 1,
            };
            let mut pos = array![0.0, 0.0];
            let mut mom = array![0.0, 0.0];
            let mut rng = stream(900 + seed, &[0]);
            let draws = 20000usize;
            let total = 2000 + draws * thin;
            let (mut sum, mut sq) = ([0.0f64; 2], [[0.0f64; 2]; 2]);
            let mut kept = 0usize;
            for step in 0..total {
                let grad = prec.dot(&pos);
                sghmc_update(&mut pos, &mut mom, &grad.view(), &config, 1.0, &mut rng);
                if step >= 2000 && (step - 2000) % thin == thin - 1 {
                    kept += 1;
                    for i in 0..2 { sum[i] += pos[i]; for j in 0..2 { sq[i][j] += pos[i]*pos[j]; } }
                }
            }
            assert_eq!(kept, draws);
            let nf = draws as f64;
            let mean = [sum[0]/nf, sum[1]/nf];
            let mut worst_rel: f64 = 0.0;
            for i in 0..2 { for j in 0..2 {
                let cov = sq[i][j]/nf - mean[i]*mean[j];
                worst_rel = worst_rel.max(((cov - target[i][j])/target[i][j]).abs());
            }}
            worst_mean_all = worst_mean_all.max(mean[0].abs().max(mean[1].abs()));
            worst_rel_all = worst_rel_all.max(worst_rel);
        }
        println!("eps={eps:<5} C={c:<4} thin={thin:<3} worst|mean|={worst_mean_all:.4} worst_cov_rel={worst_rel_all:.4}  {}",
            if worst_mean_all <= 0.05 && worst_rel_all <= 0.10 { "OK over 6 seeds" } else { "fail" });
    }
}
