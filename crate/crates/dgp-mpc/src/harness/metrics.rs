//! Experiment metrics: max-seen reward curves per seed and the
//! across-seed mean/deviation of the average episode reward.

use super::EpisodeLog;
use std::collections::BTreeMap;

/// One row of the per-episode metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMetric {
    pub seed: u64,
    pub episode: usize,
    /// Control steps taken up to and including this episode.
    pub steps_cumulative: usize,
    pub episode_reward: f64,
    /// Running maximum of episode rewards for this seed.
    pub max_seen_reward: f64,
}

/// Average episode reward of one seed over the first `E` episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedSummary {
    pub seed: u64,
    pub episodes_counted: usize,
    pub average_episode_reward: f64,
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub per_episode: Vec<EpisodeMetric>,
    pub per_seed: Vec<SeedSummary>,
    /// Number of leading episodes entering the seed averages.
    pub average_over_episodes: usize,
    /// Across-seed mean of the average episode reward.
    pub mean_average_reward: f64,
    /// Sample standard deviation (n-1) across seeds; zero for one seed.
    pub std_average_reward: f64,
}

/// Builds the metrics report from episode logs (possibly several seeds).
pub fn compute_metrics(logs: &[EpisodeLog], average_over_episodes: usize) -> MetricsReport {
    let mut by_seed: BTreeMap<u64, Vec<&EpisodeLog>> = BTreeMap::new();
    for log in logs {
        by_seed.entry(log.seed).or_default().push(log);
    }

    let mut per_episode = Vec::new();
    let mut per_seed = Vec::new();
    for (&seed, seed_logs) in &mut by_seed {
        seed_logs.sort_by_key(|l| l.episode);
        let mut steps = 0usize;
        let mut max_seen = f64::NEG_INFINITY;
        for log in seed_logs.iter() {
            steps += log.records.len();
            max_seen = max_seen.max(log.total_reward);
            per_episode.push(EpisodeMetric {
                seed,
                episode: log.episode,
                steps_cumulative: steps,
                episode_reward: log.total_reward,
                max_seen_reward: max_seen,
            });
        }
        let counted = seed_logs.len().min(average_over_episodes);
        let avg = if counted == 0 {
            0.0
        } else {
            seed_logs[..counted]
                .iter()
                .map(|l| l.total_reward)
                .sum::<f64>()
                / counted as f64
        };
        per_seed.push(SeedSummary {
            seed,
            episodes_counted: counted,
            average_episode_reward: avg,
        });
    }

    let n = per_seed.len();
    let mean = if n == 0 {
        0.0
    } else {
        per_seed.iter().map(|s| s.average_episode_reward).sum::<f64>() / n as f64
    };
    let std = if n < 2 {
        0.0
    } else {
        let ss: f64 = per_seed
            .iter()
            .map(|s| (s.average_episode_reward - mean).powi(2))
            .sum();
        (ss / (n - 1) as f64).sqrt()
    };

    MetricsReport {
        per_episode,
        per_seed,
        average_over_episodes,
        mean_average_reward: mean,
        std_average_reward: std,
    }
}
