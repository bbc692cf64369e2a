//! Kernel length-scale fitting: a partially trained learner populates an
//! outcome store, and a second batch of episodes scores each candidate scale
//! by holdout likelihood.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bandit::SelectionPolicy;
use crate::ccbp::{estimate_length_scale, BetaParams, Bound, CcbpPredictor, CcbpSettings, EpisodeRecord, LengthScaleFit, StateVector};
use crate::controller::ControllerId;
use crate::error::{Error, Result};
use crate::rng::SeedStreams;

use super::config::RunConfig;
use super::runner::Runner;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LengthScaleProtocol {
    /// Human demonstrations before the learner takes over.
    pub demonstrations: u64,
    /// Stop training once the measured success rate enters this band.
    pub target_success: [f64; 2],
    pub check_every: u64,
    pub check_episodes: usize,
    pub max_training_episodes: u64,
    pub populate_episodes: usize,
    pub holdout_episodes: usize,
}

impl Default for LengthScaleProtocol {
    fn default() -> Self {
        Self {
            demonstrations: 20,
            target_success: [0.35, 0.65],
            check_every: 5,
            check_episodes: 20,
            max_training_episodes: 400,
            populate_episodes: 50,
            holdout_episodes: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthScaleReport {
    pub fit: LengthScaleFit,
    pub training_episodes: u64,
    /// Success rate of the frozen policy over the populate and holdout sets.
    pub policy_success_rate: f64,
    pub populate_successes: usize,
    pub holdout_successes: usize,
}

/// Trains the configured learner until it solves roughly half the tasks,
/// then fits the length scale from its noise-free rollouts.
pub fn run_length_scale_protocol(config: &RunConfig, protocol: &LengthScaleProtocol, grid: &[f64]) -> Result<LengthScaleReport> {
    let mut cfg = config.clone();
    cfg.method = SelectionPolicy::HumanThenLearner {
        n_h: protocol.demonstrations.max(1),
    };
    cfg.episodes = protocol.demonstrations + protocol.max_training_episodes;
    cfg.demo_budget = None;
    cfg.train = true;
    let mut runner = Runner::new(cfg)?;
    let [lo, hi] = protocol.target_success;
    let mut trained = 0;
    while !runner.is_finished() {
        let log = runner.run_episode()?;
        trained += 1;
        if log.controller != ControllerId::Learner || trained % protocol.check_every.max(1) != 0 {
            continue;
        }
        let wins = (0..protocol.check_episodes)
            .map(|_| runner.run_evaluation_episode(log.episode).map(|e| e.success as usize))
            .sum::<Result<usize>>()?;
        let rate = wins as f64 / protocol.check_episodes.max(1) as f64;
        if rate >= lo && rate <= hi {
            break;
        }
    }
    let collect = |n: usize, runner: &mut Runner| -> Result<Vec<EpisodeRecord>> {
        (0..n)
            .map(|i| {
                let init = runner.sample_evaluation_state();
                let (states, success, _) = runner.rollout_learner(&init)?;
                Ok(EpisodeRecord {
                    controller: ControllerId::Learner,
                    states,
                    success,
                    human_cost: 0.0,
                    episode_index: i as u64,
                })
            })
            .collect()
    };
    let train = collect(protocol.populate_episodes, &mut runner)?;
    let holdout = collect(protocol.holdout_episodes, &mut runner)?;
    let prior = config.ccbp.settings()?.prior;
    let fit = estimate_length_scale(&train, &holdout, grid, prior)?;
    let populate_successes = train.iter().filter(|e| e.success).count();
    let holdout_successes = holdout.iter().filter(|e| e.success).count();
    Ok(LengthScaleReport {
        fit,
        training_episodes: trained,
        policy_success_rate: (populate_successes + holdout_successes) as f64 / (train.len() + holdout.len()).max(1) as f64,
        populate_successes,
        holdout_successes,
    })
}

/// Synthetic data with a known generating length scale.
///
/// Training outcomes follow a fixed 2-d stripe pattern. Holdout outcomes
/// are drawn from the posterior mean that a store with scale `true_scale`
/// assigns to each holdout state, so the expected holdout likelihood peaks
/// at `true_scale`.
pub fn synthetic_length_scale_data(
    seed: u64,
    true_scale: f64,
    n_train: usize,
    n_holdout: usize,
    prior: BetaParams,
) -> Result<(Vec<EpisodeRecord>, Vec<EpisodeRecord>)> {
    if n_train == 0 || n_holdout == 0 {
        return Err(Error::param("synthetic data needs train and holdout episodes"));
    }
    let bounds: Arc<[Bound]> = Arc::from(vec![Bound::new(0.0, 1.0); 2]);
    let mut rng = SeedStreams::new(seed).stream("synthetic_length_scale");
    let point = |rng: &mut crate::rng::StreamRng| {
        StateVector::new(vec![rng.gen::<f64>(), rng.gen::<f64>()], bounds.clone()).expect("unit square")
    };
    let mut store = CcbpPredictor::new(CcbpSettings {
        length_scale: true_scale,
        window: 1,
        prior,
    })?
    .with_learner_controllers([])
    .with_human_controllers([]);
    let mut train = Vec::with_capacity(n_train);
    for i in 0..n_train {
        let s = point(&mut rng);
        let success = (2.0 * std::f64::consts::PI * s.values()[0]).sin() > 0.0;
        store.record_episode(std::slice::from_ref(&s), success, ControllerId::Learner, i as u64)?;
        train.push(EpisodeRecord {
            controller: ControllerId::Learner,
            states: vec![s],
            success,
            human_cost: 0.0,
            episode_index: i as u64,
        });
    }
    let mut holdout = Vec::with_capacity(n_holdout);
    for i in 0..n_holdout {
        let s = point(&mut rng);
        let p = store.posterior(&s, ControllerId::Learner, i64::MAX)?.mean();
        holdout.push(EpisodeRecord {
            controller: ControllerId::Learner,
            success: rng.gen::<f64>() < p,
            states: vec![s],
            human_cost: 0.0,
            episode_index: i as u64,
        });
    }
    Ok((train, holdout))
}

/// Decade grid `true_scale * 10^k` for `k` in `-3..=3`.
pub fn decade_grid(center: f64) -> Vec<f64> {
    (-3..=3).map(|k| center * 10f64.powi(k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_data_is_seeded() {
        let prior = BetaParams::from_moments(0.8, 0.35).unwrap();
        let a = synthetic_length_scale_data(4, 0.03, 50, 50, prior).unwrap();
        let b = synthetic_length_scale_data(4, 0.03, 50, 50, prior).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.0.len(), a.1.len()), (50, 50));
    }

    #[test]
    fn recovers_generating_scale_on_most_seeds() {
        let prior = BetaParams::from_moments(0.8, 0.35).unwrap();
        let grid = decade_grid(0.03);
        let hits = (100..120)
            .filter(|&seed| {
                let (train, holdout) = synthetic_length_scale_data(seed, 0.03, 50, 50, prior).unwrap();
                let fit = estimate_length_scale(&train, &holdout, &grid, prior).unwrap();
                (fit.length_scale - 0.03).abs() < 1e-12
            })
            .count();
        assert!(hits >= 17, "{hits}/20");
    }
}
