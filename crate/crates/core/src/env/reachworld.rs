//! One-dimensional reaching: move `x` onto a sampled goal `g`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{clip_action, StepResult, Termination};
use crate::ccbp::{Bound, StateVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReachWorldConfig {
    pub action_bound: f64,
    pub tolerance: f64,
    pub max_steps: u32,
    pub baseline_noise_std: f64,
}

impl Default for ReachWorldConfig {
    fn default() -> Self {
        Self {
            action_bound: 0.1,
            tolerance: 0.05,
            max_steps: 50,
            baseline_noise_std: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReachWorld {
    cfg: ReachWorldConfig,
    bounds: Arc<[Bound]>,
    x: f64,
    goal: f64,
    steps: u32,
    done: bool,
}

impl ReachWorld {
    pub fn new(cfg: ReachWorldConfig) -> Result<Self> {
        if !(cfg.action_bound > 0.0 && cfg.tolerance > 0.0 && cfg.max_steps > 0 && cfg.baseline_noise_std >= 0.0) {
            return Err(Error::Config("reach_world parameters must be positive".into()));
        }
        Ok(Self {
            cfg,
            bounds: Arc::from(vec![Bound::new(-1.0, 1.0), Bound::new(-1.0, 1.0)]),
            x: 0.0,
            goal: 0.5,
            steps: 0,
            done: false,
        })
    }

    pub fn config(&self) -> &ReachWorldConfig {
        &self.cfg
    }

    pub fn bounds(&self) -> &Arc<[Bound]> {
        &self.bounds
    }

    /// Raw `(x, g)`, both uniform on `[-1, 1]`.
    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        vec![rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)]
    }

    pub fn reset_to(&mut self, init: &[f64]) -> Result<StateVector> {
        if init.len() != 2 {
            return Err(Error::Shape(format!("reach_world initial state needs 2 values, got {}", init.len())));
        }
        if init.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::contract("reach_world initial state outside [-1, 1]"));
        }
        self.x = init[0];
        self.goal = init[1];
        self.steps = 0;
        self.done = false;
        Ok(self.observation())
    }

    pub fn observation(&self) -> StateVector {
        StateVector::new(vec![self.x, self.goal], self.bounds.clone()).expect("state stays inside its bounds")
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.done {
            return Err(Error::contract("step called on a finished episode"));
        }
        let b = self.cfg.action_bound;
        let a = clip_action(action, &[Bound::new(-b, b)])?;
        self.x = (self.x + a[0]).clamp(-1.0, 1.0);
        self.steps += 1;
        let termination = if (self.x - self.goal).abs() < self.cfg.tolerance {
            Some(Termination::Goal)
        } else if self.steps >= self.cfg.max_steps {
            Some(Termination::Timeout)
        } else {
            None
        };
        self.done = termination.is_some();
        Ok(StepResult {
            observation: self.observation(),
            reward: if termination == Some(Termination::Goal) { 1.0 } else { 0.0 },
            termination,
        })
    }

    pub fn scripted_human(&self) -> Vec<f64> {
        let b = self.cfg.action_bound;
        vec![(self.goal - self.x).clamp(-b, b)]
    }

    pub fn scripted_baseline<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let b = self.cfg.action_bound;
        let mut a = self.goal - self.x;
        if self.cfg.baseline_noise_std > 0.0 {
            a += Normal::new(0.0, self.cfg.baseline_noise_std).expect("validated std").sample(rng);
        }
        vec![a.clamp(-b, b)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn human_always_reaches() {
        let mut env = ReachWorld::new(ReachWorldConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let init = env.sample_initial(&mut rng);
            env.reset_to(&init).unwrap();
            let out = loop {
                let r = env.step(&env.scripted_human()).unwrap();
                if let Some(o) = r.outcome() {
                    break (o, r.reward);
                }
            };
            assert_eq!(out, (true, 1.0));
        }
    }

    #[test]
    fn timeout_and_clipping() {
        let mut env = ReachWorld::new(ReachWorldConfig::default()).unwrap();
        env.reset_to(&[-1.0, 1.0]).unwrap();
        let r = env.step(&[5.0]).unwrap();
        assert!((r.observation.values()[0] + 0.9).abs() < 1e-15);
        env.reset_to(&[-1.0, 1.0]).unwrap();
        for i in 0..50 {
            let r = env.step(&[-0.1]).unwrap();
            assert_eq!(r.termination == Some(Termination::Timeout), i == 49);
        }
        assert!(env.step(&[0.0]).is_err());
        assert!(env.step(&[0.0, 0.0]).is_err());
    }
}
