//! Episodic environments and their scripted controllers.

mod gapworld;
mod reachworld;

pub use gapworld::{GapGeometry, GapWorld, GapWorldConfig};
pub use reachworld::{ReachWorld, ReachWorldConfig};

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ccbp::{Bound, StateVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Goal,
    Collision,
    Timeout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: StateVector,
    pub reward: f64,
    pub termination: Option<Termination>,
}

impl StepResult {
    pub fn is_done(&self) -> bool {
        self.termination.is_some()
    }

    /// `Some(success)` once the episode has ended.
    pub fn outcome(&self) -> Option<bool> {
        self.termination.map(|t| t == Termination::Goal)
    }

    /// Whether the value target should stop bootstrapping here. Timeouts are
    /// not a property of the state, so they keep bootstrapping.
    pub fn is_terminal(&self) -> bool {
        matches!(self.termination, Some(Termination::Goal | Termination::Collision))
    }
}

pub(crate) fn clip_action(action: &[f64], bounds: &[Bound]) -> Result<Vec<f64>> {
    if action.len() != bounds.len() {
        return Err(Error::Shape(format!(
            "action has {} components, expected {}",
            action.len(),
            bounds.len()
        )));
    }
    if action.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("action component".into()));
    }
    Ok(action.iter().zip(bounds).map(|(a, b)| a.clamp(b.min, b.max)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    GapWorld(GapWorldConfig),
    ReachWorld(ReachWorldConfig),
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::GapWorld(GapWorldConfig::default())
    }
}

#[derive(Debug, Clone)]
pub enum Env {
    GapWorld(GapWorld),
    ReachWorld(ReachWorld),
}

macro_rules! dispatch {
    ($self:expr, $e:ident => $body:expr) => {
        match $self {
            Env::GapWorld($e) => $body,
            Env::ReachWorld($e) => $body,
        }
    };
}

impl Env {
    pub fn new(cfg: &EnvConfig) -> Result<Self> {
        Ok(match cfg {
            EnvConfig::GapWorld(c) => Env::GapWorld(GapWorld::new(c.clone())?),
            EnvConfig::ReachWorld(c) => Env::ReachWorld(ReachWorld::new(c.clone())?),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Env::GapWorld(_) => "gap_world",
            Env::ReachWorld(_) => "reach_world",
        }
    }

    pub fn state_bounds(&self) -> Arc<[Bound]> {
        dispatch!(self, e => e.bounds().clone())
    }

    pub fn state_dim(&self) -> usize {
        self.state_bounds().len()
    }

    pub fn action_bounds(&self) -> Vec<Bound> {
        match self {
            Env::GapWorld(e) => {
                let b = e.config().action_bound;
                vec![Bound::new(-b, b); 2]
            }
            Env::ReachWorld(e) => {
                let b = e.config().action_bound;
                vec![Bound::new(-b, b)]
            }
        }
    }

    pub fn max_steps(&self) -> u32 {
        dispatch!(self, e => e.config().max_steps)
    }

    /// Raw initial-state values for [`Env::reset_to`].
    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        dispatch!(self, e => e.sample_initial(rng))
    }

    pub fn reset_to(&mut self, init: &[f64]) -> Result<StateVector> {
        dispatch!(self, e => e.reset_to(init))
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<StateVector> {
        let init = self.sample_initial(rng);
        self.reset_to(&init)
    }

    pub fn observation(&self) -> StateVector {
        dispatch!(self, e => e.observation())
    }

    pub fn steps(&self) -> u32 {
        dispatch!(self, e => e.steps())
    }

    pub fn is_done(&self) -> bool {
        dispatch!(self, e => e.is_done())
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        dispatch!(self, e => e.step(action))
    }

    pub fn scripted_human(&self) -> Vec<f64> {
        dispatch!(self, e => e.scripted_human())
    }

    pub fn scripted_baseline<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        dispatch!(self, e => e.scripted_baseline(rng))
    }

    pub fn geometry(&self) -> Option<GapGeometry> {
        match self {
            Env::GapWorld(e) => Some(e.geometry()),
            Env::ReachWorld(_) => None,
        }
    }

    /// Clip an arbitrary action into the action box.
    pub fn clip(&self, action: &[f64]) -> Result<Vec<f64>> {
        clip_action(action, &self.action_bounds())
    }
}
