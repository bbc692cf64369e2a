use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bandit::{CostModel, SelectionPolicy};
use crate::ccbp::{BetaParams, CcbpSettings};
use crate::ddpg::DdpgHyper;
use crate::env::EnvConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CcbpConfig {
    pub length_scale: f64,
    pub window: usize,
    pub prior_mean: f64,
    pub prior_std: f64,
}

impl Default for CcbpConfig {
    fn default() -> Self {
        Self {
            length_scale: DEFAULT_GAP_WORLD_LENGTH_SCALE,
            window: 50,
            prior_mean: 0.8,
            prior_std: 0.35,
        }
    }
}

/// Fitted with `autonomy estimate-l` on the default gap world.
pub const DEFAULT_GAP_WORLD_LENGTH_SCALE: f64 = 0.03;

impl CcbpConfig {
    pub fn settings(&self) -> Result<CcbpSettings> {
        Ok(CcbpSettings {
            length_scale: self.length_scale,
            window: self.window,
            prior: BetaParams::from_moments(self.prior_mean, self.prior_std)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Run one evaluation episode after every `every` training episodes.
    pub every: u64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { every: 1 }
    }
}

fn default_episodes() -> u64 {
    400
}

fn default_pool() -> usize {
    500
}

fn default_train() -> bool {
    true
}

/// One experiment run. Every field except `method` has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub env: EnvConfig,
    pub method: SelectionPolicy,
    #[serde(default)]
    pub costs: CostModel,
    #[serde(default)]
    pub ccbp: CcbpConfig,
    #[serde(default)]
    pub ddpg: DdpgHyper,
    #[serde(default = "default_episodes")]
    pub episodes: u64,
    #[serde(default)]
    pub seed: u64,
    /// Caps human episodes; once spent, human selections go to the learner.
    #[serde(default)]
    pub demo_budget: Option<u64>,
    #[serde(default = "default_pool")]
    pub initial_state_pool: usize,
    /// Evaluation episodes interleaved with training. Implied by
    /// `demo_budget` when absent.
    #[serde(default)]
    pub evaluation: Option<EvaluationConfig>,
    /// Train the learner after every step of every episode.
    #[serde(default = "default_train")]
    pub train: bool,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(env: EnvConfig, method: SelectionPolicy) -> Self {
        Self {
            env,
            method,
            costs: CostModel::default(),
            ccbp: CcbpConfig::default(),
            ddpg: DdpgHyper::default(),
            episodes: default_episodes(),
            seed: 0,
            demo_budget: None,
            initial_state_pool: default_pool(),
            evaluation: None,
            train: true,
            out: None,
        }
    }

    /// Parses and validates, naming the offending field and position.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            Error::Config(format!(
                "at `{path}` (line {}, column {}): {inner}",
                inner.line(),
                inner.column()
            ))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_slice(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::Config(format!("config is not UTF-8: {e}")))?;
        Self::from_json_str(text)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: Error| Error::Config(format!("`{name}`: {e}"));
        self.method.validate().map_err(|e| field("method", e))?;
        self.costs.validate().map_err(|e| field("costs", e))?;
        self.ccbp.settings().map_err(|e| field("ccbp", e))?;
        if !(self.ccbp.length_scale > 0.0) {
            return Err(Error::Config("`ccbp.length_scale` must be positive".into()));
        }
        if self.ccbp.window == 0 {
            return Err(Error::Config("`ccbp.window` must be at least 1".into()));
        }
        self.ddpg.validate().map_err(|e| field("ddpg", e))?;
        if self.episodes == 0 {
            return Err(Error::Config("`episodes` must be at least 1".into()));
        }
        if self.initial_state_pool == 0 {
            return Err(Error::Config("`initial_state_pool` must be at least 1".into()));
        }
        if let Some(ev) = &self.evaluation {
            if ev.every == 0 {
                return Err(Error::Config("`evaluation.every` must be at least 1".into()));
            }
        }
        crate::env::Env::new(&self.env).map_err(|e| field("env", e))?;
        Ok(())
    }

    pub fn evaluation_every(&self) -> Option<u64> {
        match (&self.evaluation, self.demo_budget) {
            (Some(ev), _) => Some(ev.every),
            (None, Some(_)) => Some(1),
            (None, None) => None,
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::ControllerId;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = RunConfig::from_json_str(r#"{"method":{"kind":"contextual_mab","alpha":1.0}}"#).unwrap();
        assert_eq!(cfg.episodes, 400);
        assert_eq!(cfg.ccbp.window, 50);
        assert_eq!(cfg.costs, CostModel::default());
        assert_eq!(cfg.method.controllers(), vec![ControllerId::Human, ControllerId::Learner]);
        assert_eq!(cfg.evaluation_every(), None);
    }

    #[test]
    fn errors_name_the_field() {
        let e = RunConfig::from_json_str(r#"{"method":{"kind":"contextual_mab","alpha":"x"}}"#).unwrap_err();
        assert!(e.to_string().contains("method"), "{e}");
        let e = RunConfig::from_json_str(r#"{"method":{"kind":"fixed_controller","controller":"baseline"},"ddpg":{"gama":0.9}}"#)
            .unwrap_err();
        assert!(e.to_string().contains("ddpg") && e.to_string().contains("gama"), "{e}");
        let e = RunConfig::from_json_str(r#"{"method":{"kind":"boltzmann","delta_tau":-1}}"#).unwrap_err();
        assert!(e.to_string().contains("delta_tau"), "{e}");
        let e = RunConfig::from_json_str("{\n  \"episodes\": 0,\n  \"method\": {\"kind\":\"human_then_learner\",\"n_h\":3}\n}")
            .unwrap_err();
        assert!(e.to_string().contains("episodes"), "{e}");
        assert!(RunConfig::from_json_str("{").unwrap_err().to_string().contains("line"));
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::new(EnvConfig::default(), SelectionPolicy::HumanThenLearner { n_h: 10 });
        cfg.demo_budget = Some(120);
        let back = RunConfig::from_json_str(&cfg.to_json_pretty()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.evaluation_every(), Some(1));
    }
}
