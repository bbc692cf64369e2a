use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// One of the controllers that can drive a full episode.
///
/// Declaration order is the tie-breaking priority: `Baseline` beats
/// `Learner`, which beats `Human`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerId {
    Baseline,
    Learner,
    Human,
}

impl ControllerId {
    pub const ALL: [ControllerId; 3] = [ControllerId::Baseline, ControllerId::Learner, ControllerId::Human];

    /// Lower rank wins exact ties.
    pub fn priority(self) -> u8 {
        match self {
            ControllerId::Baseline => 0,
            ControllerId::Learner => 1,
            ControllerId::Human => 2,
        }
    }

    pub fn is_human(self) -> bool {
        self == ControllerId::Human
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ControllerId::Baseline => "baseline",
            ControllerId::Learner => "learner",
            ControllerId::Human => "human",
        }
    }
}

impl fmt::Display for ControllerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControllerId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(ControllerId::Baseline),
            "learner" => Ok(ControllerId::Learner),
            "human" => Ok(ControllerId::Human),
            other => Err(format!("unknown controller `{other}`")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn priority_is_strict_total_order() {
        let mut ranks: Vec<u8> = ControllerId::ALL.iter().map(|c| c.priority()).collect();
        ranks.dedup();
        assert_eq!(ranks.len(), 3);
        assert!(ControllerId::Baseline.priority() < ControllerId::Learner.priority());
        assert!(ControllerId::Learner.priority() < ControllerId::Human.priority());
    }

    #[test]
    fn round_trips_through_strings() {
        for c in ControllerId::ALL {
            assert_eq!(c.as_str().parse::<ControllerId>().unwrap(), c);
        }
        assert!("robot".parse::<ControllerId>().is_err());
    }
}
