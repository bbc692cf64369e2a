use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controller::ControllerId;
use crate::error::{Error, Result};

use super::config::RunConfig;
use super::log::{eval_csv, fmt17, summary_csv, to_jsonl, EpisodeLog, EvalLog};
use super::runner::Runner;

pub const EPISODES_FILE: &str = "episodes.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const EVAL_FILE: &str = "eval.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub episodes: Vec<EpisodeLog>,
    pub evaluations: Vec<EvalLog>,
}

impl RunSummary {
    pub fn total_cost(&self) -> f64 {
        self.episodes.last().map_or(0.0, |l| l.cumulative_cost)
    }

    pub fn count(&self, controller: ControllerId) -> usize {
        self.episodes.iter().filter(|l| l.controller == controller).count()
    }

    pub fn controller_counts(&self) -> BTreeMap<ControllerId, usize> {
        ControllerId::ALL.iter().map(|&c| (c, self.count(c))).collect()
    }

    pub fn failures(&self) -> usize {
        self.episodes.iter().filter(|l| !l.success).count()
    }

    pub fn eval_success_rate(&self) -> Option<f64> {
        if self.evaluations.is_empty() {
            None
        } else {
            Some(self.evaluations.iter().filter(|e| e.success).count() as f64 / self.evaluations.len() as f64)
        }
    }

    pub fn episodes_jsonl(&self) -> Result<String> {
        to_jsonl(&self.episodes)
    }

    /// Writes the episode log, the windowed cost summary and, when present,
    /// the evaluation curve into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        write(EPISODES_FILE, self.episodes_jsonl()?)?;
        write(SUMMARY_FILE, summary_csv(&self.episodes))?;
        if !self.evaluations.is_empty() {
            write(EVAL_FILE, eval_csv(&self.evaluations))?;
        }
        Ok(())
    }
}

/// Runs every episode of `config`, interleaving evaluation episodes when the
/// config asks for them.
pub fn run_experiment(config: &RunConfig) -> Result<RunSummary> {
    run_experiment_with(config, |_| {})
}

/// As [`run_experiment`], calling `progress` after every training episode.
pub fn run_experiment_with(config: &RunConfig, mut progress: impl FnMut(&EpisodeLog)) -> Result<RunSummary> {
    let mut runner = Runner::new(config.clone())?;
    let every = config.evaluation_every();
    let mut episodes = Vec::with_capacity(config.episodes as usize);
    let mut evaluations = Vec::new();
    while !runner.is_finished() {
        let log = runner.run_episode()?;
        progress(&log);
        if let Some(n) = every {
            if (log.episode + 1) % n == 0 {
                evaluations.push(runner.run_evaluation_episode(log.episode)?);
            }
        }
        episodes.push(log);
    }
    Ok(RunSummary {
        seed: config.seed,
        episodes,
        evaluations,
    })
}

/// Limited-demonstration protocol: the budget caps human episodes and one
/// evaluation episode follows every training episode.
pub fn run_limited_demo_experiment(config: &RunConfig) -> Result<RunSummary> {
    if config.demo_budget.is_none() {
        return Err(Error::Config("limited-demonstration runs need `demo_budget`".into()));
    }
    let mut cfg = config.clone();
    cfg.evaluation = Some(super::config::EvaluationConfig { every: 1 });
    run_experiment(&cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub failure_cost: f64,
    pub seeds: Vec<u64>,
    pub total_costs: Vec<f64>,
    pub human_episodes: Vec<usize>,
}

impl SweepRow {
    pub fn mean_total_cost(&self) -> f64 {
        mean(self.total_costs.iter().copied())
    }

    pub fn mean_human_episodes(&self) -> f64 {
        mean(self.human_episodes.iter().map(|&h| h as f64))
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Repeats `config` for every failure cost and seed. Seeds fix the initial
/// state sequence, so every failure cost sees the same episodes.
pub fn run_cost_sweep(config: &RunConfig, failure_costs: &[f64], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if seeds.is_empty() {
        return Err(Error::param("cost sweep needs at least one seed"));
    }
    failure_costs
        .iter()
        .map(|&cf| {
            let mut row = SweepRow {
                failure_cost: cf,
                seeds: seeds.to_vec(),
                total_costs: Vec::new(),
                human_episodes: Vec::new(),
            };
            for &seed in seeds {
                let mut cfg = config.clone();
                cfg.costs.failure_cost = cf;
                cfg.seed = seed;
                let summary = run_experiment(&cfg)?;
                row.total_costs.push(summary.total_cost());
                row.human_episodes.push(summary.count(ControllerId::Human));
            }
            Ok(row)
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("failure_cost,mean_total_cost,mean_human_episodes,runs\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            fmt17(r.failure_cost),
            fmt17(r.mean_total_cost()),
            fmt17(r.mean_human_episodes()),
            r.seeds.len()
        ));
    }
    s
}
