use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::bandit::ArmEstimate;
use crate::controller::ControllerId;
use crate::env::Termination;
use crate::error::{Error, Result};

/// Trailing window for the plotted mean cost.
pub const COST_WINDOW: usize = 40;

pub const SUMMARY_HEADER: &str = "episode,window_mean_cost,cumulative_cost,controller,outcome";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: u64,
    pub initial_state: Vec<f64>,
    pub controller: ControllerId,
    /// Predictions and cost bounds at the initial state for every controller.
    pub estimates: Vec<ArmEstimate>,
    pub success: bool,
    pub termination: Termination,
    pub steps: u32,
    pub human_cost: f64,
    pub cumulative_cost: f64,
    /// Learner episodes completed before this one (drives noise decay).
    pub learner_episodes: u64,
    /// The selector chose the human but the demonstration budget was spent.
    pub budget_override: bool,
    /// A live operator went silent and the scripted human finished the episode.
    pub teleop_fallback: bool,
    pub demos_added: usize,
    pub train_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    /// Training episode this evaluation followed.
    pub after_episode: u64,
    pub initial_state: Vec<f64>,
    pub success: bool,
    pub steps: u32,
}

/// Writes every float with 17 significant digits.
#[derive(Debug, Clone, Copy, Default)]
pub struct FullPrecision;

impl serde_json::ser::Formatter for FullPrecision {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{}", fmt17(value))
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        write!(writer, "{}", fmt17(value as f64))
    }
}

/// `d.dddddddddddddddde±x`, which is valid JSON and round-trips exactly.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn to_json_line<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FullPrecision);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(out).expect("serde_json writes UTF-8"))
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut s = String::new();
    for item in items {
        s.push_str(&to_json_line(item)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn parse_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Config(format!("log line {}: {e}", i + 1))))
        .collect()
}

/// Mean human cost over the trailing [`COST_WINDOW`] episodes, per episode.
pub fn window_means(costs: &[f64]) -> Vec<f64> {
    (0..costs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(COST_WINDOW);
            costs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

pub fn summary_csv(logs: &[EpisodeLog]) -> String {
    let costs: Vec<f64> = logs.iter().map(|l| l.human_cost).collect();
    let means = window_means(&costs);
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for (l, m) in logs.iter().zip(means) {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            l.episode,
            fmt17(m),
            fmt17(l.cumulative_cost),
            l.controller,
            if l.success { "success" } else { "failure" }
        ));
    }
    s
}

pub fn eval_csv(evals: &[EvalLog]) -> String {
    let mut s = String::from("after_episode,success,steps\n");
    for e in evals {
        s.push_str(&format!("{},{},{}\n", e.after_episode, e.success as u8, e.steps));
    }
    s
}
