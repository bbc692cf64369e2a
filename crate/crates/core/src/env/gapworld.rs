//! A disc robot in a square arena must pass through a gap in a horizontal
//! wall to reach a goal band.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StdNormal};

use super::{clip_action, StepResult, Termination};
use crate::ccbp::{Bound, StateVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapWorldConfig {
    pub arena_size: f64,
    pub wall_y: f64,
    /// Mean of the sampled (truncated) gap widths.
    pub gap_width_mean: f64,
    /// Scale of the normal before truncation.
    pub gap_width_std: f64,
    pub gap_width_min: f64,
    pub gap_width_max: f64,
    pub gap_center_min: f64,
    pub gap_center_max: f64,
    pub robot_radius: f64,
    pub start_x: [f64; 2],
    pub start_y: [f64; 2],
    pub goal_y: f64,
    pub max_steps: u32,
    pub action_bound: f64,
    /// Clearance kept below the wall while lining up with the gap.
    pub approach_margin: f64,
    pub baseline_aim_offset: f64,
    pub baseline_noise_std: f64,
}

impl Default for GapWorldConfig {
    fn default() -> Self {
        Self {
            arena_size: 4.0,
            wall_y: 2.0,
            gap_width_mean: 0.83,
            gap_width_std: 0.15,
            gap_width_min: 0.68,
            gap_width_max: 1.6,
            gap_center_min: 1.0,
            gap_center_max: 3.0,
            robot_radius: 0.31,
            start_x: [0.5, 3.5],
            start_y: [0.2, 0.8],
            goal_y: 3.4,
            max_steps: 50,
            action_bound: 0.15,
            approach_margin: 0.05,
            baseline_aim_offset: 0.06,
            baseline_noise_std: 0.03,
        }
    }
}

impl GapWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.arena_size > 0.0
            && self.wall_y > 0.0
            && self.wall_y < self.arena_size
            && self.gap_width_std > 0.0
            && self.gap_width_min > 2.0 * self.robot_radius
            && self.gap_width_min < self.gap_width_max
            && self.gap_center_min < self.gap_center_max
            && self.robot_radius > 0.0
            && self.start_x[0] <= self.start_x[1]
            && self.start_y[0] <= self.start_y[1]
            && self.start_y[1] + self.robot_radius < self.wall_y
            && self.goal_y > self.wall_y + self.robot_radius
            && self.goal_y <= self.arena_size
            && self.max_steps > 0
            && self.action_bound > 0.0
            && self.action_bound < self.robot_radius
            && self.baseline_noise_std >= 0.0;
        if !ok {
            return Err(Error::Config("inconsistent gap_world geometry".into()));
        }
        if !(self.gap_width_mean > self.gap_width_min && self.gap_width_mean < self.gap_width_max) {
            return Err(Error::Config("gap width mean must lie strictly inside its truncation bounds".into()));
        }
        Ok(())
    }

    /// Location of the untruncated normal whose truncation to
    /// `[gap_width_min, gap_width_max]` has mean `gap_width_mean`.
    pub fn gap_width_location(&self) -> f64 {
        let (a, b, s) = (self.gap_width_min, self.gap_width_max, self.gap_width_std);
        let z = StdNormal::new(0.0, 1.0).expect("unit normal");
        let truncated_mean = |mu: f64| {
            let (lo, hi) = ((a - mu) / s, (b - mu) / s);
            let mass = z.cdf(hi) - z.cdf(lo);
            if mass < 1e-300 {
                return if mu < a { a } else { b };
            }
            mu + s * (z.pdf(lo) - z.pdf(hi)) / mass
        };
        // The truncated mean is increasing in the location.
        let (mut lo, mut hi) = (a - 10.0 * s, b + 10.0 * s);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if truncated_mean(mid) < self.gap_width_mean {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Static geometry of the current episode, for rendering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapGeometry {
    pub arena_size: f64,
    pub wall_y: f64,
    pub gap_center: f64,
    pub gap_width: f64,
    pub robot_radius: f64,
    pub goal_y: f64,
}

#[derive(Debug, Clone)]
pub struct GapWorld {
    cfg: GapWorldConfig,
    bounds: Arc<[Bound]>,
    width_location: f64,
    x: f64,
    y: f64,
    gap_center: f64,
    gap_width: f64,
    steps: u32,
    done: bool,
}

impl GapWorld {
    pub fn new(cfg: GapWorldConfig) -> Result<Self> {
        cfg.validate()?;
        let bounds: Arc<[Bound]> = Arc::from(vec![
            Bound::new(0.0, cfg.arena_size),
            Bound::new(0.0, cfg.arena_size),
            Bound::new(cfg.gap_center_min, cfg.gap_center_max),
            Bound::new(cfg.gap_width_min, cfg.gap_width_max),
        ]);
        let env = Self {
            x: 0.5 * (cfg.start_x[0] + cfg.start_x[1]),
            y: 0.5 * (cfg.start_y[0] + cfg.start_y[1]),
            gap_center: 0.5 * (cfg.gap_center_min + cfg.gap_center_max),
            gap_width: cfg.gap_width_mean.max(cfg.gap_width_min),
            steps: 0,
            done: false,
            width_location: cfg.gap_width_location(),
            bounds,
            cfg,
        };
        Ok(env)
    }

    pub fn config(&self) -> &GapWorldConfig {
        &self.cfg
    }

    pub fn bounds(&self) -> &Arc<[Bound]> {
        &self.bounds
    }

    pub fn sample_gap_width<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let normal = Normal::new(self.width_location, self.cfg.gap_width_std).expect("validated std");
        loop {
            let w = normal.sample(rng);
            if w >= self.cfg.gap_width_min && w <= self.cfg.gap_width_max {
                return w;
            }
        }
    }

    /// Raw `(x, y, gap_center, gap_width)`.
    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let w = self.sample_gap_width(rng);
        let c = rng.gen_range(self.cfg.gap_center_min..=self.cfg.gap_center_max);
        let x = rng.gen_range(self.cfg.start_x[0]..=self.cfg.start_x[1]);
        let y = rng.gen_range(self.cfg.start_y[0]..=self.cfg.start_y[1]);
        vec![x, y, c, w]
    }

    pub fn reset_to(&mut self, init: &[f64]) -> Result<StateVector> {
        if init.len() != 4 {
            return Err(Error::Shape(format!("gap_world initial state needs 4 values, got {}", init.len())));
        }
        let obs = StateVector::new(init.to_vec(), self.bounds.clone())?;
        for (v, b) in init.iter().zip(self.bounds.iter()) {
            if *v < b.min || *v > b.max {
                return Err(Error::contract(format!("initial value {v} outside [{}, {}]", b.min, b.max)));
            }
        }
        self.x = init[0];
        self.y = init[1];
        self.gap_center = init[2];
        self.gap_width = init[3];
        self.steps = 0;
        self.done = false;
        if self.collides(self.x, self.y) {
            return Err(Error::contract("initial position intersects the wall"));
        }
        Ok(obs)
    }

    pub fn observation(&self) -> StateVector {
        StateVector::new(vec![self.x, self.y, self.gap_center, self.gap_width], self.bounds.clone())
            .expect("state stays inside its bounds")
    }

    pub fn position(&self) -> (f64, f64) {
        (self.x, self.y)
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn geometry(&self) -> GapGeometry {
        GapGeometry {
            arena_size: self.cfg.arena_size,
            wall_y: self.cfg.wall_y,
            gap_center: self.gap_center,
            gap_width: self.gap_width,
            robot_radius: self.cfg.robot_radius,
            goal_y: self.cfg.goal_y,
        }
    }

    /// Disc versus the two wall segments either side of the gap.
    pub fn collides(&self, x: f64, y: f64) -> bool {
        let left = (0.0, self.gap_center - 0.5 * self.gap_width);
        let right = (self.gap_center + 0.5 * self.gap_width, self.cfg.arena_size);
        let r = self.cfg.robot_radius;
        [left, right].iter().any(|&(a, b)| {
            let cx = x.clamp(a, b);
            (x - cx).hypot(y - self.cfg.wall_y) < r
        })
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.done {
            return Err(Error::contract("step called on a finished episode"));
        }
        if action.len() != 2 {
            return Err(Error::Shape(format!("gap_world actions are 2-d, got {}", action.len())));
        }
        let b = self.cfg.action_bound;
        let a = clip_action(action, &[Bound::new(-b, b), Bound::new(-b, b)])?;
        let size = self.cfg.arena_size;
        self.x = (self.x + a[0]).clamp(0.0, size);
        self.y = (self.y + a[1]).clamp(0.0, size);
        self.steps += 1;
        let termination = if self.collides(self.x, self.y) {
            Some(Termination::Collision)
        } else if self.y >= self.cfg.goal_y {
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

    fn waypoint_action(&self, aim: f64) -> [f64; 2] {
        let b = self.cfg.action_bound;
        let hold_y = self.cfg.wall_y - self.cfg.robot_radius - self.cfg.approach_margin;
        let dx = (aim - self.x).clamp(-b, b);
        let ascend = (self.x - aim).abs() <= 0.005 || self.y > self.cfg.wall_y - self.cfg.robot_radius;
        let dy = if ascend { b } else { (hold_y - self.y).clamp(-b, b) };
        [dx, dy]
    }

    /// Line up under the gap centre while holding below the wall, then
    /// drive straight up.
    pub fn scripted_human(&self) -> Vec<f64> {
        if self.y >= self.cfg.goal_y {
            return vec![0.0, 0.0];
        }
        self.waypoint_action(self.gap_center).to_vec()
    }

    /// The same waypoint controller, aiming off-centre with per-axis noise.
    pub fn scripted_baseline<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let [dx, dy] = self.waypoint_action(self.gap_center + self.cfg.baseline_aim_offset);
        let b = self.cfg.action_bound;
        let std = self.cfg.baseline_noise_std;
        let mut noisy = [dx, dy];
        if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("validated std");
            for v in &mut noisy {
                *v += normal.sample(rng);
            }
        }
        noisy.iter().map(|v| v.clamp(-b, b)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn world() -> GapWorld {
        GapWorld::new(GapWorldConfig::default()).unwrap()
    }

    #[test]
    fn gap_width_distribution() {
        let env = world();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let widths: Vec<f64> = (0..10_000).map(|_| env.sample_initial(&mut rng)[3]).collect();
        let min = widths.iter().cloned().fold(f64::INFINITY, f64::min);
        let mean = widths.iter().sum::<f64>() / widths.len() as f64;
        assert!(min >= 0.68);
        assert!((mean - 0.83).abs() <= 0.02, "mean {mean}");
    }

    #[test]
    fn same_seed_same_initial_states() {
        let env = world();
        let a: Vec<Vec<f64>> = {
            let mut r = ChaCha8Rng::seed_from_u64(3);
            (0..20).map(|_| env.sample_initial(&mut r)).collect()
        };
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let b: Vec<Vec<f64>> = (0..20).map(|_| env.sample_initial(&mut r)).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn reaching_goal_band_succeeds() {
        let mut env = world();
        env.reset_to(&[0.5, 0.5, 2.0, 0.8]).unwrap();
        env.x = 2.0;
        env.y = 3.5;
        let r = env.step(&[0.1, 0.0]).unwrap();
        assert_eq!(r.termination, Some(Termination::Goal));
        assert_eq!(r.reward, 1.0);
        assert!(env.step(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn driving_into_wall_fails() {
        let mut env = world();
        env.reset_to(&[0.6, 0.8, 2.5, 0.7]).unwrap();
        let mut last = None;
        for _ in 0..50 {
            let r = env.step(&[0.0, 0.15]).unwrap();
            if r.termination.is_some() {
                last = Some(r);
                break;
            }
        }
        let r = last.unwrap();
        assert_eq!(r.termination, Some(Termination::Collision));
        assert_eq!(r.reward, 0.0);
        assert_eq!(r.outcome(), Some(false));
    }

    #[test]
    fn idling_times_out() {
        let mut env = world();
        env.reset_to(&[1.0, 0.5, 2.0, 0.8]).unwrap();
        for i in 0..50 {
            let r = env.step(&[0.0, 0.0]).unwrap();
            assert_eq!(r.termination.is_some(), i == 49);
        }
        assert!(env.is_done());
    }

    #[test]
    fn displacement_never_exceeds_bound() {
        let mut env = world();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let init = env.sample_initial(&mut rng);
        env.reset_to(&init).unwrap();
        while !env.is_done() {
            let (x0, y0) = env.position();
            env.step(&[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).unwrap();
            let (x1, y1) = env.position();
            assert!((x1 - x0).abs() <= 0.15 + 1e-15 && (y1 - y0).abs() <= 0.15 + 1e-15);
        }
    }

    #[test]
    fn observation_normalization_round_trips() {
        let env = world();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let obs = StateVector::new(env.sample_initial(&mut rng), env.bounds().clone()).unwrap();
            let unit = obs.normalized();
            assert!(unit.iter().all(|u| (0.0..=1.0).contains(u)));
            let back = StateVector::from_normalized(&unit, env.bounds().clone()).unwrap();
            for (a, b) in back.values().iter().zip(obs.values()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn human_in_goal_band_idles() {
        let mut env = world();
        env.reset_to(&[0.5, 0.5, 2.0, 0.8]).unwrap();
        env.y = 3.6;
        assert_eq!(env.scripted_human(), vec![0.0, 0.0]);
    }

    fn run<F: FnMut(&GapWorld) -> Vec<f64>>(env: &mut GapWorld, mut policy: F) -> (bool, Vec<Vec<f64>>) {
        let mut actions = Vec::new();
        loop {
            let a = policy(env);
            actions.push(a.clone());
            let r = env.step(&a).unwrap();
            if let Some(o) = r.outcome() {
                return (o, actions);
            }
        }
    }

    #[test]
    fn scripted_human_is_deterministic_and_succeeds() {
        let mut env = world();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let init = env.sample_initial(&mut rng);
            env.reset_to(&init).unwrap();
            let (ok, a1) = run(&mut env, |e| e.scripted_human());
            env.reset_to(&init).unwrap();
            let (_, a2) = run(&mut env, |e| e.scripted_human());
            assert!(ok, "{init:?}");
            assert_eq!(a1, a2);
        }
    }

    #[test]
    fn baseline_profile_by_gap_width() {
        let mut env = world();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut rate = |w: f64, env: &mut GapWorld| {
            let mut wins = 0;
            for _ in 0..100 {
                let mut init = env.sample_initial(&mut rng);
                init[3] = w;
                env.reset_to(&init).unwrap();
                let mut noise = ChaCha8Rng::seed_from_u64(rng.gen());
                wins += run(env, |e| e.scripted_baseline(&mut noise)).0 as u32;
            }
            wins as f64 / 100.0
        };
        assert!(rate(1.2, &mut env) >= 0.9);
        assert!(rate(0.68, &mut env) <= 0.4);
    }
}
