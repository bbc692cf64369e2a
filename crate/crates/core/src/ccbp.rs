//! Continuous correlated beta process (CCBP) success prediction.
//!
//! Every visited state of an episode is stored as a Bernoulli observation
//! carrying that episode's outcome. The success probability of a controller at
//! a query state is a beta distribution whose pseudo-counts are the prior plus
//! Gaussian-kernel weighted sums of stored successes and failures.
//!
//! States are normalized to the unit box using their declared bounds before
//! any distance is computed, so one length scale is meaningful per
//! environment regardless of the units of each coordinate.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize, Serializer};

use crate::controller::ControllerId;
use crate::error::{Error, Result};

/// Closed interval used to normalize one state coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub min: f64,
    pub max: f64,
}

impl Bound {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn width(&self) -> f64 {
        self.max - self.min
    }
}

/// A point in an environment's continuous state space.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    values: Vec<f64>,
    bounds: Arc<[Bound]>,
}

impl StateVector {
    pub fn new(values: Vec<f64>, bounds: Arc<[Bound]>) -> Result<Self> {
        if values.len() != bounds.len() {
            return Err(Error::contract(format!(
                "state has {} coordinates but {} bounds",
                values.len(),
                bounds.len()
            )));
        }
        for (i, b) in bounds.iter().enumerate() {
            if !(b.min.is_finite() && b.max.is_finite() && b.min < b.max) {
                return Err(Error::param(format!(
                    "bound {i} must satisfy min < max, got [{}, {}]",
                    b.min, b.max
                )));
            }
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("state coordinate {i} is {}", values[i])));
        }
        Ok(Self { values, bounds })
    }

    /// Inverse of [`StateVector::normalized`].
    pub fn from_normalized(unit: &[f64], bounds: Arc<[Bound]>) -> Result<Self> {
        if unit.len() != bounds.len() {
            return Err(Error::contract("normalized vector and bounds differ in length"));
        }
        let values = unit
            .iter()
            .zip(bounds.iter())
            .map(|(u, b)| b.min + u * b.width())
            .collect();
        Self::new(values, bounds)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bounds(&self) -> &Arc<[Bound]> {
        &self.bounds
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn normalized(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(self.bounds.iter())
            .map(|(v, b)| (v - b.min) / b.width())
            .collect()
    }
}

impl Serialize for StateVector {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.values.serialize(serializer)
    }
}

/// Beta distribution over a success probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite() && beta > 0.0 && beta.is_finite()) {
            return Err(Error::param(format!(
                "beta pseudo-counts must be positive and finite, got ({alpha}, {beta})"
            )));
        }
        Ok(Self { alpha, beta })
    }

    /// Inverts the beta moment equations.
    pub fn from_moments(mean: f64, std: f64) -> Result<Self> {
        if !(mean > 0.0 && mean < 1.0) {
            return Err(Error::param(format!("prior mean must lie in (0, 1), got {mean}")));
        }
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::param(format!("prior std must be positive, got {std}")));
        }
        let var = std * std;
        let max_var = mean * (1.0 - mean);
        if var >= max_var {
            return Err(Error::param(format!(
                "prior variance {var} must be below mean*(1-mean) = {max_var}"
            )));
        }
        let total = max_var / var - 1.0;
        Self::new(mean * total, (1.0 - mean) * total)
    }

    pub fn total(&self) -> f64 {
        self.alpha + self.beta
    }

    pub fn mean(&self) -> f64 {
        self.alpha / self.total()
    }

    pub fn variance(&self) -> f64 {
        let t = self.total();
        self.alpha * self.beta / (t * t * (t + 1.0))
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }
}

/// Predicted success probability and its standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub p_hat: f64,
    pub sigma_hat: f64,
}

impl From<BetaParams> for Prediction {
    fn from(b: BetaParams) -> Self {
        Prediction {
            p_hat: b.mean(),
            sigma_hat: b.std(),
        }
    }
}

/// One visited state labelled with its episode's outcome.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutcomeObservation {
    pub state: StateVector,
    pub success: bool,
    pub controller: ControllerId,
    pub episode_index: u64,
}

/// Summary of a finished episode, as consumed by length-scale estimation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeRecord {
    pub controller: ControllerId,
    pub states: Vec<StateVector>,
    pub success: bool,
    pub human_cost: f64,
    pub episode_index: u64,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_length_scale(l: f64) -> Result<()> {
    if l > 0.0 && l.is_finite() {
        Ok(())
    } else {
        Err(Error::param(format!("length scale must be positive, got {l}")))
    }
}

/// Gaussian kernel `exp(-|s - s2|^2 / l)` on unit-normalized states.
pub fn kernel(s: &StateVector, s2: &StateVector, length_scale: f64) -> Result<f64> {
    check_length_scale(length_scale)?;
    if s.dim() != s2.dim() {
        return Err(Error::contract(format!(
            "kernel dimension mismatch: {} vs {}",
            s.dim(),
            s2.dim()
        )));
    }
    Ok((-squared_distance(&s.normalized(), &s2.normalized()) / length_scale).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CcbpSettings {
    pub length_scale: f64,
    /// Sliding window, in episodes, applied to online-learnt controllers.
    pub window: usize,
    pub prior: BetaParams,
}

#[derive(Debug, Clone)]
pub struct CcbpPredictor {
    length_scale: f64,
    window: usize,
    default_prior: BetaParams,
    priors: BTreeMap<ControllerId, BetaParams>,
    learner_controllers: BTreeSet<ControllerId>,
    human_controllers: BTreeSet<ControllerId>,
    store: Vec<OutcomeObservation>,
    // normalized coordinates of `store`, row-major
    coords: Vec<f64>,
    dim: Option<usize>,
    last_episode: Option<u64>,
}

impl CcbpPredictor {
    /// Learner is windowed and Human is reported as always successful.
    pub fn new(settings: CcbpSettings) -> Result<Self> {
        check_length_scale(settings.length_scale)?;
        if settings.window == 0 {
            return Err(Error::param("window must be at least one episode"));
        }
        Ok(Self {
            length_scale: settings.length_scale,
            window: settings.window,
            default_prior: settings.prior,
            priors: BTreeMap::new(),
            learner_controllers: [ControllerId::Learner].into(),
            human_controllers: [ControllerId::Human].into(),
            store: Vec::new(),
            coords: Vec::new(),
            dim: None,
            last_episode: None,
        })
    }

    pub fn with_prior(mut self, controller: ControllerId, prior: BetaParams) -> Self {
        self.priors.insert(controller, prior);
        self
    }

    pub fn with_learner_controllers(mut self, set: impl IntoIterator<Item = ControllerId>) -> Self {
        self.learner_controllers = set.into_iter().collect();
        self
    }

    pub fn with_human_controllers(mut self, set: impl IntoIterator<Item = ControllerId>) -> Self {
        self.human_controllers = set.into_iter().collect();
        self
    }

    pub fn length_scale(&self) -> f64 {
        self.length_scale
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn prior(&self, controller: ControllerId) -> BetaParams {
        self.priors.get(&controller).copied().unwrap_or(self.default_prior)
    }

    pub fn observations(&self) -> &[OutcomeObservation] {
        &self.store
    }

    pub fn is_human(&self, controller: ControllerId) -> bool {
        self.human_controllers.contains(&controller)
    }

    pub fn is_windowed(&self, controller: ControllerId) -> bool {
        self.learner_controllers.contains(&controller)
    }

    /// Whether an observation from `episode_index` counts for `controller`
    /// when the current episode number is `now`.
    pub fn in_window(&self, controller: ControllerId, episode_index: u64, now: i64) -> bool {
        !self.is_windowed(controller) || (episode_index as i64) > now - self.window as i64
    }

    pub fn record_episode(
        &mut self,
        states: &[StateVector],
        success: bool,
        controller: ControllerId,
        episode_index: u64,
    ) -> Result<()> {
        if states.is_empty() {
            return Err(Error::contract("an episode must visit at least one state"));
        }
        if let Some(last) = self.last_episode {
            if episode_index <= last {
                return Err(Error::contract(format!(
                    "episode index {episode_index} does not follow recorded episode {last}"
                )));
            }
        }
        let dim = self.dim.unwrap_or(states[0].dim());
        if let Some(bad) = states.iter().find(|s| s.dim() != dim) {
            return Err(Error::contract(format!(
                "state of dimension {} recorded into a predictor of dimension {dim}",
                bad.dim()
            )));
        }
        self.dim = Some(dim);
        self.last_episode = Some(episode_index);
        for s in states {
            self.coords.extend(s.normalized());
            self.store.push(OutcomeObservation {
                state: s.clone(),
                success,
                controller,
                episode_index,
            });
        }
        Ok(())
    }

    /// Posterior pseudo-counts for a non-human controller at `s`.
    pub fn posterior(&self, s: &StateVector, controller: ControllerId, now: i64) -> Result<BetaParams> {
        if self.is_human(controller) {
            return Err(Error::contract(format!(
                "{controller} is modelled as always successful and has no posterior"
            )));
        }
        if let Some(dim) = self.dim {
            if s.dim() != dim {
                return Err(Error::contract(format!(
                    "query of dimension {} against a store of dimension {dim}",
                    s.dim()
                )));
            }
        }
        let query = s.normalized();
        let dim = query.len();
        let prior = self.prior(controller);
        let (mut alpha, mut beta) = (prior.alpha, prior.beta);
        for (obs, coords) in self.store.iter().zip(self.coords.chunks_exact(dim.max(1))) {
            if obs.controller != controller || !self.in_window(controller, obs.episode_index, now) {
                continue;
            }
            let k = (-squared_distance(coords, &query) / self.length_scale).exp();
            if obs.success {
                alpha += k;
            } else {
                beta += k;
            }
        }
        BetaParams::new(alpha, beta)
    }

    pub fn predict(&self, s: &StateVector, controller: ControllerId, now: i64) -> Result<Prediction> {
        if self.is_human(controller) {
            return Ok(Prediction {
                p_hat: 1.0,
                sigma_hat: 0.0,
            });
        }
        self.posterior(s, controller, now).map(Prediction::from)
    }
}

/// `n` log-spaced values covering `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n)
                .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
                .collect()
        }
    }
}

pub fn default_length_scale_grid() -> Vec<f64> {
    log_grid(0.01, 100.0, 20)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthScaleFit {
    pub length_scale: f64,
    /// `(l, total holdout log-likelihood)` for every grid value.
    pub log_likelihoods: Vec<(f64, f64)>,
}

/// Maximum-likelihood length scale over `grid`.
///
/// Holdout outcomes are scored by the Bernoulli log-likelihood of the
/// posterior mean at each holdout episode's initial state. Exact ties go to
/// the smaller length scale.
pub fn estimate_length_scale(
    train: &[EpisodeRecord],
    holdout: &[EpisodeRecord],
    grid: &[f64],
    prior: BetaParams,
) -> Result<LengthScaleFit> {
    if train.is_empty() || holdout.is_empty() {
        return Err(Error::param("length-scale estimation needs train and holdout episodes"));
    }
    if grid.is_empty() {
        return Err(Error::param("length-scale grid is empty"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::param("length-scale grid must be strictly increasing"));
    }
    if holdout.iter().any(|e| e.states.is_empty()) {
        return Err(Error::param("holdout episode without an initial state"));
    }
    let mut log_likelihoods = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &l in grid {
        let mut predictor = CcbpPredictor::new(CcbpSettings {
            length_scale: l,
            window: 1,
            prior,
        })?
        .with_learner_controllers([])
        .with_human_controllers([]);
        let mut ordered: Vec<&EpisodeRecord> = train.iter().collect();
        ordered.sort_by_key(|e| e.episode_index);
        for (i, e) in ordered.iter().enumerate() {
            predictor.record_episode(&e.states, e.success, e.controller, i as u64)?;
        }
        let mut total = 0.0;
        for e in holdout {
            let p = predictor.posterior(&e.states[0], e.controller, i64::MAX)?.mean();
            total += if e.success { p.ln() } else { (1.0 - p).ln() };
        }
        log_likelihoods.push((l, total));
        if best.map_or(true, |(_, ll)| total > ll) {
            best = Some((l, total));
        }
    }
    Ok(LengthScaleFit {
        length_scale: best.map(|(l, _)| l).unwrap_or(grid[0]),
        log_likelihoods,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_bounds(d: usize) -> Arc<[Bound]> {
        vec![Bound::new(0.0, 1.0); d].into()
    }

    fn sv(values: &[f64]) -> StateVector {
        StateVector::new(values.to_vec(), unit_bounds(values.len())).unwrap()
    }

    fn default_prior() -> BetaParams {
        BetaParams::from_moments(0.8, 0.35).unwrap()
    }

    fn predictor(prior: BetaParams, l: f64, m: usize) -> CcbpPredictor {
        CcbpPredictor::new(CcbpSettings {
            length_scale: l,
            window: m,
            prior,
        })
        .unwrap()
    }

    #[test]
    fn kernel_examples() {
        let a = sv(&[0.3, 0.4]);
        assert_eq!(kernel(&a, &a, 0.7).unwrap(), 1.0);
        let b = sv(&[1.3, 0.4]);
        assert!((kernel(&a, &b, 1.0).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        // squared distance 4.1 after normalization
        let c = sv(&[0.0, 0.0]);
        let d = sv(&[4.1f64.sqrt(), 0.0]);
        assert!((kernel(&c, &d, 4.1).unwrap() - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn kernel_normalizes_by_bounds() {
        let bounds: Arc<[Bound]> = vec![Bound::new(0.0, 4.0)].into();
        let a = StateVector::new(vec![0.0], bounds.clone()).unwrap();
        let b = StateVector::new(vec![4.0], bounds).unwrap();
        assert!((kernel(&a, &b, 1.0).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn kernel_errors() {
        let a = sv(&[0.3, 0.4]);
        assert!(matches!(kernel(&a, &sv(&[0.1]), 1.0), Err(Error::Contract(_))));
        assert!(matches!(kernel(&a, &a, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(kernel(&a, &a, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn state_vector_validates() {
        assert!(StateVector::new(vec![f64::NAN], unit_bounds(1)).is_err());
        assert!(StateVector::new(vec![0.0, 1.0], unit_bounds(1)).is_err());
        assert!(StateVector::new(vec![0.0], vec![Bound::new(1.0, 1.0)].into()).is_err());
    }

    #[test]
    fn prior_from_moments_examples() {
        let p = default_prior();
        assert!((p.alpha - 0.245).abs() < 1e-3, "{p:?}");
        assert!((p.beta - 0.0612).abs() < 1e-3, "{p:?}");
        let u = BetaParams::from_moments(0.5, (1.0f64 / 12.0).sqrt()).unwrap();
        assert!((u.alpha - 1.0).abs() < 1e-4 && (u.beta - 1.0).abs() < 1e-4);
        let s = BetaParams::from_moments(0.5, 0.1).unwrap();
        assert!((s.alpha - s.beta).abs() < 1e-12);
    }

    #[test]
    fn prior_from_moments_rejects_invalid() {
        let err = BetaParams::from_moments(0.8, 0.5).unwrap_err().to_string();
        assert!(err.contains("mean*(1-mean)"), "{err}");
        assert!(BetaParams::from_moments(0.0, 0.1).is_err());
        assert!(BetaParams::from_moments(1.0, 0.1).is_err());
        assert!(BetaParams::from_moments(0.5, 0.0).is_err());
    }

    #[test]
    fn record_episode_contract() {
        let mut p = predictor(default_prior(), 1.0, 50);
        p.record_episode(&[sv(&[0.1]), sv(&[0.2]), sv(&[0.3])], true, ControllerId::Learner, 0)
            .unwrap();
        assert_eq!(p.observations().len(), 3);
        assert!(p.observations().iter().all(|o| o.success && o.episode_index == 0));
        assert!(p.record_episode(&[], true, ControllerId::Learner, 1).is_err());
        assert!(p.record_episode(&[sv(&[0.1])], true, ControllerId::Learner, 0).is_err());
        assert!(p.record_episode(&[sv(&[0.1, 0.2])], true, ControllerId::Learner, 1).is_err());
    }

    #[test]
    fn posterior_examples() {
        let prior = default_prior();
        let mut p = predictor(prior, 1.0, 50);
        let s = sv(&[0.5, 0.5]);
        assert_eq!(p.posterior(&s, ControllerId::Baseline, 0).unwrap(), prior);
        p.record_episode(&[s.clone()], true, ControllerId::Baseline, 0).unwrap();
        let post = p.posterior(&s, ControllerId::Baseline, 0).unwrap();
        assert!((post.alpha - (prior.alpha + 1.0)).abs() < 1e-12);
        assert_eq!(post.beta, prior.beta);
        assert!((post.mean() - 0.9531).abs() < 1e-3);
        // other controllers unaffected
        assert_eq!(p.posterior(&s, ControllerId::Learner, 0).unwrap(), prior);
        assert!(p.posterior(&s, ControllerId::Human, 0).is_err());
    }

    #[test]
    fn window_boundary_is_strict() {
        let prior = default_prior();
        let mut p = predictor(prior, 1.0, 50);
        let s = sv(&[0.5]);
        p.record_episode(&[s.clone()], false, ControllerId::Learner, 10).unwrap();
        // index = now - m is excluded, index = now - m + 1 included
        assert_eq!(p.posterior(&s, ControllerId::Learner, 60).unwrap(), prior);
        assert_ne!(p.posterior(&s, ControllerId::Learner, 59).unwrap(), prior);
        // non-learner controllers are never windowed
        let mut q = predictor(prior, 1.0, 50);
        q.record_episode(&[s.clone()], false, ControllerId::Baseline, 10).unwrap();
        assert_ne!(q.posterior(&s, ControllerId::Baseline, 10_000).unwrap(), prior);
    }

    #[test]
    fn predict_examples() {
        let p = predictor(default_prior(), 1.0, 50);
        let s = sv(&[0.2]);
        let pr = p.predict(&s, ControllerId::Learner, 0).unwrap();
        assert!((pr.p_hat - 0.8).abs() < 5e-3 && (pr.sigma_hat - 0.35).abs() < 5e-3);
        let u = predictor(BetaParams::new(1.0, 1.0).unwrap(), 1.0, 50);
        let pr = u.predict(&s, ControllerId::Baseline, 0).unwrap();
        assert!((pr.p_hat - 0.5).abs() < 1e-6);
        assert!((pr.sigma_hat - 0.288675).abs() < 1e-6);
        let h = p.predict(&s, ControllerId::Human, 0).unwrap();
        assert_eq!((h.p_hat, h.sigma_hat), (1.0, 0.0));
    }

    #[test]
    fn sigma_decreases_with_identical_observations() {
        let mut p = predictor(default_prior(), 1.0, 1000);
        let s = sv(&[0.4, 0.6]);
        let mut last = p.predict(&s, ControllerId::Baseline, 0).unwrap().sigma_hat;
        for k in 0..30 {
            p.record_episode(&[s.clone()], true, ControllerId::Baseline, k).unwrap();
            let now = p.predict(&s, ControllerId::Baseline, k as i64).unwrap().sigma_hat;
            assert!(now < last, "episode {k}: {now} >= {last}");
            last = now;
        }
    }

    #[test]
    fn single_grid_value_is_returned() {
        let e = |k: u64, ok: bool| EpisodeRecord {
            controller: ControllerId::Learner,
            states: vec![sv(&[0.1 * k as f64])],
            success: ok,
            human_cost: 0.0,
            episode_index: k,
        };
        let fit = estimate_length_scale(&[e(0, true)], &[e(1, false)], &[0.3], default_prior()).unwrap();
        assert_eq!(fit.length_scale, 0.3);
        assert!(estimate_length_scale(&[], &[e(1, false)], &[0.3], default_prior()).is_err());
        assert!(estimate_length_scale(&[e(0, true)], &[], &[0.3], default_prior()).is_err());
        assert!(estimate_length_scale(&[e(0, true)], &[e(1, true)], &[], default_prior()).is_err());
        assert!(estimate_length_scale(&[e(0, true)], &[e(1, true)], &[0.3, 0.2], default_prior()).is_err());
    }

    #[test]
    fn identical_outcomes_prefer_large_length_scale() {
        // All train and holdout outcomes are successes at the same states:
        // more sharing only raises the predicted success probability.
        let e = |k: u64| EpisodeRecord {
            controller: ControllerId::Learner,
            states: vec![sv(&[0.25 * (k % 4) as f64, 0.5])],
            success: true,
            human_cost: 0.0,
            episode_index: k,
        };
        let train: Vec<_> = (0..8).map(e).collect();
        let holdout: Vec<_> = (0..8).map(e).collect();
        let grid = [0.01, 0.1, 1.0];
        let fit = estimate_length_scale(&train, &holdout, &grid, default_prior()).unwrap();
        // brute force: evaluate each grid value independently
        let brute: Vec<f64> = grid
            .iter()
            .map(|&l| {
                holdout
                    .iter()
                    .map(|h| {
                        let (mut a, mut b) = (default_prior().alpha, default_prior().beta);
                        for t in &train {
                            let k = kernel(&t.states[0], &h.states[0], l).unwrap();
                            if t.success {
                                a += k
                            } else {
                                b += k
                            }
                        }
                        (a / (a + b)).ln()
                    })
                    .sum()
            })
            .collect();
        assert!(brute.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(fit.length_scale, 1.0);
        for ((_, ll), b) in fit.log_likelihoods.iter().zip(&brute) {
            assert!((ll - b).abs() < 1e-9);
        }
    }

    #[test]
    fn log_grid_endpoints() {
        let g = default_length_scale_grid();
        assert_eq!(g.len(), 20);
        assert!((g[0] - 0.01).abs() < 1e-15 && (g[19] - 100.0).abs() < 1e-9);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    /// Independent double-loop oracle over raw (unnormalized) coordinates.
    fn oracle_counts(
        obs: &[(Vec<f64>, bool, ControllerId, u64)],
        bounds: &[(f64, f64)],
        q: &[f64],
        c: ControllerId,
        now: i64,
        m: i64,
        windowed: bool,
        prior: BetaParams,
        l: f64,
    ) -> (f64, f64) {
        let mut a = prior.alpha;
        let mut b = prior.beta;
        for (x, ok, who, k) in obs {
            if *who != c || (windowed && (*k as i64) <= now - m) {
                continue;
            }
            let mut d2 = 0.0;
            for j in 0..q.len() {
                let (lo, hi) = bounds[j];
                let u = (x[j] - lo) / (hi - lo);
                let v = (q[j] - lo) / (hi - lo);
                d2 += (u - v) * (u - v);
            }
            let w = (-d2 / l).exp();
            if *ok {
                a += w;
            } else {
                b += w;
            }
        }
        (a, b)
    }

    #[test]
    fn posterior_matches_double_loop_oracle() {
        let prior = default_prior();
        let mut rng = ChaCha8Rng::seed_from_u64(0xCCB9);
        for _ in 0..100 {
            let d = rng.gen_range(1..=6);
            let bounds: Vec<(f64, f64)> = (0..d)
                .map(|_| {
                    let lo = rng.gen_range(-5.0..5.0);
                    (lo, lo + rng.gen_range(0.5..10.0))
                })
                .collect();
            let arc: Arc<[Bound]> = bounds.iter().map(|&(a, b)| Bound::new(a, b)).collect();
            let l = rng.gen_range(0.01..5.0);
            let m = rng.gen_range(1..20);
            let mut p = predictor(prior, l, m);
            let mut raw = Vec::new();
            let mut k = 0u64;
            while raw.len() < 500 {
                let c = ControllerId::ALL[rng.gen_range(0..2)];
                let ok = rng.gen_bool(0.6);
                let n = rng.gen_range(1..30).min(500 - raw.len());
                let states: Vec<StateVector> = (0..n)
                    .map(|_| {
                        let v: Vec<f64> = bounds.iter().map(|&(a, b)| rng.gen_range(a..b)).collect();
                        StateVector::new(v, arc.clone()).unwrap()
                    })
                    .collect();
                p.record_episode(&states, ok, c, k).unwrap();
                raw.extend(states.iter().map(|s| (s.values().to_vec(), ok, c, k)));
                k += rng.gen_range(1..3);
                if rng.gen_bool(0.1) {
                    break;
                }
            }
            let q: Vec<f64> = bounds.iter().map(|&(a, b)| rng.gen_range(a..b)).collect();
            let qs = StateVector::new(q.clone(), arc.clone()).unwrap();
            let now = k as i64;
            for c in [ControllerId::Baseline, ControllerId::Learner] {
                let got = p.posterior(&qs, c, now).unwrap();
                let (a, b) = oracle_counts(&raw, &bounds, &q, c, now, m as i64, c == ControllerId::Learner, prior, l);
                assert!((got.alpha - a).abs() < 1e-12 && (got.beta - b).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn kernel_bounded_and_symmetric(
            a in proptest::collection::vec(-3.0f64..3.0, 3),
            b in proptest::collection::vec(-3.0f64..3.0, 3),
            l in 0.01f64..10.0,
        ) {
            let (sa, sb) = (sv(&a), sv(&b));
            let k1 = kernel(&sa, &sb, l).unwrap();
            let k2 = kernel(&sb, &sa, l).unwrap();
            prop_assert!(k1 > 0.0 || squared_distance(&a, &b) / l > 700.0);
            prop_assert!(k1 <= 1.0);
            prop_assert_eq!(k1, k2);
        }

        #[test]
        fn moments_round_trip(alpha in 0.05f64..50.0, beta in 0.05f64..50.0) {
            let b = BetaParams::new(alpha, beta).unwrap();
            let r = BetaParams::from_moments(b.mean(), b.std()).unwrap();
            prop_assert!((r.alpha - alpha).abs() < 1e-9 * alpha.max(1.0));
            prop_assert!((r.beta - beta).abs() < 1e-9 * beta.max(1.0));
        }

        #[test]
        fn success_never_lowers_mean(
            pts in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, any::<bool>()), 0..20),
            new in (0.0f64..1.0, 0.0f64..1.0),
            q in (0.0f64..1.0, 0.0f64..1.0),
            success in any::<bool>(),
        ) {
            let mut p = predictor(default_prior(), 0.2, 100);
            for (k, (x, y, ok)) in pts.iter().enumerate() {
                p.record_episode(&[sv(&[*x, *y])], *ok, ControllerId::Baseline, k as u64).unwrap();
            }
            let qs = sv(&[q.0, q.1]);
            let before = p.predict(&qs, ControllerId::Baseline, 1000).unwrap().p_hat;
            p.record_episode(&[sv(&[new.0, new.1])], success, ControllerId::Baseline, 500).unwrap();
            let after = p.predict(&qs, ControllerId::Baseline, 1000).unwrap().p_hat;
            if success {
                prop_assert!(after >= before - 1e-15);
            } else {
                prop_assert!(after <= before + 1e-15);
            }
        }

        #[test]
        fn window_restores_prior(n in 1usize..10, m in 1usize..20, d in 1usize..4) {
            let prior = default_prior();
            let mut p = predictor(prior, 0.5, m);
            let s = sv(&vec![0.5; d]);
            for k in 0..n {
                p.record_episode(&[s.clone()], k % 2 == 0, ControllerId::Learner, k as u64).unwrap();
            }
            let now = (n - 1 + m) as i64;
            let got = p.predict(&s, ControllerId::Learner, now).unwrap();
            let want = Prediction::from(prior);
            prop_assert_eq!(got, want);
        }
    }
}
