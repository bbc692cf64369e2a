//! DDPG with demonstrations.
//!
//! Internally the actor emits actions in normalized units (`[-1, 1]` per
//! dimension) and both networks read unit-normalized states. [`DdpgAgent::act`]
//! converts to environment units; transitions store environment units and are
//! normalized again when sampled.

mod noise;
mod replay;

pub use noise::{noise_scale, OuNoise};
pub use replay::{ReplayBuffer, Transition};

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::ccbp::{Bound, StateVector};
use crate::controller::ControllerId;
use crate::error::{Error, Result};
use crate::nn::{Adam, Mlp, MlpGrads, OutputActivation};
use crate::rng::{SeedStreams, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdpgHyper {
    pub gamma: f64,
    pub batch_size: usize,
    pub demo_batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epsilon: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub noise_decay: f64,
    pub polyak: f64,
    pub ou_theta: f64,
    pub ou_sigma: f64,
    pub hidden: Vec<usize>,
    pub actor_final_scale: f64,
    pub replay_capacity: usize,
    pub demo_capacity: usize,
}

impl Default for DdpgHyper {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            batch_size: 128,
            demo_batch_size: 64,
            lambda1: 1.0,
            lambda2: 10.0,
            epsilon: 0.02,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            noise_decay: 0.998,
            polyak: 0.001,
            ou_theta: 0.15,
            ou_sigma: 0.2,
            hidden: vec![64, 32],
            actor_final_scale: 0.1,
            replay_capacity: 100_000,
            demo_capacity: 10_000,
        }
    }
}

impl DdpgHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::param(m.to_string()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.demo_batch_size == 0 {
            return bad("batch sizes must be at least 1");
        }
        if !(self.epsilon >= 0.0) {
            return bad("q-filter epsilon must be nonnegative");
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("loss weights must be nonnegative");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.polyak > 0.0 && self.polyak <= 1.0) {
            return bad("polyak rate must lie in (0, 1]");
        }
        if !(self.noise_decay > 0.0 && self.noise_decay <= 1.0) {
            return bad("noise decay must lie in (0, 1]");
        }
        if !(self.ou_theta >= 0.0 && self.ou_sigma >= 0.0) {
            return bad("OU parameters must be nonnegative");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer sizes must be nonempty and positive");
        }
        if self.replay_capacity == 0 || self.demo_capacity == 0 {
            return bad("replay capacities must be positive");
        }
        Ok(())
    }
}

/// Keeps the demonstration when its value beats the
/// actor's, relaxed by `epsilon * |q_actor|`.
pub fn q_filter(q_demo: f64, q_actor: f64, epsilon: f64) -> bool {
    q_demo > q_actor - epsilon * q_actor.abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub critic_loss: f64,
    pub dpg_grad_norm: f64,
    pub bc_loss: f64,
    /// Fraction of sampled demonstration tuples that passed the Q-filter;
    /// zero when no demonstrations are stored.
    pub filter_pass_fraction: f64,
}

/// Normalized minibatch arrays.
#[derive(Debug, Clone)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Array2<f64>,
    pub terminal: Vec<bool>,
}

/// Gradient of the actor loss `-(lambda1 * mean Q(s, pi(s)) - lambda2 * L_BC)`.
#[derive(Debug, Clone)]
pub struct ActorGradient {
    pub grads: MlpGrads,
    pub objective: f64,
    pub dpg_grad_norm: f64,
    pub bc_loss: f64,
    pub pass_mask: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    hyper: DdpgHyper,
    state_dim: usize,
    action_bounds: Vec<Bound>,
    learner_episodes: u64,
    train_steps: u64,
}

pub struct DdpgAgent {
    hyper: DdpgHyper,
    state_dim: usize,
    action_bounds: Vec<Bound>,
    actor: Mlp,
    critic: Mlp,
    target_actor: Mlp,
    target_critic: Mlp,
    actor_opt: Adam,
    critic_opt: Adam,
    replay: ReplayBuffer,
    demos: ReplayBuffer,
    staged: Vec<Transition>,
    noise: OuNoise,
    sample_rng: StreamRng,
    noise_rng: StreamRng,
    learner_episodes: u64,
    train_steps: u64,
}

impl DdpgAgent {
    /// Networks draw from the `agent_init` substream, minibatches from
    /// `replay_sampling` and exploration from `ou_noise`.
    pub fn new(state_dim: usize, action_bounds: Vec<Bound>, hyper: DdpgHyper, streams: &SeedStreams) -> Result<Self> {
        hyper.validate()?;
        if state_dim == 0 || action_bounds.is_empty() {
            return Err(Error::param("state and action dimensions must be positive"));
        }
        if action_bounds.iter().any(|b| !(b.min < b.max)) {
            return Err(Error::param("action bounds need min < max"));
        }
        let a_dim = action_bounds.len();
        let mut init = streams.stream("agent_init");
        let unit = OutputActivation::ScaledTanh {
            low: vec![-1.0; a_dim],
            high: vec![1.0; a_dim],
        };
        let mut actor_sizes = vec![state_dim];
        actor_sizes.extend(&hyper.hidden);
        actor_sizes.push(a_dim);
        let mut critic_sizes = vec![state_dim + a_dim];
        critic_sizes.extend(&hyper.hidden);
        critic_sizes.push(1);
        let actor = Mlp::new(&actor_sizes, unit, hyper.actor_final_scale, &mut init)?;
        let critic = Mlp::new(&critic_sizes, OutputActivation::Linear, 1.0, &mut init)?;
        Ok(Self {
            actor_opt: Adam::new(&actor, hyper.actor_lr),
            critic_opt: Adam::new(&critic, hyper.critic_lr),
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor,
            critic,
            replay: ReplayBuffer::new(hyper.replay_capacity)?,
            demos: ReplayBuffer::new(hyper.demo_capacity)?,
            staged: Vec::new(),
            noise: OuNoise::new(a_dim, hyper.ou_theta, hyper.ou_sigma),
            sample_rng: streams.stream("replay_sampling"),
            noise_rng: streams.stream("ou_noise"),
            learner_episodes: 0,
            train_steps: 0,
            state_dim,
            action_bounds,
            hyper,
        })
    }

    pub fn hyper(&self) -> &DdpgHyper {
        &self.hyper
    }

    pub fn actor(&self) -> &Mlp {
        &self.actor
    }

    pub fn critic(&self) -> &Mlp {
        &self.critic
    }

    pub fn target_actor(&self) -> &Mlp {
        &self.target_actor
    }

    pub fn target_critic(&self) -> &Mlp {
        &self.target_critic
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.replay
    }

    pub fn demos(&self) -> &ReplayBuffer {
        &self.demos
    }

    pub fn staged_len(&self) -> usize {
        self.staged.len()
    }

    pub fn learner_episodes(&self) -> u64 {
        self.learner_episodes
    }

    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    pub fn action_bounds(&self) -> &[Bound] {
        &self.action_bounds
    }

    pub fn noise_scale(&self) -> f64 {
        noise_scale(self.hyper.noise_decay, self.learner_episodes)
    }

    fn check_state(&self, s: &StateVector) -> Result<()> {
        if s.dim() != self.state_dim {
            return Err(Error::Shape(format!(
                "agent expects {}-d states, got {}",
                self.state_dim,
                s.dim()
            )));
        }
        Ok(())
    }

    pub fn normalize_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(&self.action_bounds)
            .map(|(v, b)| 2.0 * (v - b.min) / b.width() - 1.0)
            .collect()
    }

    pub fn denormalize_action(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.action_bounds)
            .map(|(v, b)| (b.min + (v + 1.0) * 0.5 * b.width()).clamp(b.min, b.max))
            .collect()
    }

    /// Resets the exploration process; call at the start of every episode.
    pub fn begin_episode(&mut self) {
        self.noise.reset();
    }

    /// Policy action in environment units, with decayed OU noise when
    /// exploring.
    pub fn act(&mut self, s: &StateVector, explore: bool) -> Result<Vec<f64>> {
        self.check_state(s)?;
        let mut u = self.actor.forward(&s.normalized())?;
        if explore {
            let scale = self.noise_scale();
            let n = self.noise.sample(&mut self.noise_rng);
            for (v, e) in u.iter_mut().zip(n) {
                *v = (*v + scale * e).clamp(-1.0, 1.0);
            }
        }
        Ok(self.denormalize_action(&u))
    }

    pub fn q_value(&self, s: &StateVector, action: &[f64]) -> Result<f64> {
        self.check_state(s)?;
        let mut x = s.normalized();
        x.extend(self.normalize_action(action));
        Ok(self.critic.forward(&x)?[0])
    }

    /// Every transition enters R. Transitions of non-learner episodes are
    /// also staged for R_D until [`DdpgAgent::finish_episode`].
    pub fn add_experience(&mut self, t: Transition, source: ControllerId) -> Result<()> {
        self.check_state(&t.state)?;
        self.check_state(&t.next_state)?;
        if t.action.len() != self.action_bounds.len() {
            return Err(Error::Shape("transition action dimension".into()));
        }
        if !t.reward.is_finite() {
            return Err(Error::NonFinite("transition reward".into()));
        }
        if source != ControllerId::Learner {
            self.staged.push(t.clone());
        }
        self.replay.push(t);
        Ok(())
    }

    /// Flushes staged demonstrations into R_D on non-learner success and
    /// advances the learner-episode counter after learner episodes.
    pub fn finish_episode(&mut self, source: ControllerId, success: bool) -> usize {
        let staged = std::mem::take(&mut self.staged);
        let mut flushed = 0;
        if source == ControllerId::Learner {
            self.learner_episodes += 1;
        } else if success {
            flushed = staged.len();
            for t in staged {
                self.demos.push(t);
            }
        }
        flushed
    }

    fn batch_from(&self, items: &[&Transition]) -> Batch {
        let n = items.len();
        let a_dim = self.action_bounds.len();
        let mut states = Array2::zeros((n, self.state_dim));
        let mut next_states = Array2::zeros((n, self.state_dim));
        let mut actions = Array2::zeros((n, a_dim));
        for (i, t) in items.iter().enumerate() {
            for (j, v) in t.state.normalized().into_iter().enumerate() {
                states[[i, j]] = v;
            }
            for (j, v) in t.next_state.normalized().into_iter().enumerate() {
                next_states[[i, j]] = v;
            }
            for (j, v) in self.normalize_action(&t.action).into_iter().enumerate() {
                actions[[i, j]] = v;
            }
        }
        Batch {
            states,
            actions,
            rewards: items.iter().map(|t| t.reward).collect(),
            next_states,
            terminal: items.iter().map(|t| t.terminal).collect(),
        }
    }

    pub fn make_batch(&self, items: &[Transition]) -> Batch {
        let refs: Vec<&Transition> = items.iter().collect();
        self.batch_from(&refs)
    }

    /// `y = r + gamma * Q'(s', pi'(s'))`, or `y = r` on terminal transitions.
    pub fn bellman_targets(&self, batch: &Batch) -> Result<Vec<f64>> {
        let next_a = self.target_actor.forward_batch(batch.next_states.view())?;
        let x = concatenate![Axis(1), batch.next_states, *next_a.output()];
        let q = self.target_critic.forward_batch(x.view())?;
        Ok(batch
            .rewards
            .iter()
            .zip(&batch.terminal)
            .zip(q.output().column(0))
            .map(|((r, term), q)| if *term { *r } else { r + self.hyper.gamma * q })
            .collect())
    }

    /// One Adam step of the critic on mean squared Bellman error; returns
    /// the pre-step loss.
    pub fn critic_update(&mut self, batch: &Batch) -> Result<f64> {
        let n = batch.rewards.len();
        if n == 0 {
            return Err(Error::contract("empty critic batch"));
        }
        let y = self.bellman_targets(batch)?;
        let x = concatenate![Axis(1), batch.states, batch.actions];
        let pass = self.critic.forward_batch(x.view())?;
        let q = pass.output().column(0);
        let mut loss = 0.0;
        let mut up = Array2::zeros((n, 1));
        for i in 0..n {
            let d = q[i] - y[i];
            loss += d * d;
            up[[i, 0]] = 2.0 * d / n as f64;
        }
        loss /= n as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("critic loss".into()));
        }
        let (grads, _) = self.critic.backward(&pass, up.view())?;
        self.critic_opt.step(&mut self.critic, &grads)?;
        Ok(loss)
    }

    /// Actor-loss gradient on `states` (policy-gradient part) and an
    /// optional normalized demonstration batch (behaviour-cloning part),
    /// with each demonstration tuple gated by [`q_filter`].
    pub fn actor_gradient(&self, states: &Array2<f64>, demo: Option<(&Array2<f64>, &Array2<f64>)>) -> Result<ActorGradient> {
        let n = states.nrows();
        if n == 0 {
            return Err(Error::contract("empty actor batch"));
        }
        let (l1, l2) = (self.hyper.lambda1, self.hyper.lambda2);
        let ds = self.state_dim;

        let pass = self.actor.forward_batch(states.view())?;
        let x = concatenate![Axis(1), *states, *pass.output()];
        let cpass = self.critic.forward_batch(x.view())?;
        let mean_q = cpass.output().mean().unwrap();
        let dq = self
            .critic
            .input_gradient(&cpass, Array2::from_elem((n, 1), 1.0 / n as f64).view())?;
        let up = dq.slice(s![.., ds..]).mapv(|g| -l1 * g);
        let (mut grads, _) = self.actor.backward(&pass, up.view())?;
        let dpg_grad_norm = grads.norm();

        let mut bc_loss = 0.0;
        let mut pass_mask = Vec::new();
        if let Some((ds_states, ds_actions)) = demo {
            if ds_states.nrows() != ds_actions.nrows() {
                return Err(Error::Shape("demo states and actions differ in length".into()));
            }
            if ds_states.nrows() > 0 {
                let dpass = self.actor.forward_batch(ds_states.view())?;
                let pi = dpass.output();
                let xa = concatenate![Axis(1), *ds_states, *pi];
                let xd = concatenate![Axis(1), *ds_states, *ds_actions];
                let qa = self.critic.forward_batch(xa.view())?;
                let qd = self.critic.forward_batch(xd.view())?;
                let mut up = Array2::zeros(pi.dim());
                for i in 0..pi.nrows() {
                    let keep = q_filter(qd.output()[[i, 0]], qa.output()[[i, 0]], self.hyper.epsilon);
                    pass_mask.push(keep);
                    if keep {
                        for j in 0..pi.ncols() {
                            let diff = pi[[i, j]] - ds_actions[[i, j]];
                            bc_loss += diff * diff;
                            up[[i, j]] = l2 * 2.0 * diff;
                        }
                    }
                }
                let (bc_grads, _) = self.actor.backward(&dpass, up.view())?;
                for (g, b) in grads.layers.iter_mut().zip(bc_grads.layers) {
                    g.weight += &b.weight;
                    g.bias += &b.bias;
                }
            }
        }
        Ok(ActorGradient {
            grads,
            objective: l1 * mean_q - l2 * bc_loss,
            dpg_grad_norm,
            bc_loss,
            pass_mask,
        })
    }

    fn actor_update(&mut self, states: &Array2<f64>, demo: Option<&Batch>) -> Result<ActorGradient> {
        let g = self.actor_gradient(states, demo.map(|d| (&d.states, &d.actions)))?;
        if !g.grads.is_finite() {
            return Err(Error::NonFinite("actor gradient".into()));
        }
        self.actor_opt.step(&mut self.actor, &g.grads)?;
        Ok(g)
    }

    /// Critic step, actor step, then Polyak averaging of both targets. A
    /// no-op returning `None` until R holds a full batch.
    pub fn train_step(&mut self) -> Result<Option<TrainStats>> {
        if self.replay.len() < self.hyper.batch_size {
            return Ok(None);
        }
        let items = self.replay.sample(self.hyper.batch_size, &mut self.sample_rng);
        let batch = self.batch_from(&items);
        let demo = if self.demos.is_empty() {
            None
        } else {
            let d = self.demos.sample(self.hyper.demo_batch_size, &mut self.sample_rng);
            Some(self.batch_from(&d))
        };
        let critic_loss = self.critic_update(&batch)?;
        let g = self.actor_update(&batch.states, demo.as_ref())?;
        self.target_critic.polyak_update(&self.critic, self.hyper.polyak)?;
        self.target_actor.polyak_update(&self.actor, self.hyper.polyak)?;
        self.train_steps += 1;
        let passed = g.pass_mask.iter().filter(|p| **p).count();
        Ok(Some(TrainStats {
            critic_loss,
            dpg_grad_norm: g.dpg_grad_norm,
            bc_loss: g.bc_loss,
            filter_pass_fraction: if g.pass_mask.is_empty() {
                0.0
            } else {
                passed as f64 / g.pass_mask.len() as f64
            },
        }))
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".json");
        PathBuf::from(p)
    }

    /// Writes actor, critic, target actor and target critic as consecutive
    /// MLP blocks to `path`, and hyperparameters plus counters to
    /// `path.json`. Optimizer moments and replay contents are not saved.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        for net in [&self.actor, &self.critic, &self.target_actor, &self.target_critic] {
            net.write_checkpoint(&mut w).map_err(io)?;
        }
        w.flush().map_err(io)?;
        let side = Self::sidecar_path(path);
        let meta = Sidecar {
            hyper: self.hyper.clone(),
            state_dim: self.state_dim,
            action_bounds: self.action_bounds.clone(),
            learner_episodes: self.learner_episodes,
            train_steps: self.train_steps,
        };
        std::fs::write(&side, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&side, e))
    }

    pub fn load_checkpoint(path: &Path, streams: &SeedStreams) -> Result<Self> {
        let side = Self::sidecar_path(path);
        let text = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let meta: Sidecar = serde_json::from_slice(&text)?;
        let mut agent = Self::new(meta.state_dim, meta.action_bounds, meta.hyper, streams)?;
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let a_dim = agent.action_bounds.len();
        let unit = OutputActivation::ScaledTanh {
            low: vec![-1.0; a_dim],
            high: vec![1.0; a_dim],
        };
        let actor = Mlp::read_checkpoint(&mut r, unit.clone())?;
        let critic = Mlp::read_checkpoint(&mut r, OutputActivation::Linear)?;
        let target_actor = Mlp::read_checkpoint(&mut r, unit)?;
        let target_critic = Mlp::read_checkpoint(&mut r, OutputActivation::Linear)?;
        if !(actor.same_architecture(&agent.actor) && critic.same_architecture(&agent.critic)) {
            return Err(Error::Shape("checkpoint architecture differs from its sidecar".into()));
        }
        agent.actor = actor;
        agent.critic = critic;
        agent.target_actor = target_actor;
        agent.target_critic = target_critic;
        agent.learner_episodes = meta.learner_episodes;
        agent.train_steps = meta.train_steps;
        Ok(agent)
    }

    /// Replace online and target networks, e.g. to freeze a snapshot.
    pub fn set_networks(&mut self, actor: Mlp, critic: Mlp) -> Result<()> {
        if !(actor.same_architecture(&self.actor) && critic.same_architecture(&self.critic)) {
            return Err(Error::Shape("replacement networks differ in architecture".into()));
        }
        self.target_actor = actor.clone();
        self.target_critic = critic.clone();
        self.actor_opt = Adam::new(&actor, self.hyper.actor_lr);
        self.critic_opt = Adam::new(&critic, self.hyper.critic_lr);
        self.actor = actor;
        self.critic = critic;
        Ok(())
    }
}
