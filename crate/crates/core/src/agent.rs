//! Q-learning over the fused user/KG state: a fully connected Q-network,
//! ε-greedy action selection, one- or two-network bootstrap targets, and the
//! training loop that couples the Q update with the gated environment update.

use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{
    apply_event_traced, apply_gate_grads, backward_event, build_state, EnvState, EventTrace,
    GateGrads, GateParams, Strategy,
};
use crate::error::{Error, Result};
use crate::ingest::{CheckinEvent, ContextTimeline};
use crate::math;
use crate::replay::{priority_reward, priority_td, PriorityKind, ReplayMemory, Transition};
use crate::reward::{
    poi_components, reward, CategoryVectors, RewardBaselines, RewardKind, RewardWeights,
};
use crate::spatial_kg::SpatialKg;

pub use crate::environment::pool_kg;

/// Fully connected ReLU network mapping a state to one Q-value per POI; the
/// output layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNetwork {
    /// Layer widths, input first, actions last.
    pub dims: Vec<usize>,
    /// `weights[l]` is dims[l+1] × dims[l], row-major.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl QNetwork {
    /// Xavier-uniform weights — U[−b, b] with b = √(6/(fan_in + fan_out)) —
    /// and zero biases.
    pub fn new(input: usize, hidden: &[usize], actions: usize, seed: u64) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(actions);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(
                (0..fan_in * fan_out)
                    .map(|_| rng.gen_range(-bound..=bound))
                    .collect(),
            );
            biases.push(vec![0.0; fan_out]);
        }
        QNetwork { dims, weights, biases }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn n_actions(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Per-layer activations, input included.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        debug_assert_eq!(x.len(), self.input_dim());
        let mut acts = Vec::with_capacity(self.dims.len());
        acts.push(x.to_vec());
        for l in 0..self.weights.len() {
            let mut z = math::matvec(
                &self.weights[l],
                self.dims[l + 1],
                self.dims[l],
                acts.last().unwrap(),
            );
            math::axpy(&mut z, 1.0, &self.biases[l]);
            if l + 1 < self.weights.len() {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.activations(x).pop().unwrap()
    }

    /// Accumulate `d_out · ∂out[action]/∂params` into `grads` and return
    /// `d_out · ∂out[action]/∂input`.
    pub fn backward_into(
        &self,
        x: &[f64],
        action: usize,
        d_out: f64,
        grads: &mut QGrads,
    ) -> Vec<f64> {
        let acts = self.activations(x);
        let last = self.weights.len() - 1;
        let mut delta = vec![0.0; self.dims[last + 1]];
        delta[action] = d_out;
        for l in (0..=last).rev() {
            math::add_outer(&mut grads.weights[l], &delta, &acts[l], 1.0);
            math::axpy(&mut grads.biases[l], 1.0, &delta);
            let mut prev = math::matvec_t(&self.weights[l], self.dims[l + 1], self.dims[l], &delta);
            if l > 0 {
                for (p, a) in prev.iter_mut().zip(&acts[l]) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        delta
    }

    /// ∂Q[action]/∂input.
    pub fn input_gradient(&self, x: &[f64], action: usize) -> Vec<f64> {
        let acts = self.activations(x);
        let last = self.weights.len() - 1;
        let mut delta = vec![0.0; self.dims[last + 1]];
        delta[action] = 1.0;
        for l in (0..=last).rev() {
            let mut prev = math::matvec_t(&self.weights[l], self.dims[l + 1], self.dims[l], &delta);
            if l > 0 {
                for (p, a) in prev.iter_mut().zip(&acts[l]) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        delta
    }

    /// SGD step: params -= lr * grads.
    pub fn apply_grads(&mut self, grads: &QGrads, lr: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            math::axpy(w, -lr, g);
        }
        for (b, g) in self.biases.iter_mut().zip(&grads.biases) {
            math::axpy(b, -lr, g);
        }
    }
}

/// Gradient accumulator shaped like a [`QNetwork`].
#[derive(Debug, Clone)]
pub struct QGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl QGrads {
    pub fn zeros(net: &QNetwork) -> Self {
        QGrads {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Dqn,
    Ddqn,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dqn" => Ok(Variant::Dqn),
            "ddqn" => Ok(Variant::Ddqn),
            other => Err(Error::Config(format!("unknown agent variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub variant: Variant,
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub lr: f64,
    /// Target-network refresh period, in steps.
    pub sync_every: u64,
    pub eps_start: f64,
    pub eps_end: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            variant: Variant::Ddqn,
            hidden: vec![256, 128],
            gamma: 0.9,
            lr: 1e-5,
            sync_every: 100,
            eps_start: 1.0,
            eps_end: 0.05,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.sync_every == 0 {
            return Err(Error::Config("sync_every must be >= 1".into()));
        }
        for e in [self.eps_start, self.eps_end] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::Config(format!("epsilon {e} outside [0, 1]")));
            }
        }
        if self.eps_end > self.eps_start {
            return Err(Error::Config("eps_end must not exceed eps_start".into()));
        }
        Ok(())
    }
}

/// Linear anneal from `eps_start` down to `eps_end` across the first half of
/// the step budget, flat afterwards.
pub fn epsilon(cfg: &AgentConfig, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return cfg.eps_end;
    }
    let half = 0.5 * total_steps as f64;
    let frac = (step as f64 / half).min(1.0);
    cfg.eps_start + (cfg.eps_end - cfg.eps_start) * frac
}

/// ε-greedy: explore uniformly with probability `eps`, otherwise take the
/// argmax (ties to the lowest index).
pub fn select_action(net: &QNetwork, state: &[f64], eps: f64, rng: &mut ChaCha8Rng) -> usize {
    if rng.gen::<f64>() < eps {
        rng.gen_range(0..net.n_actions())
    } else {
        math::argmax(&net.forward(state))
    }
}

/// One-step bootstrap target. `dqn`: y = r + γ·max_a Q_t(s′, a). `ddqn`: the
/// online network picks a* = argmax_a Q_e(s′, a) and the target network
/// prices it, which can never exceed the `dqn` value.
pub fn compute_target(
    variant: Variant,
    t: &Transition,
    q_e: &QNetwork,
    q_t: &QNetwork,
    gamma: f64,
) -> f64 {
    let next_t = q_t.forward(&t.s_next);
    let max_t = next_t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    match variant {
        Variant::Dqn => t.r + gamma * max_t,
        Variant::Ddqn => {
            let a_star = math::argmax(&q_e.forward(&t.s_next));
            debug_assert!(next_t[a_star] <= max_t);
            t.r + gamma * next_t[a_star]
        }
    }
}

/// One SGD step on the mean squared error between Q_e(s, a) and the targets,
/// with gradient 2(q − y)/B routed through the taken action only. Targets are
/// evaluated against the pre-step networks.
pub fn train_step(
    batch: &[Transition],
    q_e: &mut QNetwork,
    q_t: &QNetwork,
    variant: Variant,
    gamma: f64,
    lr: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Invalid("train_step needs a non-empty batch".into()));
    }
    let b = batch.len() as f64;
    let mut grads = QGrads::zeros(q_e);
    let mut loss = 0.0;
    for t in batch {
        let q = q_e.forward(&t.s)[t.a];
        let y = compute_target(variant, t, q_e, q_t, gamma);
        let diff = q - y;
        loss += diff * diff;
        q_e.backward_into(&t.s, t.a, 2.0 * diff / b, &mut grads);
    }
    loss /= b;
    if !loss.is_finite() {
        return Err(Error::NonFinite("q-network training loss".into()));
    }
    q_e.apply_grads(&grads, lr);
    Ok(loss)
}

/// Push the current transition's TD error back through the environment's
/// gated update chain and take an SGD step on the gate parameters. The fused
/// state is [user ‖ pooled KG], so the target-network input gradient at s′
/// splits into those halves.
#[allow(clippy::too_many_arguments)]
pub fn train_env_step(
    t: &Transition,
    trace: &EventTrace,
    q_e: &QNetwork,
    q_t: &QNetwork,
    variant: Variant,
    gamma: f64,
    params: &mut GateParams,
    lr: f64,
) {
    let q = q_e.forward(&t.s)[t.a];
    let y = compute_target(variant, t, q_e, q_t, gamma);
    let a_star = match variant {
        Variant::Dqn => math::argmax(&q_t.forward(&t.s_next)),
        Variant::Ddqn => math::argmax(&q_e.forward(&t.s_next)),
    };
    let input_grad = q_t.input_gradient(&t.s_next, a_star);
    // d(q − y)²/dθ = −2(q − y)·γ·dQ_t(s′, a*)/dθ for parameters that only
    // enter through s′.
    let factor = -2.0 * (q - y) * gamma;
    let dim = params.dim;
    let delta_user: Vec<f64> = input_grad[..dim].iter().map(|g| factor * g).collect();
    let delta_pool: Vec<f64> = input_grad[dim..].iter().map(|g| factor * g).collect();
    let mut grads = GateGrads::zeros(dim, params.ctx_cols);
    backward_event(trace, params, &delta_user, &delta_pool, &mut grads);
    apply_gate_grads(params, &grads, lr);
}

/// Hard refresh: deep-copy the online network into the target whenever the
/// (1-based) step count hits a multiple of `k`.
pub fn sync_target(q_e: &QNetwork, q_t: &mut QNetwork, step: u64, k: u64) {
    if k > 0 && step % k == 0 {
        *q_t = q_e.clone();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub agent: AgentConfig,
    pub strategy: Strategy,
    pub reward_kind: RewardKind,
    pub weights: RewardWeights,
    pub baselines: RewardBaselines,
    pub priority: PriorityKind,
    pub replay_capacity: usize,
    pub batch_size: usize,
    /// Sample a batch every this many steps.
    pub train_every: u64,
    /// Step size for the gate-parameter/context-projection updates; the
    /// state-update path usually tolerates far less than the Q-network does.
    pub env_lr: f64,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            agent: AgentConfig::default(),
            strategy: Strategy::Up2,
            reward_kind: RewardKind::R2,
            weights: RewardWeights { lambda_d: 1.0, lambda_c: 1.0, lambda_p: 1.0 },
            baselines: RewardBaselines::default(),
            priority: PriorityKind::Td,
            replay_capacity: 50_000,
            batch_size: 32,
            train_every: 1,
            env_lr: 1e-5,
            episodes: 1,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.agent.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.train_every == 0 {
            return Err(Error::Config("train_every must be >= 1".into()));
        }
        if !(self.env_lr > 0.0 && self.env_lr.is_finite()) {
            return Err(Error::Config(format!(
                "environment learning rate {} must be positive",
                self.env_lr
            )));
        }
        Ok(())
    }
}

/// Per-episode telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    /// Events processed (skipped lookups excluded).
    pub steps: u64,
    pub mean_loss: f64,
    pub mean_reward: f64,
    /// Fraction of events where the chosen action was the true POI.
    pub accuracy: f64,
}

/// All mutable training state, serializable for exact save/resume.
///
/// Each episode is an independent rollout: the environment restarts from
/// `env0` and replays the training stream, while the networks, gate
/// parameters, replay memory, and RNGs persist across episodes. After the
/// final episode `env` holds the state produced by one full pass, which is
/// what evaluation continues from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trainer {
    pub cfg: TrainingConfig,
    pub q_e: QNetwork,
    pub q_t: QNetwork,
    pub params: GateParams,
    /// Environment at construction; every episode starts from here.
    pub env0: EnvState,
    pub env: EnvState,
    pub replay: ReplayMemory,
    pub rng_action: ChaCha8Rng,
    pub rng_replay: ChaCha8Rng,
    pub step: u64,
    pub episode: usize,
    pub skipped_events: usize,
    /// (user, true POI) pairs actually applied, in order.
    pub applied: Vec<(String, usize)>,
}

impl Trainer {
    pub fn new(
        cfg: TrainingConfig,
        env: EnvState,
        params: GateParams,
        n_actions: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        params.validate()?;
        if n_actions == 0 {
            return Err(Error::Config("the action set is empty".into()));
        }
        let input_dim = 2 * env.dim();
        let seed = cfg.seed;
        let q_e = QNetwork::new(input_dim, &cfg.agent.hidden, n_actions, seed);
        let q_t = q_e.clone();
        let replay = ReplayMemory::new(cfg.replay_capacity)?;
        Ok(Trainer {
            cfg,
            q_e,
            q_t,
            params,
            env0: env.clone(),
            env,
            replay,
            rng_action: ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)),
            rng_replay: ChaCha8Rng::seed_from_u64(seed.wrapping_add(2)),
            step: 0,
            episode: 0,
            skipped_events: 0,
            applied: Vec::new(),
        })
    }

    /// One pass over the training events. Per event: read the fused state,
    /// pick an ε-greedy action, score it against the true visit, store the
    /// transition, apply the true visit to the environment, train on a
    /// sampled batch, backpropagate the current TD error into the gate
    /// parameters, and periodically refresh the target network. Events whose
    /// user or POI cannot be resolved are skipped and tallied.
    pub fn run_episode(
        &mut self,
        kg: &SpatialKg,
        timeline: &ContextTimeline,
        events: &[CheckinEvent],
        vectors: &CategoryVectors,
    ) -> Result<EpisodeRecord> {
        self.env = self.env0.clone();
        let total_steps = (self.cfg.episodes * events.len()) as u64;
        let mut loss_sum = 0.0;
        let mut n_train = 0u64;
        let mut reward_sum = 0.0;
        let mut hits = 0u64;
        let mut n_events = 0u64;
        for ev in events {
            let real_poi = match kg.poi_index(&ev.poi_id) {
                Ok(p) => p,
                Err(_) => {
                    self.skipped_events += 1;
                    continue;
                }
            };
            let user_vec = match self.env.users.get(&ev.user_id) {
                Some(u) => u.clone(),
                None => {
                    self.skipped_events += 1;
                    continue;
                }
            };
            let s = build_state(&user_vec, &self.env.kg_state);
            let eps = epsilon(&self.cfg.agent, self.step, total_steps);
            let a = select_action(&self.q_e, &s, eps, &mut self.rng_action);
            let comps = poi_components(kg, real_poi, a, vectors);
            let r = reward(self.cfg.reward_kind, &comps, &self.cfg.weights, &self.cfg.baselines)?;

            let ctx = timeline.at(ev.timestamp);
            let trace = apply_event_traced(
                &mut self.env,
                kg,
                &ev.user_id,
                &ev.poi_id,
                ctx,
                &self.params,
                self.cfg.strategy,
            )?;
            self.applied.push((ev.user_id.clone(), real_poi));
            let s_next = build_state(&self.env.users[&ev.user_id], &self.env.kg_state);

            let mut t = Transition { s, a, r, s_next, priority: 0.0 };
            t.priority = match self.cfg.priority {
                PriorityKind::Reward => priority_reward(&t),
                PriorityKind::Td => priority_td(&t, &self.q_e, self.cfg.agent.gamma),
            };
            self.replay.push(t.clone());
            self.step += 1;
            n_events += 1;
            reward_sum += r;
            if a == real_poi {
                hits += 1;
            }

            if self.step % self.cfg.train_every == 0 {
                let idxs = self.replay.sample_indices(self.cfg.batch_size, &mut self.rng_replay)?;
                if self.cfg.priority == PriorityKind::Td {
                    for &i in &idxs {
                        let x = priority_td(self.replay.get(i), &self.q_e, self.cfg.agent.gamma);
                        self.replay.set_priority(i, x);
                    }
                }
                let batch: Vec<Transition> = idxs.iter().map(|&i| self.replay.get(i).clone()).collect();
                let loss = train_step(
                    &batch,
                    &mut self.q_e,
                    &self.q_t,
                    self.cfg.agent.variant,
                    self.cfg.agent.gamma,
                    self.cfg.agent.lr,
                )?;
                loss_sum += loss;
                n_train += 1;
                train_env_step(
                    &t,
                    &trace,
                    &self.q_e,
                    &self.q_t,
                    self.cfg.agent.variant,
                    self.cfg.agent.gamma,
                    &mut self.params,
                    self.cfg.env_lr,
                );
            }
            sync_target(&self.q_e, &mut self.q_t, self.step, self.cfg.agent.sync_every);
        }
        let rec = EpisodeRecord {
            episode: self.episode,
            steps: n_events,
            mean_loss: if n_train > 0 { loss_sum / n_train as f64 } else { 0.0 },
            mean_reward: if n_events > 0 { reward_sum / n_events as f64 } else { 0.0 },
            accuracy: if n_events > 0 { hits as f64 / n_events as f64 } else { 0.0 },
        };
        self.episode += 1;
        Ok(rec)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub trainer: Trainer,
    pub episodes: Vec<EpisodeRecord>,
}

/// Full driver: `cfg.episodes` passes over `events`. Zero events (or zero
/// episodes) leave the agent untrained with an empty episode log.
pub fn run_training(
    cfg: TrainingConfig,
    env: EnvState,
    params: GateParams,
    kg: &SpatialKg,
    timeline: &ContextTimeline,
    events: &[CheckinEvent],
    vectors: &CategoryVectors,
) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(cfg, env, params, kg.poi_ids.len())?;
    let mut episodes = Vec::new();
    if !events.is_empty() {
        for _ in 0..trainer.cfg.episodes {
            episodes.push(trainer.run_episode(kg, timeline, events, vectors)?);
        }
    }
    Ok(TrainOutput { trainer, episodes })
}
