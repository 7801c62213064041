//! PPO actor-critic training of the memory network on Concentration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax, softmax, Graph, NodeId};
use crate::concentration::{observation_dim, Concentration, DeckMode, GameRecord, Rewards};
use crate::error::{arg, Error, Result};
use crate::hebbian::{MemoryDynamics, MemoryNodes};
use crate::model::{rl_carry, rl_step_graph, run_rl_step, ModelConfig, RlParams};
use crate::optim::{adam_step, clip_gradients, orthogonal_init, AdamState};
use crate::tensor::{argmax, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    pub n_pairs: usize,
    pub n_envs: usize,
    pub rollout_steps: usize,
    pub iterations: usize,
    pub epochs: usize,
    /// Minibatches per epoch; environments are split evenly between them.
    pub minibatches: usize,
    pub lr: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub reward_pair: f64,
    pub penalty_flip: f64,
    pub grad_clip: f64,
    /// Games are cut off after this many flips and treated as finished.
    pub max_flips: usize,
    pub normalize_advantages: bool,
    pub deck_mode: DeckMode,
    pub seed: u64,
    /// Hand the agent to the observer every this many iterations; 0 disables.
    #[serde(default)]
    pub checkpoint_interval: usize,
}

impl PpoConfig {
    pub fn paper(n_pairs: usize) -> Self {
        Self {
            n_pairs,
            n_envs: 64,
            rollout_steps: if n_pairs >= 3 { 100 } else { 10 },
            iterations: 4000,
            epochs: 4,
            minibatches: 16,
            lr: 3e-4,
            value_coef: 0.1,
            entropy_coef: 0.01,
            gamma: 0.9,
            gae_lambda: 1.0,
            clip: 0.2,
            reward_pair: 25.0,
            penalty_flip: 0.5,
            grad_clip: 0.5,
            max_flips: 100,
            normalize_advantages: true,
            deck_mode: DeckMode::Fixed,
            seed: 0,
            checkpoint_interval: 500,
        }
    }

    pub fn desk() -> Self {
        Self { n_envs: 16, iterations: 500, checkpoint_interval: 100, ..Self::paper(2) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return arg("clip must lie in (0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return arg("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return arg("gae_lambda must lie in [0, 1]");
        }
        if self.n_pairs == 0 || self.n_envs == 0 || self.rollout_steps == 0 || self.epochs == 0 || self.max_flips == 0 {
            return arg("counts must be positive");
        }
        if self.minibatches == 0 || self.n_envs % self.minibatches != 0 {
            return arg("minibatches must divide n_envs");
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) {
            return arg("lr and grad_clip must be positive");
        }
        Ok(())
    }

    pub fn rewards(&self) -> Rewards {
        Rewards { pair: self.reward_pair, flip_penalty: self.penalty_flip }
    }
}

/// Model configuration for the agent's memory network on an `n_pairs` game.
pub fn agent_model_config(n_pairs: usize) -> ModelConfig {
    ModelConfig { vec_dim: observation_dim(n_pairs), ..ModelConfig::default() }
}

/// Fully connected network with tanh on every layer except the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub weights: Vec<Matrix>,
    /// Stored as column matrices so every tensor is a [`Matrix`].
    pub biases: Vec<Matrix>,
}

impl Mlp {
    /// Orthogonal weights with one gain per layer, zero biases.
    pub fn orthogonal<R: Rng + ?Sized>(sizes: &[usize], gains: &[f64], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || gains.len() != sizes.len() - 1 {
            return arg("need one gain per layer");
        }
        let weights = sizes.windows(2).zip(gains).map(|(w, &g)| orthogonal_init(w[1], w[0], g, rng)).collect();
        let biases = sizes[1..].iter().map(|&n| Matrix::zeros(n, 1)).collect();
        Ok(Self { weights, biases })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = x.to_vec();
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mv = w.matvec(&h)?;
            h = mv.iter().zip(&b.data).map(|(m, b)| {
                let mut v = 0.0;
                v += m;
                v += b;
                if i < last { v.tanh() } else { v }
            }).collect();
        }
        Ok(h)
    }

    pub fn register(&self, g: &mut Graph) -> MlpNodes {
        MlpNodes { layers: self.weights.iter().zip(&self.biases).map(|(w, b)| (g.param(w), g.param(b))).collect() }
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.weights.iter_mut().zip(self.biases.iter_mut()).flat_map(|(w, b)| [w, b]).collect()
    }
}

#[derive(Clone, Debug)]
pub struct MlpNodes {
    pub layers: Vec<(NodeId, NodeId)>,
}

impl MlpNodes {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let mv = g.matvec(w, h)?;
            h = g.lincomb(&[(mv, 1.0), (b, 1.0)], 0.0)?;
            if i < last {
                h = g.tanh(h)?;
            }
        }
        Ok(h)
    }

    pub fn ids(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Memory network plus actor and critic heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub model: ModelConfig,
    pub snn: RlParams,
    pub actor: Mlp,
    pub critic: Mlp,
}

/// Policy and value for one observation.
#[derive(Clone, Debug)]
pub struct AgentOutput {
    pub logits: Vec<f64>,
    pub value: f64,
    pub carry: MemoryDynamics,
}

impl Agent {
    /// Glorot memory network; orthogonal heads with gain sqrt(2), except the
    /// actor's output layer (gain 0.01) so the initial policy is near uniform.
    pub fn new<R: Rng + ?Sized>(model: ModelConfig, n_pairs: usize, rng: &mut R) -> Result<Self> {
        if model.vec_dim != observation_dim(n_pairs) {
            return arg(format!("model input {} does not match observation width {}", model.vec_dim, observation_dim(n_pairs)));
        }
        let snn = RlParams::init(&model, rng)?;
        let s2 = 2f64.sqrt();
        let actor = Mlp::orthogonal(&[model.l, 100, 100, 2 * n_pairs], &[s2, s2, 0.01], rng)?;
        let critic = Mlp::orthogonal(&[model.l + model.vec_dim, 100, 100, 1], &[s2, s2, s2], rng)?;
        Ok(Self { model, snn, actor, critic })
    }

    pub fn act(&self, observation: &[f64], carry: &MemoryDynamics) -> Result<AgentOutput> {
        let (counts, carry) = run_rl_step(&self.snn, &self.model, observation, carry)?;
        let features: Vec<f64> = counts.iter().map(|c| c * self.feature_scale()).collect();
        let logits = self.actor.forward(&features)?;
        let mut cin = features;
        cin.extend_from_slice(observation);
        let value = self.critic.forward(&cin)?[0];
        Ok(AgentOutput { logits, value, carry })
    }

    /// Value-layer counts are fed to the heads as rates over the readout window.
    pub fn feature_scale(&self) -> f64 {
        1.0 / self.model.tau_read as f64
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut v: Vec<&Matrix> = self.snn.tensors().to_vec();
        v.extend(self.actor.tensors());
        v.extend(self.critic.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v: Vec<&mut Matrix> = self.snn.tensors_mut().into_iter().collect();
        v.extend(self.actor.tensors_mut());
        v.extend(self.critic.tensors_mut());
        v
    }

    /// Tensor names in [`Agent::tensors`] order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names: Vec<String> = crate::model::RL_PARAM_NAMES.iter().map(|s| s.to_string()).collect();
        for (head, mlp) in [("actor", &self.actor), ("critic", &self.critic)] {
            for i in 0..mlp.weights.len() {
                names.push(format!("{head}.w{i}"));
                names.push(format!("{head}.b{i}"));
            }
        }
        names
    }
}

/// Discounted returns per step, bootstrapped from `bootstrap` after the last step
/// unless that step ended a game.
pub fn compute_returns(rewards: &[f64], dones: &[bool], gamma: f64, bootstrap: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut next = bootstrap;
    for t in (0..rewards.len()).rev() {
        if dones[t] {
            next = 0.0;
        }
        next = rewards[t] + gamma * next;
        out[t] = next;
    }
    out
}

/// Generalized advantage estimates; `lambda = 1` gives returns minus values.
pub fn compute_gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64, bootstrap: f64) -> Vec<f64> {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut last = 0.0;
    for t in (0..n).rev() {
        let (next_v, nonterminal) = if dones[t] { (0.0, 0.0) } else if t + 1 < n { (values[t + 1], 1.0) } else { (bootstrap, 1.0) };
        let delta = rewards[t] + gamma * next_v - values[t];
        last = delta + gamma * lambda * nonterminal * last;
        adv[t] = last;
    }
    adv
}

/// Clipped-surrogate PPO loss of one sample (to be minimized).
#[allow(clippy::too_many_arguments)]
pub fn ppo_sample_loss(
    g: &mut Graph,
    logits: NodeId,
    value: NodeId,
    action: usize,
    logp_old: f64,
    advantage: f64,
    ret: f64,
    cfg: &PpoConfig,
) -> Result<NodeId> {
    let logp_all = g.log_softmax(logits)?;
    let logp = g.pick(logp_all, action)?;
    let log_ratio = g.affine(logp, 1.0, -logp_old)?;
    let ratio = g.exp(log_ratio)?;
    let clipped = g.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)?;
    let s1 = g.scale(ratio, advantage)?;
    let s2 = g.scale(clipped, advantage)?;
    let surrogate = g.min(s1, s2)?;
    let probs = g.softmax(logits)?;
    let neg_entropy = g.dot(probs, logp_all)?;
    let err = g.affine(value, 1.0, -ret)?;
    let sq = g.square(err)?;
    g.lincomb(&[(surrogate, -1.0), (sq, 0.5 * cfg.value_coef), (neg_entropy, cfg.entropy_coef)], 0.0)
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// One environment's slice of a rollout.
#[derive(Clone, Debug)]
struct Segment {
    start_carry: MemoryDynamics,
    observations: Vec<Vec<f64>>,
    actions: Vec<usize>,
    logp: Vec<f64>,
    values: Vec<f64>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
    advantages: Vec<f64>,
    returns: Vec<f64>,
}

struct Worker {
    env: Concentration,
    carry: MemoryDynamics,
    obs: Vec<f64>,
    episode_reward: f64,
}

/// Per-iteration training statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoIterationStats {
    pub iteration: usize,
    pub games_finished: usize,
    pub mean_flips: Option<f64>,
    pub mean_loss: f64,
    pub entropy: f64,
}

pub trait PpoObserver {
    fn on_iteration(&mut self, _stats: &PpoIterationStats) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _iteration: usize, _agent: &Agent) -> Result<()> {
        Ok(())
    }
}

impl PpoObserver for () {}

/// Result of [`ppo_train`].
pub struct PpoRun {
    pub agent: Agent,
    pub games: Vec<GameRecord>,
    pub stats: Vec<PpoIterationStats>,
}

pub fn ppo_train(cfg: &PpoConfig, model: &ModelConfig) -> Result<PpoRun> {
    ppo_train_with(cfg, model, &mut ())
}

pub fn ppo_train_with(cfg: &PpoConfig, model: &ModelConfig, observer: &mut dyn PpoObserver) -> Result<PpoRun> {
    cfg.validate()?;
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut agent = Agent::new(model.clone(), cfg.n_pairs, &mut rng)?;
    let mut adam = AdamState::new(&agent.tensors().iter().map(|m| m.len()).collect::<Vec<_>>());
    let mut workers = (0..cfg.n_envs)
        .map(|_| {
            let mut env = Concentration::new(cfg.n_pairs, cfg.deck_mode, cfg.rewards(), &mut rng)?;
            let obs = env.reset(&mut rng).to_vec();
            Ok(Worker { env, carry: rl_carry(model), obs, episode_reward: 0.0 })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut games = Vec::new();
    let mut stats = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let games_before = games.len();
        let mut segments = Vec::with_capacity(cfg.n_envs);
        for w in workers.iter_mut() {
            let mut seg = Segment {
                start_carry: w.carry.clone(),
                observations: Vec::new(),
                actions: Vec::new(),
                logp: Vec::new(),
                values: Vec::new(),
                rewards: Vec::new(),
                dones: Vec::new(),
                advantages: Vec::new(),
                returns: Vec::new(),
            };
            for _ in 0..cfg.rollout_steps {
                let out = agent.act(&w.obs, &w.carry)?;
                let probs = softmax(&out.logits);
                let a = sample_categorical(&probs, &mut rng);
                let step = w.env.step(a)?;
                w.episode_reward += step.reward;
                let done = step.done || w.env.state.flips_so_far >= cfg.max_flips;
                seg.observations.push(std::mem::take(&mut w.obs));
                seg.actions.push(a);
                seg.logp.push(log_softmax(&out.logits)[a]);
                seg.values.push(out.value);
                seg.rewards.push(step.reward);
                seg.dones.push(done);
                if done {
                    games.push(GameRecord { game_index: games.len(), n_flips: w.env.state.flips_so_far, total_reward: w.episode_reward });
                    w.episode_reward = 0.0;
                    w.obs = w.env.reset(&mut rng).to_vec();
                    w.carry = rl_carry(model);
                } else {
                    w.obs = step.observation.to_vec();
                    w.carry = out.carry;
                }
            }
            let bootstrap = if *seg.dones.last().expect("rollout has steps") { 0.0 } else { agent.act(&w.obs, &w.carry)?.value };
            seg.advantages = compute_gae(&seg.rewards, &seg.values, &seg.dones, cfg.gamma, cfg.gae_lambda, bootstrap);
            seg.returns = seg.advantages.iter().zip(&seg.values).map(|(a, v)| a + v).collect();
            segments.push(seg);
        }
        if cfg.normalize_advantages {
            let all: Vec<f64> = segments.iter().flat_map(|s| s.advantages.iter().copied()).collect();
            let m = all.iter().sum::<f64>() / all.len() as f64;
            let sd = (all.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / all.len() as f64).sqrt();
            for s in segments.iter_mut() {
                s.advantages.iter_mut().for_each(|a| *a = (*a - m) / (sd + 1e-8));
            }
        }

        let per_mb = cfg.n_envs / cfg.minibatches;
        let mut losses = Vec::new();
        let mut entropies = Vec::new();
        for _ in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..cfg.n_envs).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            for mb in order.chunks(per_mb) {
                let samples = (mb.len() * cfg.rollout_steps) as f64;
                let results = mb
                    .par_iter()
                    .map(|&e| segment_gradient(&agent, &segments[e], cfg, samples))
                    .collect::<Result<Vec<_>>>()?;
                let mut grads: Vec<Vec<f64>> = agent.tensors().iter().map(|m| vec![0.0; m.len()]).collect();
                for (loss, ent, gs) in results {
                    losses.push(loss);
                    entropies.push(ent);
                    for (acc, gi) in grads.iter_mut().zip(gs) {
                        acc.iter_mut().zip(gi).for_each(|(a, x)| *a += x);
                    }
                }
                clip_gradients(&mut grads, cfg.grad_clip)?;
                adam_step(&mut agent.tensors_mut(), &grads, &mut adam, cfg.lr)
                    .map_err(|e| Error::Numeric(format!("PPO iteration {it}: {e}")))?;
            }
        }
        let finished = &games[games_before..];
        let s = PpoIterationStats {
            iteration: it,
            games_finished: finished.len(),
            mean_flips: (!finished.is_empty()).then(|| finished.iter().map(|g| g.n_flips as f64).sum::<f64>() / finished.len() as f64),
            mean_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
            entropy: entropies.iter().sum::<f64>() / entropies.len().max(1) as f64,
        };
        if !s.mean_loss.is_finite() {
            return Err(Error::Numeric(format!("PPO loss diverged at iteration {it}")));
        }
        observer.on_iteration(&s)?;
        stats.push(s);
        if cfg.checkpoint_interval > 0 && (it + 1) % cfg.checkpoint_interval == 0 {
            observer.on_checkpoint(it + 1, &agent)?;
        }
    }
    Ok(PpoRun { agent, games, stats })
}

/// Loss, mean entropy and parameter gradients of one environment's segment,
/// unrolled from its detached starting carry.
fn segment_gradient(agent: &Agent, seg: &Segment, cfg: &PpoConfig, samples: f64) -> Result<(f64, f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let snn = agent.snn.register(&mut g);
    let actor = agent.actor.register(&mut g);
    let critic = agent.critic.register(&mut g);
    let mut mem = MemoryNodes::from_dynamics(&mut g, &seg.start_carry);
    let mut terms = Vec::with_capacity(seg.actions.len());
    let mut entropy = 0.0;
    for t in 0..seg.actions.len() {
        let obs = &seg.observations[t];
        let counts = rl_step_graph(&mut g, &snn, &agent.model, obs, &mut mem)?;
        let features = g.scale(counts, agent.feature_scale())?;
        let obs_node = g.constant_vec(obs.clone());
        let logits = actor.forward(&mut g, features)?;
        let cin = g.concat(&[features, obs_node])?;
        let value = critic.forward(&mut g, cin)?;
        let p = softmax(g.value(logits));
        entropy -= p.iter().zip(log_softmax(g.value(logits))).map(|(p, l)| p * l).sum::<f64>();
        let loss = ppo_sample_loss(&mut g, logits, value, seg.actions[t], seg.logp[t], seg.advantages[t], seg.returns[t], cfg)?;
        terms.push((loss, 1.0 / samples));
        if seg.dones[t] {
            mem = MemoryNodes::fresh(&mut g, agent.model.l, agent.model.d_feedback);
        }
    }
    let total = g.lincomb(&terms, 0.0)?;
    let grads = g.backward(total)?;
    let mut ids: Vec<NodeId> = snn.ids().to_vec();
    ids.extend(actor.ids());
    ids.extend(critic.ids());
    let out = ids.iter().map(|&id| grads.get_or_zeros(id, g.value(id).len())).collect();
    Ok((g.scalar(total), entropy / seg.actions.len() as f64, out))
}

/// Greedy (argmax) play; returns flips per game, games capped at `max_flips`.
pub fn evaluate_agent(agent: &Agent, n_pairs: usize, deck_mode: DeckMode, n_games: usize, max_flips: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut env = Concentration::new(n_pairs, deck_mode, Rewards::default(), &mut rng)?;
    let mut out = Vec::with_capacity(n_games);
    for _ in 0..n_games {
        let mut obs = env.reset(&mut rng).to_vec();
        let mut carry = rl_carry(&agent.model);
        while !env.state.is_done() && env.state.flips_so_far < max_flips {
            let o = agent.act(&obs, &carry)?;
            obs = env.step(argmax(&o.logits))?.observation.to_vec();
            carry = o.carry;
        }
        out.push(env.state.flips_so_far);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn returns_examples() {
        assert_eq!(compute_returns(&[1.0, 1.0], &[false, true], 0.9, 7.0), vec![1.9, 1.0]);
        assert_eq!(compute_returns(&[0.0; 3], &[false; 3], 0.9, 0.0), vec![0.0; 3]);
        assert_eq!(compute_returns(&[1.0, 2.0, 3.0], &[false; 3], 0.0, 5.0), vec![1.0, 2.0, 3.0]);
        let r = compute_returns(&[1.0, 0.0], &[false, false], 0.5, 4.0);
        assert_eq!(r, vec![2.0, 2.0]);
    }

    #[test]
    fn gae_with_unit_lambda_is_returns_minus_values() {
        let rewards = [1.0, -0.5, 24.5, -0.5];
        let values = [0.3, 2.0, -1.0, 0.7];
        let dones = [false, false, true, false];
        let adv = compute_gae(&rewards, &values, &dones, 0.9, 1.0, 3.0);
        let ret = compute_returns(&rewards, &dones, 0.9, 3.0);
        for t in 0..4 {
            assert!((adv[t] - (ret[t] - values[t])).abs() < 1e-12);
        }
    }

    fn surrogate_grad(ratio: f64, adv: f64) -> f64 {
        // d(loss)/d(logp) for a 2-action policy, isolating the surrogate term
        let cfg = PpoConfig { value_coef: 0.0, entropy_coef: 0.0, ..PpoConfig::desk() };
        let mut g = Graph::new();
        let logits = g.param_vec(vec![0.0, 0.0]);
        let value = g.constant_vec(vec![0.0]);
        let logp_old = (0.5f64).ln() - ratio.ln();
        let loss = ppo_sample_loss(&mut g, logits, value, 0, logp_old, adv, 0.0, &cfg).unwrap();
        let gr = g.backward(loss).unwrap();
        let v = g.scalar(loss);
        assert!((v + ratio.min(ratio.clamp(0.8, 1.2)) * adv).abs() < 1e-12 || (v + (ratio * adv).min(ratio.clamp(0.8, 1.2) * adv)).abs() < 1e-12);
        gr.get(logits).unwrap()[0]
    }

    #[test]
    fn clipping_rule() {
        // ratio 1: vanilla policy gradient -A * d logp/d logit0 = -A * (1 - 0.5)
        assert!((surrogate_grad(1.0, 2.0) - (-2.0 * 0.5)).abs() < 1e-12);
        // ratio 1.5 with positive advantage: clipped at 1.2, no gradient
        assert_eq!(surrogate_grad(1.5, 2.0), 0.0);
        // ratio 1.5 with negative advantage: min keeps the unclipped term
        assert!((surrogate_grad(1.5, -2.0) - (2.0 * 1.5 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn initial_policy_is_near_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let agent = Agent::new(agent_model_config(2), 2, &mut rng).unwrap();
        let mut env = Concentration::new(2, DeckMode::Fixed, Rewards::default(), &mut rng).unwrap();
        let obs = env.reset(&mut rng).to_vec();
        let out = agent.act(&obs, &rl_carry(&agent.model)).unwrap();
        let p = softmax(&out.logits);
        let h: f64 = -p.iter().map(|p| p * p.ln()).sum::<f64>();
        assert!((h - 4f64.ln()).abs() < 0.1);
    }

    #[test]
    fn mlp_graph_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = Mlp::orthogonal(&[5, 7, 3], &[2f64.sqrt(), 1.0], &mut rng).unwrap();
        m.biases[0].data[2] = 0.3;
        let x = vec![0.1, -2.0, 0.5, 1.0, 0.0];
        let mut g = Graph::new();
        let nodes = m.register(&mut g);
        let xn = g.constant_vec(x.clone());
        let y = nodes.forward(&mut g, xn).unwrap();
        assert_eq!(g.value(y), m.forward(&x).unwrap().as_slice());
    }

    #[test]
    fn short_training_is_deterministic() {
        let cfg = PpoConfig { n_envs: 2, minibatches: 1, rollout_steps: 3, iterations: 2, epochs: 1, ..PpoConfig::desk() };
        let model = ModelConfig { tau_sim: 10, tau_read: 5, l: 8, vec_encoder: 6, ..agent_model_config(2) };
        let a = ppo_train(&cfg, &model).unwrap();
        let b = ppo_train(&cfg, &model).unwrap();
        assert_eq!(a.agent, b.agent);
        assert_eq!(a.stats, b.stats);
    }
}
