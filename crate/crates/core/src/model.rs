//! Encoders, Hebbian memory and linear readout assembled into one network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::error::{arg, Result};
use crate::hebbian::{HebbianMemoryState, HebbianParams, MemoryDynamics, MemoryLayout, MemoryNodes, MemoryWeightNodes, MemoryWeights, StepMode};
use crate::optim::glorot_init;
use crate::snn::{LifLayerState, LifNode, LifParams, SpikeRaster};
use crate::tensor::Matrix;

/// Spiking layers in the order used for rate statistics.
pub const LAYER_NAMES: [&str; 4] = ["vector_encoder", "label_encoder", "key", "value"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Steps each input item is presented for.
    pub tau_sim: usize,
    /// Trailing steps of the query window summed by the readout.
    pub tau_read: usize,
    pub d_feedback: usize,
    /// Neurons in the key and value layers.
    pub l: usize,
    /// Input width of the vector encoder (observation width for the agent).
    pub vec_dim: usize,
    pub vec_encoder: usize,
    pub label_encoder: usize,
    /// Label range; labels are one-hot of this length and the readout has this many classes.
    pub output_dim: usize,
    pub lif: LifParams,
    pub hebbian: HebbianParams,
    #[serde(default)]
    pub readout_init: ReadoutInit,
}

/// Initialization of the readout matrix `W_out`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReadoutInit {
    /// All zeros: initial logits are uniform whatever the value layer does.
    #[default]
    Zero,
    /// Glorot uniform with gain sqrt(2), like every other matrix.
    Glorot,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            tau_sim: 100,
            tau_read: 30,
            d_feedback: 1,
            l: 100,
            vec_dim: 10,
            vec_encoder: 80,
            label_encoder: 80,
            output_dim: 3,
            lif: LifParams::default(),
            hebbian: HebbianParams::default(),
            readout_init: ReadoutInit::Zero,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.lif.validate()?;
        self.hebbian.validate()?;
        if self.tau_sim == 0 || self.tau_read == 0 || self.tau_read > self.tau_sim {
            return arg(format!("need 0 < tau_read <= tau_sim, got {} and {}", self.tau_read, self.tau_sim));
        }
        if self.d_feedback == 0 {
            return arg("d_feedback must be at least 1");
        }
        if [self.l, self.vec_dim, self.vec_encoder, self.label_encoder, self.output_dim].contains(&0) {
            return arg("layer sizes must be positive");
        }
        Ok(())
    }

    pub fn layout(&self) -> MemoryLayout {
        MemoryLayout { l: self.l, d: self.vec_encoder + self.label_encoder }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fact {
    pub vector: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeInput {
    pub facts: Vec<Fact>,
    pub query: Vec<f64>,
    pub target_label: usize,
}

impl EpisodeInput {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.facts.is_empty() {
            return arg("episode has no facts");
        }
        for (i, f) in self.facts.iter().enumerate() {
            if f.label == 0 || f.label > cfg.output_dim {
                return arg(format!("label {} outside 1..={}", f.label, cfg.output_dim));
            }
            if f.vector.len() != cfg.vec_dim {
                return arg(format!("fact vector has {} entries, expected {}", f.vector.len(), cfg.vec_dim));
            }
            if self.facts[..i].iter().any(|o| o.label == f.label) {
                return arg(format!("label {} repeated within the episode", f.label));
            }
        }
        let matches: Vec<&Fact> = self.facts.iter().filter(|f| f.vector == self.query).collect();
        if matches.len() != 1 {
            return arg(format!("query matches {} facts, expected exactly one", matches.len()));
        }
        if matches[0].label != self.target_label {
            return arg("target label is not the label of the queried fact");
        }
        Ok(())
    }
}

/// Learned weights of the association model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// `vec_encoder x vec_dim`
    pub enc_vec: Matrix,
    /// `label_encoder x output_dim`
    pub enc_label: Matrix,
    pub memory: MemoryWeights,
    /// `output_dim x l`
    pub w_out: Matrix,
}

pub const PARAM_NAMES: [&str; 6] = ["enc_vec", "enc_label", "w_s_key", "w_s_value", "w_r_key", "w_out"];

impl ModelParams {
    /// Glorot-uniform initialization with gain sqrt(2); the readout follows `cfg.readout_init`.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let gain = 2f64.sqrt();
        let d = cfg.layout().d;
        Ok(Self {
            enc_vec: glorot_init(cfg.vec_encoder, cfg.vec_dim, gain, rng),
            enc_label: glorot_init(cfg.label_encoder, cfg.output_dim, gain, rng),
            memory: MemoryWeights {
                w_s_key: glorot_init(cfg.l, d, gain, rng),
                w_s_value: glorot_init(cfg.l, d, gain, rng),
                w_r_key: glorot_init(cfg.l, cfg.vec_encoder + cfg.l, gain, rng),
            },
            w_out: match cfg.readout_init {
                ReadoutInit::Zero => Matrix::zeros(cfg.output_dim, cfg.l),
                ReadoutInit::Glorot => glorot_init(cfg.output_dim, cfg.l, gain, rng),
            },
        })
    }

    pub fn tensors(&self) -> [&Matrix; 6] {
        [&self.enc_vec, &self.enc_label, &self.memory.w_s_key, &self.memory.w_s_value, &self.memory.w_r_key, &self.w_out]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 6] {
        [
            &mut self.enc_vec,
            &mut self.enc_label,
            &mut self.memory.w_s_key,
            &mut self.memory.w_s_value,
            &mut self.memory.w_r_key,
            &mut self.w_out,
        ]
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let d = cfg.layout().d;
        let want = [
            (cfg.vec_encoder, cfg.vec_dim),
            (cfg.label_encoder, cfg.output_dim),
            (cfg.l, d),
            (cfg.l, d),
            (cfg.l, cfg.vec_encoder + cfg.l),
            (cfg.output_dim, cfg.l),
        ];
        for ((name, m), (r, c)) in PARAM_NAMES.iter().zip(self.tensors()).zip(want) {
            if (m.rows, m.cols) != (r, c) {
                return arg(format!("{name} is {}x{}, config needs {r}x{c}", m.rows, m.cols));
            }
            if m.data.iter().any(|v| !v.is_finite()) {
                return arg(format!("{name} has non-finite entries"));
            }
        }
        Ok(())
    }

    pub fn register(&self, g: &mut Graph) -> ParamNodes {
        ParamNodes {
            enc_vec: g.param(&self.enc_vec),
            enc_label: g.param(&self.enc_label),
            memory: MemoryWeightNodes {
                w_s_key: g.param(&self.memory.w_s_key),
                w_s_value: g.param(&self.memory.w_s_value),
                w_r_key: g.param(&self.memory.w_r_key),
            },
            w_out: g.param(&self.w_out),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ParamNodes {
    pub enc_vec: NodeId,
    pub enc_label: NodeId,
    pub memory: MemoryWeightNodes,
    pub w_out: NodeId,
}

impl ParamNodes {
    pub fn ids(&self) -> [NodeId; 6] {
        [self.enc_vec, self.enc_label, self.memory.w_s_key, self.memory.w_s_value, self.memory.w_r_key, self.w_out]
    }

    /// Gradients in [`PARAM_NAMES`] order, zero where no path exists.
    pub fn collect(&self, g: &Graph, grads: &Gradients) -> Vec<Vec<f64>> {
        self.ids().iter().map(|&id| grads.get_or_zeros(id, g.value(id).len())).collect()
    }
}

fn one_hot(label: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[label - 1] = 1.0;
    v
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Hold the associative matrix at zero for the whole episode.
    pub ablate_memory: bool,
    /// Keep full spike rasters of every layer.
    pub record_rasters: bool,
}

/// Result of a plain (non-differentiable) episode simulation.
#[derive(Clone, Debug)]
pub struct SequenceRun {
    pub logits: Vec<f64>,
    /// Per-layer spike counts over the episode, in [`LAYER_NAMES`] order.
    pub layer_counts: [Vec<f64>; 4],
    /// Steps each layer was simulated.
    pub layer_steps: [usize; 4],
    /// Filled when `record_rasters` is set.
    pub rasters: Option<[SpikeRaster; 4]>,
}

fn add_into(acc: &mut [f64], z: &[f64]) {
    acc.iter_mut().zip(z).for_each(|(a, b)| *a += b);
}

/// Simulate one episode without building a graph.
pub fn simulate_sequence(params: &ModelParams, cfg: &ModelConfig, episode: &EpisodeInput, opts: RunOptions) -> Result<SequenceRun> {
    cfg.validate()?;
    params.check(cfg)?;
    episode.validate(cfg)?;
    let lif = &cfg.lif;
    let hebb = &cfg.hebbian;
    let mut mem = HebbianMemoryState::new(params.memory.clone(), cfg.d_feedback)?;
    let sizes = [cfg.vec_encoder, cfg.label_encoder, cfg.l, cfg.l];
    let mut counts = sizes.map(|n| vec![0.0; n]);
    let mut steps = [0usize; 4];
    let mut rasters = opts.record_rasters.then(|| sizes.map(SpikeRaster::new));
    let mut readout = vec![0.0; cfg.l];

    let items = episode.facts.iter().map(|f| (&f.vector, Some(f.label))).chain(std::iter::once((&episode.query, None)));
    for (vector, label) in items {
        let i_vec = params.enc_vec.matvec(vector)?;
        let i_lab = label.map(|k| params.enc_label.matvec(&one_hot(k, cfg.output_dim))).transpose()?;
        let mut enc_vec = LifLayerState::new(cfg.vec_encoder);
        let mut enc_lab = LifLayerState::new(cfg.label_encoder);
        for t in 0..cfg.tau_sim {
            let zv = enc_vec.step(&i_vec, lif)?;
            add_into(&mut counts[0], &zv);
            steps[0] += 1;
            if opts.ablate_memory {
                mem.dynamics.w_assoc.data.iter_mut().for_each(|w| *w = 0.0);
            }
            let (zk, zval, zl) = match &i_lab {
                Some(i_lab) => {
                    let zl = enc_lab.step(i_lab, lif)?;
                    add_into(&mut counts[1], &zl);
                    steps[1] += 1;
                    let mut z = zv.clone();
                    z.extend_from_slice(&zl);
                    let (zk, zval) = mem.step(StepMode::Store, &z, lif, hebb)?;
                    (zk, zval, Some(zl))
                }
                None => {
                    let (zk, zval) = mem.step(StepMode::Recall, &zv, lif, hebb)?;
                    if t >= cfg.tau_sim - cfg.tau_read {
                        add_into(&mut readout, &zval);
                    }
                    (zk, zval, None)
                }
            };
            add_into(&mut counts[2], &zk);
            add_into(&mut counts[3], &zval);
            steps[2] += 1;
            steps[3] += 1;
            if let Some(r) = rasters.as_mut() {
                r[0].push(zv);
                if let Some(zl) = zl {
                    r[1].push(zl);
                }
                r[2].push(zk);
                r[3].push(zval);
            }
        }
    }
    let logits = params.w_out.matvec(&readout)?;
    Ok(SequenceRun { logits, layer_counts: counts, layer_steps: steps, rasters })
}

/// Logits of the readout after the query window.
pub fn run_sequence(params: &ModelParams, cfg: &ModelConfig, episode: &EpisodeInput) -> Result<Vec<f64>> {
    Ok(simulate_sequence(params, cfg, episode, RunOptions::default())?.logits)
}

/// Graph of one episode; spike nodes are kept per layer for the rate regularizer.
#[derive(Clone, Debug)]
pub struct GraphForward {
    pub logits: NodeId,
    pub spikes: [Vec<NodeId>; 4],
}

/// Unroll one episode into `g`. Mirrors [`simulate_sequence`] exactly.
pub fn forward_graph(g: &mut Graph, p: &ParamNodes, cfg: &ModelConfig, episode: &EpisodeInput) -> Result<GraphForward> {
    cfg.validate()?;
    episode.validate(cfg)?;
    let lif = &cfg.lif;
    let hebb = &cfg.hebbian;
    let mut mem = MemoryNodes::fresh(g, cfg.l, cfg.d_feedback);
    let mut spikes: [Vec<NodeId>; 4] = Default::default();
    let mut readout = Vec::with_capacity(cfg.tau_read);

    let items = episode.facts.iter().map(|f| (&f.vector, Some(f.label))).chain(std::iter::once((&episode.query, None)));
    for (vector, label) in items {
        let x = g.constant_vec(vector.clone());
        let i_vec = g.matvec(p.enc_vec, x)?;
        let i_lab = match label {
            Some(k) => {
                let h = g.constant_vec(one_hot(k, cfg.output_dim));
                Some(g.matvec(p.enc_label, h)?)
            }
            None => None,
        };
        let mut enc_vec = LifNode::fresh(g, cfg.vec_encoder);
        let mut enc_lab = LifNode::fresh(g, cfg.label_encoder);
        for t in 0..cfg.tau_sim {
            let zv = enc_vec.step(g, i_vec, lif)?;
            spikes[0].push(zv);
            let s = match i_lab {
                Some(i_lab) => {
                    let zl = enc_lab.step(g, i_lab, lif)?;
                    spikes[1].push(zl);
                    let z = g.concat(&[zv, zl])?;
                    mem.step(g, &p.memory, StepMode::Store, z, lif, hebb)?
                }
                None => {
                    let s = mem.step(g, &p.memory, StepMode::Recall, zv, lif, hebb)?;
                    if t >= cfg.tau_sim - cfg.tau_read {
                        readout.push((s.value, 1.0));
                    }
                    s
                }
            };
            spikes[2].push(s.key);
            spikes[3].push(s.value);
        }
    }
    let counts = g.lincomb(&readout, 0.0)?;
    let logits = g.matvec(p.w_out, counts)?;
    Ok(GraphForward { logits, spikes })
}

/// Weights of the reinforcement-learning memory network (encoder plus memory).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlParams {
    /// `vec_encoder x observation width`
    pub encoder: Matrix,
    pub memory: MemoryWeights,
}

pub const RL_PARAM_NAMES: [&str; 4] = ["encoder", "w_s_key", "w_s_value", "w_r_key"];

impl RlParams {
    /// One encoder feeds both pathways, so the store projections are `l x vec_encoder`.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let gain = 2f64.sqrt();
        Ok(Self {
            encoder: glorot_init(cfg.vec_encoder, cfg.vec_dim, gain, rng),
            memory: MemoryWeights {
                w_s_key: glorot_init(cfg.l, cfg.vec_encoder, gain, rng),
                w_s_value: glorot_init(cfg.l, cfg.vec_encoder, gain, rng),
                w_r_key: glorot_init(cfg.l, cfg.vec_encoder + cfg.l, gain, rng),
            },
        })
    }

    pub fn tensors(&self) -> [&Matrix; 4] {
        [&self.encoder, &self.memory.w_s_key, &self.memory.w_s_value, &self.memory.w_r_key]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.encoder, &mut self.memory.w_s_key, &mut self.memory.w_s_value, &mut self.memory.w_r_key]
    }

    pub fn register(&self, g: &mut Graph) -> RlParamNodes {
        RlParamNodes {
            encoder: g.param(&self.encoder),
            memory: MemoryWeightNodes {
                w_s_key: g.param(&self.memory.w_s_key),
                w_s_value: g.param(&self.memory.w_s_value),
                w_r_key: g.param(&self.memory.w_r_key),
            },
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RlParamNodes {
    pub encoder: NodeId,
    pub memory: MemoryWeightNodes,
}

impl RlParamNodes {
    pub fn ids(&self) -> [NodeId; 4] {
        [self.encoder, self.memory.w_s_key, self.memory.w_s_value, self.memory.w_r_key]
    }
}

/// Fresh per-episode state of the agent network.
pub fn rl_carry(cfg: &ModelConfig) -> MemoryDynamics {
    MemoryDynamics::new(cfg.l, cfg.d_feedback)
}

/// Present one observation for `tau_sim` steps with both pathways driven;
/// returns value-layer spike counts over the last `tau_read` steps.
pub fn run_rl_step(params: &RlParams, cfg: &ModelConfig, observation: &[f64], carry: &MemoryDynamics) -> Result<(Vec<f64>, MemoryDynamics)> {
    if observation.len() != params.encoder.cols {
        return arg(format!("observation has {} entries, encoder expects {}", observation.len(), params.encoder.cols));
    }
    if carry.l() != params.memory.l() {
        return arg("carry does not match the memory size");
    }
    let mut mem = HebbianMemoryState { weights: params.memory.clone(), dynamics: carry.clone() };
    let current = params.encoder.matvec(observation)?;
    let mut enc = LifLayerState::new(params.encoder.rows);
    let mut features = vec![0.0; cfg.l];
    for t in 0..cfg.tau_sim {
        let z = enc.step(&current, &cfg.lif)?;
        let (_, zval) = mem.step(StepMode::Both, &z, &cfg.lif, &cfg.hebbian)?;
        if t >= cfg.tau_sim - cfg.tau_read {
            add_into(&mut features, &zval);
        }
    }
    Ok((features, mem.dynamics))
}

/// Graph counterpart of [`run_rl_step`]; advances `carry` in place.
pub fn rl_step_graph(g: &mut Graph, p: &RlParamNodes, cfg: &ModelConfig, observation: &[f64], carry: &mut MemoryNodes) -> Result<NodeId> {
    let (enc_rows, enc_cols) = g.shape(p.encoder);
    if observation.len() != enc_cols {
        return arg(format!("observation has {} entries, encoder expects {enc_cols}", observation.len()));
    }
    let x = g.constant_vec(observation.to_vec());
    let current = g.matvec(p.encoder, x)?;
    let mut enc = LifNode::fresh(g, enc_rows);
    let mut readout = Vec::with_capacity(cfg.tau_read);
    for t in 0..cfg.tau_sim {
        let z = enc.step(g, current, &cfg.lif)?;
        let s = carry.step(g, &p.memory, StepMode::Both, z, &cfg.lif, &cfg.hebbian)?;
        if t >= cfg.tau_sim - cfg.tau_read {
            readout.push((s.value, 1.0));
        }
    }
    g.lincomb(&readout, 0.0)
}
