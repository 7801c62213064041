//! Key-value associative memory with Hebbian plasticity.
//!
//! Key neurons are pre-synaptic and value neurons post-synaptic to the plastic
//! matrix `W_assoc` (`value x key`). Each step the weights move by
//!
//! ```text
//! dW_kj = g+ (w_max - W_kj) kv_k kk_j - g- W_kj kk_j^2
//! ```
//!
//! where `kk`, `kv` are exponential traces of key and value spikes. Value
//! spikes are fed back to the key layer after `d_feedback` steps.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{arg, Result};
use crate::snn::{LifLayerState, LifNode, LifParams};
use crate::tensor::{matvec_into, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HebbianParams {
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    pub w_max: f64,
    /// Trace time constant in ms.
    pub tau_trace: f64,
    /// Scale of the associative current while storing.
    pub c: f64,
    /// When false, `W_assoc` is frozen during recall steps.
    #[serde(default = "yes")]
    pub plastic_during_recall: bool,
}

fn yes() -> bool {
    true
}

impl Default for HebbianParams {
    fn default() -> Self {
        Self { gamma_plus: 0.3, gamma_minus: 0.3, w_max: 1.0, tau_trace: 20.0, c: 0.2, plastic_during_recall: true }
    }
}

impl HebbianParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_plus > 0.0 && self.gamma_minus > 0.0 && self.w_max > 0.0 && self.tau_trace > 0.0) {
            return arg("gamma_plus, gamma_minus, w_max and tau_trace must be positive");
        }
        Ok(())
    }

    pub fn trace_decay(&self, dt: f64) -> f64 {
        (-dt / self.tau_trace).exp()
    }

    /// Weight reached under constant equal traces: `g+ w_max / (g+ + g-)`.
    pub fn fixed_point(&self) -> f64 {
        self.gamma_plus * self.w_max / (self.gamma_plus + self.gamma_minus)
    }
}

/// Sizes of the memory: `l` key/value neurons and `d` encoder inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryLayout {
    pub l: usize,
    pub d: usize,
}

/// Decay then increment: `k' = k e + (1 - e) z` with `e = exp(-dt / tau_trace)`.
pub fn trace_update(kappa: &[f64], spikes: &[f64], params: &HebbianParams, dt: f64) -> Vec<f64> {
    let e = params.trace_decay(dt);
    kappa
        .iter()
        .zip(spikes)
        .map(|(&k, &z)| {
            let mut v = 0.0;
            v += e * k;
            v += (1.0 - e) * z;
            v
        })
        .collect()
}

/// The weight change `dW` for a `value x key` matrix.
pub fn hebbian_update(w: &Matrix, kappa_key: &[f64], kappa_value: &[f64], params: &HebbianParams) -> Result<Matrix> {
    if w.cols != kappa_key.len() || w.rows != kappa_value.len() {
        return arg(format!(
            "{}x{} weights with {} key and {} value traces",
            w.rows,
            w.cols,
            kappa_key.len(),
            kappa_value.len()
        ));
    }
    let mut d = Matrix::zeros(w.rows, w.cols);
    for k in 0..w.rows {
        for j in 0..w.cols {
            d.data[k * w.cols + j] = delta(w.data[k * w.cols + j], kappa_key[j], kappa_value[k], params);
        }
    }
    Ok(d)
}

#[inline]
fn delta(w: f64, kk: f64, kv: f64, p: &HebbianParams) -> f64 {
    p.gamma_plus * (p.w_max - w) * kv * kk - p.gamma_minus * w * kk * kk
}

/// `W + dW`, row-major `value x key`. Shared by the simulator and the graph op.
pub(crate) fn apply_update(w: &[f64], kappa_key: &[f64], kappa_value: &[f64], p: &HebbianParams) -> Vec<f64> {
    let cols = kappa_key.len();
    let mut out = vec![0.0; w.len()];
    for ((orow, wrow), &kv) in out.chunks_exact_mut(cols).zip(w.chunks_exact(cols)).zip(kappa_value) {
        for ((o, &wkj), &kk) in orow.iter_mut().zip(wrow).zip(kappa_key) {
            *o = wkj + delta(wkj, kk, kv, p);
        }
    }
    out
}

/// Which input pathway drives the memory on a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepMode {
    /// Facts: encoder drives key and value layers; associative current scaled by `c`.
    Store,
    /// Queries: encoder plus delayed value feedback drive keys; values only see `W_assoc`.
    Recall,
    /// Both pathways receive the same input (reinforcement-learning agent).
    Both,
}

/// Learned projections into the memory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryWeights {
    /// `l x d_store`
    pub w_s_key: Matrix,
    /// `l x d_store`
    pub w_s_value: Matrix,
    /// `l x (d_recall + l)`; the last `l` columns carry the value feedback.
    pub w_r_key: Matrix,
}

impl MemoryWeights {
    pub fn l(&self) -> usize {
        self.w_s_key.rows
    }
}

/// Per-sequence state of the memory; everything that is reset between episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryDynamics {
    pub w_assoc: Matrix,
    pub kappa_key: Vec<f64>,
    pub kappa_value: Vec<f64>,
    pub key: LifLayerState,
    pub value: LifLayerState,
    /// Value spikes from the last `d_feedback` steps, oldest first.
    pub feedback: VecDeque<Vec<f64>>,
}

impl MemoryDynamics {
    pub fn new(l: usize, d_feedback: usize) -> Self {
        Self {
            w_assoc: Matrix::zeros(l, l),
            kappa_key: vec![0.0; l],
            kappa_value: vec![0.0; l],
            key: LifLayerState::new(l),
            value: LifLayerState::new(l),
            feedback: (0..d_feedback).map(|_| vec![0.0; l]).collect(),
        }
    }

    pub fn l(&self) -> usize {
        self.kappa_key.len()
    }

    pub fn d_feedback(&self) -> usize {
        self.feedback.len()
    }
}

/// The memory module with its projections and dynamic state.
#[derive(Clone, Debug, PartialEq)]
pub struct HebbianMemoryState {
    pub weights: MemoryWeights,
    pub dynamics: MemoryDynamics,
}

impl HebbianMemoryState {
    pub fn new(weights: MemoryWeights, d_feedback: usize) -> Result<Self> {
        let l = weights.l();
        if d_feedback == 0 {
            return arg("feedback delay must be at least one step");
        }
        if weights.w_s_value.rows != l || weights.w_r_key.rows != l || weights.w_s_value.cols != weights.w_s_key.cols {
            return arg("store projections must both be l x d");
        }
        if weights.w_r_key.cols <= l {
            return arg("recall projection must have d + l columns");
        }
        Ok(Self { weights, dynamics: MemoryDynamics::new(l, d_feedback) })
    }

    pub fn layout(&self) -> MemoryLayout {
        MemoryLayout { l: self.weights.l(), d: self.weights.w_s_key.cols }
    }

    /// Zero the associative matrix, traces, membranes and feedback buffer.
    pub fn reset_memory(&mut self) {
        self.dynamics = MemoryDynamics::new(self.weights.l(), self.dynamics.d_feedback());
    }

    pub fn store_step(&mut self, z_s_enc: &[f64], lif: &LifParams, hebb: &HebbianParams) -> Result<(Vec<f64>, Vec<f64>)> {
        self.step(StepMode::Store, z_s_enc, lif, hebb)
    }

    pub fn recall_step(&mut self, z_r_enc: &[f64], lif: &LifParams, hebb: &HebbianParams) -> Result<(Vec<f64>, Vec<f64>)> {
        self.step(StepMode::Recall, z_r_enc, lif, hebb)
    }

    /// One simulation step; returns `(key spikes, value spikes)`.
    pub fn step(&mut self, mode: StepMode, z_enc: &[f64], lif: &LifParams, hebb: &HebbianParams) -> Result<(Vec<f64>, Vec<f64>)> {
        let w = &self.weights;
        let dy = &mut self.dynamics;
        let l = w.l();
        let d_store = w.w_s_key.cols;
        let d_recall = w.w_r_key.cols - l;
        let needs_store = matches!(mode, StepMode::Store | StepMode::Both);
        let needs_recall = matches!(mode, StepMode::Recall | StepMode::Both);
        if needs_store && z_enc.len() != d_store {
            return arg(format!("store input has {} entries, memory expects {d_store}", z_enc.len()));
        }
        if needs_recall && z_enc.len() != d_recall {
            return arg(format!("recall input has {} entries, memory expects {d_recall}", z_enc.len()));
        }

        let mv = |m: &Matrix, x: &[f64]| {
            let mut out = vec![0.0; m.rows];
            matvec_into(&m.data, m.rows, m.cols, x, &mut out);
            out
        };
        let recall_key = || {
            let mut input = z_enc.to_vec();
            input.extend_from_slice(&dy.feedback[0]);
            mv(&w.w_r_key, &input)
        };
        let i_key = match mode {
            StepMode::Store => mv(&w.w_s_key, z_enc),
            StepMode::Recall => recall_key(),
            StepMode::Both => lincomb2(&mv(&w.w_s_key, z_enc), 1.0, &recall_key(), 1.0),
        };
        let z_key = dy.key.step(&i_key, lif)?;
        let assoc = mv(&dy.w_assoc, &z_key);
        let i_value = match mode {
            StepMode::Store => lincomb2(&mv(&w.w_s_value, z_enc), 1.0, &assoc, hebb.c),
            StepMode::Recall => assoc,
            StepMode::Both => lincomb2(&mv(&w.w_s_value, z_enc), 1.0, &assoc, hebb.c),
        };
        let z_value = dy.value.step(&i_value, lif)?;

        dy.kappa_key = trace_update(&dy.kappa_key, &z_key, hebb, lif.dt);
        dy.kappa_value = trace_update(&dy.kappa_value, &z_value, hebb, lif.dt);
        if mode != StepMode::Recall || hebb.plastic_during_recall {
            dy.w_assoc.data = apply_update(&dy.w_assoc.data, &dy.kappa_key, &dy.kappa_value, hebb);
        }
        dy.feedback.pop_front();
        dy.feedback.push_back(z_value.clone());
        Ok((z_key, z_value))
    }
}

fn lincomb2(a: &[f64], ca: f64, b: &[f64], cb: f64) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let mut v = 0.0;
            v += ca * x;
            v += cb * y;
            v
        })
        .collect()
}

/// Parameter nodes for the memory projections.
#[derive(Clone, Copy, Debug)]
pub struct MemoryWeightNodes {
    pub w_s_key: NodeId,
    pub w_s_value: NodeId,
    pub w_r_key: NodeId,
}

/// Memory dynamics unrolled in a graph; mirrors [`HebbianMemoryState::step`].
#[derive(Clone, Debug)]
pub struct MemoryNodes {
    pub w_assoc: NodeId,
    pub kappa_key: NodeId,
    pub kappa_value: NodeId,
    pub key: LifNode,
    pub value: LifNode,
    pub feedback: VecDeque<NodeId>,
}

/// Spikes of one memory step inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct MemorySpikes {
    pub key: NodeId,
    pub value: NodeId,
}

impl MemoryNodes {
    pub fn fresh(g: &mut Graph, l: usize, d_feedback: usize) -> Self {
        Self::from_dynamics(g, &MemoryDynamics::new(l, d_feedback))
    }

    /// Detached copy of a plain state (gradients stop here).
    pub fn from_dynamics(g: &mut Graph, d: &MemoryDynamics) -> Self {
        let l = d.l();
        Self {
            w_assoc: g.constant(l, l, d.w_assoc.data.clone()).expect("square association matrix"),
            kappa_key: g.constant_vec(d.kappa_key.clone()),
            kappa_value: g.constant_vec(d.kappa_value.clone()),
            key: LifNode::from_state(g, &d.key),
            value: LifNode::from_state(g, &d.value),
            feedback: d.feedback.iter().map(|f| g.constant_vec(f.clone())).collect(),
        }
    }

    pub fn to_dynamics(&self, g: &Graph) -> MemoryDynamics {
        let l = self.kappa_key_len(g);
        MemoryDynamics {
            w_assoc: Matrix { rows: l, cols: l, data: g.value(self.w_assoc).to_vec() },
            kappa_key: g.value(self.kappa_key).to_vec(),
            kappa_value: g.value(self.kappa_value).to_vec(),
            key: self.key.to_state(g),
            value: self.value.to_state(g),
            feedback: self.feedback.iter().map(|&f| g.value(f).to_vec()).collect(),
        }
    }

    fn kappa_key_len(&self, g: &Graph) -> usize {
        g.value(self.kappa_key).len()
    }

    pub fn step(
        &mut self,
        g: &mut Graph,
        w: &MemoryWeightNodes,
        mode: StepMode,
        z_enc: NodeId,
        lif: &LifParams,
        hebb: &HebbianParams,
    ) -> Result<MemorySpikes> {
        let recall_key = |g: &mut Graph, fb: NodeId| -> Result<NodeId> {
            let input = g.concat(&[z_enc, fb])?;
            g.matvec(w.w_r_key, input)
        };
        let fb = self.feedback[0];
        let i_key = match mode {
            StepMode::Store => g.matvec(w.w_s_key, z_enc)?,
            StepMode::Recall => recall_key(g, fb)?,
            StepMode::Both => {
                let s = g.matvec(w.w_s_key, z_enc)?;
                let r = recall_key(g, fb)?;
                g.lincomb(&[(s, 1.0), (r, 1.0)], 0.0)?
            }
        };
        let z_key = self.key.step(g, i_key, lif)?;
        let assoc = g.matvec(self.w_assoc, z_key)?;
        let i_value = match mode {
            StepMode::Store => {
                let s = g.matvec(w.w_s_value, z_enc)?;
                g.lincomb(&[(s, 1.0), (assoc, hebb.c)], 0.0)?
            }
            StepMode::Recall => assoc,
            StepMode::Both => {
                let s = g.matvec(w.w_s_value, z_enc)?;
                g.lincomb(&[(s, 1.0), (assoc, hebb.c)], 0.0)?
            }
        };
        let z_value = self.value.step(g, i_value, lif)?;

        let e = hebb.trace_decay(lif.dt);
        self.kappa_key = g.lincomb(&[(self.kappa_key, e), (z_key, 1.0 - e)], 0.0)?;
        self.kappa_value = g.lincomb(&[(self.kappa_value, e), (z_value, 1.0 - e)], 0.0)?;
        if mode != StepMode::Recall || hebb.plastic_during_recall {
            self.w_assoc = g.hebbian(self.w_assoc, self.kappa_key, self.kappa_value, *hebb)?;
        }
        self.feedback.pop_front();
        self.feedback.push_back(z_value);
        Ok(MemorySpikes { key: z_key, value: z_value })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hp() -> HebbianParams {
        HebbianParams::default()
    }

    #[test]
    fn trace_examples() {
        let e = (-1.0f64 / 20.0).exp();
        assert_eq!(trace_update(&[0.0], &[0.0], &hp(), 1.0), vec![0.0]);
        assert!((trace_update(&[1.0], &[0.0], &hp(), 1.0)[0] - e).abs() < 1e-15);
        assert!((trace_update(&[0.0], &[1.0], &hp(), 1.0)[0] - (1.0 - e)).abs() < 1e-15);
    }

    #[test]
    fn update_examples() {
        let w = Matrix::from_vec(1, 1, vec![0.7]).unwrap();
        assert_eq!(hebbian_update(&w, &[0.0], &[0.9], &hp()).unwrap().data, vec![0.0]);
        let w0 = Matrix::zeros(1, 1);
        assert!((hebbian_update(&w0, &[1.0], &[1.0], &hp()).unwrap().data[0] - 0.3).abs() < 1e-15);
        let wh = Matrix::from_vec(1, 1, vec![0.5]).unwrap();
        assert!(hebbian_update(&wh, &[1.0], &[1.0], &hp()).unwrap().data[0].abs() < 1e-15);
        assert!(hebbian_update(&wh, &[1.0, 1.0], &[1.0], &hp()).is_err());
    }

    #[test]
    fn update_is_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w = Matrix::zeros(4, 5);
        w.data.iter_mut().for_each(|v| *v = rng.random::<f64>());
        let kk: Vec<f64> = (0..5).map(|_| rng.random()).collect();
        let kv: Vec<f64> = (0..4).map(|_| rng.random()).collect();
        let base = hebbian_update(&w, &kk, &kv, &hp()).unwrap();
        let mut w2 = w.clone();
        w2.set(0, 0, 0.01);
        let perturbed = hebbian_update(&w2, &kk, &kv, &hp()).unwrap();
        for i in 1..w.len() {
            assert_eq!(base.data[i], perturbed.data[i]);
        }
    }

    fn identity_memory(l: usize, gain: f64) -> HebbianMemoryState {
        let mut s_key = Matrix::zeros(l, 2 * l);
        let mut s_value = Matrix::zeros(l, 2 * l);
        let mut r_key = Matrix::zeros(l, 2 * l);
        for i in 0..l {
            s_key.set(i, i, gain);
            s_value.set(i, l + i, gain);
            r_key.set(i, i, gain);
        }
        // recall input is the first l channels only
        let r_key = Matrix::from_vec(l, 2 * l, r_key.data).unwrap();
        HebbianMemoryState::new(MemoryWeights { w_s_key: s_key, w_s_value: s_value, w_r_key: r_key }, 1).unwrap()
    }

    #[test]
    fn silent_input_changes_nothing() {
        let mut m = identity_memory(4, 5.0);
        for _ in 0..50 {
            let (k, v) = m.store_step(&[0.0; 8], &LifParams::default(), &hp()).unwrap();
            assert!(k.iter().chain(&v).all(|&x| x == 0.0));
        }
        assert!(m.dynamics.w_assoc.data.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn coactive_pair_gets_associated() {
        let mut m = identity_memory(4, 5.0);
        let mut z = vec![0.0; 8];
        z[1] = 1.0; // key 1
        z[4 + 2] = 1.0; // value 2
        for _ in 0..100 {
            m.store_step(&z, &LifParams::default(), &hp()).unwrap();
        }
        let w = &m.dynamics.w_assoc;
        assert!(w.get(2, 1) > 0.0);
        assert!(w.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_eq!(w.get(0, 0), 0.0);
        // recall key 1 -> value 2 fires, others silent
        let mut counts = [0.0; 4];
        for _ in 0..100 {
            let (_, v) = m.recall_step(&z[..4], &LifParams::default(), &hp()).unwrap();
            for (c, x) in counts.iter_mut().zip(&v) {
                *c += x;
            }
        }
        assert!(counts[2] > 0.0 && counts[0] == 0.0 && counts[1] == 0.0 && counts[3] == 0.0, "{counts:?}");
    }

    #[test]
    fn reset_clears_everything() {
        let mut m = identity_memory(4, 5.0);
        let z = vec![1.0; 8];
        for _ in 0..30 {
            m.store_step(&z, &LifParams::default(), &hp()).unwrap();
        }
        m.reset_memory();
        assert!(m.dynamics.w_assoc.data.iter().all(|&w| w == 0.0));
        for _ in 0..30 {
            let (_, v) = m.recall_step(&[0.0; 4], &LifParams::default(), &hp()).unwrap();
            assert!(v.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn dimension_errors() {
        let mut m = identity_memory(4, 5.0);
        assert!(m.store_step(&[0.0; 3], &LifParams::default(), &hp()).is_err());
        assert!(m.recall_step(&[0.0; 8], &LifParams::default(), &hp()).is_err());
        let w = m.weights.clone();
        assert!(HebbianMemoryState::new(w, 0).is_err());
    }

    #[test]
    fn store_only_plasticity_freezes_recall() {
        let mut m = identity_memory(4, 5.0);
        let p = HebbianParams { plastic_during_recall: false, ..hp() };
        for _ in 0..50 {
            m.recall_step(&[1.0; 4], &LifParams::default(), &p).unwrap();
        }
        assert!(m.dynamics.w_assoc.data.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn graph_memory_matches_plain_memory() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let l = 6;
        let mk = |r: usize, c: usize, rng: &mut ChaCha8Rng| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..3.0)).collect()).unwrap()
        };
        let weights = MemoryWeights { w_s_key: mk(l, 5, &mut rng), w_s_value: mk(l, 5, &mut rng), w_r_key: mk(l, 5 + l, &mut rng) };
        let mut plain = HebbianMemoryState::new(weights.clone(), 2).unwrap();
        let mut g = Graph::new();
        let nodes = MemoryWeightNodes {
            w_s_key: g.param(&weights.w_s_key),
            w_s_value: g.param(&weights.w_s_value),
            w_r_key: g.param(&weights.w_r_key),
        };
        let mut mem = MemoryNodes::fresh(&mut g, l, 2);
        let lif = LifParams::default();
        for t in 0..300 {
            let mode = match t % 3 {
                0 => StepMode::Store,
                1 => StepMode::Recall,
                _ => StepMode::Both,
            };
            let z: Vec<f64> = (0..5).map(|_| if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 }).collect();
            let (k, v) = plain.step(mode, &z, &lif, &hp()).unwrap();
            let zn = g.constant_vec(z);
            let s = mem.step(&mut g, &nodes, mode, zn, &lif, &hp()).unwrap();
            assert_eq!(k, g.value(s.key));
            assert_eq!(v, g.value(s.value));
        }
        assert_eq!(mem.to_dynamics(&g), plain.dynamics);
        assert!(plain.dynamics.w_assoc.data.iter().any(|&w| w > 0.0));
    }
}
