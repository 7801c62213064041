//! Discrete-time spiking layers.
//!
//! LIF update per step: spikes are read from the current membrane, then
//! `V(t+dt) = alpha V(t) + (1 - alpha) I(t) - theta z(t)`. After a spike the
//! neuron is refractory for `delta_abs / dt` steps; the membrane keeps
//! integrating but cannot fire.

use serde::{Deserialize, Serialize};

use crate::autodiff::{spike_threshold, Graph, NodeId, SurrogateParams};
use crate::error::{arg, Error, Result};
use crate::tensor::Matrix;

/// Neuron parameters. Times are in milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LifParams {
    pub theta: f64,
    pub tau_m: f64,
    pub delta_abs: f64,
    pub dt: f64,
    /// Dampening of the spike pseudo-derivative.
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_beta() -> f64 {
    1.0
}

impl Default for LifParams {
    fn default() -> Self {
        Self { theta: 0.1, tau_m: 20.0, delta_abs: 3.0, dt: 1.0, beta: 1.0 }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.tau_m > 0.0 && self.dt > 0.0) {
            return arg("theta, tau_m and dt must be positive");
        }
        let ratio = self.delta_abs / self.dt;
        if self.delta_abs < 0.0 || (ratio - ratio.round()).abs() > 1e-9 {
            return arg(format!("refractory period {} is not a multiple of dt {}", self.delta_abs, self.dt));
        }
        SurrogateParams::new(self.beta, self.theta)?;
        Ok(())
    }

    /// Membrane decay per step, `exp(-dt / tau_m)`.
    pub fn alpha(&self) -> f64 {
        (-self.dt / self.tau_m).exp()
    }

    pub fn refractory_steps(&self) -> u32 {
        (self.delta_abs / self.dt).round() as u32
    }

    pub fn surrogate(&self) -> SurrogateParams {
        SurrogateParams { beta: self.beta, theta: self.theta }
    }
}

/// State of a layer of leaky integrate-and-fire neurons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LifLayerState {
    pub membrane: Vec<f64>,
    pub refractory_remaining: Vec<u32>,
}

impl LifLayerState {
    pub fn new(size: usize) -> Self {
        Self { membrane: vec![0.0; size], refractory_remaining: vec![0; size] }
    }

    pub fn size(&self) -> usize {
        self.membrane.len()
    }

    pub fn reset(&mut self) {
        self.membrane.iter_mut().for_each(|v| *v = 0.0);
        self.refractory_remaining.iter_mut().for_each(|r| *r = 0);
    }

    pub fn blocked(&self) -> Vec<bool> {
        self.refractory_remaining.iter().map(|&r| r > 0).collect()
    }

    /// Advance one step with `input_current`; returns this step's spikes.
    pub fn step(&mut self, input_current: &[f64], params: &LifParams) -> Result<Vec<f64>> {
        if input_current.len() != self.size() {
            return arg(format!("LIF layer of {} neurons given {} currents", self.size(), input_current.len()));
        }
        let (mut z, _) = spike_threshold(&self.membrane, params.theta);
        let alpha = params.alpha();
        let refr = params.refractory_steps();
        for k in 0..z.len() {
            if self.refractory_remaining[k] > 0 {
                z[k] = 0.0;
            }
            // Same summation order as `Graph::lincomb`.
            let mut v = 0.0;
            v += alpha * self.membrane[k];
            v += (1.0 - alpha) * input_current[k];
            v += -params.theta * z[k];
            self.membrane[k] = v;
            self.refractory_remaining[k] = if z[k] > 0.0 { refr } else { self.refractory_remaining[k].saturating_sub(1) };
        }
        Ok(z)
    }
}

/// Functional form of [`LifLayerState::step`].
pub fn lif_step(state: &LifLayerState, input_current: &[f64], params: &LifParams) -> Result<(Vec<f64>, LifLayerState)> {
    let mut next = state.clone();
    let z = next.step(input_current, params)?;
    Ok((z, next))
}

/// Leakless integrate-and-fire layer used by converted rectified-linear nets.
#[derive(Clone, Debug, PartialEq)]
pub struct IfLayerState {
    pub membrane: Vec<f64>,
    pub layer_threshold: Option<f64>,
}

impl IfLayerState {
    pub fn new(size: usize, layer_threshold: Option<f64>) -> Self {
        Self { membrane: vec![0.0; size], layer_threshold }
    }

    /// Integrate `input_current`, fire where the integrated potential reaches the
    /// threshold, and subtract the threshold from firing neurons.
    pub fn step(&mut self, input_current: &[f64]) -> Result<Vec<f64>> {
        let theta = self
            .layer_threshold
            .ok_or_else(|| Error::State("IF layer threshold has not been set".into()))?;
        if input_current.len() != self.membrane.len() {
            return arg(format!("IF layer of {} neurons given {} currents", self.membrane.len(), input_current.len()));
        }
        let mut z = vec![0.0; self.membrane.len()];
        for k in 0..z.len() {
            let v = self.membrane[k] + input_current[k];
            if v >= theta {
                z[k] = 1.0;
                self.membrane[k] = v - theta;
            } else {
                self.membrane[k] = v;
            }
        }
        Ok(z)
    }
}

pub fn if_step(state: &IfLayerState, input_current: &[f64]) -> Result<(Vec<f64>, IfLayerState)> {
    let mut next = state.clone();
    let z = next.step(input_current)?;
    Ok((z, next))
}

/// Spikes of a layer over time, one frame per step.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeRaster {
    pub neurons: usize,
    pub frames: Vec<Vec<f64>>,
}

impl SpikeRaster {
    pub fn new(neurons: usize) -> Self {
        Self { neurons, frames: Vec::new() }
    }

    pub fn steps(&self) -> usize {
        self.frames.len()
    }

    /// `(neurons, steps)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.neurons, self.frames.len())
    }

    pub fn push(&mut self, frame: Vec<f64>) {
        debug_assert_eq!(frame.len(), self.neurons);
        self.frames.push(frame);
    }

    pub fn total_spikes(&self) -> f64 {
        self.frames.iter().flatten().sum()
    }

    pub fn counts(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.neurons];
        for f in &self.frames {
            for (a, b) in c.iter_mut().zip(f) {
                *a += b;
            }
        }
        c
    }
}

/// Drive a fresh LIF layer with the constant current `W x` for `duration` steps.
pub fn encode_constant_current(x: &[f64], weights: &Matrix, duration: usize, params: &LifParams) -> Result<SpikeRaster> {
    if x.len() != weights.cols {
        return arg(format!("encoder expects {} inputs, got {}", weights.cols, x.len()));
    }
    let current = weights.matvec(x)?;
    let mut layer = LifLayerState::new(weights.rows);
    let mut raster = SpikeRaster::new(weights.rows);
    for _ in 0..duration {
        raster.push(layer.step(&current, params)?);
    }
    Ok(raster)
}

/// Per-neuron spike counts over the final `tau_read` steps.
pub fn readout_sum(raster: &SpikeRaster, tau_read: usize) -> Result<Vec<f64>> {
    if tau_read > raster.steps() {
        return arg(format!("readout window {tau_read} exceeds raster duration {}", raster.steps()));
    }
    let mut c = vec![0.0; raster.neurons];
    for f in &raster.frames[raster.steps() - tau_read..] {
        for (a, b) in c.iter_mut().zip(f) {
            *a += b;
        }
    }
    Ok(c)
}

/// A LIF layer living in a computation graph: membrane is a node, refractory
/// counters are plain integers (they only gate the forward pass).
#[derive(Clone, Debug)]
pub struct LifNode {
    pub membrane: NodeId,
    pub refractory_remaining: Vec<u32>,
}

impl LifNode {
    pub fn fresh(g: &mut Graph, size: usize) -> Self {
        Self { membrane: g.zeros(size, 1), refractory_remaining: vec![0; size] }
    }

    /// Start from a detached copy of a plain state.
    pub fn from_state(g: &mut Graph, state: &LifLayerState) -> Self {
        Self { membrane: g.constant_vec(state.membrane.clone()), refractory_remaining: state.refractory_remaining.clone() }
    }

    pub fn to_state(&self, g: &Graph) -> LifLayerState {
        LifLayerState { membrane: g.value(self.membrane).to_vec(), refractory_remaining: self.refractory_remaining.clone() }
    }

    /// Graph counterpart of [`LifLayerState::step`].
    pub fn step(&mut self, g: &mut Graph, current: NodeId, params: &LifParams) -> Result<NodeId> {
        let blocked: Vec<bool> = self.refractory_remaining.iter().map(|&r| r > 0).collect();
        let z = g.spike(self.membrane, params.surrogate(), Some(&blocked))?;
        let alpha = params.alpha();
        self.membrane = g.lincomb(&[(self.membrane, alpha), (current, 1.0 - alpha), (z, -params.theta)], 0.0)?;
        let refr = params.refractory_steps();
        let zv = g.value(z);
        for (r, &s) in self.refractory_remaining.iter_mut().zip(zv) {
            *r = if s > 0.0 { refr } else { r.saturating_sub(1) };
        }
        Ok(z)
    }
}
