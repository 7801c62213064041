//! Conversion of dense rectified-linear networks to leakless IF networks by
//! threshold balancing.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::error::{arg, Error, Result};
use crate::snn::{encode_constant_current, IfLayerState, LifParams, SpikeRaster};
use crate::tensor::{pearson, Matrix};

/// Smallest threshold a balanced layer may receive.
pub const THRESHOLD_FLOOR: f64 = 1e-6;

/// Bias-free feedforward net; layer `k` maps `sizes[k]` to `sizes[k + 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseReluNet {
    pub weights: Vec<Matrix>,
}

impl DenseReluNet {
    pub fn new(weights: Vec<Matrix>) -> Result<Self> {
        if weights.is_empty() {
            return arg("network needs at least one layer");
        }
        for (k, w) in weights.windows(2).enumerate() {
            if w[1].cols != w[0].rows {
                return arg(format!("layer {} expects {} inputs but layer {k} has {} outputs", k + 1, w[1].cols, w[0].rows));
            }
        }
        Ok(Self { weights })
    }

    /// Gaussian weights with standard deviation `sqrt(2 / fan_in)`.
    pub fn random<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return arg("need at least two positive layer sizes");
        }
        let weights = sizes
            .windows(2)
            .map(|w| {
                let n = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).expect("positive std");
                Matrix::from_vec(w[1], w[0], (0..w[0] * w[1]).map(|_| n.sample(rng)).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(weights)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.weights[0].cols];
        s.extend(self.weights.iter().map(|w| w.rows));
        s
    }

    /// ReLU activations of every layer (input excluded).
    pub fn activations(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut h = x.to_vec();
        let mut out = Vec::with_capacity(self.weights.len());
        for w in &self.weights {
            h = w.matvec(&h)?.into_iter().map(|v| v.max(0.0)).collect();
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// Spiking front-end and simulation length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConversionConfig {
    pub duration: usize,
    /// Input neurons receive each input value as a constant current.
    pub input: LifParams,
}

impl Default for ConversionConfig {
    fn default() -> Self {
        Self { duration: 100, input: LifParams::default() }
    }
}

/// Input spike train for one sample.
pub fn encode_input(x: &[f64], cfg: &ConversionConfig) -> Result<SpikeRaster> {
    encode_constant_current(x, &Matrix::identity(x.len()), cfg.duration, &cfg.input)
}

/// Run IF layers `0..layers` on an input raster. `on_current` sees every
/// layer's input current at every step.
fn forward_if(
    net: &DenseReluNet,
    thresholds: &[f64],
    input: &SpikeRaster,
    layers: usize,
    mut on_current: impl FnMut(usize, &[f64]),
) -> Result<Vec<SpikeRaster>> {
    let mut states: Vec<IfLayerState> = (0..layers).map(|k| IfLayerState::new(net.weights[k].rows, Some(thresholds[k]))).collect();
    let mut rasters: Vec<SpikeRaster> = (0..layers).map(|k| SpikeRaster::new(net.weights[k].rows)).collect();
    let mut current;
    for frame in &input.frames {
        let mut z = frame.clone();
        for k in 0..layers {
            current = net.weights[k].matvec(&z)?;
            on_current(k, &current);
            z = states[k].step(&current)?;
            rasters[k].push(z.clone());
        }
    }
    Ok(rasters)
}

/// Layer-by-layer threshold balancing: each threshold is the largest input
/// current the layer receives at any step of any calibration sample, with the
/// earlier thresholds already fixed.
pub fn balance_thresholds(net: &DenseReluNet, calibration: &[Vec<f64>], cfg: &ConversionConfig) -> Result<Vec<f64>> {
    if calibration.is_empty() {
        return arg("calibration set is empty");
    }
    let inputs = calibration.par_iter().map(|x| encode_input(x, cfg)).collect::<Result<Vec<_>>>()?;
    let mut thresholds = vec![0.0; net.weights.len()];
    for k in 0..net.weights.len() {
        let maxes = inputs
            .par_iter()
            .map(|r| {
                let mut m = f64::NEG_INFINITY;
                forward_if(net, &thresholds, r, k + 1, |layer, c| {
                    if layer == k {
                        m = c.iter().copied().fold(m, f64::max);
                    }
                })?;
                Ok(m)
            })
            .collect::<Result<Vec<f64>>>()?;
        let m = maxes.into_iter().fold(f64::NEG_INFINITY, f64::max);
        thresholds[k] = m.max(THRESHOLD_FLOOR);
    }
    Ok(thresholds)
}

fn check_thresholds(net: &DenseReluNet, thresholds: &[f64]) -> Result<()> {
    if thresholds.len() != net.weights.len() {
        return arg(format!("{} thresholds for {} layers", thresholds.len(), net.weights.len()));
    }
    if thresholds.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::State("thresholds must be balanced (positive) before running".into()));
    }
    Ok(())
}

/// Spike counts of the input neurons and of every IF layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvertedRun {
    pub input_counts: Vec<f64>,
    pub layer_counts: Vec<Vec<f64>>,
}

pub fn run_converted(net: &DenseReluNet, thresholds: &[f64], x: &[f64], cfg: &ConversionConfig) -> Result<ConvertedRun> {
    check_thresholds(net, thresholds)?;
    let input = encode_input(x, cfg)?;
    let rasters = forward_if(net, thresholds, &input, net.weights.len(), |_, _| {})?;
    Ok(ConvertedRun { input_counts: input.counts(), layer_counts: rasters.iter().map(SpikeRaster::counts).collect() })
}

/// Run the IF layers on a given input raster.
pub fn run_layers(net: &DenseReluNet, thresholds: &[f64], input: &SpikeRaster) -> Result<Vec<Vec<f64>>> {
    check_thresholds(net, thresholds)?;
    Ok(forward_if(net, thresholds, input, net.weights.len(), |_, _| {})?.iter().map(SpikeRaster::counts).collect())
}

/// Largest per-step input current each layer sees on `inputs`, divided by its threshold.
pub fn replay_peak_ratio(net: &DenseReluNet, thresholds: &[f64], inputs: &[Vec<f64>], cfg: &ConversionConfig) -> Result<Vec<f64>> {
    check_thresholds(net, thresholds)?;
    let mut peaks = vec![f64::NEG_INFINITY; net.weights.len()];
    for x in inputs {
        let r = encode_input(x, cfg)?;
        forward_if(net, thresholds, &r, net.weights.len(), |k, c| {
            peaks[k] = c.iter().copied().fold(peaks[k], f64::max);
        })?;
    }
    Ok(peaks.iter().zip(thresholds).map(|(p, t)| p / t).collect())
}

/// Per-layer Pearson correlation between spike counts and the ReLU activations
/// the original net computes from the measured input rates, pooled over
/// samples and neurons.
pub fn conversion_fidelity(net: &DenseReluNet, thresholds: &[f64], inputs: &[Vec<f64>], cfg: &ConversionConfig) -> Result<Vec<f64>> {
    if inputs.is_empty() {
        return arg("no inputs to evaluate");
    }
    let runs = inputs.par_iter().map(|x| run_converted(net, thresholds, x, cfg)).collect::<Result<Vec<_>>>()?;
    let layers = net.weights.len();
    let mut counts = vec![Vec::new(); layers];
    let mut acts = vec![Vec::new(); layers];
    for r in &runs {
        let rates: Vec<f64> = r.input_counts.iter().map(|c| c / cfg.duration as f64).collect();
        for (k, a) in net.activations(&rates)?.into_iter().enumerate() {
            acts[k].extend(a);
            counts[k].extend_from_slice(&r.layer_counts[k]);
        }
    }
    Ok(counts.iter().zip(&acts).map(|(c, a)| pearson(c, a)).collect())
}

pub fn converted_checkpoint(net: &DenseReluNet, thresholds: &[f64], cfg: &ConversionConfig) -> Result<Checkpoint> {
    Ok(Checkpoint {
        kind: "converted".into(),
        config: serde_json::to_value(cfg)?,
        metadata: json!({ "conversion": { "thresholds": thresholds, "sizes": net.sizes() } }),
        tensors: net.weights.iter().enumerate().map(|(k, w)| (format!("w{k}"), w.clone())).collect(),
    })
}

pub fn converted_from_checkpoint(ck: &Checkpoint) -> Result<(DenseReluNet, Vec<f64>, ConversionConfig)> {
    if ck.kind != "converted" {
        return Err(Error::Format(format!("checkpoint holds {:?}, expected \"converted\"", ck.kind)));
    }
    let cfg: ConversionConfig = serde_json::from_value(ck.config.clone())?;
    let thresholds: Vec<f64> = serde_json::from_value(ck.metadata["conversion"]["thresholds"].clone())?;
    let net = DenseReluNet::new(ck.tensors.iter().map(|(_, m)| m.clone()).collect()).map_err(|e| Error::Format(e.to_string()))?;
    check_thresholds(&net, &thresholds).map_err(|e| Error::Format(e.to_string()))?;
    Ok((net, thresholds, cfg))
}
