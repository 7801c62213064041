//! Losses, regularization, initialization and the Adam optimizer.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::log_softmax;
use crate::error::{arg, Error, Result};
use crate::snn::SpikeRaster;
use crate::tensor::{l2_norm, Matrix};

/// `-log softmax(logits)[target]` with a one-based target.
pub fn loss_crossentropy(logits: &[f64], target: usize) -> Result<f64> {
    if logits.len() < 2 {
        return arg("cross-entropy needs at least two classes");
    }
    if target == 0 || target > logits.len() {
        return arg(format!("target {target} outside 1..={}", logits.len()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(-log_softmax(logits)[target - 1])
}

/// Spike counts of one layer summed over time and batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRates {
    pub counts: Vec<f64>,
    /// Number of (step, batch element) samples behind `counts`.
    pub samples: f64,
}

impl LayerRates {
    pub fn from_rasters(rasters: &[SpikeRaster]) -> Result<Self> {
        let Some(first) = rasters.first() else { return arg("no rasters") };
        let mut counts = vec![0.0; first.neurons];
        let mut samples = 0.0;
        for r in rasters {
            if r.neurons != first.neurons {
                return arg("rasters of one layer must have the same width");
            }
            for (c, x) in counts.iter_mut().zip(r.counts()) {
                *c += x;
            }
            samples += r.steps() as f64;
        }
        Ok(Self { counts, samples })
    }

    /// Mean spikes per step of each neuron.
    pub fn rates(&self) -> Vec<f64> {
        self.counts.iter().map(|c| c / self.samples).collect()
    }

    /// `lambda / N * sum_i (rho_0 - rho_i)^2`.
    pub fn loss(&self, lambda: f64, rho_0: f64) -> f64 {
        let n = self.counts.len() as f64;
        lambda / n * self.rates().iter().map(|r| (rho_0 - r) * (rho_0 - r)).sum::<f64>()
    }

    /// Derivative of [`LayerRates::loss`] w.r.t. one batch element's count of each neuron.
    pub fn loss_grad_per_count(&self, lambda: f64, rho_0: f64) -> Vec<f64> {
        let n = self.counts.len() as f64;
        self.rates().iter().map(|r| lambda / n * 2.0 * (r - rho_0) / self.samples).collect()
    }
}

/// Spike-rate regularizer summed over layers. `layers[i]` holds the rasters
/// of layer `i` for every batch element.
pub fn rate_regularizer(layers: &[Vec<SpikeRaster>], lambda: f64, rho_0: f64) -> Result<f64> {
    let mut total = 0.0;
    for l in layers {
        total += LayerRates::from_rasters(l)?.loss(lambda, rho_0);
    }
    Ok(total)
}

/// Scale gradients so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return arg(format!("clip norm must be positive, got {max_norm}"));
    }
    let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|x| *x *= s);
    }
    Ok(norm)
}

pub fn glorot_bound(rows: usize, cols: usize, gain: f64) -> f64 {
    gain * (6.0 / (rows + cols) as f64).sqrt()
}

/// Uniform on `+-gain * sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_init<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Matrix {
    let b = glorot_bound(rows, cols, gain);
    let data = (0..rows * cols).map(|_| rng.random_range(-b..=b)).collect();
    Matrix { rows, cols, data }
}

/// Scaled (semi-)orthogonal matrix from the QR decomposition of a Gaussian draw.
pub fn orthogonal_init<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Matrix {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let g = DMatrix::<f64>::from_fn(tall, short, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).scale_mut(-1.0);
        }
    }
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let v = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
            out.set(i, j, gain * v);
        }
    }
    out
}

/// Moments for Adam with bias correction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            first_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_params(params: &[&mut Matrix]) -> Self {
        Self::new(&params.iter().map(|m| m.len()).collect::<Vec<_>>())
    }
}

/// One bias-corrected Adam update in place. Non-finite gradients abort the
/// step before anything is modified.
pub fn adam_step(params: &mut [&mut Matrix], grads: &[Vec<f64>], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return arg("adam: parameter, gradient and state counts differ");
    }
    for (p, g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return arg("adam: gradient shape does not match parameter");
        }
    }
    if grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (k, p) in params.iter_mut().enumerate() {
        let m = &mut state.first_moment[k];
        let v = &mut state.second_moment[k];
        for (i, w) in p.data.iter_mut().enumerate() {
            let gi = grads[k][i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *w -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Step-decayed learning rate: `lr0 * decay^floor(k / interval)`.
pub fn lr_at(lr0: f64, decay: f64, interval: usize, iteration: usize) -> f64 {
    lr0 * decay.powi((iteration / interval.max(1)) as i32)
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    l2_norm(&grads.iter().flatten().copied().collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn crossentropy_examples() {
        assert!((loss_crossentropy(&[0.0; 30], 7).unwrap() - 30f64.ln()).abs() < 1e-12);
        let mut l = vec![0.0; 5];
        l[2] = 1e6;
        assert!(loss_crossentropy(&l, 3).unwrap().abs() < 1e-12);
        assert!((loss_crossentropy(&[0.0, 0.0], 1).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(loss_crossentropy(&[f64::NAN, 0.0], 1), Err(Error::Numeric(_))));
        assert!(loss_crossentropy(&[0.0, 0.0], 3).is_err());
        assert!(loss_crossentropy(&[0.0], 1).is_err());
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![vec![6.0, 8.0]];
        clip_gradients(&mut g, 40.0).unwrap();
        assert_eq!(g, vec![vec![6.0, 8.0]]);
        let mut g = vec![vec![30.0, 40.0]];
        let n = clip_gradients(&mut g, 40.0).unwrap();
        assert_eq!(n, 50.0);
        assert!((g[0][0] - 24.0).abs() < 1e-12 && (g[0][1] - 32.0).abs() < 1e-12);
        assert!(clip_gradients(&mut g, 0.0).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut w = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let mut st = AdamState::new(&[1]);
        adam_step(&mut [&mut w], &[vec![0.5]], &mut st, 0.003).unwrap();
        assert!((w.data[0] - (1.0 - 0.003)).abs() < 1e-9);
        let before = w.data[0];
        adam_step(&mut [&mut w], &[vec![0.5]], &mut st, 0.003).unwrap();
        assert!(((before - w.data[0]) - 0.003).abs() < 1e-4);
    }

    #[test]
    fn adam_zero_grad_and_zero_lr_are_noops() {
        let mut w = Matrix::from_vec(1, 2, vec![0.25, -1.5]).unwrap();
        let orig = w.clone();
        let mut st = AdamState::new(&[2]);
        adam_step(&mut [&mut w], &[vec![0.0, 0.0]], &mut st, 0.1).unwrap();
        assert_eq!(w, orig);
        adam_step(&mut [&mut w], &[vec![3.0, -2.0]], &mut st, 0.0).unwrap();
        assert_eq!(w, orig);
        assert!(matches!(adam_step(&mut [&mut w], &[vec![f64::INFINITY, 0.0]], &mut st, 0.1), Err(Error::Numeric(_))));
        assert_eq!(w, orig);
    }

    #[test]
    fn glorot_bounds_and_determinism() {
        let b = glorot_bound(80, 10, 2f64.sqrt());
        assert!((b - 0.365148).abs() < 1e-6);
        let m = glorot_init(80, 10, 2f64.sqrt(), &mut ChaCha8Rng::seed_from_u64(1));
        assert!(m.data.iter().all(|v| v.abs() <= b));
        let m2 = glorot_init(80, 10, 2f64.sqrt(), &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(m, m2);
        let big = glorot_init(100, 100, 2f64.sqrt(), &mut ChaCha8Rng::seed_from_u64(2));
        let bb = glorot_bound(100, 100, 2f64.sqrt());
        let mean = big.data.iter().sum::<f64>() / 1e4;
        // std of the mean estimator of U(-b, b) over 10^4 draws
        let se = bb / 3f64.sqrt() / 100.0;
        assert!(mean.abs() < 3.0 * se);
    }

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (r, c) in [(4, 7), (7, 4), (5, 5)] {
            let m = orthogonal_init(r, c, 1.0, &mut rng);
            let (a, b) = if r <= c { (r, c) } else { (c, r) };
            for i in 0..a {
                for j in 0..a {
                    let dot: f64 = (0..b)
                        .map(|k| if r <= c { m.get(i, k) * m.get(j, k) } else { m.get(k, i) * m.get(k, j) })
                        .sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn regularizer_examples() {
        // 2 neurons over 10 steps: 1 and 3 spikes -> rates 0.1 and 0.3
        let mut r = SpikeRaster::new(2);
        for t in 0..10 {
            r.push(vec![if t == 0 { 1.0 } else { 0.0 }, if t < 3 { 1.0 } else { 0.0 }]);
        }
        let l = rate_regularizer(&[vec![r.clone()]], 1e-5, 0.0).unwrap();
        assert!((l - 5e-7).abs() < 1e-12 * 5e-7 + 1e-20);
        let mut doubled = SpikeRaster::new(2);
        for t in 0..10 {
            doubled.push(vec![if t < 2 { 1.0 } else { 0.0 }, if t < 6 { 1.0 } else { 0.0 }]);
        }
        let l2 = rate_regularizer(&[vec![doubled]], 1e-5, 0.0).unwrap();
        assert!((l2 - 4.0 * l).abs() < 1e-18);
        let silent = SpikeRaster { neurons: 2, frames: vec![vec![0.0, 0.0]; 10] };
        assert_eq!(rate_regularizer(&[vec![silent]], 1e-5, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn schedule_is_stepwise() {
        assert_eq!(lr_at(0.003, 0.85, 340, 0), 0.003);
        assert_eq!(lr_at(0.003, 0.85, 340, 339), 0.003);
        assert_eq!(lr_at(0.003, 0.85, 340, 340), 0.003 * 0.85);
        assert_eq!(lr_at(0.003, 0.85, 340, 1020), 0.003 * 0.85f64.powi(3));
    }
}
