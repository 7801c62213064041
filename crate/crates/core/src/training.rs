//! Surrogate-gradient BPTT training of the association model.

use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{arg, Error, Result};
use crate::model::{forward_graph, simulate_sequence, EpisodeInput, ModelConfig, ModelParams, RunOptions};
use crate::optim::{adam_step, clip_gradients, lr_at, AdamState, LayerRates};
use crate::tasks::{gen_association_episode, AssociationTaskConfig};
use crate::tensor::argmax;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_interval: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub lambda_rho: f64,
    pub rho_0: f64,
    /// Iterations before the rate regularizer switches on.
    #[serde(default)]
    pub reg_warmup: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Save parameters every this many iterations; 0 disables.
    #[serde(default)]
    pub checkpoint_interval: usize,
    /// Fill the `wall_ms` metrics column. Off by default so logs are reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            lr: 0.003,
            lr_decay: 0.85,
            decay_interval: 340,
            batch_size: 512,
            iterations: 4250,
            lambda_rho: 1e-5,
            rho_0: 0.0,
            reg_warmup: 0,
            clip_norm: 40.0,
            seed: 0,
            checkpoint_interval: 500,
            record_wall_time: false,
        }
    }

    pub fn desk() -> Self {
        Self { batch_size: 64, iterations: 1500, checkpoint_interval: 250, ..Self::paper() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return arg("lr must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return arg("lr_decay must lie in (0, 1]");
        }
        if !(self.clip_norm > 0.0) {
            return arg("clip_norm must be positive");
        }
        if self.batch_size == 0 || self.decay_interval == 0 {
            return arg("batch_size and decay_interval must be positive");
        }
        if !(self.lambda_rho >= 0.0) || !(self.rho_0 >= 0.0) {
            return arg("lambda_rho and rho_0 must be non-negative");
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub loss: f64,
    pub reg_loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub wall_ms: Option<f64>,
}

pub const METRICS_HEADER: [&str; 6] = ["iteration", "loss", "reg_loss", "accuracy", "lr", "wall_ms"];

/// Append-only CSV metrics log.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl MetricsWriter<File> {
    pub fn create(path: &Path) -> Result<Self> {
        Self::new(File::create(path)?)
    }
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        inner.write_record(METRICS_HEADER)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush()?;
        Ok(())
    }
}

/// Loss and gradient of one batch.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    /// Mean cross-entropy.
    pub loss: f64,
    pub reg_loss: f64,
    pub accuracy: f64,
    /// In parameter order of [`ModelParams::tensors`].
    pub grads: Vec<Vec<f64>>,
}

/// Mean cross-entropy plus rate regularizer over a batch, and its gradient.
///
/// The regularizer couples episodes through batch-mean rates, so when it is
/// active a forward-only pass measures the rates first and the per-neuron
/// derivatives are then injected into every episode's spike nodes.
pub fn batch_gradient(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[EpisodeInput],
    lambda_rho: f64,
    rho_0: f64,
) -> Result<BatchGradient> {
    if batch.is_empty() {
        return arg("empty batch");
    }
    params.check(cfg)?;
    let b = batch.len() as f64;
    let (reg_loss, reg_seeds) = if lambda_rho > 0.0 {
        let runs = batch
            .par_iter()
            .map(|e| simulate_sequence(params, cfg, e, RunOptions::default()))
            .collect::<Result<Vec<_>>>()?;
        let mut loss = 0.0;
        let mut seeds = Vec::with_capacity(4);
        for layer in 0..4 {
            let mut rates = LayerRates { counts: vec![0.0; runs[0].layer_counts[layer].len()], samples: 0.0 };
            for r in &runs {
                rates.counts.iter_mut().zip(&r.layer_counts[layer]).for_each(|(a, c)| *a += c);
                rates.samples += r.layer_steps[layer] as f64;
            }
            if rates.samples == 0.0 {
                seeds.push(None);
                continue;
            }
            loss += rates.loss(lambda_rho, rho_0);
            seeds.push(Some(rates.loss_grad_per_count(lambda_rho, rho_0)));
        }
        (loss, seeds)
    } else {
        (0.0, vec![None; 4])
    };

    let per_episode = batch
        .par_iter()
        .map(|e| -> Result<(f64, bool, Vec<Vec<f64>>)> {
            let mut g = Graph::new();
            let nodes = params.register(&mut g);
            let fwd = forward_graph(&mut g, &nodes, cfg, e)?;
            let loss = g.softmax_xent(fwd.logits, e.target_label - 1)?;
            let mut seeds = vec![(loss, vec![1.0 / b])];
            for (layer, seed) in reg_seeds.iter().enumerate() {
                if let Some(s) = seed {
                    seeds.extend(fwd.spikes[layer].iter().map(|&id| (id, s.clone())));
                }
            }
            let grads = g.backward_from(&seeds)?;
            let correct = argmax(g.value(fwd.logits)) + 1 == e.target_label;
            Ok((g.scalar(loss), correct, nodes.collect(&g, &grads)))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut grads: Vec<Vec<f64>> = params.tensors().iter().map(|m| vec![0.0; m.len()]).collect();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (l, c, gs) in per_episode {
        loss += l;
        correct += c as usize;
        for (acc, gi) in grads.iter_mut().zip(gs) {
            acc.iter_mut().zip(gi).for_each(|(a, x)| *a += x);
        }
    }
    Ok(BatchGradient { loss: loss / b, reg_loss, accuracy: correct as f64 / b, grads })
}

/// Progress callbacks of [`train_association_with`].
pub trait TrainObserver {
    fn on_iteration(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _iteration: usize, _params: &ModelParams) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Train from a Glorot initialization drawn from `train.seed`.
pub fn train_association(
    train: &TrainConfig,
    model: &ModelConfig,
    task: &AssociationTaskConfig,
) -> Result<(ModelParams, Vec<MetricsRow>)> {
    train_association_with(train, model, task, &mut ())
}

pub fn train_association_with(
    train: &TrainConfig,
    model: &ModelConfig,
    task: &AssociationTaskConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(ModelParams, Vec<MetricsRow>)> {
    use rand::SeedableRng;
    train.validate()?;
    model.validate()?;
    task.validate()?;
    if model.vec_dim != task.vec_dim || model.output_dim != task.label_range {
        return arg("model input/output sizes do not match the task");
    }
    let mut params = ModelParams::init(model, &mut rand_chacha::ChaCha8Rng::seed_from_u64(train.seed))?;
    let mut adam = AdamState::new(&params.tensors().map(|m| m.len()));
    let mut data_rng = task.train_rng();
    let mut log = Vec::with_capacity(train.iterations);
    for k in 0..train.iterations {
        let start = Instant::now();
        let batch = (0..train.batch_size).map(|_| gen_association_episode(task, &mut data_rng)).collect::<Result<Vec<_>>>()?;
        let lambda = if k >= train.reg_warmup { train.lambda_rho } else { 0.0 };
        let mut bg = batch_gradient(&params, model, &batch, lambda, train.rho_0)?;
        if !(bg.loss + bg.reg_loss).is_finite() {
            return Err(Error::Numeric(format!("loss diverged at iteration {k}: ce={} reg={}", bg.loss, bg.reg_loss)));
        }
        clip_gradients(&mut bg.grads, train.clip_norm)?;
        let lr = lr_at(train.lr, train.lr_decay, train.decay_interval, k);
        adam_step(&mut params.tensors_mut(), &bg.grads, &mut adam, lr)
            .map_err(|e| Error::Numeric(format!("iteration {k}: {e}")))?;
        let row = MetricsRow {
            iteration: k,
            loss: bg.loss,
            reg_loss: bg.reg_loss,
            accuracy: bg.accuracy,
            lr,
            wall_ms: train.record_wall_time.then(|| start.elapsed().as_secs_f64() * 1e3),
        };
        observer.on_iteration(&row)?;
        log.push(row);
        if train.checkpoint_interval > 0 && (k + 1) % train.checkpoint_interval == 0 {
            observer.on_checkpoint(k + 1, &params)?;
        }
    }
    Ok((params, log))
}
