//! The one-shot association benchmark and its length-generalization protocol.

use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::model::{simulate_sequence, EpisodeInput, Fact, ModelConfig, ModelParams, RunOptions};
use crate::tensor::argmax;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssociationTaskConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub vec_dim: usize,
    /// Labels are drawn from `1..=label_range`.
    pub label_range: usize,
    pub seed: u64,
}

impl Default for AssociationTaskConfig {
    fn default() -> Self {
        Self { n_train: 3, n_test: 3, vec_dim: 10, label_range: 3, seed: 0 }
    }
}

impl AssociationTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vec_dim == 0 {
            return arg("vec_dim must be positive");
        }
        for n in [self.n_train, self.n_test] {
            if n == 0 || n > self.label_range {
                return arg(format!("sequence length {n} needs 1 <= n <= label_range ({})", self.label_range));
            }
        }
        Ok(())
    }

    /// Generator for training batches.
    pub fn train_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    /// Held-out generator; never overlaps the training stream.
    pub fn test_rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(1);
        r
    }
}

/// `n` facts with i.i.d. uniform vectors and distinct labels; the query is one of them.
pub fn gen_episode<R: Rng + ?Sized>(n: usize, vec_dim: usize, label_range: usize, rng: &mut R) -> Result<EpisodeInput> {
    if n == 0 || n > label_range {
        return arg(format!("cannot draw {n} distinct labels from 1..={label_range}"));
    }
    let labels = sample(rng, label_range, n);
    let facts: Vec<Fact> = labels
        .iter()
        .map(|k| Fact { vector: (0..vec_dim).map(|_| rng.random::<f64>()).collect(), label: k + 1 })
        .collect();
    let q = rng.random_range(0..n);
    Ok(EpisodeInput { query: facts[q].vector.clone(), target_label: facts[q].label, facts })
}

/// Training-length episode.
pub fn gen_association_episode<R: Rng + ?Sized>(cfg: &AssociationTaskConfig, rng: &mut R) -> Result<EpisodeInput> {
    gen_episode(cfg.n_train, cfg.vec_dim, cfg.label_range, rng)
}

/// Fraction of episodes on which `predict` returns the target label.
pub fn accuracy_of<F>(episodes: &[EpisodeInput], predict: F) -> Result<f64>
where
    F: Fn(&EpisodeInput) -> Result<usize> + Sync,
{
    if episodes.is_empty() {
        return arg("no episodes to evaluate");
    }
    let hits = episodes
        .par_iter()
        .map(|e| predict(e).map(|p| (p == e.target_label) as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / episodes.len() as f64)
}

pub fn predict_label(params: &ModelParams, cfg: &ModelConfig, episode: &EpisodeInput, opts: RunOptions) -> Result<usize> {
    Ok(argmax(&simulate_sequence(params, cfg, episode, opts)?.logits) + 1)
}

/// Held-out episodes of length `n`, generated from the test stream.
pub fn test_episodes(task: &AssociationTaskConfig, n: usize, count: usize) -> Result<Vec<EpisodeInput>> {
    let mut rng = task.test_rng();
    (0..count).map(|_| gen_episode(n, task.vec_dim, task.label_range, &mut rng)).collect()
}

/// Accuracy on `n_episodes` fresh held-out episodes of length `n_test`.
pub fn evaluate_accuracy(params: &ModelParams, model: &ModelConfig, task: &AssociationTaskConfig, n_episodes: usize) -> Result<f64> {
    evaluate_with(params, model, task, task.n_test, n_episodes, RunOptions::default())
}

pub fn evaluate_with(
    params: &ModelParams,
    model: &ModelConfig,
    task: &AssociationTaskConfig,
    n: usize,
    n_episodes: usize,
    opts: RunOptions,
) -> Result<f64> {
    task.validate()?;
    let eps = test_episodes(task, n, n_episodes)?;
    accuracy_of(&eps, |e| predict_label(params, model, e, opts))
}

/// Accuracy of fixed parameters at each test length, without retraining.
pub fn ood_protocol(
    params: &ModelParams,
    model: &ModelConfig,
    task: &AssociationTaskConfig,
    lengths: &[usize],
    n_episodes: usize,
) -> Result<Vec<(usize, f64)>> {
    if model.output_dim != task.label_range {
        return arg(format!("readout has {} classes but labels range over {}", model.output_dim, task.label_range));
    }
    let mut out = Vec::with_capacity(lengths.len());
    for &n in lengths {
        if n == 0 || n > task.label_range {
            return arg(format!("test length {n} exceeds the label range {}", task.label_range));
        }
        out.push((n, evaluate_with(params, model, task, n, n_episodes, RunOptions::default())?));
    }
    Ok(out)
}

/// Predict the label that was most frequent among training targets.
pub fn label_frequency_baseline(train: &[EpisodeInput], test: &[EpisodeInput], label_range: usize) -> Result<f64> {
    let mut freq = vec![0usize; label_range + 1];
    for e in train {
        freq[e.target_label] += 1;
    }
    let best = (1..=label_range).max_by_key(|&k| (freq[k], std::cmp::Reverse(k))).unwrap_or(1);
    accuracy_of(test, |_| Ok(best))
}

/// Write episodes one per line, comma separated:
/// `n, vec_dim, (vector..., label) x n, query..., target_label`.
pub fn write_episodes<W: Write>(out: W, episodes: &[EpisodeInput]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).has_headers(false).from_writer(out);
    for e in episodes {
        let d = e.query.len();
        let mut rec = vec![e.facts.len().to_string(), d.to_string()];
        for f in &e.facts {
            rec.extend(f.vector.iter().map(|v| format!("{v:?}")));
            rec.push(f.label.to_string());
        }
        rec.extend(e.query.iter().map(|v| format!("{v:?}")));
        rec.push(e.target_label.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
