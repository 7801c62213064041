use std::fs::{self, File};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use hebbsnn::autodiff::smooth_op_report;
use hebbsnn::checkpoint::{agent_checkpoint, agent_from_checkpoint, model_checkpoint, model_from_checkpoint, Checkpoint};
use hebbsnn::concentration::{mean, optimal_agent_eval, random_agent_eval, write_flip_log};
use hebbsnn::conversion::{balance_thresholds, conversion_fidelity, converted_checkpoint, DenseReluNet};
use hebbsnn::model::{ModelConfig, ModelParams};
use hebbsnn::ppo::{evaluate_agent, ppo_train_with, Agent, PpoIterationStats, PpoObserver};
use hebbsnn::tasks::{evaluate_accuracy, ood_protocol, AssociationTaskConfig};
use hebbsnn::training::{train_association_with, MetricsRow, MetricsWriter, TrainObserver};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{resolve, ExperimentConfig, Sources, Task};
use crate::{BaselineArgs, EvalArgs, TrainArgs};

const CHECKPOINT: &str = "checkpoint.ckpt";

pub fn train(a: &TrainArgs) -> Result<()> {
    let sources = Sources { file: a.config.as_deref(), seed: a.seed, iterations: a.iterations, overrides: &a.overrides };
    let cfg = resolve(a.task, a.preset, &sources)?;
    if a.dry_run {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(cfg.task.name()));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_manifest(&out, "train", &cfg)?;
    match cfg.task {
        Task::Assoc | Task::Ood => train_assoc(&cfg, &out),
        Task::Rl => train_rl(&cfg, &out),
        Task::ConvertDemo => convert_demo(&cfg, &out),
        Task::Gradcheck => gradcheck(&cfg, &out),
    }
}

fn write_manifest(out: &Path, command: &str, cfg: &ExperimentConfig) -> Result<()> {
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "config": cfg,
    });
    fs::write(out.join("run.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

struct AssocLog<'a> {
    metrics: MetricsWriter<File>,
    out: &'a Path,
    cfg: &'a ExperimentConfig,
}

impl AssocLog<'_> {
    fn save(&self, iteration: usize, params: &ModelParams) -> hebbsnn::Result<()> {
        let meta = json!({ "iteration": iteration, "data": self.cfg.data, "experiment": self.cfg });
        model_checkpoint(params, &self.cfg.model, meta)?.save(&self.out.join(CHECKPOINT))
    }
}

impl TrainObserver for AssocLog<'_> {
    fn on_iteration(&mut self, row: &MetricsRow) -> hebbsnn::Result<()> {
        if row.iteration % 50 == 0 {
            eprintln!("iteration {} loss {:.4} accuracy {:.3}", row.iteration, row.loss, row.accuracy);
        }
        self.metrics.write(row)
    }

    fn on_checkpoint(&mut self, iteration: usize, params: &ModelParams) -> hebbsnn::Result<()> {
        self.save(iteration, params)
    }
}

fn train_assoc(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let mut log = AssocLog { metrics: MetricsWriter::create(&out.join("metrics.csv"))?, out, cfg };
    let (params, _) = train_association_with(&cfg.train, &cfg.model, &cfg.data, &mut log)?;
    log.save(cfg.train.iterations, &params)?;
    if cfg.task == Task::Ood {
        let curve = ood_curve(&params, &cfg.model, &cfg.data, &cfg.eval.lengths, cfg.eval.episodes, out)?;
        let at = curve.iter().find(|(n, _)| *n == cfg.data.n_test).map(|&(_, a)| a);
        let acc = match at {
            Some(a) => a,
            None => evaluate_accuracy(&params, &cfg.model, &cfg.data, cfg.eval.episodes)?,
        };
        println!("task=ood n_test={} accuracy={acc}", cfg.data.n_test);
    } else {
        let acc = evaluate_accuracy(&params, &cfg.model, &cfg.data, cfg.eval.episodes)?;
        println!("task=assoc accuracy={acc}");
    }
    Ok(())
}

fn ood_curve(
    params: &ModelParams,
    model: &ModelConfig,
    data: &AssociationTaskConfig,
    lengths: &[usize],
    episodes: usize,
    out: &Path,
) -> Result<Vec<(usize, f64)>> {
    let usable: Vec<usize> = lengths.iter().copied().filter(|&n| n >= 1 && n <= data.label_range).collect();
    if usable.len() < lengths.len() {
        eprintln!("skipping lengths beyond the label range {}", data.label_range);
    }
    let curve = ood_protocol(params, model, data, &usable, episodes)?;
    let mut w = csv::Writer::from_path(out.join("ood.csv"))?;
    w.write_record(["n", "accuracy"])?;
    for (n, acc) in &curve {
        w.write_record([n.to_string(), acc.to_string()])?;
        println!("n={n} accuracy={acc}");
    }
    w.flush()?;
    Ok(curve)
}

struct RlLog<'a> {
    metrics: csv::Writer<File>,
    out: &'a Path,
    cfg: &'a ExperimentConfig,
}

impl RlLog<'_> {
    fn save(&self, iteration: usize, agent: &Agent) -> hebbsnn::Result<()> {
        let meta = json!({ "iteration": iteration, "experiment": self.cfg });
        agent_checkpoint(agent, self.cfg.ppo.n_pairs, meta)?.save(&self.out.join(CHECKPOINT))
    }
}

impl PpoObserver for RlLog<'_> {
    fn on_iteration(&mut self, s: &PpoIterationStats) -> hebbsnn::Result<()> {
        if s.iteration % 10 == 0 {
            eprintln!("iteration {} mean_flips {:?} entropy {:.3}", s.iteration, s.mean_flips, s.entropy);
        }
        self.metrics.serialize(s)?;
        self.metrics.flush()?;
        Ok(())
    }

    fn on_checkpoint(&mut self, iteration: usize, agent: &Agent) -> hebbsnn::Result<()> {
        self.save(iteration, agent)
    }
}

fn train_rl(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let mut log = RlLog { metrics: csv::Writer::from_path(out.join("metrics.csv"))?, out, cfg };
    let run = ppo_train_with(&cfg.ppo, &cfg.model, &mut log)?;
    log.save(cfg.ppo.iterations, &run.agent)?;
    write_flip_log(File::create(out.join("flips.csv"))?, &run.games)?;
    let flips = evaluate_agent(&run.agent, cfg.ppo.n_pairs, cfg.ppo.deck_mode, cfg.eval.games, cfg.ppo.max_flips, cfg.seed)?;
    write_game_lengths(&out.join("eval_flips.csv"), &flips)?;
    println!("task=rl mean_flips={}", mean(&flips));
    Ok(())
}

fn write_game_lengths(path: &Path, flips: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["game_index", "n_flips"])?;
    for (i, f) in flips.iter().enumerate() {
        w.write_record([i.to_string(), f.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn convert_demo(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let c = &cfg.conversion;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = DenseReluNet::random(&c.sizes, &mut rng)?;
    let mut draw = |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| (0..c.sizes[0]).map(|_| rng.random::<f64>()).collect()).collect() };
    let calibration = draw(c.calibration);
    let held_out = draw(c.held_out);
    let thresholds = balance_thresholds(&net, &calibration, &c.sim)?;
    let r = conversion_fidelity(&net, &thresholds, &held_out, &c.sim)?;
    let mut w = csv::Writer::from_path(out.join("conversion.csv"))?;
    w.write_record(["layer", "threshold", "pearson"])?;
    for (k, (t, r)) in thresholds.iter().zip(&r).enumerate() {
        w.write_record([k.to_string(), t.to_string(), r.to_string()])?;
    }
    w.flush()?;
    converted_checkpoint(&net, &thresholds, &c.sim)?.save(&out.join(CHECKPOINT))?;
    println!("task=convert-demo pearson={}", r.iter().copied().fold(f64::INFINITY, f64::min));
    Ok(())
}

fn gradcheck(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let report = smooth_op_report(cfg.seed, cfg.eval.grad_eps)?;
    let mut w = csv::Writer::from_path(out.join("gradcheck.csv"))?;
    w.write_record(["op", "max_rel_error"])?;
    for (op, err) in &report {
        w.write_record([op.to_string(), format!("{err:?}")])?;
    }
    w.flush()?;
    let worst = report.iter().map(|&(_, e)| e).fold(0.0, f64::max);
    println!("task=gradcheck max_rel_error={worst:?}");
    Ok(())
}

/// `a..b` and `a..=b` are inclusive ranges; otherwise a comma list.
pub fn parse_lengths(spec: &str) -> Result<Vec<usize>> {
    let bad = || anyhow!("cannot read lengths `{spec}`; use a..b or a,b,c");
    if let Some((lo, hi)) = spec.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if lo > hi {
            return Err(bad());
        }
        return Ok((lo..=hi).collect());
    }
    spec.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let out = match &a.out {
        Some(d) => d.clone(),
        None => a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    if !out.as_os_str().is_empty() {
        fs::create_dir_all(&out)?;
    }
    let experiment: Option<ExperimentConfig> = ck.metadata.get("experiment").and_then(|v| serde_json::from_value(v.clone()).ok());
    match ck.kind.as_str() {
        "association" => {
            let (params, model) = model_from_checkpoint(&ck)?;
            let mut data = match &experiment {
                Some(e) => e.data.clone(),
                None => {
                    let n = model.output_dim.min(3);
                    AssociationTaskConfig { n_train: n, n_test: n, vec_dim: model.vec_dim, label_range: model.output_dim, seed: 0 }
                }
            };
            if let Some(s) = a.seed {
                data.seed = s;
            }
            let episodes = a.episodes.or(experiment.as_ref().map(|e| e.eval.episodes)).unwrap_or(2000);
            let task = a.task.unwrap_or(if a.lengths.is_some() { Task::Ood } else { Task::Assoc });
            match task {
                Task::Assoc => println!("task=assoc accuracy={}", evaluate_accuracy(&params, &model, &data, episodes)?),
                Task::Ood => {
                    let lengths = match &a.lengths {
                        Some(s) => parse_lengths(s)?,
                        None => experiment.as_ref().map(|e| e.eval.lengths.clone()).unwrap_or_else(|| (1..=10).collect()),
                    };
                    ood_curve(&params, &model, &data, &lengths, episodes, &out)?;
                }
                other => bail!("an association checkpoint cannot be evaluated as `{}`", other.name()),
            }
        }
        "agent" => {
            if a.task.is_some_and(|t| t != Task::Rl) {
                bail!("agent checkpoints are evaluated with --task rl");
            }
            let (agent, n_pairs) = agent_from_checkpoint(&ck)?;
            let (deck, max_flips, seed, games) = match &experiment {
                Some(e) => (e.ppo.deck_mode, e.ppo.max_flips, e.seed, e.eval.games),
                None => (Default::default(), 100, 0, 1000),
            };
            let flips = evaluate_agent(&agent, n_pairs, deck, a.games.unwrap_or(games), max_flips, a.seed.unwrap_or(seed))?;
            write_game_lengths(&out.join("eval_flips.csv"), &flips)?;
            println!("task=rl mean_flips={}", mean(&flips));
        }
        other => bail!("no evaluation for checkpoint kind `{other}`"),
    }
    Ok(())
}

pub fn baselines(a: &BaselineArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let random = random_agent_eval(a.pairs, a.games, &mut rng)?;
    rng.set_stream(1);
    let optimal = optimal_agent_eval(a.pairs, a.games, &mut rng)?;
    fs::create_dir_all(&a.out)?;
    let mut w = csv::Writer::from_path(a.out.join("baselines.csv"))?;
    w.write_record(["game_index", "random_flips", "optimal_flips"])?;
    for (i, (r, o)) in random.iter().zip(&optimal).enumerate() {
        w.write_record([i.to_string(), r.to_string(), o.to_string()])?;
    }
    w.flush()?;
    println!("agent=random pairs={} mean_flips={}", a.pairs, mean(&random));
    println!("agent=optimal pairs={} mean_flips={}", a.pairs, mean(&optimal));
    Ok(())
}
