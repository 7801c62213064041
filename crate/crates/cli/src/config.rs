//! Experiment configuration: preset defaults, an optional TOML file and
//! `key=value` overrides, merged in that order.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use clap::ValueEnum;
use hebbsnn::concentration::observation_dim;
use hebbsnn::conversion::ConversionConfig;
use hebbsnn::model::ModelConfig;
use hebbsnn::ppo::{agent_model_config, PpoConfig};
use hebbsnn::tasks::AssociationTaskConfig;
use hebbsnn::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Assoc,
    Ood,
    Rl,
    ConvertDemo,
    Gradcheck,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Assoc => "assoc",
            Task::Ood => "ood",
            Task::Rl => "rl",
            Task::ConvertDemo => "convert-demo",
            Task::Gradcheck => "gradcheck",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvertDemoConfig {
    /// Layer widths of the random dense net, input first.
    pub sizes: Vec<usize>,
    pub calibration: usize,
    pub held_out: usize,
    pub sim: ConversionConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out episodes per accuracy estimate.
    pub episodes: usize,
    /// Greedy games for the agent evaluation.
    pub games: usize,
    /// Test lengths of the OOD curve.
    pub lengths: Vec<usize>,
    pub grad_eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub preset: Preset,
    /// Copied into every sub-seed that the file or overrides leave unset.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: AssociationTaskConfig,
    pub ppo: PpoConfig,
    pub conversion: ConvertDemoConfig,
    pub eval: EvalConfig,
}

const SUB_SEEDS: [&str; 3] = ["train.seed", "data.seed", "ppo.seed"];

impl ExperimentConfig {
    pub fn preset(task: Task, preset: Preset) -> Self {
        let (train, ppo) = match preset {
            Preset::Paper => (TrainConfig::paper(), PpoConfig::paper(2)),
            Preset::Desk => (TrainConfig::desk(), PpoConfig::desk()),
        };
        let mut data = AssociationTaskConfig::default();
        let mut model = ModelConfig::default();
        match task {
            Task::Ood => {
                data.label_range = 30;
                data.n_test = 6;
                model.output_dim = 30;
            }
            Task::Rl => model = agent_model_config(ppo.n_pairs),
            _ => {}
        }
        Self {
            task,
            preset,
            seed: 0,
            model,
            train,
            data,
            ppo,
            conversion: ConvertDemoConfig { sizes: vec![20, 15, 10], calibration: 200, held_out: 200, sim: ConversionConfig::default() },
            eval: EvalConfig { episodes: 2000, games: 1000, lengths: (1..=10).collect(), grad_eps: 1e-6 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().context("model")?;
        self.data.validate().context("data")?;
        self.train.validate().context("train")?;
        self.ppo.validate().context("ppo")?;
        if self.conversion.sizes.len() < 2 || self.conversion.sizes.contains(&0) {
            bail!("conversion.sizes needs at least two positive widths");
        }
        Ok(())
    }
}

/// Everything that shapes a resolved config, in application order.
#[derive(Debug, Default)]
pub struct Sources<'a> {
    pub file: Option<&'a Path>,
    pub seed: Option<u64>,
    pub iterations: Option<usize>,
    pub overrides: &'a [String],
}

pub fn resolve(task: Task, preset: Preset, src: &Sources) -> Result<ExperimentConfig> {
    let mut root = serde_json::to_value(ExperimentConfig::preset(task, preset))?;
    let mut touched = BTreeSet::new();
    if let Some(path) = src.file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        merge(&mut root, serde_json::to_value(table)?, "", &mut touched)?;
    }
    for key in ["task", "preset"] {
        if touched.contains(key) {
            bail!("config key `{key}` is chosen on the command line, not in the file");
        }
    }
    if let Some(seed) = src.seed {
        set(&mut root, "seed", Value::from(seed))?;
    }
    if let Some(n) = src.iterations {
        let key = if task == Task::Rl { "ppo.iterations" } else { "train.iterations" };
        set(&mut root, key, Value::from(n))?;
        touched.insert(key.to_string());
    }
    for item in src.overrides {
        let (key, raw) = item.split_once('=').ok_or_else(|| anyhow!("override `{item}` is not of the form key=value"))?;
        let key = key.trim();
        if key == "task" || key == "preset" {
            bail!("config key `{key}` is chosen with --{key}");
        }
        set(&mut root, key, parse_scalar(raw.trim()))?;
        touched.insert(key.to_string());
    }
    if task == Task::Rl && !touched.contains("model.vec_dim") {
        let n = root["ppo"]["n_pairs"].as_u64().ok_or_else(|| anyhow!("config key `ppo.n_pairs`: expected an integer"))?;
        set(&mut root, "model.vec_dim", Value::from(observation_dim(n as usize)))?;
    }
    let seed = root["seed"].clone();
    for key in SUB_SEEDS {
        if !touched.contains(key) {
            set(&mut root, key, seed.clone())?;
        }
    }
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(root).map_err(|e| anyhow!("config key `{}`: {}", e.path(), e.inner()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_scalar(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|t| t.get("v").cloned())
        .and_then(|v| serde_json::to_value(v).ok())
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| anyhow!("unknown config key `{key}`"))?;
    }
    if value.is_object() != node.is_object() {
        bail!("config key `{key}` expects {}", if node.is_object() { "a table" } else { "a value" });
    }
    *node = value;
    Ok(())
}

fn merge(dst: &mut Value, src: Value, prefix: &str, touched: &mut BTreeSet<String>) -> Result<()> {
    let Value::Object(src) = src else { unreachable!("merge is only called on tables") };
    let dst: &mut Map<String, Value> = dst.as_object_mut().ok_or_else(|| anyhow!("config key `{prefix}` is not a table"))?;
    for (k, v) in src {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let slot = dst.get_mut(&k).ok_or_else(|| anyhow!("unknown config key `{key}`"))?;
        if v.is_object() && slot.is_object() {
            merge(slot, v, &key, touched)?;
        } else if v.is_object() || slot.is_object() {
            bail!("config key `{key}` has the wrong shape");
        } else {
            *slot = v;
            touched.insert(key);
        }
    }
    Ok(())
}
