//! Versioned binary container for named matrices plus JSON metadata.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, UTF-8
//! JSON header, then every tensor's entries as little-endian `f64` in header
//! order. All integers are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{ModelConfig, ModelParams, PARAM_NAMES};
use crate::ppo::Agent;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"HEBBSNN\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: Value,
    metadata: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// What the tensors describe, e.g. `"association"`.
    pub kind: String,
    pub config: Value,
    pub metadata: Value,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            metadata: self.metadata.clone(),
            tensors: self.tensors.iter().map(|(n, m)| TensorEntry { name: n.clone(), rows: m.rows, cols: m.cols }).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.tensors.iter().map(|(_, m)| m.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, m) in &self.tensors {
            for v in &m.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Format(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}, expected {VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let mut data = &body[hlen..];
        let expected: usize = header.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
        if data.len() != expected {
            return Err(Error::Format(format!("tensor data is {} bytes, header describes {expected}", data.len())));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let n = t.rows * t.cols;
            let vals = data[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            data = &data[8 * n..];
            tensors.push((t.name, Matrix { rows: t.rows, cols: t.cols, data: vals }));
        }
        Ok(Self { kind: header.kind, config: header.config, metadata: header.metadata, tensors })
    }

    /// Write via a temporary file and rename, so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn tensor(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor {name:?}")))
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("checkpoint holds {:?}, expected {kind:?}", self.kind)));
        }
        Ok(())
    }
}

pub fn model_checkpoint(params: &ModelParams, cfg: &ModelConfig, metadata: Value) -> Result<Checkpoint> {
    Ok(Checkpoint {
        kind: "association".into(),
        config: serde_json::to_value(cfg)?,
        metadata,
        tensors: PARAM_NAMES.iter().zip(params.tensors()).map(|(n, m)| (n.to_string(), m.clone())).collect(),
    })
}

/// Rebuild association-model parameters; shapes are checked against the stored config.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(ModelParams, ModelConfig)> {
    ck.expect_kind("association")?;
    let cfg: ModelConfig = serde_json::from_value(ck.config.clone())?;
    let t = |n: &str| ck.tensor(n).cloned();
    let params = ModelParams {
        enc_vec: t("enc_vec")?,
        enc_label: t("enc_label")?,
        memory: crate::hebbian::MemoryWeights { w_s_key: t("w_s_key")?, w_s_value: t("w_s_value")?, w_r_key: t("w_r_key")? },
        w_out: t("w_out")?,
    };
    params.check(&cfg).map_err(|e| Error::Format(e.to_string()))?;
    Ok((params, cfg))
}

/// Memory network plus both heads; the config records the model and the game size.
pub fn agent_checkpoint(agent: &Agent, n_pairs: usize, metadata: Value) -> Result<Checkpoint> {
    Ok(Checkpoint {
        kind: "agent".into(),
        config: serde_json::json!({ "model": agent.model, "n_pairs": n_pairs }),
        metadata,
        tensors: agent.tensor_names().into_iter().zip(agent.tensors()).map(|(n, m)| (n, m.clone())).collect(),
    })
}

/// Rebuild an agent and its game size; every tensor must match the shapes the config implies.
pub fn agent_from_checkpoint(ck: &Checkpoint) -> Result<(Agent, usize)> {
    #[derive(Deserialize)]
    struct AgentConfig {
        model: ModelConfig,
        n_pairs: usize,
    }
    ck.expect_kind("agent")?;
    let cfg: AgentConfig = serde_json::from_value(ck.config.clone())?;
    let mut agent = Agent::new(cfg.model, cfg.n_pairs, &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| Error::Format(e.to_string()))?;
    let names = agent.tensor_names();
    for (name, slot) in names.iter().zip(agent.tensors_mut()) {
        let m = ck.tensor(name)?;
        if (m.rows, m.cols) != (slot.rows, slot.cols) {
            return Err(Error::Format(format!("tensor {name} is {}x{}, expected {}x{}", m.rows, m.cols, slot.rows, slot.cols)));
        }
        *slot = m.clone();
    }
    Ok((agent, cfg.n_pairs))
}
