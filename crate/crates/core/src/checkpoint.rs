//! Binary checkpoints.
//!
//! Layout: one line of JSON (the header, terminated by `\n`) followed by the raw
//! little-endian `f64` contents of every block listed in the header, in order.
//! Blocks cover trainable parameters and the spectral-norm power-iteration vectors,
//! so a loaded model reproduces the saved model's outputs bit for bit.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelConfig, Module, Predictor, ReconstructionNet};
use crate::training::{init_models, TrainMode};

pub const FORMAT: &str = "scam-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub model: ModelConfig,
    pub channels: usize,
    pub mode: TrainMode,
    pub seed: u64,
    pub epoch: usize,
    pub has_recon: bool,
    /// Free-form echo of the experiment configuration.
    pub config: serde_json::Value,
    pub blocks: Vec<BlockInfo>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub predictor: Predictor,
    pub recon: Option<ReconstructionNet>,
}

/// Every block of a module as `(name, shape, values)`, parameters before buffers.
fn collect<M: Module>(prefix: &str, m: &M) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    m.visit(&mut |n, a| out.push((format!("{prefix}.{n}"), a.shape().to_vec(), a.data().to_vec())));
    m.visit_buffers(&mut |n, b| out.push((format!("{prefix}.{n}"), vec![b.len()], b.to_vec())));
    out
}

fn restore<M: Module>(prefix: &str, m: &mut M, blocks: &mut std::collections::HashMap<String, Vec<f64>>) -> Result<()> {
    let mut err = None;
    let mut take = |name: String, target: &mut [f64]| match blocks.remove(&name) {
        Some(v) if v.len() == target.len() => target.copy_from_slice(&v),
        Some(v) => err = Some(Error::Checkpoint(format!("block {name}: {} values, expected {}", v.len(), target.len()))),
        None => err = Some(Error::Checkpoint(format!("missing block {name}"))),
    };
    m.visit_mut(&mut |n, a| take(format!("{prefix}.{n}"), a.data_mut()));
    m.visit_buffers_mut(&mut |n, b| take(format!("{prefix}.{n}"), b));
    err.map_or(Ok(()), Err)
}

#[allow(clippy::too_many_arguments)]
pub fn save_checkpoint(
    path: &Path,
    model: &ModelConfig,
    channels: usize,
    mode: TrainMode,
    seed: u64,
    epoch: usize,
    config: serde_json::Value,
    f: &Predictor,
    g: Option<&ReconstructionNet>,
) -> Result<()> {
    let mut blocks = collect("f", f);
    if let Some(g) = g {
        blocks.extend(collect("g", g));
    }
    let header = CheckpointHeader {
        format: FORMAT.to_string(),
        model: model.clone(),
        channels,
        mode,
        seed,
        epoch,
        has_recon: g.is_some(),
        config,
        blocks: blocks
            .iter()
            .map(|(name, shape, _)| BlockInfo { name: name.clone(), shape: shape.clone() })
            .collect(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    for (_, _, values) in &blocks {
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::experiment::write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header: CheckpointHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {:?}", header.format)));
    }
    let mut raw = Vec::new();
    reader.read_to_end(&mut raw)?;
    let mut values: std::collections::HashMap<String, Vec<f64>> = std::collections::HashMap::new();
    let mut pos = 0;
    for b in &header.blocks {
        let n: usize = b.shape.iter().product();
        let end = pos + 8 * n;
        if end > raw.len() {
            return Err(Error::Checkpoint(format!("truncated at block {}", b.name)));
        }
        let v = raw[pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        values.insert(b.name.clone(), v);
        pos = end;
    }
    if pos != raw.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", raw.len() - pos)));
    }
    let (mut f, mut g) = init_models(&header.model, header.channels, header.seed)?;
    restore("f", &mut f, &mut values)?;
    let recon = if header.has_recon {
        restore("g", &mut g, &mut values)?;
        Some(g)
    } else {
        None
    };
    if let Some(extra) = values.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected block {extra}")));
    }
    Ok(Checkpoint { header, predictor: f, recon })
}
