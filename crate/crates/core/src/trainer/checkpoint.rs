use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::features::FeatureNorm;
use super::model::{AdamState, Head};
use super::{Regime, Result, TrainConfig, TrainError};
use crate::ssl::WeightState;

const FORMAT: &str = "lulc-checkpoint/1";

/// Complete training state after `epoch` finished epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_hash: String,
    pub feature_hash: String,
    pub norm: FeatureNorm,
    pub epoch: usize,
    pub heads: Vec<Head>,
    pub adam: Vec<AdamState>,
    pub weights: WeightState,
}

/// SHA-256 of the canonical JSON form of a training configuration.
pub fn config_hash(config: &TrainConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("config serialises");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config_hash: String,
    feature_hash: String,
    regime: Regime,
    epoch: usize,
    classes: usize,
    features: usize,
    heads: usize,
    adam_steps: Vec<u64>,
    config: TrainConfig,
    norm: FeatureNorm,
    weights: WeightState,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One JSON header line followed by the little-endian f64 payload: per head its
/// parameters, Adam first moments, Adam second moments.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let head0 = ck
        .heads
        .first()
        .ok_or_else(|| TrainError::Checkpoint("no heads".into()))?;
    let header = Header {
        format: FORMAT.into(),
        config_hash: ck.config_hash.clone(),
        feature_hash: ck.feature_hash.clone(),
        regime: ck.config.regime,
        epoch: ck.epoch,
        classes: head0.classes,
        features: head0.features,
        heads: ck.heads.len(),
        adam_steps: ck.adam.iter().map(|a| a.step).collect(),
        config: ck.config.clone(),
        norm: ck.norm.clone(),
        weights: ck.weights.clone(),
    };
    let mut buf = serde_json::to_vec(&header).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    buf.push(b'\n');
    for (h, a) in ck.heads.iter().zip(&ck.adam) {
        for v in h.params.iter().chain(&a.m).chain(&a.v) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let mut f = fs::File::create(path).map_err(io(path))?;
    f.write_all(&buf).map_err(io(path))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io(path))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| TrainError::Checkpoint("missing header line".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    if header.format != FORMAT {
        return Err(TrainError::Checkpoint(format!(
            "unknown format {}",
            header.format
        )));
    }
    if header.adam_steps.len() != header.heads || header.config.regime.heads() != header.heads {
        return Err(TrainError::Checkpoint(
            "head count disagrees with regime".into(),
        ));
    }
    let plen = header.classes * header.features + header.classes;
    let payload = &bytes[nl + 1..];
    if payload.len() != header.heads * 3 * plen * 8 {
        return Err(TrainError::Checkpoint(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            header.heads * 3 * plen * 8
        )));
    }
    let mut vals = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut take = |n: usize| -> Vec<f64> { vals.by_ref().take(n).collect() };
    let mut heads = Vec::new();
    let mut adam = Vec::new();
    for &step in &header.adam_steps {
        heads.push(Head {
            classes: header.classes,
            features: header.features,
            params: take(plen),
        });
        let m = take(plen);
        let v = take(plen);
        adam.push(AdamState { m, v, step });
    }
    Ok(Checkpoint {
        config: header.config,
        config_hash: header.config_hash,
        feature_hash: header.feature_hash,
        norm: header.norm,
        epoch: header.epoch,
        heads,
        adam,
        weights: header.weights,
    })
}
