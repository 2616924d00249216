//! Training checkpoints: a JSON header plus three PSFM payloads holding the
//! learned tensors and the two AdamW moment buffers.
//!
//! Tensors are stored as `f32`, so a resumed `f32` run is bit-identical to
//! an uninterrupted one; `f64` runs resume rounded to `f32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{validation, Error, Result};
use crate::losses::LossReport;
use crate::psfm::{self, Block};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{ModelSpec, TrainConfig, TrainState, TrainedModel, Trainer};

pub const CHECKPOINT_FORMAT: u32 = 1;
pub const HEADER_FILE: &str = "checkpoint.json";
pub const PARAMS_FILE: &str = "params.psfm";
pub const ADAM_M_FILE: &str = "adam_m.psfm";
pub const ADAM_V_FILE: &str = "adam_v.psfm";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub step: u64,
    pub spec: ModelSpec,
    pub config: TrainConfig,
    /// Checksum of the frozen part dictionary the codes refer to.
    pub dictionary_checksum: Option<String>,
    pub base_checksum: String,
    pub tensors: Vec<TensorEntry>,
    /// Payload file name to its sha256.
    pub files: BTreeMap<String, String>,
    pub optimizer_step: u64,
    pub rng: ChaCha8Rng,
    pub order: Vec<usize>,
    pub cursor: usize,
    pub loss_ema: Option<f64>,
    pub history: Vec<(u64, LossReport)>,
    pub lineage: Vec<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn pack<T: Scalar>(tensors: &[&Tensor<T>]) -> Result<Vec<u8>> {
    let data: Vec<f32> = tensors.iter().flat_map(|t| t.data().iter().map(|v| v.as_f32())).collect();
    Ok(psfm::encode(&Block::matrix(1, data.len(), data)?))
}

fn unpack<T: Scalar>(bytes: &[u8], entries: &[TensorEntry]) -> Result<Vec<Tensor<T>>> {
    let block = psfm::decode(bytes)?;
    let total: usize = entries.iter().map(|e| e.rows * e.cols).sum();
    if block.data.len() != total {
        return Err(Error::Corruption(format!(
            "payload holds {} values, header lists {total}",
            block.data.len()
        )));
    }
    let mut offset = 0;
    entries
        .iter()
        .map(|e| {
            let n = e.rows * e.cols;
            let vals = block.data[offset..offset + n].iter().map(|&v| T::of(v as f64)).collect();
            offset += n;
            Tensor::from_vec(e.rows, e.cols, vals)
        })
        .collect()
}

/// Write `state` into `dir` and return the checkpoint checksum (sha256 of
/// the header, which itself pins every payload).
pub fn save<T: Scalar>(
    dir: &Path,
    trainer: &Trainer<T>,
    state: &TrainState<T>,
    dictionary_checksum: Option<&str>,
) -> Result<String> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let named = state.named_parameters();
    let tensors: Vec<TensorEntry> = named
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.clone(),
            rows: t.rows(),
            cols: t.cols(),
        })
        .collect();
    let payloads = [
        (PARAMS_FILE, pack(&named.iter().map(|(_, t)| *t).collect::<Vec<_>>())?),
        (ADAM_M_FILE, pack(&state.optimizer.m.iter().collect::<Vec<_>>())?),
        (ADAM_V_FILE, pack(&state.optimizer.v.iter().collect::<Vec<_>>())?),
    ];
    let mut files = BTreeMap::new();
    for (name, bytes) in &payloads {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        files.insert(name.to_string(), sha256_hex(bytes));
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_FORMAT,
        step: state.step,
        spec: trainer.spec.clone(),
        config: trainer.config.clone(),
        dictionary_checksum: dictionary_checksum.map(str::to_string),
        base_checksum: trainer.backend.base_checksum(),
        tensors,
        files,
        optimizer_step: state.optimizer.step,
        rng: state.rng.clone(),
        order: state.order.clone(),
        cursor: state.cursor,
        loss_ema: state.loss_ema,
        history: state.history.clone(),
        lineage: state.lineage.clone(),
    };
    let bytes = serde_json::to_vec_pretty(&header)?;
    let path = dir.join(HEADER_FILE);
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    Ok(sha256_hex(&bytes))
}

/// A checkpoint read back from disk with its payloads verified.
#[derive(Debug, Clone)]
pub struct LoadedCheckpoint<T> {
    pub header: CheckpointHeader,
    pub checksum: String,
    pub params: Vec<Tensor<T>>,
    pub adam_m: Vec<Tensor<T>>,
    pub adam_v: Vec<Tensor<T>>,
}

pub fn load<T: Scalar>(dir: &Path) -> Result<LoadedCheckpoint<T>> {
    let path = dir.join(HEADER_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes)?;
    if header.format_version != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!(
            "checkpoint format {} is not supported (expected {CHECKPOINT_FORMAT})",
            header.format_version
        )));
    }
    let payload = |name: &str| -> Result<Vec<Tensor<T>>> {
        let p = dir.join(name);
        let data = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let want = header
            .files
            .get(name)
            .ok_or_else(|| Error::Corruption(format!("header does not list {name}")))?;
        if &sha256_hex(&data) != want {
            return Err(Error::Corruption(format!("{name} does not match its recorded checksum")));
        }
        unpack(&data, &header.tensors)
    };
    let params = payload(PARAMS_FILE)?;
    let adam_m = payload(ADAM_M_FILE)?;
    let adam_v = payload(ADAM_V_FILE)?;
    Ok(LoadedCheckpoint {
        checksum: sha256_hex(&bytes),
        header,
        params,
        adam_m,
        adam_v,
    })
}

fn fill<T: Scalar>(slots: Vec<(String, &mut Tensor<T>)>, entries: &[TensorEntry], values: &[Tensor<T>]) -> Result<()> {
    if slots.len() != entries.len() {
        return Err(validation(format!(
            "checkpoint has {} tensors, model has {}",
            entries.len(),
            slots.len()
        )));
    }
    for ((name, slot), (entry, value)) in slots.into_iter().zip(entries.iter().zip(values)) {
        if name != entry.name || slot.shape() != value.shape() {
            return Err(validation(format!(
                "checkpoint tensor {} {:?} does not fit model tensor {name} {:?}",
                entry.name,
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value.clone();
    }
    Ok(())
}

/// Rebuild the training state so that continuing reproduces an
/// uninterrupted run. The trainer must be built from the same model spec.
pub fn resume<T: Scalar>(dir: &Path, trainer: &Trainer<T>) -> Result<TrainState<T>> {
    let ck = load::<T>(dir)?;
    let h = &ck.header;
    if h.spec != trainer.spec {
        return Err(validation("checkpoint was written for a different model spec"));
    }
    if h.base_checksum != trainer.backend.base_checksum() {
        return Err(validation("checkpoint was written against different base weights"));
    }
    let mut state = trainer.init_state();
    let mut named: Vec<(String, &mut Tensor<T>)> = state.space.named_tensors_mut();
    named.extend(state.lora.named_tensors_mut());
    fill(named, &h.tensors, &ck.params)?;
    state.optimizer.m = ck.adam_m;
    state.optimizer.v = ck.adam_v;
    state.optimizer.step = h.optimizer_step;
    state.step = h.step;
    state.rng = h.rng.clone();
    state.order = h.order.clone();
    state.cursor = h.cursor;
    state.loss_ema = h.loss_ema;
    state.history = h.history.clone();
    state.lineage = h.lineage.clone();
    state.lineage.push(ck.checksum);
    Ok(state)
}

/// The trained model for inference, plus the header it came from.
pub fn load_model<T: Scalar>(dir: &Path) -> Result<(TrainedModel<T>, CheckpointHeader, String)> {
    let ck = load::<T>(dir)?;
    let mut model = ck.header.spec.skeleton::<T>()?;
    if ck.header.base_checksum != model.backend.base_checksum() {
        return Err(validation("checkpoint was written against different base weights"));
    }
    let mut named: Vec<(String, &mut Tensor<T>)> = model.space.named_tensors_mut();
    let lora = model.backend.lora.as_mut().expect("skeleton attaches adapters");
    named.extend(lora.named_tensors_mut());
    fill(named, &ck.header.tensors, &ck.params)?;
    Ok((model, ck.header, ck.checksum))
}
