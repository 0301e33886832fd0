//! Checkpoints: a JSON manifest plus a little-endian `f64` blob at `<path>.bin`.
//!
//! The blob holds, in order: every parameter tensor, the loss-weight logits, and
//! (when present) the optimizer's first and second moments per slot. All floats
//! live in the blob, so a save/load round trip is bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::nn::{init_parameters, NetConfig, ParameterStore, Tensor};
use crate::train::adam::Adam;
use crate::weighting::WeightState;

const FORMAT: &str = "ddreg-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: NetConfig,
    pub params: ParameterStore,
    pub weights: WeightState,
    pub optimizer: Option<Adam>,
    /// Training epoch this snapshot was taken after (`None` for fresh models).
    pub epoch: Option<usize>,
    pub val_loss: Option<f64>,
}

impl Checkpoint {
    /// Freshly initialised network with the given loss weighting.
    pub fn fresh(net: &NetConfig, weights: WeightState, seed: u64) -> Result<Self> {
        Ok(Self {
            net: net.clone(),
            params: init_parameters(net, seed)?,
            weights,
            optimizer: None,
            epoch: None,
            val_loss: None,
        })
    }

    /// A network whose output is the zero field for every input.
    pub fn identity(net: &NetConfig) -> Result<Self> {
        let mut params = init_parameters(net, 0)?;
        params
            .iter_mut()
            .for_each(|p| p.tensor.data.iter_mut().for_each(|v| *v = 0.0));
        Ok(Self {
            net: net.clone(),
            params,
            weights: crate::weighting::init_weights(&[LossKind::Ncc], 0.5, false)?,
            optimizer: None,
            epoch: None,
            val_loss: None,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 5],
    trainable: bool,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerEntry {
    kind: String,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    slot_lens: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    net: NetConfig,
    tensors: Vec<TensorEntry>,
    loss_terms: Vec<LossKind>,
    weights_trainable: bool,
    logits_offset: usize,
    optimizer: Option<OptimizerEntry>,
    epoch: Option<usize>,
    val_loss: Option<f64>,
    blob_len: usize,
    blob_sha256: String,
}

pub fn blob_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn f64_bytes<'a>(it: impl Iterator<Item = &'a f64>) -> Vec<u8> {
    it.flat_map(|v| v.to_le_bytes()).collect()
}

/// SHA-256 over the raw values of every parameter whose name starts with `prefix`.
pub fn params_digest(params: &ParameterStore, prefix: &str) -> String {
    let mut h = Sha256::new();
    for p in params.iter().filter(|p| p.name.starts_with(prefix)) {
        h.update(p.name.as_bytes());
        for v in &p.tensor.data {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<String> {
    let mut blob: Vec<f64> = Vec::new();
    let mut tensors = Vec::with_capacity(ck.params.len());
    for p in ck.params.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.tensor.shape,
            trainable: p.trainable,
            offset: blob.len(),
            len: p.tensor.len(),
        });
        blob.extend_from_slice(&p.tensor.data);
    }
    let logits_offset = blob.len();
    blob.extend_from_slice(&ck.weights.logits);
    let optimizer = ck.optimizer.as_ref().map(|a| {
        let offset = blob.len();
        for m in &a.m {
            blob.extend_from_slice(m);
        }
        for v in &a.v {
            blob.extend_from_slice(v);
        }
        OptimizerEntry {
            kind: "adam".into(),
            step: a.step,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            slot_lens: a.sizes(),
            offset,
        }
    });
    let bytes = f64_bytes(blob.iter());
    let digest = sha256_hex(&bytes);
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        net: ck.net.clone(),
        tensors,
        loss_terms: ck.weights.kinds.clone(),
        weights_trainable: ck.weights.trainable,
        logits_offset,
        optimizer,
        epoch: ck.epoch,
        val_loss: ck.val_loss,
        blob_len: blob.len(),
        blob_sha256: digest.clone(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(path, e))?;
    let bp = blob_path(path);
    fs::write(&bp, bytes).map_err(|e| Error::io(&bp, e))?;
    Ok(digest)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(path, format!("manifest: {e}")))?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint {} v{}", m.format, m.version),
        ));
    }
    let bp = blob_path(path);
    let bytes = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    if bytes.len() != m.blob_len * 8 {
        return Err(Error::format(
            &bp,
            format!("blob has {} bytes, expected {}", bytes.len(), m.blob_len * 8),
        ));
    }
    if sha256_hex(&bytes) != m.blob_sha256 {
        return Err(Error::format(&bp, "blob digest does not match the manifest"));
    }
    let blob: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    let slice = |off: usize, len: usize| -> Result<&[f64]> {
        blob.get(off..off + len)
            .ok_or_else(|| Error::format(&bp, format!("range {off}+{len} outside blob")))
    };
    let mut params = ParameterStore::new();
    for t in &m.tensors {
        let tensor = Tensor::new(t.shape, slice(t.offset, t.len)?.to_vec())?;
        params.push(t.name.clone(), tensor, t.trainable)?;
    }
    let weights = WeightState {
        kinds: m.loss_terms.clone(),
        logits: slice(m.logits_offset, m.loss_terms.len())?.to_vec(),
        trainable: m.weights_trainable,
    };
    let optimizer = match &m.optimizer {
        None => None,
        Some(o) => {
            if o.kind != "adam" {
                return Err(Error::format(path, format!("unknown optimizer {}", o.kind)));
            }
            let mut a = Adam::new(&o.slot_lens);
            a.step = o.step;
            a.beta1 = o.beta1;
            a.beta2 = o.beta2;
            a.eps = o.eps;
            let mut off = o.offset;
            for k in 0..o.slot_lens.len() {
                a.m[k] = slice(off, o.slot_lens[k])?.to_vec();
                off += o.slot_lens[k];
            }
            for k in 0..o.slot_lens.len() {
                a.v[k] = slice(off, o.slot_lens[k])?.to_vec();
                off += o.slot_lens[k];
            }
            Some(a)
        }
    };
    Ok(Checkpoint {
        net: m.net,
        params,
        weights,
        optimizer,
        epoch: m.epoch,
        val_loss: m.val_loss,
    })
}

/// Names of tensors whose presence or shape differs between `params` and a fresh
/// network built from `net`.
pub fn incompatible_tensors(params: &ParameterStore, net: &NetConfig) -> Result<Vec<String>> {
    let want = init_parameters(net, 0)?;
    let mut bad = Vec::new();
    for w in want.iter() {
        match params.index_of(&w.name) {
            None => bad.push(format!("{} (missing)", w.name)),
            Some(i) if params.get(i).tensor.shape != w.tensor.shape => bad.push(format!(
                "{} (shape {:?} vs {:?})",
                w.name,
                params.get(i).tensor.shape,
                w.tensor.shape
            )),
            Some(_) => {}
        }
    }
    for p in params.iter() {
        if want.index_of(&p.name).is_none() {
            bad.push(format!("{} (unexpected)", p.name));
        }
    }
    Ok(bad)
}
