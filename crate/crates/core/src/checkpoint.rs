//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"OMRD" | u32 format version | u64 manifest length | manifest JSON | payload
//! ```
//!
//! The manifest lists every tensor with its shape and byte offset into the
//! payload; the payload is the concatenation of the tensors as raw `f32`.
//! Model parameters are marked trainable; the OIM lookup tables and queues
//! are stored but not trainable.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::OimState;
use crate::model::{ModelConfig, ModelParams};
use crate::params::Parameters;
use crate::tensor::Tensor;
use crate::trainer::{TrainConfig, TrainedModel};

pub const MAGIC: [u8; 4] = *b"OMRD";
pub const FORMAT_VERSION: u32 = 1;
pub const NUM_OIM_HEADS: usize = 4;

const HEADER_LEN: usize = 4 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    pub trainable: bool,
}

impl TensorEntry {
    pub fn byte_len(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64 * 4
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub train_ids: Vec<u32>,
    pub tensors: Vec<TensorEntry>,
}

fn oim_name(i: usize, part: &str) -> String {
    format!("oim{}.{part}", i + 1)
}

/// Serialises a trained model.
pub fn to_bytes(model: &TrainedModel) -> Result<Vec<u8>> {
    if model.oim.len() != NUM_OIM_HEADS {
        return Err(Error::Checkpoint(format!("expected {NUM_OIM_HEADS} oim states")));
    }
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, data: &[f32], trainable: bool| {
        tensors.push(TensorEntry {
            name,
            dtype: "f32".into(),
            shape,
            offset: payload.len() as u64,
            trainable,
        });
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, t) in model.params.named("") {
        push(name, t.shape().to_vec(), t.data(), true);
    }
    for (i, s) in model.oim.iter().enumerate() {
        push(oim_name(i, "lut"), s.lut().shape().to_vec(), s.lut().data(), false);
        let q: Vec<f32> = s.queue_entries().flatten().copied().collect();
        if !q.is_empty() {
            push(oim_name(i, "queue"), vec![s.queue_len(), s.dim()], &q, false);
        }
    }
    let manifest = Manifest {
        model_cfg: model.model_cfg.clone(),
        train_cfg: model.train_cfg.clone(),
        train_ids: model.train_ids.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Splits a file into its manifest and payload, validating the header and
/// that the tensor byte ranges tile the payload exactly.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < HEADER_LEN || bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("missing OMRD magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let rest = &bytes[HEADER_LEN..];
    if len > rest.len() {
        return Err(Error::Checkpoint("manifest length exceeds file size".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&rest[..len])
        .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let payload = &rest[len..];
    let mut cursor = 0u64;
    for t in &manifest.tensors {
        if t.dtype != "f32" {
            return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", t.name, t.dtype)));
        }
        if t.offset != cursor {
            return Err(Error::Checkpoint(format!(
                "{}: offset {} leaves a gap or overlap (expected {cursor})",
                t.name, t.offset
            )));
        }
        cursor += t.byte_len();
    }
    if cursor != payload.len() as u64 {
        return Err(Error::Checkpoint(format!(
            "tensors cover {cursor} bytes, payload has {}",
            payload.len()
        )));
    }
    Ok((manifest, payload))
}

fn decode(entry: &TensorEntry, payload: &[u8]) -> Result<Tensor<f32>> {
    let start = entry.offset as usize;
    let raw = &payload[start..start + entry.byte_len() as usize];
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(entry.shape.clone(), data).map_err(|e| Error::Checkpoint(format!("{}: {e}", entry.name)))
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainedModel> {
    let (manifest, payload) = read_manifest(bytes)?;
    let Manifest {
        model_cfg,
        train_cfg,
        train_ids,
        tensors,
    } = manifest;
    let lookup = |name: &str| tensors.iter().find(|t| t.name == name);

    let mut params = ModelParams::<f32>::zeros(&model_cfg)?;
    let mut missing = None;
    let mut failure = None;
    params.visit_mut("", &mut |name, t| {
        let Some(entry) = lookup(&name) else {
            missing.get_or_insert(name);
            return;
        };
        match decode(entry, payload) {
            Ok(v) if v.shape() == t.shape() => *t = v,
            Ok(v) => {
                failure.get_or_insert(Error::Shape(format!(
                    "checkpoint tensor {name} is {:?}, config implies {:?}",
                    v.shape(),
                    t.shape()
                )));
            }
            Err(e) => {
                failure.get_or_insert(e);
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(name) = missing {
        return Err(Error::Checkpoint(format!("missing tensor {name}")));
    }

    let dims = model_cfg.descriptor_dims();
    let mut oim = Vec::with_capacity(NUM_OIM_HEADS);
    for (i, d) in [dims.vert, dims.horz, dims.chan, dims.oim].into_iter().enumerate() {
        let mut s = OimState::new(train_ids.len(), d, &train_cfg.oim)?;
        let lut = lookup(&oim_name(i, "lut"))
            .ok_or_else(|| Error::Checkpoint(format!("missing {}", oim_name(i, "lut"))))?;
        s.set_lut(decode(lut, payload)?)?;
        if let Some(q) = lookup(&oim_name(i, "queue")) {
            let t = decode(q, payload)?;
            s.set_queue(t.data().chunks(d).map(<[f32]>::to_vec).collect())?;
        }
        oim.push(s);
    }
    let expected = params.named("").len() + tensors.iter().filter(|t| t.name.starts_with("oim")).count();
    if expected != tensors.len() {
        return Err(Error::Checkpoint("checkpoint holds unknown tensors".into()));
    }
    Ok(TrainedModel {
        model_cfg,
        train_cfg,
        params,
        oim,
        train_ids,
    })
}

pub fn save(model: &TrainedModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainedModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
