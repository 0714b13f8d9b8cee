//! Named-tensor checkpoint archive.
//!
//! Layout: the magic `HLTA`, a little-endian `u32` version, a `u64` manifest
//! length, the UTF-8 JSON manifest, then every tensor's row-major
//! little-endian `f64` data at the offsets the manifest lists (relative to
//! the start of the data section). Adam moments travel as `1 x n` tensors
//! named `adam.m/<param>` and `adam.v/<param>` so the manifest stays small.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use headlift_core::model::{Model, ModelConfig};
use headlift_core::optim::Moments;
use headlift_core::tensor::Tensor;
use headlift_core::train::TrainState;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{format_err, Error, Result};
use crate::formats::write_bytes;

pub const MAGIC: &[u8; 4] = b"HLTA";
pub const VERSION: u32 = 1;
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: ModelConfig,
    /// Present for checkpoints written by training.
    pub state: Option<TrainState>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub state: Option<TrainState>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn of(model: &Model, state: Option<&TrainState>) -> Self {
        Self {
            model: model.config.clone(),
            state: state.cloned(),
            tensors: model.store.to_map().into_iter().collect(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut tensors: BTreeMap<String, Tensor> = self.tensors.clone();
        let mut state = self.state.clone();
        if let Some(st) = &mut state {
            for (name, mo) in std::mem::take(&mut st.optimizer.moments) {
                let n = mo.m.len();
                tensors.insert(format!("{M_PREFIX}{name}"), Tensor::from_vec(1, n, mo.m));
                tensors.insert(format!("{V_PREFIX}{name}"), Tensor::from_vec(1, n, mo.v));
            }
        }
        let mut entries = Vec::with_capacity(tensors.len());
        let mut offset = 0u64;
        for (name, t) in &tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: [t.rows, t.cols],
                dtype: "f64".into(),
                offset,
            });
            offset += 8 * t.data.len() as u64;
        }
        let manifest = Manifest {
            model: self.model.clone(),
            state,
            tensors: entries,
        };
        let json =
            serde_json::to_vec(&manifest).map_err(|e| Error::json("checkpoint manifest", e))?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(format_err!("not a checkpoint archive"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(format_err!("unsupported checkpoint version {version}"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16usize.saturating_add(len))
            .ok_or_else(|| format_err!("truncated checkpoint manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| Error::json("checkpoint manifest", e))?;
        let data = &bytes[16 + len..];
        let mut tensors = BTreeMap::new();
        for e in &manifest.tensors {
            if e.dtype != "f64" {
                return Err(format_err!(
                    "tensor {}: unsupported dtype {}",
                    e.name,
                    e.dtype
                ));
            }
            let n = e.shape[0]
                .checked_mul(e.shape[1])
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| format_err!("tensor {}: shape overflows", e.name))?;
            let start = e.offset as usize;
            let raw = start
                .checked_add(n)
                .and_then(|end| data.get(start..end))
                .ok_or_else(|| format_err!("tensor {} lies outside the archive", e.name))?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(
                e.name.clone(),
                Tensor::from_vec(e.shape[0], e.shape[1], values),
            );
        }
        let mut state = manifest.state;
        let moment_names: Vec<String> = tensors
            .keys()
            .filter(|k| k.starts_with(M_PREFIX))
            .cloned()
            .collect();
        for key in moment_names {
            let name = &key[M_PREFIX.len()..];
            let m = tensors.remove(&key).expect("listed").data;
            let v = tensors
                .remove(&format!("{V_PREFIX}{name}"))
                .ok_or_else(|| format_err!("optimizer moments of {name} are incomplete"))?
                .data;
            let st = state
                .as_mut()
                .ok_or_else(|| format_err!("optimizer moments without a training state"))?;
            st.optimizer
                .moments
                .insert(name.to_string(), Moments { m, v });
        }
        if tensors.keys().any(|k| k.starts_with(V_PREFIX)) {
            return Err(format_err!("optimizer moments are incomplete"));
        }
        Ok(Self {
            model: manifest.model,
            state,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Build the model this checkpoint describes, with its weights.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(&self.model)?;
        model.load_weights(&self.tensors)?;
        Ok(model)
    }
}

/// Short content hash identifying a checkpoint file.
pub fn checkpoint_id(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Load a model and the id of the file it came from.
pub fn load_model(path: &Path) -> Result<(Model, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::decode(&bytes)?;
    Ok((ckpt.to_model()?, checkpoint_id(&bytes)))
}
