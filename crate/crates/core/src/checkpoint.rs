//! Versioned single-file checkpoints: every parameter group, the configs the
//! model was built with, and the training RNG state. Tensor data is stored as
//! base64 little-endian f32 bits, so an f32 save/load round trip is bit-exact.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::dssn::DSSNConfig;
use crate::error::{Error, Result};
use crate::mae::MAEConfig;
use crate::nn::ParamStore;
use crate::pipeline::TrainConfig;
use crate::scalar::Scalar;
use crate::tapi::PromptEncoderConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub data: String,
}

/// Data-order RNG state: the loop derives each epoch's stream from these.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub mae: MAEConfig,
    pub dssn: Option<DSSNConfig>,
    pub prompt: Option<PromptEncoderConfig>,
    pub train: Option<TrainConfig>,
    pub rng: RngState,
    pub params: Vec<CheckpointParam>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {})",
                ckpt.format_version, FORMAT_VERSION
            )));
        }
        Ok(ckpt)
    }
}

/// Serialize a parameter store (values narrowed to f32 bits).
pub fn params_from_store<T: Scalar>(store: &ParamStore<T>) -> Vec<CheckpointParam> {
    store
        .iter()
        .map(|(_, e)| {
            let mut bytes = Vec::with_capacity(e.value.len() * 4);
            for &x in e.value.iter() {
                bytes.extend_from_slice(&(x.to_f64() as f32).to_le_bytes());
            }
            CheckpointParam {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                frozen: e.frozen,
                data: B64.encode(&bytes),
            }
        })
        .collect()
}

/// Overwrite a freshly-built store with checkpoint values, matching by name.
/// Every checkpoint tensor must exist with an identical shape, and the store
/// must not contain parameters the checkpoint lacks.
pub fn apply_params<T: Scalar>(
    store: &mut ParamStore<T>,
    params: &[CheckpointParam],
) -> Result<()> {
    if params.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: checkpoint has {}, model has {}",
            params.len(),
            store.len()
        )));
    }
    for p in params {
        let id = store.id_of(&p.name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint parameter {} not in model", p.name))
        })?;
        let bytes = B64
            .decode(&p.data)
            .map_err(|e| Error::Checkpoint(format!("bad base64 for {}: {e}", p.name)))?;
        let n: usize = p.shape.iter().product();
        if bytes.len() != n * 4 {
            return Err(Error::Checkpoint(format!(
                "tensor {} has {} bytes, expected {}",
                p.name,
                bytes.len(),
                n * 4
            )));
        }
        if store.value(id).shape() != p.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {} shape {:?} does not match model {:?}",
                p.name,
                p.shape,
                store.value(id).shape()
            )));
        }
        let mut vals = Vec::with_capacity(n);
        for chunk in bytes.chunks_exact(4) {
            let f = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            vals.push(T::from_f64(f as f64));
        }
        *store.value_mut(id) = ArrayD::from_shape_vec(IxDyn(&p.shape), vals).unwrap();
        store.set_frozen_prefix(&p.name, p.frozen);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn f32_round_trip_is_bit_exact() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut init = crate::nn::Init::new(&mut store, &mut rng);
        init.trunc_normal("a.w", &[3, 4], 0.5);
        init.trunc_normal("b.w", &[7], 0.02);
        store.set_frozen_prefix("a", true);

        let params = params_from_store(&store);
        let mut store2 = ParamStore::<f32>::new();
        let mut rng2 = ChaCha12Rng::seed_from_u64(99);
        let mut init2 = crate::nn::Init::new(&mut store2, &mut rng2);
        init2.trunc_normal("a.w", &[3, 4], 0.5);
        init2.trunc_normal("b.w", &[7], 0.02);
        apply_params(&mut store2, &params).unwrap();

        for (id, e) in store.iter() {
            let other = store2.id_of(&e.name).unwrap();
            assert_eq!(store.value(id), store2.value(other));
            assert_eq!(e.frozen, store2.get(other).frozen);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut init = crate::nn::Init::new(&mut store, &mut rng);
        init.zeros("a.w", &[3, 4]);
        let mut params = params_from_store(&store);
        params[0].shape = vec![4, 3];
        assert!(apply_params(&mut store, &params).is_err());
    }
}
