//! Versioned binary checkpoints.
//!
//! Layout: 8 magic bytes, `u32` format version, `u64` manifest length, the
//! JSON manifest, raw little-endian tensor data, then a SHA-256 digest of
//! every preceding byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, VisionTransformer};
use crate::numerics::{AdamW, AdamWConfig, DType, RngState, Scalar};

pub const MAGIC: &[u8; 8] = b"VITPRUNE";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const HEADER_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub config: AdamWConfig,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub dtype: DType,
    pub params: Vec<TensorEntry>,
    /// First and second moments follow the parameters, in parameter order.
    pub optimizer: Option<OptimizerEntry>,
    pub epoch: usize,
    pub seed: u64,
    pub rng: Option<RngState>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<F: Scalar> {
    pub config: ModelConfig,
    pub params: Vec<Vec<F>>,
    pub optimizer: Option<AdamW<F>>,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub rng: Option<RngState>,
    /// Free-form run metadata (training config, log history).
    pub extra: serde_json::Value,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn from_model(model: &VisionTransformer<F>) -> Self {
        Checkpoint {
            config: model.config().clone(),
            params: model.export_parameters(),
            optimizer: None,
            epoch: 0,
            seed: 0,
            rng: None,
            extra: serde_json::Value::Null,
        }
    }

    pub fn to_model(&self) -> Result<VisionTransformer<F>> {
        let m = VisionTransformer::new(self.config.clone(), 0)?;
        m.load_parameters(&self.params)?;
        Ok(m)
    }
}

pub fn encode_checkpoint<F: Scalar>(ck: &Checkpoint<F>) -> Result<Vec<u8>> {
    let shapes = ck.config.parameter_shapes();
    if shapes.len() != ck.params.len() {
        return Err(Error::Incompatible(format!(
            "{} parameter buffers for a model with {} parameters",
            ck.params.len(),
            shapes.len()
        )));
    }
    let mut entries = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for ((name, shape), buf) in shapes.into_iter().zip(&ck.params) {
        let n: usize = shape.iter().product();
        if n != buf.len() {
            return Err(Error::Incompatible(format!("parameter {name} has {} values, expected {n}", buf.len())));
        }
        entries.push(TensorEntry { name, shape, offset });
        offset += n;
    }
    if let Some(opt) = &ck.optimizer {
        let ok = opt.m.len() == ck.params.len()
            && opt.v.len() == ck.params.len()
            && opt.m.iter().zip(&opt.v).zip(&ck.params).all(|((m, v), p)| m.len() == p.len() && v.len() == p.len());
        if !ok {
            return Err(Error::Incompatible("optimizer moments do not match the parameters".into()));
        }
    }
    let manifest = Manifest {
        config: ck.config.clone(),
        dtype: F::DTYPE,
        params: entries,
        optimizer: ck.optimizer.as_ref().map(|o| OptimizerEntry { config: o.config, step: o.step }),
        epoch: ck.epoch,
        seed: ck.seed,
        rng: ck.rng,
        extra: ck.extra.clone(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + offset * F::BYTES * 3 + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut write = |bufs: &[Vec<F>]| bufs.iter().flatten().for_each(|v| v.write_le(&mut out));
    write(&ck.params);
    if let Some(opt) = &ck.optimizer {
        write(&opt.m);
        write(&opt.v);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Structural header check shared by the decoder and inspection tools.
pub fn decode_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
    if bytes.len() < HEADER_LEN + DIGEST_LEN {
        return Err(Error::Format { offset: bytes.len() as u64, msg: "file too short for a checkpoint".into() });
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format { offset: 0, msg: "bad magic bytes".into() });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Incompatible(format!(
            "format version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    let body = bytes.len() - DIGEST_LEN;
    let digest = Sha256::digest(&bytes[..body]);
    if digest.as_slice() != &bytes[body..] {
        return Err(Error::Corrupt("checksum mismatch".into()));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if HEADER_LEN + len > body {
        return Err(Error::Format { offset: 12, msg: format!("manifest length {len} exceeds the file") });
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..HEADER_LEN + len])?;
    Ok((manifest, HEADER_LEN + len))
}

pub fn decode_checkpoint<F: Scalar>(bytes: &[u8]) -> Result<Checkpoint<F>> {
    let (manifest, data_start) = decode_manifest(bytes)?;
    if manifest.dtype != F::DTYPE {
        return Err(Error::Incompatible(format!(
            "checkpoint stores {} values, {} requested",
            manifest.dtype.name(),
            F::DTYPE.name()
        )));
    }
    manifest.config.validate().map_err(|e| Error::Incompatible(format!("embedded config is invalid: {e}")))?;
    let expected = manifest.config.parameter_shapes();
    let listed: Vec<(String, Vec<usize>)> = manifest.params.iter().map(|e| (e.name.clone(), e.shape.clone())).collect();
    if expected != listed {
        return Err(Error::Incompatible("parameter manifest disagrees with the embedded model config".into()));
    }
    let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let copies = if manifest.optimizer.is_some() { 3 } else { 1 };
    let data = &bytes[data_start..bytes.len() - DIGEST_LEN];
    if data.len() != total * copies * F::BYTES {
        return Err(Error::Format {
            offset: data_start as u64,
            msg: format!("data section holds {} bytes, expected {}", data.len(), total * copies * F::BYTES),
        });
    }
    let mut cursor = 0usize;
    let mut read = || -> Vec<Vec<F>> {
        manifest
            .params
            .iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let v = (0..n).map(|i| F::read_le(&data[(cursor + i) * F::BYTES..])).collect();
                cursor += n;
                v
            })
            .collect()
    };
    let params = read();
    let optimizer = manifest.optimizer.as_ref().map(|o| {
        let m = read();
        let v = read();
        AdamW { config: o.config, step: o.step, m, v }
    });
    if manifest
        .params
        .iter()
        .zip(&manifest.params[1..])
        .any(|(a, b)| b.offset != a.offset + a.shape.iter().product::<usize>())
    {
        return Err(Error::Incompatible("parameter offsets are not contiguous".into()));
    }
    Ok(Checkpoint {
        config: manifest.config,
        params,
        optimizer,
        epoch: manifest.epoch,
        seed: manifest.seed,
        rng: manifest.rng,
        extra: manifest.extra,
    })
}

pub fn save_checkpoint<F: Scalar>(path: &Path, ck: &Checkpoint<F>) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Checkpoint<F>> {
    decode_checkpoint(&fs::read(path)?)
}

/// Re-encodes `manifest` into an existing checkpoint image, keeping its data
/// section and refreshing the digest.
pub fn replace_manifest(bytes: &[u8], manifest: &Manifest) -> Result<Vec<u8>> {
    let (_, data_start) = decode_manifest(bytes)?;
    let json = serde_json::to_vec(manifest)?;
    let mut out = Vec::with_capacity(bytes.len() + json.len());
    out.extend_from_slice(&bytes[..12]);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&bytes[data_start..bytes.len() - DIGEST_LEN]);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}
