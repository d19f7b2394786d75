//! LoRA checkpoint serialization.
//!
//! Binary layout: magic `E2I1`, u32 LE format version, u32 LE header length,
//! UTF-8 JSON header, then f32 LE array payloads in header entry order. Only
//! adapter arrays (`*.lora_A` / `*.lora_B`) are persisted, together with the
//! base-weight checksum so a checkpoint can never silently load against a
//! different base.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{hex_string, BackboneConfig, BackboneParams};
use crate::error::{Error, Result};
use crate::lora::{AdaptedModel, LoRAAdapter, LoRAConfig};

pub const MAGIC: &[u8; 4] = b"E2I1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub lora: LoRAConfig,
    pub backbone: BackboneConfig,
    pub base_checksum: String,
    pub payload_sha256: String,
    pub entries: Vec<PayloadEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PayloadEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct LoRACheckpoint {
    pub header: CheckpointHeader,
    pub arrays: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

pub fn serialize_checkpoint(model: &AdaptedModel) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, ad) in &model.adapters {
        for (suffix, arr) in [(".lora_A", &ad.a), (".lora_B", &ad.b)] {
            entries.push(PayloadEntry {
                name: format!("{name}{suffix}"),
                shape: arr.shape().to_vec(),
            });
            for v in arr.iter() {
                payload.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        lora: model.lora_config.clone(),
        backbone: model.base.config,
        base_checksum: model.base.checksum(),
        payload_sha256: hex_string(&Sha256::digest(&payload)),
        entries,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + header_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint(model: &AdaptedModel, path: &Path) -> Result<()> {
    fs::write(path, serialize_checkpoint(model)?)?;
    Ok(())
}

pub fn deserialize_checkpoint(data: &[u8]) -> Result<LoRACheckpoint> {
    if data.len() < 12 || &data[0..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic (not an E2I1 checkpoint)".into()));
    }
    let version = u32::from_le_bytes(data[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let hlen = u32::from_le_bytes(data[8..12].try_into().unwrap()) as usize;
    if data.len() < 12 + hlen {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&data[12..12 + hlen])?;
    let payload = &data[12 + hlen..];
    let digest = hex_string(&Sha256::digest(payload));
    if digest != header.payload_sha256 {
        return Err(Error::Checkpoint(
            "payload integrity check failed (sha256 mismatch)".into(),
        ));
    }
    let mut arrays = BTreeMap::new();
    let mut off = 0usize;
    for e in &header.entries {
        let count: usize = e.shape.iter().product();
        let bytes = count * 4;
        if off + bytes > payload.len() {
            return Err(Error::Checkpoint(format!(
                "payload too short for entry '{}'",
                e.name
            )));
        }
        let vals: Vec<f32> = payload[off..off + bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.insert(e.name.clone(), (e.shape.clone(), vals));
        off += bytes;
    }
    if off != payload.len() {
        return Err(Error::Checkpoint("trailing payload bytes".into()));
    }
    Ok(LoRACheckpoint { header, arrays })
}

pub fn load_checkpoint(path: &Path) -> Result<LoRACheckpoint> {
    deserialize_checkpoint(&fs::read(path)?)
}

/// Rebuild an adapted model from a checkpoint, verifying the base checksum.
pub fn apply_checkpoint(base: &BackboneParams, ckpt: &LoRACheckpoint) -> Result<AdaptedModel> {
    if ckpt.header.base_checksum != base.checksum() {
        return Err(Error::BaseMismatch);
    }
    if ckpt.header.backbone != base.config {
        return Err(Error::Checkpoint(
            "backbone config echo does not match the provided base".into(),
        ));
    }
    let mut adapters = BTreeMap::new();
    for e in &ckpt.header.entries {
        let Some(weight_name) = e.name.strip_suffix(".lora_A") else {
            continue;
        };
        let (a_shape, a_vals) = &ckpt.arrays[&e.name];
        let b_name = format!("{weight_name}.lora_B");
        let (b_shape, b_vals) = ckpt
            .arrays
            .get(&b_name)
            .ok_or_else(|| Error::Checkpoint(format!("missing {b_name}")))?;
        if !base.arrays.contains_key(weight_name) {
            return Err(Error::Checkpoint(format!(
                "adapter targets unknown weight '{weight_name}'"
            )));
        }
        let to_arr = |shape: &[usize], vals: &[f32]| -> Result<Array2<f64>> {
            if shape.len() != 2 {
                return Err(Error::Checkpoint("adapter arrays must be 2-d".into()));
            }
            Ok(Array2::from_shape_vec(
                (shape[0], shape[1]),
                vals.iter().map(|v| *v as f64).collect(),
            )
            .map_err(|e| Error::Checkpoint(e.to_string()))?)
        };
        adapters.insert(
            weight_name.to_string(),
            LoRAAdapter {
                a: to_arr(a_shape, a_vals)?,
                b: to_arr(b_shape, b_vals)?,
                alpha: ckpt.header.lora.alpha,
                rank: ckpt.header.lora.rank,
                frozen_ref: weight_name.to_string(),
            },
        );
    }
    Ok(AdaptedModel {
        base: base.clone(),
        adapters,
        lora_config: ckpt.header.lora.clone(),
    })
}
