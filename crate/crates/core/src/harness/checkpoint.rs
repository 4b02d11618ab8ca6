//! Checkpoint directories: `manifest.json` plus one raw little-endian f32
//! blob per named parameter tensor. Digests are SHA-256 over the blob bytes
//! and verify on load; manifests chain to their parent run.

use crate::error::{Error, Result};
use crate::model::ModelState;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobMeta {
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub run_id: String,
    pub stage: String,
    pub parent: Option<String>,
    pub config_hash: String,
    pub epoch: usize,
    pub blobs: BTreeMap<String, BlobMeta>,
    /// Unix millis; absent in deterministic runs so reruns are byte-stable.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub created_unix_ms: Option<u64>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn tensor_bytes(t: &ArrayD<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * 4);
    for &v in t.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Write a checkpoint directory for the given named tensors.
pub fn save_tensors(
    dir: &Path,
    run_id: &str,
    stage: &str,
    parent: Option<&str>,
    config_hash: &str,
    epoch: usize,
    tensors: &[(String, &ArrayD<f32>)],
) -> Result<()> {
    let blob_dir = dir.join("blobs");
    std::fs::create_dir_all(&blob_dir).map_err(|e| Error::io(&blob_dir, e))?;
    let mut blobs = BTreeMap::new();
    for (name, tensor) in tensors {
        let bytes = tensor_bytes(tensor);
        let path = blob_dir.join(format!("{name}.bin"));
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
        blobs.insert(
            name.clone(),
            BlobMeta { shape: tensor.shape().to_vec(), sha256: sha256_hex(&bytes) },
        );
    }
    let manifest = CheckpointManifest {
        run_id: run_id.to_string(),
        stage: stage.to_string(),
        parent: parent.map(|s| s.to_string()),
        config_hash: config_hash.to_string(),
        epoch,
        blobs,
        created_unix_ms: None,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Save a full model state under the standard tensor names.
pub fn save_model(
    dir: &Path,
    run_id: &str,
    stage: &str,
    parent: Option<&str>,
    config_hash: &str,
    epoch: usize,
    state: &ModelState,
) -> Result<()> {
    let named = state.named_tensors();
    let refs: Vec<(String, &ArrayD<f32>)> =
        named.iter().map(|(n, t)| (n.clone(), *t)).collect();
    save_tensors(dir, run_id, stage, parent, config_hash, epoch, &refs)
}

pub fn load_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

/// Load all tensors, verifying every digest.
pub fn load_tensors(dir: &Path) -> Result<(CheckpointManifest, Vec<(String, ArrayD<f32>)>)> {
    let manifest = load_manifest(dir)?;
    let mut tensors = Vec::with_capacity(manifest.blobs.len());
    for (name, meta) in &manifest.blobs {
        let path = dir.join("blobs").join(format!("{name}.bin"));
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != meta.sha256 {
            return Err(Error::Corrupt(format!("digest mismatch for blob {name}")));
        }
        let count: usize = meta.shape.iter().product();
        if bytes.len() != count * 4 {
            return Err(Error::Corrupt(format!("blob {name} has wrong length")));
        }
        let vals: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = ArrayD::from_shape_vec(IxDyn(&meta.shape), vals)
            .map_err(|e| Error::Corrupt(e.to_string()))?;
        tensors.push((name.clone(), tensor));
    }
    Ok((manifest, tensors))
}

/// Load a checkpoint into a full model state (all standard tensors present).
pub fn load_model(dir: &Path, classes: usize, seed: u64) -> Result<(CheckpointManifest, ModelState)> {
    let (manifest, tensors) = load_tensors(dir)?;
    let state = ModelState::from_named(&tensors, classes, seed)?;
    Ok((manifest, state))
}

/// Load only the encoder weights from a checkpoint (for stage-to-stage
/// initialization; heads are freshly initialized by the caller).
pub fn load_encoder(dir: &Path) -> Result<(CheckpointManifest, crate::model::ParamSet)> {
    let (manifest, tensors) = load_tensors(dir)?;
    let mut encoder = crate::model::init_encoder(0);
    for (name, tensor) in encoder.iter_mut() {
        let full = format!("encoder.{name}");
        let found = tensors
            .iter()
            .find(|(n, _)| *n == full)
            .ok_or_else(|| Error::Corrupt(format!("missing tensor {full}")))?;
        if found.1.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{full}: expected {:?}, got {:?}",
                tensor.shape(),
                found.1.shape()
            )));
        }
        *tensor = found.1.clone();
    }
    Ok((manifest, encoder))
}

/// Walk the parent chain of manifests that live side by side under one
/// output root, newest first. Detects cycles.
pub fn provenance_chain(start: &Path, roots: &[&Path]) -> Result<Vec<CheckpointManifest>> {
    let mut chain = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    let mut current = Some(load_manifest(start)?);
    while let Some(m) = current.take() {
        if !seen.insert(m.run_id.clone()) {
            return Err(Error::Corrupt(format!("cycle in provenance at {}", m.run_id)));
        }
        let parent = m.parent.clone();
        chain.push(m);
        if let Some(pid) = parent {
            let mut found = None;
            for root in roots {
                let candidate = root.join(&pid);
                if candidate.join("manifest.json").exists() {
                    found = Some(load_manifest(&candidate)?);
                    break;
                }
            }
            current = Some(found.ok_or_else(|| {
                Error::Corrupt(format!("parent checkpoint {pid} not found"))
            })?);
        }
    }
    Ok(chain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelState;

    #[test]
    fn round_trip_verifies_and_detects_corruption() {
        let dir = std::env::temp_dir().join(format!("tp-ckpt-{}", std::process::id()));
        let state = ModelState::init(3, 5);
        save_model(&dir, "run-a", "generic_pretrain", None, "cafe", 7, &state).unwrap();
        let (manifest, loaded) = load_model(&dir, 3, 99).unwrap();
        assert_eq!(manifest.run_id, "run-a");
        assert_eq!(manifest.epoch, 7);
        for ((n1, t1), (n2, t2)) in state.named_tensors().iter().zip(loaded.named_tensors()) {
            assert_eq!(n1, &n2);
            assert_eq!(*t1, &t2);
        }
        // flip one byte in a blob
        let blob = dir.join("blobs").join("encoder.enc.b1.conv.w.bin");
        let mut bytes = std::fs::read(&blob).unwrap();
        bytes[3] ^= 0x80;
        std::fs::write(&blob, bytes).unwrap();
        assert!(matches!(load_model(&dir, 3, 99), Err(Error::Corrupt(_))));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn provenance_chain_walks_parents() {
        let root = std::env::temp_dir().join(format!("tp-chain-{}", std::process::id()));
        let state = ModelState::init(2, 1);
        save_model(&root.join("gen-1"), "gen-1", "generic_pretrain", None, "h", 1, &state).unwrap();
        save_model(&root.join("tp-2"), "tp-2", "target_pretrain", Some("gen-1"), "h", 2, &state)
            .unwrap();
        save_model(&root.join("ft-3"), "ft-3", "finetune", Some("tp-2"), "h", 3, &state).unwrap();
        let chain = provenance_chain(&root.join("ft-3"), &[&root]).unwrap();
        let ids: Vec<&str> = chain.iter().map(|m| m.run_id.as_str()).collect();
        assert_eq!(ids, vec!["ft-3", "tp-2", "gen-1"]);
        std::fs::remove_dir_all(&root).ok();
    }
}
