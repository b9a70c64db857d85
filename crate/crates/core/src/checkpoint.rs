//! Parameter checkpoints: a JSON manifest plus one raw little-endian f64
//! payload file. Round-trips must be bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "params.bin";

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct Manifest {
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    /// Seed provenance and any caller metadata (stage tags, init seeds, config hash).
    pub meta: serde_json::Value,
    pub payload_sha256: String,
}

/// Write `entries` under `dir` (created if absent). Returns the payload hash.
pub fn save(dir: &Path, entries: &[(String, Tensor)], meta: serde_json::Value) -> Result<String> {
    fs::create_dir_all(dir)?;
    let mut payload: Vec<u8> = Vec::new();
    let mut tensors = Vec::with_capacity(entries.len());
    let mut offset = 0usize;
    for (name, t) in entries {
        let data = t.to_vec();
        for v in &data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: data.len(),
        });
        offset += data.len();
    }
    let hash = hex_digest(&payload);
    let manifest = Manifest {
        dtype: "f64".into(),
        tensors,
        meta,
        payload_sha256: hash.clone(),
    };
    fs::write(dir.join(PAYLOAD_FILE), &payload)?;
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(hash)
}

/// Load a checkpoint. Tensors come back as trainable leaves; freezing is the
/// caller's concern (exclusion from param groups).
pub fn load(dir: &Path) -> Result<(BTreeMap<String, Tensor>, Manifest)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact(format!(
            "checkpoint manifest {}",
            manifest_path.display()
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    if manifest.dtype != "f64" {
        return Err(Error::Data(format!("unsupported dtype {}", manifest.dtype)));
    }
    let payload = fs::read(dir.join(PAYLOAD_FILE))?;
    if hex_digest(&payload) != manifest.payload_sha256 {
        return Err(Error::Data("checkpoint payload hash mismatch".into()));
    }
    let mut out = BTreeMap::new();
    for e in &manifest.tensors {
        let start = e.offset * 8;
        let end = start + e.len * 8;
        if end > payload.len() {
            return Err(Error::Data(format!("tensor {} overruns payload", e.name)));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if e.shape.iter().product::<usize>() != e.len {
            return Err(Error::Data(format!("tensor {} shape/len mismatch", e.name)));
        }
        out.insert(e.name.clone(), Tensor::new(&e.shape, data, true));
    }
    Ok((out, manifest))
}

pub fn payload_hash(dir: &Path) -> Result<String> {
    let payload = fs::read(dir.join(PAYLOAD_FILE))?;
    Ok(hex_digest(&payload))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::XorShiftRng;

    #[test]
    fn round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = XorShiftRng::new(5);
        let a = Tensor::param_normal(&[3, 4], 0.7, &mut rng);
        let b = Tensor::param_normal(&[2], 123.456, &mut rng);
        let meta = serde_json::json!({"seed": 5, "stage": "perception"});
        let h1 = save(
            dir.path(),
            &[("a".into(), a.clone()), ("b".into(), b.clone())],
            meta,
        )
        .unwrap();
        let (loaded, manifest) = load(dir.path()).unwrap();
        assert_eq!(manifest.payload_sha256, h1);
        for (orig, name) in [(&a, "a"), (&b, "b")] {
            let got = loaded.get(name).unwrap();
            assert_eq!(got.shape(), orig.shape());
            for (x, y) in got.to_vec().iter().zip(orig.to_vec().iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn missing_manifest_is_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        match load(dir.path()) {
            Err(Error::MissingArtifact(_)) => {}
            other => panic!("expected MissingArtifact, got {other:?}"),
        }
    }
}
