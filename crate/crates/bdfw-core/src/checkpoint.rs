//! Single-file checkpoint container: a JSON metadata header followed by
//! raw little-endian f64 tensor payloads. Round-trips bit-exactly.

use crate::error::{BdfwError, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"BDFWCKPT";

/// A named tensor: shape plus row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        NamedTensor { shape, data }
    }
}

/// Persistable model state: named tensors plus string metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub model_id: String,
    pub tensors: BTreeMap<String, NamedTensor>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    key: String,
    shape: Vec<usize>,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_id: String,
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(model_id: &str) -> Self {
        Checkpoint {
            model_id: model_id.to_string(),
            ..Default::default()
        }
    }

    pub fn insert(&mut self, key: &str, shape: Vec<usize>, data: Vec<f64>) {
        self.tensors
            .insert(key.to_string(), NamedTensor::new(shape, data));
    }

    pub fn get(&self, key: &str) -> Result<&NamedTensor> {
        self.tensors
            .get(key)
            .ok_or_else(|| BdfwError::KeyMismatch(format!("missing tensor '{key}'")))
    }

    /// Fail unless the stored keys are exactly `expected`.
    pub fn expect_keys(&self, expected: &[&str]) -> Result<()> {
        let have: Vec<&str> = self.tensors.keys().map(|s| s.as_str()).collect();
        let mut want: Vec<&str> = expected.to_vec();
        want.sort_unstable();
        if have != want {
            return Err(BdfwError::KeyMismatch(format!(
                "expected {want:?}, found {have:?}"
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let header = Header {
        model_id: ckpt.model_id.clone(),
        metadata: ckpt.metadata.clone(),
        tensors: ckpt
            .tensors
            .iter()
            .map(|(k, t)| TensorEntry {
                key: k.clone(),
                shape: t.shape.clone(),
                len: t.data.len(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u64::<LittleEndian>(header_bytes.len() as u64)?;
    w.write_all(&header_bytes)?;
    for t in ckpt.tensors.values() {
        for &v in &t.data {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(BdfwError::BadCheckpoint("bad magic".into()));
    }
    let header_len = r.read_u64::<LittleEndian>()? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    let mut ckpt = Checkpoint::new(&header.model_id);
    ckpt.metadata = header.metadata;
    for entry in &header.tensors {
        if entry.shape.iter().product::<usize>() != entry.len {
            return Err(BdfwError::BadCheckpoint(format!(
                "tensor '{}' shape/len disagree",
                entry.key
            )));
        }
        let mut data = vec![0.0f64; entry.len];
        for v in data.iter_mut() {
            *v = r.read_f64::<LittleEndian>()?;
        }
        ckpt.tensors
            .insert(entry.key.clone(), NamedTensor::new(entry.shape.clone(), data));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use sha2::{Digest, Sha256};

    #[test]
    fn empty_map_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let ckpt = Checkpoint::new("empty");
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn small_tensor_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let mut ckpt = Checkpoint::new("small");
        ckpt.insert("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        ckpt.metadata.insert("epoch".into(), "3".into());
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn large_random_tensor_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let mut rng = seeded_rng(9, "ckpt");
        let data: Vec<f64> = (0..1_000_000).map(|_| rng.normal()).collect();
        let hash_of = |xs: &[f64]| {
            let mut h = Sha256::new();
            for v in xs {
                h.update(v.to_le_bytes());
            }
            h.finalize()
        };
        let before = hash_of(&data);
        let mut ckpt = Checkpoint::new("big");
        ckpt.insert("t", vec![1_000_000], data);
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(hash_of(&back.get("t").unwrap().data), before);
    }

    #[test]
    fn missing_file_errors() {
        assert!(load_checkpoint(Path::new("/nonexistent/x.ckpt")).is_err());
    }

    #[test]
    fn key_schema_check() {
        let mut ckpt = Checkpoint::new("m");
        ckpt.insert("a", vec![1], vec![0.0]);
        assert!(ckpt.expect_keys(&["a"]).is_ok());
        assert!(ckpt.expect_keys(&["a", "b"]).is_err());
        assert!(ckpt.get("zzz").is_err());
    }
}
