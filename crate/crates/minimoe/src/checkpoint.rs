//! Flat binary checkpoint: JSON header + little-endian f64 payloads.
//!
//! Layout: 8-byte magic, u32 header length, header JSON, then the payloads
//! back to back in header order. The header carries the model config, the
//! optional frozen hash-routing table, and one entry (name, shape, offset)
//! per parameter.

use crate::model::ModelConfig;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"MINIMOE1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("not a minimoe checkpoint (bad magic)")]
    BadMagic,
    #[error("payload for {name} has {got} values, expected {want}")]
    PayloadLength { name: String, want: usize, got: usize },
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hash_table: Option<Vec<u32>>,
    entries: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

/// One named parameter payload.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// In-memory image of a checkpoint file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub hash_table: Option<Vec<u32>>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let header = Header {
            schema: "v1".to_string(),
            config: self.config.clone(),
            hash_table: self.hash_table.clone(),
            entries: self
                .tensors
                .iter()
                .map(|t| Entry { name: t.name.clone(), shape: t.shape.clone() })
                .collect(),
        };
        let hjson = serde_json::to_vec(&header)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(hjson.len() as u32).to_le_bytes())?;
        w.write_all(&hjson)?;
        for t in &self.tensors {
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut len4 = [0u8; 4];
        r.read_exact(&mut len4)?;
        let hlen = u32::from_le_bytes(len4) as usize;
        let mut hjson = vec![0u8; hlen];
        r.read_exact(&mut hjson)?;
        let header: Header = serde_json::from_slice(&hjson)?;
        let mut tensors = Vec::with_capacity(header.entries.len());
        for e in &header.entries {
            let want: usize = e.shape.iter().product();
            let mut buf = vec![0u8; want * 8];
            r.read_exact(&mut buf).map_err(|_| CheckpointError::PayloadLength {
                name: e.name.clone(),
                want,
                got: 0,
            })?;
            let data: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(NamedTensor { name: e.name.clone(), shape: e.shape.clone(), data });
        }
        Ok(Checkpoint { config: header.config, hash_table: header.hash_table, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn roundtrip_preserves_bits_and_order() {
        let ckpt = Checkpoint {
            config: ModelConfig::dense(2, 8, 2, 32, 16, 100, 8),
            hash_table: Some(vec![3, 1, 2, 0]),
            tensors: vec![
                NamedTensor {
                    name: "layer.0.ffn.expert.0.w_in".into(),
                    shape: vec![2, 3],
                    data: vec![1.5, -2.25, 0.0, f64::MIN_POSITIVE, 1e300, -0.0],
                },
                NamedTensor { name: "embed.token".into(), shape: vec![4], data: vec![4.0, 3.0, 2.0, 1.0] },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.hash_table, ckpt.hash_table);
        assert_eq!(back.tensors.len(), 2);
        for (a, b) in back.tensors.iter().zip(&ckpt.tensors) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            let abits: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
            let bbits: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(abits, bbits, "payload bits must round-trip exactly");
        }
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(CheckpointError::BadMagic)));
    }
}
