//! Checkpoint container: magic `BCL1`, a length-prefixed JSON manifest, then
//! raw little-endian buffers in manifest order.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"BCL1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub epoch: u64,
    /// Master seed; all RNG streams are re-derived from it functionally.
    pub rng_state: u64,
    pub params: Vec<ParamInfo>,
    /// Free-form payload: encoder spec, optimizer scalars, and similar.
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Buffer {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Buffer {
    pub fn len(&self) -> usize {
        match self {
            Buffer::F32(v) => v.len(),
            Buffer::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> &'static str {
        match self {
            Buffer::F32(_) => "f32",
            Buffer::F64(_) => "f64",
        }
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match self {
            Buffer::F32(v) => Ok(v),
            Buffer::F64(_) => Err(Error::Checkpoint("expected f32 buffer, found f64".into())),
        }
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match self {
            Buffer::F64(v) => Ok(v),
            Buffer::F32(_) => Err(Error::Checkpoint("expected f64 buffer, found f32".into())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub epoch: u64,
    pub rng_state: u64,
    pub extra: serde_json::Value,
    entries: Vec<(ParamInfo, Buffer)>,
}

impl Checkpoint {
    pub fn new(epoch: u64, rng_state: u64, extra: serde_json::Value) -> Self {
        Checkpoint {
            epoch,
            rng_state,
            extra,
            entries: Vec::new(),
        }
    }

    pub fn push_f32(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        let name = name.into();
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push((
            ParamInfo {
                name,
                shape,
                dtype: "f32".into(),
            },
            Buffer::F32(data),
        ));
    }

    pub fn push_f64(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        let name = name.into();
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push((
            ParamInfo {
                name,
                shape,
                dtype: "f64".into(),
            },
            Buffer::F64(data),
        ));
    }

    pub fn entries(&self) -> &[(ParamInfo, Buffer)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&(ParamInfo, Buffer)> {
        self.entries.iter().find(|(info, _)| info.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&(ParamInfo, Buffer)> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }

    pub fn manifest(&self) -> CheckpointManifest {
        CheckpointManifest {
            version: FORMAT_VERSION,
            epoch: self.epoch,
            rng_state: self.rng_state,
            params: self.entries.iter().map(|(info, _)| info.clone()).collect(),
            extra: self.extra.clone(),
        }
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let manifest = serde_json::to_vec(&ckpt.manifest())?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(&manifest)?;
    for (_, buf) in &ckpt.entries {
        match buf {
            Buffer::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            Buffer::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated header", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_buf = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_buf)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated manifest", path.display())))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&manifest_buf)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    let mut ckpt = Checkpoint::new(manifest.epoch, manifest.rng_state, manifest.extra);
    for info in manifest.params {
        let numel: usize = info.shape.iter().product();
        match info.dtype.as_str() {
            "f32" => {
                let mut raw = vec![0u8; numel * 4];
                r.read_exact(&mut raw).map_err(|_| {
                    Error::Checkpoint(format!("truncated buffer for {:?}", info.name))
                })?;
                let data: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                ckpt.push_f32(info.name, info.shape, data);
            }
            "f64" => {
                let mut raw = vec![0u8; numel * 8];
                r.read_exact(&mut raw).map_err(|_| {
                    Error::Checkpoint(format!("truncated buffer for {:?}", info.name))
                })?;
                let data: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|b| {
                        f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]])
                    })
                    .collect();
                ckpt.push_f64(info.name, info.shape, data);
            }
            other => {
                return Err(Error::Checkpoint(format!("unknown dtype {other:?}")));
            }
        }
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut ck = Checkpoint::new(3, 42, serde_json::json!({"tau": 0.2}));
        ck.push_f32("w", vec![2, 2], vec![1.0, -2.0, 3.5, 0.25]);
        ck.push_f64("opt.m", vec![4], vec![0.1, 0.2, 0.3, 0.4]);
        save_checkpoint(&path, &ck).unwrap();

        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.epoch, 3);
        assert_eq!(back.rng_state, 42);
        assert_eq!(back.extra["tau"], serde_json::json!(0.2));
        let (info, buf) = back.require("w").unwrap();
        assert_eq!(info.shape, vec![2, 2]);
        assert_eq!(buf.as_f32().unwrap(), &[1.0, -2.0, 3.5, 0.25]);
        let (_, opt) = back.require("opt.m").unwrap();
        assert_eq!(opt.as_f64().unwrap(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn magic_bytes_first() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let ck = Checkpoint::new(0, 0, serde_json::Value::Null);
        save_checkpoint(&path, &ck).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"BCL1");
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
