//! Binary tensor archive: magic, format version, a JSON header describing
//! every tensor, then the raw little-endian `f32` payload.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use super::{GradError, Real, Tensor};

const MAGIC: &[u8; 8] = b"SBXCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

/// Named `f32` tensors plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Archive {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, tensors: Vec::new() }
    }

    pub fn push<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push((name.into(), t.cast()));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>, GradError> {
        self.get(name).ok_or_else(|| GradError::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(n, t)| Entry { name: n.clone(), shape: t.shape.clone() }).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, GradError> {
        let bad = |d: &str| GradError::Checkpoint(d.to_string());
        let mut magic = [0u8; 8];
        bytes.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut word = [0u8; 4];
        bytes.read_exact(&mut word).map_err(|_| bad("truncated version"))?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(GradError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let mut len = [0u8; 8];
        bytes.read_exact(&mut len).map_err(|_| bad("truncated header length"))?;
        let len = u64::from_le_bytes(len) as usize;
        if bytes.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&bytes[..len]).map_err(|e| GradError::Checkpoint(format!("header: {e}")))?;
        bytes = &bytes[len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if bytes.len() < 4 * n {
                return Err(GradError::Checkpoint(format!("truncated payload for `{}`", e.name)));
            }
            let data = bytes[..4 * n].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            bytes = &bytes[4 * n..];
            tensors.push((e.name, Tensor { shape: e.shape, data }));
        }
        if !bytes.is_empty() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self { meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), GradError> {
        let mut f = std::fs::File::create(path).map_err(|e| GradError::Io(format!("{}: {e}", path.display())))?;
        f.write_all(&self.to_bytes()).map_err(|e| GradError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, GradError> {
        let bytes = std::fs::read(path).map_err(|e| GradError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut a = Archive::new(serde_json::json!({"config": "mini", "epochs": 3}));
        a.push("w", &Tensor::<f32>::new(&[2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-7, f32::MAX]).unwrap());
        a.push("b", &Tensor::<f64>::scalar(0.5));
        let back = Archive::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(back, a);
        let mut bytes = a.to_bytes();
        bytes.pop();
        assert!(Archive::from_bytes(&bytes).is_err());
        assert!(Archive::from_bytes(b"garbage!garbage!garbage").is_err());
    }
}
