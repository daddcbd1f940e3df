//! Named parameter tensors and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "DEDRCKPT"
//! version u32
//! hlen    u64      length of the JSON header
//! header  hlen     {"kind":..., "meta":{...}, "tensors":[{"name","rows","cols"}...]}
//! data             f64 LE values, tensors in header order, row-major
//! ```
//!
//! Values are written as raw IEEE-754 bits so reload is bit-exact.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Mat;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DEDRCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn insert(&mut self, name: &str, value: Mat) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.tensors.push(value);
        self.index.insert(name.to_string(), self.tensors.len() - 1);
        self.tensors.len() - 1
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` not present")))
    }

    pub fn tensor(&self, id: usize) -> &Mat {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Mat {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    /// Copies every tensor of `other` into this store under `prefix + name`.
    pub fn absorb(&mut self, prefix: &str, other: &ParamStore) {
        for (name, t) in other.iter() {
            self.insert(&format!("{prefix}{name}"), t.clone());
        }
    }

    /// Sub-store of every tensor whose name starts with `prefix`, prefix removed.
    pub fn extract(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::default();
        for (name, t) in self.iter() {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    pub fn sha256(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            h.update((t.nrows() as u64).to_le_bytes());
            h.update((t.ncols() as u64).to_le_bytes());
            for v in t.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Initialisers used by the toy models.
pub fn normal_init(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let dist = Normal::new(0.0, std).expect("valid std");
    Mat::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: BTreeMap<String, serde_json::Value>,
    tensors: Vec<TensorHeader>,
}

/// A parameter store plus the self-describing metadata that travels with it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, serde_json::Value>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .params
                .iter()
                .map(|(name, t)| TensorHeader {
                    name: name.to_string(),
                    rows: t.nrows(),
                    cols: t.ncols(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(24 + header.len() + self.params.num_scalars() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.iter() {
            for v in t.iter() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes
            .get(20..20 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut offset = 20 + hlen;
        let mut params = ParamStore::default();
        for th in header.tensors {
            let n = th.rows * th.cols;
            let raw = bytes
                .get(offset..offset + n * 8)
                .ok_or_else(|| bad("truncated tensor data"))?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            offset += n * 8;
            let t = Mat::from_shape_vec((th.rows, th.cols), data)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            params.insert(&th.name, t);
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)
                .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        fs::write(path, self.to_bytes())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }

    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamStore::default();
        params.insert("a", normal_init(&mut rng, 3, 4, 1.0));
        params.insert("b.c", Mat::from_elem((1, 2), f64::MIN_POSITIVE / 3.0));
        let mut meta = BTreeMap::new();
        meta.insert("path".into(), serde_json::json!("T"));
        let ck = Checkpoint {
            kind: "encoder".into(),
            meta,
            params,
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
        let ck = Checkpoint {
            kind: "x".into(),
            meta: BTreeMap::new(),
            params: {
                let mut p = ParamStore::default();
                p.insert("w", Mat::zeros((2, 2)));
                p
            },
        };
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn prefixes_split_and_merge() {
        let mut a = ParamStore::default();
        a.insert("w", Mat::zeros((1, 1)));
        let mut merged = ParamStore::default();
        merged.absorb("t.", &a);
        merged.absorb("mm.", &a);
        assert_eq!(merged.len(), 2);
        assert_eq!(merged.extract("t."), a);
    }
}
