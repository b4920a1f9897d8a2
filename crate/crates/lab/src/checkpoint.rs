//! Binary tensor checkpoints with a `key=value` metadata sidecar.
//!
//! Layout: magic `SQEN`, format version (u32 LE), tensor count (u32 LE), then
//! per tensor: name length (u16 LE), UTF-8 name, rank (u8), each dim (u32 LE)
//! and the row-major f32 LE payload.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use seqens_core::nets::{BackboneConfig, Conditioning, Generation};
use seqens_core::Tensor;

use crate::config::{arch_pairs, set_arch};
use crate::error::{LabError, Result};
use crate::error::FormatError;

pub const MAGIC: &[u8; 4] = b"SQEN";
pub const VERSION: u32 = 1;
const EMBEDDING: &str = "fixed_embedding";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub metadata: BTreeMap<String, String>,
}

fn fail<T>(offset: usize, message: impl Into<String>) -> std::result::Result<T, FormatError> {
    Err(FormatError { offset, message: message.into() })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], FormatError> {
        if self.bytes.len() - self.pos < n {
            return fail(self.bytes.len(), format!("truncated {}", what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.tensors.iter().map(|(n, t)| 8 + n.len() + 4 * t.numel()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decodes the tensor file; metadata is left empty.
    pub fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, FormatError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return fail(0, "bad magic, expected SQEN");
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return fail(4, format!("format version {} unsupported (expected {})", version, VERSION));
        }
        let count = r.u32("tensor count")?;
        let mut seen = BTreeSet::new();
        let mut tensors = Vec::new();
        for _ in 0..count {
            let at = r.pos;
            let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len, "name")?).or_else(|_| fail(at + 2, "name is not UTF-8"))?.to_string();
            if !seen.insert(name.clone()) {
                return fail(at, format!("duplicate tensor '{}'", name));
            }
            let ndim = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("dimension")? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).filter(|n| n.checked_mul(4).is_some());
            let numel = match numel {
                Some(n) => n,
                None => return fail(at, format!("tensor '{}' too large", name)),
            };
            let data = r.take(4 * numel, "payload")?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
            tensors.push((name, Tensor::new(shape, data).expect("sized")));
        }
        if r.pos != bytes.len() {
            return fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Checkpoint { tensors, metadata: BTreeMap::new() })
    }

    pub fn metadata_text(&self) -> String {
        self.metadata.iter().map(|(k, v)| format!("{}={}\n", k, v)).collect()
    }

    pub fn parse_metadata(text: &str) -> std::result::Result<BTreeMap<String, String>, (usize, String)> {
        let mut out = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or((i + 1, "expected key=value".to_string()))?;
            if out.insert(k.to_string(), v.to_string()).is_some() {
                return Err((i + 1, format!("duplicate key '{}'", k)));
            }
        }
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn metadata_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.encode()).map_err(LabError::io(path))?;
    let meta = metadata_path(path);
    std::fs::write(&meta, ckpt.metadata_text()).map_err(LabError::io(meta))
}

/// Loads a checkpoint; a missing sidecar yields empty metadata.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(LabError::io(path))?;
    let mut ckpt = Checkpoint::decode(&bytes).map_err(|e| LabError::Format { path: path.into(), offset: e.offset, message: e.message })?;
    let meta = metadata_path(path);
    if meta.exists() {
        let text = std::fs::read_to_string(&meta).map_err(LabError::io(&meta))?;
        ckpt.metadata = Checkpoint::parse_metadata(&text).map_err(|(line, message)| LabError::Config { path: meta, line, message })?;
    }
    Ok(ckpt)
}

pub fn generation_checkpoint(g: &Generation, seed: u64) -> Checkpoint {
    let mut tensors: Vec<(String, Tensor<f32>)> = g.params().iter().map(|(n, t)| (n.clone(), t.clone())).collect();
    if let Some(e) = g.fixed_embedding() {
        tensors.push((EMBEDDING.to_string(), e.clone()));
    }
    let mut metadata: BTreeMap<String, String> =
        arch_pairs(g.config()).into_iter().filter(|(k, _)| *k != "conditioning").map(|(k, v)| (format!("arch.{}", k), v)).collect();
    metadata.insert("conditioning".into(), g.conditioning().to_string());
    metadata.insert("generation_index".into(), g.index().to_string());
    metadata.insert("seed".into(), seed.to_string());
    Checkpoint { tensors, metadata }
}

/// Rebuilds a generation; returns it with its training seed.
pub fn generation_from_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(Generation, u64)> {
    let bad = |message: String| LabError::Config { path: metadata_path(path), line: 0, message };
    let field = |k: &str| ckpt.metadata.get(k).ok_or_else(|| bad(format!("metadata lacks '{}'", k)));
    let mut arch = BackboneConfig::default();
    for (k, v) in &ckpt.metadata {
        if let Some(key) = k.strip_prefix("arch.") {
            if !set_arch(&mut arch, key, v).map_err(&bad)? {
                return Err(bad(format!("unknown metadata key '{}'", k)));
            }
        }
    }
    arch.conditioning = field("conditioning")?.parse::<Conditioning>()?;
    let index: usize = field("generation_index")?.parse().map_err(|_| bad("bad generation_index".into()))?;
    let seed: u64 = field("seed")?.parse().map_err(|_| bad("bad seed".into()))?;
    let mut params = BTreeMap::new();
    let mut embedding = None;
    for (n, t) in &ckpt.tensors {
        if n == EMBEDDING {
            embedding = Some(t.clone());
        } else {
            params.insert(n.clone(), t.clone());
        }
    }
    Ok((Generation::from_parts(arch, params, embedding, index)?, seed))
}

pub fn save_generation(path: &Path, g: &Generation, seed: u64) -> Result<()> {
    save_checkpoint(path, &generation_checkpoint(g, seed))
}

pub fn load_generation(path: &Path) -> Result<Generation> {
    Ok(generation_from_checkpoint(&load_checkpoint(path)?, path)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_twelve_bytes() {
        let bytes = Checkpoint::default().encode();
        assert_eq!(bytes.len(), 12);
        assert_eq!(&bytes[..4], b"SQEN");
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), Checkpoint::default());
    }

    #[test]
    fn rejects_corruption() {
        let c = Checkpoint { tensors: vec![("a".into(), Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())], metadata: BTreeMap::new() };
        let bytes = c.encode();
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), c);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Checkpoint::decode(&bad).unwrap_err().message.contains("version"));
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).unwrap_err().message.contains("truncated"));
        let dup = Checkpoint { tensors: vec![c.tensors[0].clone(), c.tensors[0].clone()], metadata: BTreeMap::new() };
        assert!(Checkpoint::decode(&dup.encode()).unwrap_err().message.contains("duplicate"));
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        assert_ne!(Checkpoint::decode(&flipped).unwrap(), c);
    }
}
