//! Self-contained checkpoint container.
//!
//! Layout: the magic bytes `STFM1`, a little-endian `u64` manifest length,
//! the JSON manifest, then every tensor as little-endian `f32` in manifest
//! order. The manifest carries a section tag naming the model family, free
//! metadata, and `(name, shape, offset)` per tensor, offsets counted in
//! `f32` elements from the start of the data block.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 5] = b"STFM1";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    section: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

/// Named tensors plus metadata of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub section: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn new(section: &str, meta: serde_json::Value) -> Self {
        Self {
            section: section.to_string(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push<F: Float>(&mut self, name: impl Into<String>, t: &Tensor<F>) {
        self.tensors.push((name.into(), t.cast()));
    }

    pub fn get<F: Float>(&self, name: &str) -> Result<Tensor<F>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.cast())
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` missing")))
    }

    pub fn expect_section(&self, section: &str) -> Result<()> {
        if self.section == section {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("expected a `{section}` checkpoint, found `{}`", self.section)))
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let manifest = Manifest {
            section: self.section.clone(),
            meta: self.meta.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for (_, t) in &self.tensors {
            for x in t.data() {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 5];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint (bad magic)", path.display())));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        input.read_exact(&mut json)?;
        let manifest: Manifest = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut data = Vec::new();
        input.read_to_end(&mut data)?;
        let floats: Vec<f32> = data.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let slice = floats
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` extends past the data block", e.name)))?;
            tensors.push((e.name, Tensor::new(&e.shape, slice.to_vec())?));
        }
        Ok(Self {
            section: manifest.section,
            meta: manifest.meta,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.stfm");
        let mut c = Container::new("test", serde_json::json!({"k": 3}));
        c.push("a", &Tensor::<f64>::matrix(&[&[1.0, 2.0], &[3.0, 4.5]]));
        c.push("b", &Tensor::<f32>::scalar(-7.0));
        c.save(&path).unwrap();
        let back = Container::load(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(&std::fs::read(&path).unwrap()[..5], b"STFM1");
        assert!(back.expect_section("other").is_err());
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        std::fs::write(&path, b"hello world, not a checkpoint").unwrap();
        assert!(matches!(Container::load(&path), Err(Error::Checkpoint(_))));
    }
}
