//! The on-disk container shared by checkpoints, persisted datasets, and
//! volume exports: a length-prefixed JSON manifest followed by raw
//! little-endian tensor blobs at 8-byte-aligned absolute offsets.
//!
//! Layout:
//!   bytes 0..4    magic "FCAP"
//!   bytes 4..8    format version (u32 LE)
//!   bytes 8..16   manifest byte length (u64 LE)
//!   manifest      UTF-8 JSON: { kind, meta, tensors: [entry...] }
//!   padding       zeros to the next 8-byte boundary
//!   blobs         row-major little-endian scalars, 8-byte aligned

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"FCAP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Absolute byte offset of the blob within the file.
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Accumulates tensors for one container file.
#[derive(Default)]
pub struct ContainerWriter {
    entries: Vec<(String, Dtype, Vec<usize>, Vec<u8>)>,
}

impl ContainerWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<T: Scalar>(&mut self, name: &str, tensor: &Tensor<T>) {
        let mut bytes = Vec::with_capacity(tensor.numel() * T::DTYPE.byte_width());
        for v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes_vec());
        }
        self.entries
            .push((name.to_string(), T::DTYPE, tensor.dims().to_vec(), bytes));
    }

    pub fn write(self, path: &Path, kind: &str, meta: serde_json::Value) -> Result<()> {
        // two-pass: manifest size depends on offsets, offsets on manifest
        // size; sizes are stable after one re-layout because offsets only
        // grow the manifest by a bounded digit count, so iterate to fixpoint.
        let mut guess = 0u64;
        for _ in 0..8 {
            let (manifest_bytes, total_before_blobs) = self.layout(kind, &meta, guess)?;
            if manifest_bytes.len() as u64 == guess {
                let mut out = Vec::with_capacity(total_before_blobs as usize);
                out.extend_from_slice(MAGIC);
                out.extend_from_slice(&VERSION.to_le_bytes());
                out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
                out.extend_from_slice(&manifest_bytes);
                while out.len() % 8 != 0 {
                    out.push(0);
                }
                for (_, _, _, bytes) in &self.entries {
                    out.extend_from_slice(bytes);
                    while out.len() % 8 != 0 {
                        out.push(0);
                    }
                }
                return fs::write(path, out).map_err(|e| Error::io(path, e));
            }
            guess = manifest_bytes.len() as u64;
        }
        Err(Error::BadFormat("container layout did not converge".into()))
    }

    fn layout(
        &self,
        kind: &str,
        meta: &serde_json::Value,
        manifest_len: u64,
    ) -> Result<(Vec<u8>, u64)> {
        let header = 16u64;
        let mut cursor = header + manifest_len;
        cursor = cursor.div_ceil(8) * 8;
        let mut tensors = Vec::with_capacity(self.entries.len());
        for (name, dtype, shape, bytes) in &self.entries {
            tensors.push(TensorEntry {
                name: name.clone(),
                dtype: dtype.tag().to_string(),
                shape: shape.clone(),
                offset: cursor,
                byte_len: bytes.len() as u64,
            });
            cursor += bytes.len() as u64;
            cursor = cursor.div_ceil(8) * 8;
        }
        let manifest = Manifest {
            kind: kind.to_string(),
            meta: meta.clone(),
            tensors,
        };
        Ok((serde_json::to_vec(&manifest)?, cursor))
    }
}

/// A fully loaded container.
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    entries: Vec<TensorEntry>,
    data: Vec<u8>,
}

impl Container {
    pub fn open(path: &Path) -> Result<Container> {
        let data = fs::read(path).map_err(|e| Error::io(path, e))?;
        if data.len() < 16 || &data[0..4] != MAGIC {
            return Err(Error::BadFormat(format!(
                "{}: not a FCAP container",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(data[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::BadFormat(format!(
                "{}: unsupported container version {version}",
                path.display()
            )));
        }
        let mlen = u64::from_le_bytes(data[8..16].try_into().unwrap()) as usize;
        if data.len() < 16 + mlen {
            return Err(Error::BadFormat(format!(
                "{}: truncated manifest",
                path.display()
            )));
        }
        let manifest: Manifest = serde_json::from_slice(&data[16..16 + mlen])?;
        for e in &manifest.tensors {
            if (e.offset + e.byte_len) as usize > data.len() {
                return Err(Error::BadFormat(format!(
                    "{}: tensor '{}' extends past end of file",
                    path.display(),
                    e.name
                )));
            }
        }
        Ok(Container {
            kind: manifest.kind,
            meta: manifest.meta,
            entries: manifest.tensors,
            data,
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self
            .entry(name)
            .ok_or_else(|| Error::BadFormat(format!("container has no tensor '{name}'")))?;
        if e.dtype != T::DTYPE.tag() {
            return Err(Error::BadFormat(format!(
                "tensor '{name}' has dtype {}, expected {}",
                e.dtype,
                T::DTYPE.tag()
            )));
        }
        let w = T::DTYPE.byte_width();
        let raw = &self.data[e.offset as usize..(e.offset + e.byte_len) as usize];
        if raw.len() % w != 0 {
            return Err(Error::BadFormat(format!("tensor '{name}' has ragged bytes")));
        }
        let data: Vec<T> = raw.chunks_exact(w).map(T::from_le_slice).collect();
        Tensor::from_vec(&e.shape, data)
    }
}
