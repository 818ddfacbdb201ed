//! Embedding store: the dataset of candidate demonstrations.
//!
//! Rows are L2-normalized `f32` embeddings with one scalar label each, so
//! inner product and cosine similarity coincide everywhere downstream. The
//! on-disk format is a little-endian binary file (magic `LSDEMB1`, row count,
//! dimension, flags, vectors, labels) plus a JSON sidecar describing the task
//! and label range.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::math;

const MAGIC: &[u8; 7] = b"LSDEMB1";
/// Flag bit recording that rows were unit-normalized by the writer.
const FLAG_UNIT_ROWS: u32 = 1;

#[derive(Debug)]
pub enum StoreError {
    Io(std::io::Error),
    /// The file does not start with the expected magic bytes.
    BadMagic,
    /// The file ended before the declared payload was complete.
    Truncated,
    /// Row/label counts or dimensions disagree.
    Shape { detail: String },
    /// A vector contained NaN or infinity.
    NonFinite { row: usize },
    /// A vector had (numerically) zero norm and cannot be normalized.
    ZeroVector { row: usize },
    /// The JSON sidecar was missing or malformed.
    Manifest(String),
}

impl std::fmt::Display for StoreError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StoreError::Io(e) => write!(f, "store i/o error: {e}"),
            StoreError::BadMagic => write!(f, "not an embedding store (bad magic)"),
            StoreError::Truncated => write!(f, "embedding store file is truncated"),
            StoreError::Shape { detail } => write!(f, "inconsistent store shape: {detail}"),
            StoreError::NonFinite { row } => write!(f, "row {row} contains a non-finite value"),
            StoreError::ZeroVector { row } => write!(f, "row {row} is a zero vector"),
            StoreError::Manifest(e) => write!(f, "store manifest error: {e}"),
        }
    }
}

impl std::error::Error for StoreError {}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            StoreError::Truncated
        } else {
            StoreError::Io(e)
        }
    }
}

/// Dataset description carried next to the binary file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    /// Task key, e.g. `age` or `aesthetic`; selects the prompt template.
    pub task: String,
    pub label_lo: f32,
    pub label_hi: f32,
    /// Free-form provenance note (generator name, seed, source dataset).
    pub source: String,
    /// Optional per-row image paths for prompt construction against a real
    /// scoring service; synthetic datasets leave this empty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_paths: Option<Vec<String>>,
}

/// In-memory dataset: `len × dim` unit rows plus labels.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    data: Vec<f32>,
    labels: Vec<f32>,
    manifest: Manifest,
}

impl EmbeddingStore {
    /// Build a store from raw rows, normalizing each to unit length and
    /// rejecting non-finite or zero rows.
    pub fn from_rows(
        dim: usize,
        mut data: Vec<f32>,
        labels: Vec<f32>,
        manifest: Manifest,
    ) -> Result<Self, StoreError> {
        if dim == 0 || data.is_empty() {
            return Err(StoreError::Shape { detail: "store must be non-empty".into() });
        }
        if data.len() % dim != 0 {
            return Err(StoreError::Shape {
                detail: format!("{} values is not a multiple of dim {dim}", data.len()),
            });
        }
        let n = data.len() / dim;
        if labels.len() != n {
            return Err(StoreError::Shape {
                detail: format!("{n} rows but {} labels", labels.len()),
            });
        }
        for (row, chunk) in data.chunks_exact_mut(dim).enumerate() {
            if chunk.iter().any(|v| !v.is_finite()) {
                return Err(StoreError::NonFinite { row });
            }
            math::l2_normalize_in_place(chunk).map_err(|_| StoreError::ZeroVector { row })?;
        }
        if let Some(row) = labels.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite { row });
        }
        if let Some(paths) = &manifest.image_paths {
            if paths.len() != n {
                return Err(StoreError::Shape {
                    detail: format!("{n} rows but {} image paths", paths.len()),
                });
            }
        }
        Ok(EmbeddingStore { dim, data, labels, manifest })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, id: u32) -> &[f32] {
        let i = id as usize;
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, id: u32) -> f32 {
        self.labels[id as usize]
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Write the binary file and its JSON sidecar (`<path>.json`).
    pub fn write(&self, path: &Path) -> Result<(), StoreError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&FLAG_UNIT_ROWS.to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.labels {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        let json = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| StoreError::Manifest(e.to_string()))?;
        std::fs::write(sidecar_path(path), json)?;
        Ok(())
    }

    /// Read a store written by [`EmbeddingStore::write`]. Rows are validated
    /// but not re-normalized, so write/read round-trips are byte-identical.
    pub fn read(path: &Path) -> Result<Self, StoreError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(StoreError::BadMagic);
        }
        let n = read_u32(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        let _flags = read_u32(&mut r)?;
        if n == 0 || dim == 0 {
            return Err(StoreError::Shape { detail: "store must be non-empty".into() });
        }
        let data = read_f32_vec(&mut r, n * dim)?;
        let labels = read_f32_vec(&mut r, n)?;
        for (row, chunk) in data.chunks_exact(dim).enumerate() {
            if chunk.iter().any(|v| !v.is_finite()) {
                return Err(StoreError::NonFinite { row });
            }
            let norm = math::l2_norm(chunk);
            if (norm - 1.0).abs() > 1e-3 {
                return Err(StoreError::Shape {
                    detail: format!("row {row} has norm {norm:.6}, expected unit rows"),
                });
            }
        }
        let manifest_bytes = std::fs::read(sidecar_path(path))
            .map_err(|e| StoreError::Manifest(format!("sidecar unreadable: {e}")))?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
            .map_err(|e| StoreError::Manifest(e.to_string()))?;
        Ok(EmbeddingStore { dim, data, labels, manifest })
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, StoreError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32_vec<R: Read>(r: &mut R, len: usize) -> Result<Vec<f32>, StoreError> {
    let mut bytes = vec![0u8; len * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// A subset of store ids (e.g. the demonstration pool of a train/eval split)
/// with O(1) membership checks.
#[derive(Debug, Clone)]
pub struct Pool {
    ids: Vec<u32>,
    members: HashSet<u32>,
}

impl Pool {
    pub fn new(ids: Vec<u32>) -> Self {
        let members = ids.iter().copied().collect();
        Pool { ids, members }
    }

    /// The whole store as one pool.
    pub fn full(store: &EmbeddingStore) -> Self {
        Pool::new((0..store.len() as u32).collect())
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: u32) -> bool {
        self.members.contains(&id)
    }
}
