//! Embedding cache: a directory holding `manifest.json` and one raw payload per
//! matrix (row-major, little-endian `f32`).
//!
//! ```text
//! cache/
//!   manifest.json   { "version": 1, "dtype": "f32le", "entries": [...] }
//!   000000.bin      rows * cols * 4 bytes
//!   000001.bin
//! ```
//!
//! Every entry names its bag, scale tag, shape, payload file and row ids.
//! Files are written to a temporary name and renamed into place; the manifest
//! is written last.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bag::Scale;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const CACHE_VERSION: u32 = 1;
pub const DTYPE: &str = "f32le";

#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub bag_id: String,
    pub scale: Scale,
    pub matrix: Array2<f32>,
    /// Defaults to `"0"..="rows-1"` when absent.
    pub row_ids: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub bag_id: String,
    pub scale: Scale,
    pub rows: usize,
    pub cols: usize,
    pub file: String,
    pub row_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dtype: String,
    pub entries: Vec<ManifestEntry>,
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_embedding_cache(entries: &[CacheEntry], dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest {
        version: CACHE_VERSION,
        dtype: DTYPE.to_string(),
        entries: Vec::with_capacity(entries.len()),
    };
    for (i, entry) in entries.iter().enumerate() {
        let (rows, cols) = entry.matrix.dim();
        let row_ids = match &entry.row_ids {
            Some(ids) if ids.len() != rows => {
                return Err(Error::Cache(format!(
                    "{} row ids for {rows} rows of bag `{}`",
                    ids.len(),
                    entry.bag_id
                )))
            }
            Some(ids) => ids.clone(),
            None => (0..rows).map(|r| r.to_string()).collect(),
        };
        let file = format!("{i:06}.bin");
        let mut bytes = Vec::with_capacity(rows * cols * 4);
        for v in entry.matrix.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        write_atomic(&dir.join(&file), &bytes)?;
        manifest.entries.push(ManifestEntry {
            bag_id: entry.bag_id.clone(),
            scale: entry.scale,
            rows,
            cols,
            file,
            row_ids,
        });
    }
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(MANIFEST), text.as_bytes())?;
    Ok(manifest)
}

/// Rows of a cache directory, keyed by `(bag_id, scale)`.
#[derive(Clone, Debug)]
pub struct EmbeddingProvider {
    dir: PathBuf,
    manifest: Manifest,
    matrices: HashMap<(String, Scale), Array2<f32>>,
}

impl EmbeddingProvider {
    pub fn get(&self, bag_id: &str, scale: Scale) -> Result<&Array2<f32>> {
        self.matrices
            .get(&(bag_id.to_string(), scale))
            .ok_or_else(|| Error::MissingRows {
                bag_id: bag_id.to_string(),
                scale: scale.to_string(),
            })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }
}

/// Reads a cache directory (given directly or via its manifest path).
pub fn load_cached_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingProvider> {
    let path = path.as_ref();
    let (dir, manifest_path) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST))
    } else {
        (
            path.parent().map(Path::to_path_buf).unwrap_or_default(),
            path.to_path_buf(),
        )
    };
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(&manifest_path, e))?;
    if manifest.dtype != DTYPE {
        return Err(Error::Cache(format!(
            "unsupported dtype `{}` (expected {DTYPE})",
            manifest.dtype
        )));
    }
    if manifest.version != CACHE_VERSION {
        return Err(Error::Cache(format!("unsupported version {}", manifest.version)));
    }
    let mut matrices = HashMap::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        if e.row_ids.len() != e.rows {
            return Err(Error::Cache(format!(
                "manifest lists {} row ids for {} rows of bag `{}`",
                e.row_ids.len(),
                e.rows,
                e.bag_id
            )));
        }
        let file = dir.join(&e.file);
        let bytes = fs::read(&file).map_err(|err| Error::io(&file, err))?;
        let expected = e.rows * e.cols * 4;
        if bytes.len() != expected {
            return Err(Error::Cache(format!(
                "payload {} has {} bytes, manifest shape {}x{} needs {expected}",
                e.file,
                bytes.len(),
                e.rows,
                e.cols
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let m = Array2::from_shape_vec((e.rows, e.cols), values).expect("length checked");
        if matrices.insert((e.bag_id.clone(), e.scale), m).is_some() {
            return Err(Error::Cache(format!(
                "duplicate entry for bag `{}` at scale {}",
                e.bag_id, e.scale
            )));
        }
    }
    Ok(EmbeddingProvider {
        dir,
        manifest,
        matrices,
    })
}
