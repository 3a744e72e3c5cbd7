//! On-disk embedding cache.
//!
//! Layout (little-endian): magic `CFEC`, version `u32`, dimension `u32`,
//! count `u64`, then `count` fixed-width records of a 32-byte SHA-256 key
//! followed by `dimension` `f64` values. The key hashes the backend id, a NUL
//! byte and the text.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use sha2::{Digest, Sha256};

use super::{EmbedError, Embedder, EmbeddingMatrix};

const MAGIC: &[u8; 4] = b"CFEC";
const VERSION: u32 = 1;

pub type CacheKey = [u8; 32];

pub struct EmbeddingCache {
    path: PathBuf,
    dimension: usize,
    entries: HashMap<CacheKey, Vec<f64>>,
    order: Vec<CacheKey>,
    dirty: bool,
}

impl EmbeddingCache {
    pub fn key(backend_id: &str, text: &str) -> CacheKey {
        let mut h = Sha256::new();
        h.update(backend_id.as_bytes());
        h.update([0u8]);
        h.update(text.as_bytes());
        h.finalize().into()
    }

    /// Opens the cache at `path`, or starts an empty one if it does not exist.
    pub fn open(path: impl Into<PathBuf>, dimension: usize) -> Result<Self, EmbedError> {
        let path = path.into();
        let mut cache = Self {
            path,
            dimension,
            entries: HashMap::new(),
            order: Vec::new(),
            dirty: false,
        };
        if cache.path.exists() {
            cache.load()?;
        }
        Ok(cache)
    }

    fn err(&self, reason: impl Into<String>) -> EmbedError {
        EmbedError::Cache {
            path: self.path.display().to_string(),
            reason: reason.into(),
        }
    }

    fn load(&mut self) -> Result<(), EmbedError> {
        let mut bytes = Vec::new();
        std::fs::File::open(&self.path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| self.err(e.to_string()))?;
        if bytes.len() < 20 || &bytes[..4] != MAGIC {
            return Err(self.err("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(self.err(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if dim != self.dimension {
            return Err(EmbedError::DimensionMismatch {
                expected: self.dimension,
                got: dim,
            });
        }
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let width = 32 + 8 * dim;
        if bytes.len() != 20 + count * width {
            return Err(self.err("truncated or oversized file"));
        }
        for rec in bytes[20..].chunks_exact(width) {
            let key: CacheKey = rec[..32].try_into().unwrap();
            let vals = rec[32..]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if self.entries.insert(key, vals).is_none() {
                self.order.push(key);
            }
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &CacheKey) -> Option<&[f64]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    pub fn insert(&mut self, key: CacheKey, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.dimension);
        if self.entries.insert(key, values).is_none() {
            self.order.push(key);
        }
        self.dirty = true;
    }

    /// Writes through a temporary file renamed into place.
    pub fn save(&mut self) -> Result<(), EmbedError> {
        if !self.dirty && self.path.exists() {
            return Ok(());
        }
        let dir = self.path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir).map_err(|e| self.err(e.to_string()))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| self.err(e.to_string()))?;
        {
            let mut w = std::io::BufWriter::new(tmp.as_file_mut());
            let mut write = |b: &[u8]| w.write_all(b);
            let res = (|| -> std::io::Result<()> {
                write(MAGIC)?;
                write(&VERSION.to_le_bytes())?;
                write(&(self.dimension as u32).to_le_bytes())?;
                write(&(self.order.len() as u64).to_le_bytes())?;
                for key in &self.order {
                    write(key)?;
                    for v in &self.entries[key] {
                        write(&v.to_le_bytes())?;
                    }
                }
                Ok(())
            })();
            res.map_err(|e| self.err(e.to_string()))?;
            w.flush().map_err(|e| self.err(e.to_string()))?;
        }
        tmp.persist(&self.path).map_err(|e| self.err(e.error.to_string()))?;
        self.dirty = false;
        Ok(())
    }

    /// Embeds `texts`, computing only those missing from the cache.
    pub fn embed_with(&mut self, embedder: &dyn Embedder, texts: &[String]) -> Result<EmbeddingMatrix, EmbedError> {
        if embedder.dimension() != self.dimension {
            return Err(EmbedError::DimensionMismatch {
                expected: self.dimension,
                got: embedder.dimension(),
            });
        }
        let backend = embedder.backend_id();
        let keys: Vec<CacheKey> = texts.iter().map(|t| Self::key(&backend, t)).collect();
        let mut missing: Vec<String> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (t, k) in texts.iter().zip(&keys) {
            if !self.entries.contains_key(k) && seen.insert(*k) {
                missing.push(t.clone());
            }
        }
        if !missing.is_empty() {
            let fresh = embedder.embed(&missing)?;
            for (t, row) in missing.iter().zip(fresh.values().rows()) {
                self.insert(Self::key(&backend, t), row.to_vec());
            }
        }
        let mut values = Array2::zeros((texts.len(), self.dimension));
        for (i, k) in keys.iter().enumerate() {
            values.row_mut(i).assign(&ndarray::ArrayView1::from(&self.entries[k]));
        }
        EmbeddingMatrix::new(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::{EmbeddingBackendConfig, HashedEmbedder};

    #[test]
    fn round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.cache");
        let emb = HashedEmbedder::new(EmbeddingBackendConfig::hashed(16)).unwrap();
        let texts: Vec<String> = ["alpha", "beta", "alpha"].iter().map(|s| s.to_string()).collect();

        let mut cache = EmbeddingCache::open(&path, 16).unwrap();
        let first = cache.embed_with(&emb, &texts).unwrap();
        assert_eq!(cache.len(), 2);
        cache.save().unwrap();

        let mut reopened = EmbeddingCache::open(&path, 16).unwrap();
        assert_eq!(reopened.len(), 2);
        let second = reopened.embed_with(&emb, &texts).unwrap();
        assert_eq!(first, second);
        assert_eq!(first, emb.embed(&texts).unwrap());
    }

    #[test]
    fn rejects_truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.cache");
        let emb = HashedEmbedder::new(EmbeddingBackendConfig::hashed(8)).unwrap();
        let mut cache = EmbeddingCache::open(&path, 8).unwrap();
        cache.embed_with(&emb, &["x".to_string()]).unwrap();
        cache.save().unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(EmbeddingCache::open(&path, 8).is_err());
    }

    #[test]
    fn rejects_dimension_change() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.cache");
        let mut cache = EmbeddingCache::open(&path, 8).unwrap();
        cache.insert(EmbeddingCache::key("b", "t"), vec![0.0; 8]);
        cache.save().unwrap();
        assert!(matches!(
            EmbeddingCache::open(&path, 16),
            Err(EmbedError::DimensionMismatch { expected: 16, got: 8 })
        ));
    }
}
