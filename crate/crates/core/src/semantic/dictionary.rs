use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Compact handle for a region embedding. Voxels store keys, never vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RegionKey(pub u32);

impl std::fmt::Display for RegionKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct EntryMeta {
    observation_count: u32,
    created_frame: u64,
}

/// Borrowed view of one dictionary entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DictionaryEntry<'a> {
    pub key: RegionKey,
    pub embedding: &'a [f32],
    pub observation_count: u32,
    pub created_frame: u64,
}

/// Region embeddings addressed by dense integer keys.
///
/// Keys are handed out in increasing order and never reused, so the key is
/// also the row of the entry in the flat embedding buffer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingDictionary {
    dim: usize,
    embeddings: Vec<f32>,
    meta: Vec<EntryMeta>,
}

impl EmbeddingDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_dim(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    /// Embedding dimension; 0 until the first entry is inserted.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn next_key(&self) -> RegionKey {
        RegionKey(self.meta.len() as u32)
    }

    pub fn contains(&self, key: RegionKey) -> bool {
        (key.0 as usize) < self.meta.len()
    }

    /// Adds a new region and returns its fresh key.
    pub fn insert(&mut self, embedding: &[f32], frame: u64) -> Result<RegionKey> {
        self.insert_with_count(embedding, frame, 1)
    }

    pub(crate) fn insert_with_count(&mut self, embedding: &[f32], frame: u64, observation_count: u32) -> Result<RegionKey> {
        if self.dim == 0 {
            if embedding.is_empty() {
                return Err(Error::invalid("embedding must not be empty"));
            }
            self.dim = embedding.len();
        } else if embedding.len() != self.dim {
            return Err(Error::invalid(format!(
                "embedding has dimension {}, dictionary holds {}",
                embedding.len(),
                self.dim
            )));
        }
        let key = self.next_key();
        // Exact growth keeps the buffer at entries * d floats.
        self.embeddings.reserve_exact(self.dim);
        self.embeddings.extend_from_slice(embedding);
        self.meta.reserve_exact(1);
        self.meta.push(EntryMeta {
            observation_count,
            created_frame: frame,
        });
        Ok(key)
    }

    pub fn get(&self, key: RegionKey) -> Option<DictionaryEntry<'_>> {
        let meta = self.meta.get(key.0 as usize)?;
        Some(DictionaryEntry {
            key,
            embedding: self.embedding_row(key.0 as usize),
            observation_count: meta.observation_count,
            created_frame: meta.created_frame,
        })
    }

    pub fn embedding(&self, key: RegionKey) -> Option<&[f32]> {
        self.contains(key).then(|| self.embedding_row(key.0 as usize))
    }

    #[inline]
    fn embedding_row(&self, row: usize) -> &[f32] {
        &self.embeddings[row * self.dim..(row + 1) * self.dim]
    }

    pub fn record_observation(&mut self, key: RegionKey) -> Result<()> {
        let meta = self
            .meta
            .get_mut(key.0 as usize)
            .ok_or_else(|| Error::NotFound(format!("region key {key}")))?;
        meta.observation_count += 1;
        Ok(())
    }

    /// Folds `embedding` into the stored vector as an observation-weighted
    /// running mean and renormalizes. Called before `record_observation`.
    pub fn blend(&mut self, key: RegionKey, embedding: &[f32]) -> Result<()> {
        if embedding.len() != self.dim {
            return Err(Error::invalid("embedding dimension mismatch"));
        }
        let n = self
            .meta
            .get(key.0 as usize)
            .ok_or_else(|| Error::NotFound(format!("region key {key}")))?
            .observation_count as f32;
        let row = key.0 as usize;
        let dim = self.dim;
        let stored = &mut self.embeddings[row * dim..(row + 1) * dim];
        for (s, e) in stored.iter_mut().zip(embedding) {
            *s = (*s * n + e) / (n + 1.0);
        }
        let norm = stored.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            stored.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = DictionaryEntry<'_>> {
        (0..self.meta.len()).map(|i| self.get(RegionKey(i as u32)).unwrap())
    }

    /// Flat row-major `len x dim` embedding buffer.
    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    /// Heap bytes held by the dictionary plus its inline size.
    pub fn memory_bytes(&self) -> usize {
        std::mem::size_of::<Self>()
            + self.embeddings.capacity() * std::mem::size_of::<f32>()
            + self.meta.capacity() * std::mem::size_of::<EntryMeta>()
    }
}
