//! Append-only embedding cache.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! header:  b"EMBCACHE" | version u32 | model_id_len u32 | model_id | dim u32 | elem_width u32
//! record:  sha256(text) [32] | dim × f32 | check [8]
//! ```
//!
//! `check` is the first 8 bytes of sha256 over key and vector bytes. Records
//! failing the check are skipped on open (and re-embedded on demand); a
//! partially written trailing record is cut off.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use sha2::{Digest, Sha256};

use super::{Embedder, EmbedderDescriptor, EmbeddingVector, QueryCounter};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"EMBCACHE";
const VERSION: u32 = 1;
const ELEM_WIDTH: u32 = 4;
const CHECK_LEN: usize = 8;

type Key = [u8; 32];

pub struct EmbeddingCache {
    path: PathBuf,
    model_id: String,
    dim: usize,
    index: RwLock<HashMap<Key, Vec<f32>>>,
    writer: Mutex<File>,
    corrupt_records: usize,
}

fn text_key(text: &str) -> Key {
    Sha256::digest(text.as_bytes()).into()
}

fn record_check(key: &Key, payload: &[u8]) -> [u8; CHECK_LEN] {
    let mut h = Sha256::new();
    h.update(key);
    h.update(payload);
    let digest = h.finalize();
    let mut out = [0u8; CHECK_LEN];
    out.copy_from_slice(&digest[..CHECK_LEN]);
    out
}

impl EmbeddingCache {
    /// Opens (or creates) the cache for one embedder. A file written for a
    /// different model or dimension is a config error.
    pub fn open(path: &Path, model_id: &str, dim: usize) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(io)?;
        let len = file.metadata().map_err(io)?.len();
        let mut index = HashMap::new();
        let mut corrupt_records = 0;
        if len == 0 {
            let mut header = Vec::new();
            header.extend_from_slice(MAGIC);
            header.extend_from_slice(&VERSION.to_le_bytes());
            header.extend_from_slice(&(model_id.len() as u32).to_le_bytes());
            header.extend_from_slice(model_id.as_bytes());
            header.extend_from_slice(&(dim as u32).to_le_bytes());
            header.extend_from_slice(&ELEM_WIDTH.to_le_bytes());
            file.write_all(&header).map_err(io)?;
            file.flush().map_err(io)?;
        } else {
            let mut bytes = Vec::with_capacity(len as usize);
            file.seek(SeekFrom::Start(0)).map_err(io)?;
            file.read_to_end(&mut bytes).map_err(io)?;
            let body_start = parse_header(&bytes, path, model_id, dim)?;
            let record_len = 32 + dim * ELEM_WIDTH as usize + CHECK_LEN;
            let mut offset = body_start;
            while offset + record_len <= bytes.len() {
                let rec = &bytes[offset..offset + record_len];
                let key: Key = rec[..32].try_into().expect("32-byte key");
                let payload = &rec[32..record_len - CHECK_LEN];
                if record_check(&key, payload) != rec[record_len - CHECK_LEN..] {
                    tracing::warn!(cache = %path.display(), offset, "skipping corrupt cache record");
                    corrupt_records += 1;
                } else {
                    let values = payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    index.insert(key, values);
                }
                offset += record_len;
            }
            if offset < bytes.len() {
                tracing::warn!(
                    cache = %path.display(),
                    trailing = bytes.len() - offset,
                    "discarding partial trailing cache record"
                );
                corrupt_records += 1;
                file.set_len(offset as u64).map_err(io)?;
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            model_id: model_id.to_string(),
            dim,
            index: RwLock::new(index),
            writer: Mutex::new(file),
            corrupt_records,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("cache index poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records skipped while opening.
    pub fn corrupt_records(&self) -> usize {
        self.corrupt_records
    }

    pub fn get(&self, text: &str) -> Option<EmbeddingVector> {
        self.index
            .read()
            .expect("cache index poisoned")
            .get(&text_key(text))
            .map(|values| EmbeddingVector {
                values: values.clone(),
                model_id: self.model_id.clone(),
            })
    }

    pub fn insert(&self, text: &str, vector: &EmbeddingVector) -> Result<()> {
        if vector.dim() != self.dim {
            return Err(Error::contract(format!(
                "cache for {} holds {}-dim vectors, got {}",
                self.model_id,
                self.dim,
                vector.dim()
            )));
        }
        let key = text_key(text);
        let mut record = Vec::with_capacity(32 + self.dim * 4 + CHECK_LEN);
        record.extend_from_slice(&key);
        for v in &vector.values {
            record.extend_from_slice(&v.to_le_bytes());
        }
        let check = record_check(&key, &record[32..]);
        record.extend_from_slice(&check);
        {
            let mut file = self.writer.lock().expect("cache writer poisoned");
            file.write_all(&record).map_err(|e| Error::io(&self.path, e))?;
        }
        self.index
            .write()
            .expect("cache index poisoned")
            .insert(key, vector.values.clone());
        Ok(())
    }

    pub fn flush(&self) -> Result<()> {
        self.writer
            .lock()
            .expect("cache writer poisoned")
            .flush()
            .map_err(|e| Error::io(&self.path, e))
    }
}

fn parse_header(bytes: &[u8], path: &Path, model_id: &str, dim: usize) -> Result<usize> {
    let bad = |what: &str| Error::config(format!("{}: {what}", path.display()));
    let u32_at = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| bad("truncated cache header"))
    };
    if bytes.get(..8) != Some(MAGIC.as_slice()) {
        return Err(bad("not an embedding cache file"));
    }
    if u32_at(8)? != VERSION {
        return Err(bad("unsupported cache version"));
    }
    let id_len = u32_at(12)? as usize;
    let stored_id = bytes
        .get(16..16 + id_len)
        .and_then(|b| std::str::from_utf8(b).ok())
        .ok_or_else(|| bad("truncated cache header"))?;
    if stored_id != model_id {
        return Err(bad(&format!("cache belongs to model {stored_id}, not {model_id}")));
    }
    let stored_dim = u32_at(16 + id_len)? as usize;
    if stored_dim != dim {
        return Err(bad(&format!("cache dimension {stored_dim} differs from {dim}")));
    }
    if u32_at(20 + id_len)? != ELEM_WIDTH {
        return Err(bad("unsupported element width"));
    }
    Ok(24 + id_len)
}

/// Serves cache hits directly and embeds only the misses (each distinct
/// missing text once), preserving input order.
pub fn get_or_embed(
    texts: &[String],
    cache: &EmbeddingCache,
    embedder: &dyn Embedder,
) -> Result<Vec<EmbeddingVector>> {
    let mut out: Vec<Option<EmbeddingVector>> = texts.iter().map(|t| cache.get(t)).collect();
    let mut misses: Vec<String> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for (t, o) in texts.iter().zip(&out) {
        if o.is_none() && !slot.contains_key(t.as_str()) {
            slot.insert(t.as_str(), misses.len());
            misses.push(t.clone());
        }
    }
    if !misses.is_empty() {
        let fresh = embedder.embed_batch(&misses)?;
        for (text, vector) in misses.iter().zip(&fresh) {
            cache.insert(text, vector)?;
        }
        cache.flush()?;
        for (t, o) in texts.iter().zip(out.iter_mut()) {
            if o.is_none() {
                *o = Some(fresh[slot[t.as_str()]].clone());
            }
        }
    }
    Ok(out.into_iter().map(|o| o.expect("filled")).collect())
}

/// Embedder view that routes every batch through [`get_or_embed`].
pub struct CachedEmbedder {
    inner: Arc<dyn Embedder>,
    cache: Arc<EmbeddingCache>,
    counter: QueryCounter,
}

impl CachedEmbedder {
    pub fn new(inner: Arc<dyn Embedder>, cache: Arc<EmbeddingCache>) -> Result<Self> {
        let d = inner.descriptor();
        if d.model_id != cache.model_id || d.dimension != cache.dim {
            return Err(Error::config(format!(
                "cache {} was opened for {} (d={}), embedder is {} (d={})",
                cache.path.display(),
                cache.model_id,
                cache.dim,
                d.model_id,
                d.dimension
            )));
        }
        Ok(Self {
            inner,
            cache,
            counter: QueryCounter::default(),
        })
    }

    pub fn inner(&self) -> &Arc<dyn Embedder> {
        &self.inner
    }
}

impl Embedder for CachedEmbedder {
    fn descriptor(&self) -> &EmbedderDescriptor {
        self.inner.descriptor()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        super::check_batch(texts)?;
        self.counter.add(texts.len());
        get_or_embed(texts, &self.cache, self.inner.as_ref())
    }

    fn queries(&self) -> u64 {
        self.counter.get()
    }

    fn for_job(self: Arc<Self>, _job: u64) -> Arc<dyn Embedder> {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedders::SyntheticEmbedder;

    fn texts(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    fn setup() -> (tempfile::TempDir, SyntheticEmbedder, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.bin");
        (dir, SyntheticEmbedder::new(16, 5), path)
    }

    #[test]
    fn cold_warm_and_mixed() {
        let (_dir, emb, path) = setup();
        let id = emb.descriptor().model_id.clone();
        let cache = EmbeddingCache::open(&path, &id, 16).unwrap();
        let first = get_or_embed(&texts(&["a", "b", "c"]), &cache, &emb).unwrap();
        assert_eq!(emb.queries(), 3);
        assert_eq!(cache.len(), 3);

        get_or_embed(&texts(&["a", "b", "c"]), &cache, &emb).unwrap();
        assert_eq!(emb.queries(), 3);

        let mixed = get_or_embed(&texts(&["c", "d", "a"]), &cache, &emb).unwrap();
        assert_eq!(emb.queries(), 4);
        assert_eq!(mixed[0], first[2]);
        assert_eq!(mixed[2], first[0]);
        assert_eq!(mixed[1], emb.embed_batch(&texts(&["d"])).unwrap()[0]);
    }

    #[test]
    fn reopen_round_trips_bit_exactly() {
        let (_dir, emb, path) = setup();
        let id = emb.descriptor().model_id.clone();
        let stored = {
            let cache = EmbeddingCache::open(&path, &id, 16).unwrap();
            get_or_embed(&texts(&["x y", "z"]), &cache, &emb).unwrap()
        };
        let cache = EmbeddingCache::open(&path, &id, 16).unwrap();
        assert_eq!(cache.get("x y").unwrap(), stored[0]);
        assert_eq!(cache.get("z").unwrap(), stored[1]);
        assert_eq!(cache.corrupt_records(), 0);
    }

    #[test]
    fn corrupt_record_is_skipped_and_reembedded() {
        let (_dir, emb, path) = setup();
        let id = emb.descriptor().model_id.clone();
        {
            let cache = EmbeddingCache::open(&path, &id, 16).unwrap();
            get_or_embed(&texts(&["a", "b"]), &cache, &emb).unwrap();
        }
        let mut bytes = std::fs::read(&path).unwrap();
        let header = 24 + id.len();
        bytes[header + 40] ^= 0xFF;
        // plus a torn trailing write
        bytes.extend_from_slice(&[1, 2, 3]);
        std::fs::write(&path, &bytes).unwrap();

        let cache = EmbeddingCache::open(&path, &id, 16).unwrap();
        assert_eq!(cache.corrupt_records(), 2);
        assert!(cache.get("a").is_none());
        assert!(cache.get("b").is_some());
        let before = emb.queries();
        get_or_embed(&texts(&["a", "b"]), &cache, &emb).unwrap();
        assert_eq!(emb.queries(), before + 1);
        drop(cache);
        let cache = EmbeddingCache::open(&path, &id, 16).unwrap();
        assert!(cache.get("a").is_some());
    }

    #[test]
    fn header_mismatch_is_config_error() {
        let (_dir, emb, path) = setup();
        let id = emb.descriptor().model_id.clone();
        EmbeddingCache::open(&path, &id, 16).unwrap();
        assert!(EmbeddingCache::open(&path, &id, 8).err().unwrap().is_config());
        assert!(EmbeddingCache::open(&path, "other", 16).err().unwrap().is_config());
    }
}
