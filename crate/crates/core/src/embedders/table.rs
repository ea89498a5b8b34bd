use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use super::{check_batch, input_words, Embedder, EmbedderDescriptor, EmbedderKind, EmbeddingVector, QueryCounter};
use crate::error::{Error, Result};

/// Mean-pooled word-vector encoder loaded from a whitespace-separated text
/// file (`word v1 v2 ... vd` per line, GloVe style). Out-of-table words are
/// skipped; if none of a text's words are known the `<unk>` row is used.
pub struct TableEncoder {
    descriptor: EmbedderDescriptor,
    table: HashMap<String, Vec<f32>>,
    counter: QueryCounter,
}

impl TableEncoder {
    pub fn load(path: &Path, unit_norm: bool, max_input_tokens: usize) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table = HashMap::new();
        let mut dim = None;
        for (lineno, line) in raw.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let values = parts
                .map(str::parse::<f32>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::config(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(Error::config(format!(
                        "{}:{}: expected {d} values, found {}",
                        path.display(),
                        lineno + 1,
                        values.len()
                    )))
                }
                _ => {}
            }
            table.insert(word.to_string(), values);
        }
        let dimension = dim.filter(|&d| d > 0).ok_or_else(|| {
            Error::config(format!("{} holds no word vectors", path.display()))
        })?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("table");
        let descriptor = EmbedderDescriptor {
            model_id: format!("table:{stem}-d{dimension}{}", if unit_norm { "-l2" } else { "" }),
            dimension,
            unit_norm,
            max_input_tokens,
            kind: EmbedderKind::LocalEncoder,
            empty_substitute: Some("<unk>".to_string()),
        };
        descriptor.validate()?;
        Ok(Self {
            descriptor,
            table,
            counter: QueryCounter::default(),
        })
    }

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector> {
        let d = self.descriptor.dimension;
        let mut acc = vec![0.0f64; d];
        let mut n = 0usize;
        for w in input_words(text, self.descriptor.max_input_tokens, &self.descriptor.model_id) {
            if let Some(row) = self.table.get(w) {
                acc.iter_mut().zip(row).for_each(|(a, &r)| *a += f64::from(r));
                n += 1;
            }
        }
        if n == 0 {
            let unk = self.table.get("<unk>").ok_or_else(|| {
                Error::contract(format!("no known words in {text:?} and no <unk> row"))
            })?;
            acc.iter_mut().zip(unk).for_each(|(a, &r)| *a = f64::from(r));
            n = 1;
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
        if self.descriptor.unit_norm {
            let norm = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 0.0 {
                acc.iter_mut().for_each(|a| *a /= norm);
            }
        }
        EmbeddingVector::new(
            acc.into_iter().map(|a| a as f32).collect(),
            self.descriptor.model_id.clone(),
        )
    }
}

impl Embedder for TableEncoder {
    fn descriptor(&self) -> &EmbedderDescriptor {
        &self.descriptor
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        check_batch(texts)?;
        self.counter.add(texts.len());
        texts.iter().map(|t| self.embed_one(t)).collect()
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

    #[test]
    fn mean_pools_known_words() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vecs.txt");
        std::fs::write(&path, "a 1 0\nb 0 2\n<unk> 1 1\n").unwrap();
        let enc = TableEncoder::load(&path, false, 16).unwrap();
        let out = enc
            .embed_batch(&["a b".into(), "a zzz".into(), "zzz".into()])
            .unwrap();
        assert_eq!(out[0].values, vec![0.5, 1.0]);
        assert_eq!(out[1].values, vec![1.0, 0.0]);
        assert_eq!(out[2].values, vec![1.0, 1.0]);
    }

    #[test]
    fn rejects_ragged_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "a 1 0\nb 0\n").unwrap();
        assert!(TableEncoder::load(&path, true, 16).err().unwrap().is_config());
    }
}
