//! Word-level tokenizer shared by the inversion models and the text metrics.
//!
//! Text is pre-tokenized into words and single punctuation marks. Decoding
//! joins tokens with single spaces, so `decode(encode(x))` is the canonical
//! form of `x` that every metric compares against.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

fn word_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| Regex::new(r"<unk>|\w+(?:'\w+)*|[^\w\s]").expect("valid regex"))
}

/// Splits text into words and punctuation marks.
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    word_pattern().find_iter(text).map(|m| m.as_str()).collect()
}

/// A tokenized text: ids plus the detokenized string they stand for.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub text: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct WordTokenizer {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    id: String,
}

impl WordTokenizer {
    /// Builds a tokenizer over `words`; special tokens are prepended.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        for word in words {
            let word = word.into();
            if index.contains_key(&word) {
                continue;
            }
            index.insert(word.clone(), vocab.len() as u32);
            vocab.push(word);
        }
        let mut hasher = Sha256::new();
        for w in &vocab {
            hasher.update(w.as_bytes());
            hasher.update([0u8]);
        }
        let digest = hasher.finalize();
        let id = format!("word:{}", hex_prefix(&digest, 12));
        Self { vocab, index, id }
    }

    /// Vocabulary of the most frequent words in `texts` (ties broken alphabetically).
    pub fn fit<'a, I>(texts: I, max_words: usize, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for text in texts {
            for w in pre_tokenize(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(max_words);
        Self::from_words(ranked.into_iter().map(|(w, _)| w.to_string()))
    }

    /// Tokens `t000 .. t{n-1}` used by the synthetic benchmark.
    pub fn synthetic(n: usize) -> Self {
        Self::from_words((0..n).map(synthetic_word))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = raw.lines();
        for special in SPECIALS {
            match lines.next() {
                Some(l) if l == special => {}
                _ => {
                    return Err(Error::config(format!(
                        "vocabulary {} does not start with the special tokens",
                        path.display()
                    )))
                }
            }
        }
        Ok(Self::from_words(lines.map(str::to_string)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = self.vocab.join("\n");
        out.push('\n');
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Content-addressed identifier; two tokenizers with equal ids are interchangeable.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn words(&self) -> &[String] {
        &self.vocab
    }

    /// Ids of the non-special tokens.
    pub fn content_ids(&self) -> std::ops::Range<u32> {
        SPECIALS.len() as u32..self.vocab.len() as u32
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        pre_tokenize(text)
            .into_iter()
            .map(|w| self.index.get(w).copied().unwrap_or(UNK))
            .collect()
    }

    /// Joins tokens with single spaces; padding and sequence markers are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.token(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn sequence(&self, ids: Vec<u32>) -> TokenSequence {
        let ids: Vec<u32> = ids
            .into_iter()
            .filter(|&id| id != PAD && id != BOS && id != EOS)
            .collect();
        let text = self.decode(&ids);
        TokenSequence { ids, text }
    }

    /// Tokenizes and keeps at most `max_tokens` tokens.
    pub fn tokenize_truncated(&self, text: &str, max_tokens: usize) -> TokenSequence {
        let mut ids = self.encode(text);
        ids.truncate(max_tokens);
        self.sequence(ids)
    }

    pub fn canonicalize(&self, text: &str) -> String {
        self.decode(&self.encode(text))
    }
}

pub fn synthetic_word(i: usize) -> String {
    format!("t{i:03}")
}

pub(crate) fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s.truncate(chars);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_words_and_punctuation() {
        assert_eq!(
            pre_tokenize("there's no reverse, friend!"),
            vec!["there's", "no", "reverse", ",", "friend", "!"]
        );
    }

    #[test]
    fn unknown_words_round_trip_as_unk() {
        let tok = WordTokenizer::from_words(["a", "b"]);
        let ids = tok.encode("a zzz b");
        assert_eq!(ids, vec![4, UNK, 5]);
        let canon = tok.decode(&ids);
        assert_eq!(canon, "a <unk> b");
        assert_eq!(tok.canonicalize(&canon), canon);
    }

    #[test]
    fn truncation_keeps_prefix() {
        let tok = WordTokenizer::synthetic(10);
        let seq = tok.tokenize_truncated("t001 t002 t003", 2);
        assert_eq!(seq.text, "t001 t002");
        assert_eq!(tok.tokenize_truncated(&seq.text, 2), seq);
    }

    #[test]
    fn id_depends_on_vocabulary() {
        let a = WordTokenizer::from_words(["x", "y"]);
        let b = WordTokenizer::from_words(["y", "x"]);
        assert_ne!(a.id(), b.id());
        assert_eq!(a.id(), WordTokenizer::from_words(["x", "y"]).id());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let tok = WordTokenizer::fit(["b a a", "c a b"], 10, 1);
        assert_eq!(&tok.words()[4..], &["a", "b", "c"]);
        tok.save(&path).unwrap();
        let loaded = WordTokenizer::load(&path).unwrap();
        assert_eq!(loaded.id(), tok.id());
    }
}
