//! A deterministic byte/whitespace hybrid tokenizer over a small fixed
//! vocabulary: whitespace-separated words found in the vocabulary get single
//! ids, anything else falls back to raw bytes. Linguistic quality is a
//! non-goal; reproducibility is the point.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Start symbol ⟨s⟩, fixed at id 0 and expected at index 0 of examples.
pub const START: usize = 0;
pub const SEP: usize = 1;
pub const CLS: usize = 2;
pub const MASK: usize = 3;
/// Span sentinels, in assignment order.
pub const SENTINELS: [usize; 3] = [4, 5, 6];
pub const PAD: usize = 7;
/// Ids below this are special and never produced from text.
pub const RESERVED: usize = 8;

const SPECIAL_NAMES: [&str; RESERVED] =
    ["<s>", "[SEP]", "[CLS]", "[MASK]", "[X]", "[Y]", "[Z]", "[PAD]"];

/// Byte ids occupy RESERVED..RESERVED+256; word ids follow.
const BYTE_BASE: usize = RESERVED;
const WORD_BASE: usize = RESERVED + 256;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Tokenizer {
    /// Learn the `max_words` most frequent whitespace-separated words from
    /// the corpus; ties break lexicographically so builds are reproducible.
    pub fn build(corpus: &[&str], max_words: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for line in corpus {
            for w in line.split_whitespace() {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(max_words);
        let mut words: Vec<String> = ranked.into_iter().map(|(w, _)| w.to_string()).collect();
        words.sort();
        let mut t = Tokenizer { words, index: HashMap::new() };
        t.rebuild_index();
        t
    }

    /// Restore the word→id map after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index =
            self.words.iter().enumerate().map(|(i, w)| (w.clone(), WORD_BASE + i)).collect();
    }

    /// Total id space: specials, bytes, then learned words.
    pub fn vocab_size(&self) -> usize {
        WORD_BASE + self.words.len()
    }

    pub fn word_id(&self, w: &str) -> Option<usize> {
        self.index.get(w).copied()
    }

    /// Encode text: known words become single ids, unknown words byte runs.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for w in text.split_whitespace() {
            match self.index.get(w) {
                Some(&id) => out.push(id),
                None => out.extend(w.bytes().map(|b| BYTE_BASE + b as usize)),
            }
        }
        out
    }

    /// Decode ids back to text. Contiguous byte ids merge into one word;
    /// words and specials are space-separated.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut parts: Vec<String> = Vec::new();
        let mut bytes: Vec<u8> = Vec::new();
        let flush = |bytes: &mut Vec<u8>, parts: &mut Vec<String>| {
            if !bytes.is_empty() {
                parts.push(String::from_utf8_lossy(bytes).into_owned());
                bytes.clear();
            }
        };
        for &id in ids {
            if id < RESERVED {
                flush(&mut bytes, &mut parts);
                parts.push(SPECIAL_NAMES[id].to_string());
            } else if id < WORD_BASE {
                bytes.push((id - BYTE_BASE) as u8);
            } else if id - WORD_BASE < self.words.len() {
                flush(&mut bytes, &mut parts);
                parts.push(self.words[id - WORD_BASE].clone());
            } else {
                return Err(Error::TokenRange { id, vocab: self.vocab_size() });
            }
        }
        flush(&mut bytes, &mut parts);
        Ok(parts.join(" "))
    }
}
