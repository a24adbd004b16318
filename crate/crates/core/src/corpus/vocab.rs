//! Vocabulary merging and the tokenizers used for length accounting.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<u32>;
    fn vocab_size(&self) -> usize;
}

/// One token per UTF-8 byte; ids `0..256`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    fn vocab_size(&self) -> usize {
        256
    }
}

impl ByteTokenizer {
    /// Lossy inverse of [`Tokenizer::encode`]; ids above 255 are skipped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids.iter().filter_map(|&i| u8::try_from(i).ok()).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

/// Longest-match tokenizer over a string vocabulary with byte fallback.
/// Ids `0..256` are raw bytes; vocabulary entries follow in order.
#[derive(Debug, Clone)]
pub struct GreedyTokenizer {
    pieces: HashMap<Vec<u8>, u32>,
    max_len: usize,
    size: usize,
}

impl GreedyTokenizer {
    pub fn new<S: AsRef<str>>(vocab: &[S]) -> Self {
        let mut pieces = HashMap::new();
        let mut next = 256u32;
        for v in vocab {
            let b = v.as_ref().as_bytes();
            if b.len() >= 2 && !pieces.contains_key(b) {
                pieces.insert(b.to_vec(), next);
                next += 1;
            }
        }
        let max_len = pieces.keys().map(Vec::len).max().unwrap_or(1);
        GreedyTokenizer {
            pieces,
            max_len,
            size: next as usize,
        }
    }
}

impl Tokenizer for GreedyTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        let b = text.as_bytes();
        let mut out = Vec::new();
        let mut i = 0;
        while i < b.len() {
            let longest = (2..=self.max_len.min(b.len() - i))
                .rev()
                .find_map(|l| self.pieces.get(&b[i..i + l]).map(|&id| (id, l)));
            match longest {
                Some((id, l)) => {
                    out.push(id);
                    i += l;
                }
                None => {
                    out.push(u32::from(b[i]));
                    i += 1;
                }
            }
        }
        out
    }

    fn vocab_size(&self) -> usize {
        self.size
    }
}

/// UTF-8 bytes per token.
pub fn bytes_per_token(text: &str, tokenizer: &dyn Tokenizer) -> Result<f64> {
    if text.is_empty() {
        return Err(Error::Empty("bytes_per_token needs non-empty text".into()));
    }
    Ok(text.len() as f64 / tokenizer.encode(text).len() as f64)
}

/// Relative bytes-per-token gain of `new` over `old`: `(new − old) / old`.
pub fn bytes_per_token_gain(old: f64, new: f64) -> f64 {
    (new - old) / old
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MergeReport {
    pub base: usize,
    pub additions_offered: usize,
    pub additions_new: usize,
    pub special_offered: usize,
    pub special_new: usize,
    pub total: usize,
}

/// A merged vocabulary: `tokens[id]` is the token string for `id`.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedVocab {
    pub tokens: Vec<String>,
    pub report: MergeReport,
}

impl MergedVocab {
    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }
}

/// Union of `base`, `additions` and `special`. Base ids are kept; new
/// entries are appended in first-seen order, additions before specials.
/// A base list that names one token twice cannot keep both ids and is
/// rejected.
pub fn vocab_merge<S: AsRef<str>>(base: &[S], additions: &[S], special: &[S]) -> Result<MergedVocab> {
    let mut index: HashSet<&str> = HashSet::with_capacity(base.len() + additions.len() + special.len());
    let mut tokens = Vec::with_capacity(base.len() + additions.len() + special.len());
    for (id, t) in base.iter().enumerate() {
        let t = t.as_ref();
        if !index.insert(t) {
            let first = tokens.iter().position(|x: &String| x == t).expect("seen before");
            return Err(Error::Integrity(format!(
                "base token {t:?} assigned both id {first} and id {id}"
            )));
        }
        tokens.push(t.to_string());
    }
    let mut fresh = [0usize; 2];
    for (count, list) in fresh.iter_mut().zip([additions, special]) {
        for t in list {
            let t = t.as_ref();
            if index.insert(t) {
                tokens.push(t.to_string());
                *count += 1;
            }
        }
    }
    let [additions_new, special_new] = fresh;
    let total = tokens.len();
    Ok(MergedVocab {
        tokens,
        report: MergeReport {
            base: base.len(),
            additions_offered: additions.len(),
            additions_new,
            special_offered: special.len(),
            special_new,
            total,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn union_sizes() {
        let m = vocab_merge(&["a", "b"], &["b", "c"], &[]).unwrap();
        assert_eq!(m.tokens, ["a", "b", "c"]);
        assert_eq!(m.report.total, 3);
        let same = vocab_merge(&["x", "y"], &["x", "y"], &[]).unwrap();
        assert_eq!(same.tokens, ["x", "y"]);
        assert_eq!(same.report.additions_new, 0);
    }

    #[test]
    fn base_ids_are_preserved_and_order_is_first_seen() {
        let m = vocab_merge(&["q", "r"], &["z", "a", "z", "q"], &["<s>", "a"]).unwrap();
        assert_eq!(m.tokens, ["q", "r", "z", "a", "<s>"]);
        assert_eq!(m.id_of("q"), Some(0));
        assert_eq!(m.report.special_new, 1);
    }

    #[test]
    fn conflicting_base_is_an_integrity_error() {
        assert!(matches!(
            vocab_merge(&["a", "b", "a"], &[], &[]),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn bytes_per_token_arithmetic() {
        let text = "abcd".repeat(25);
        let tok = GreedyTokenizer::new(&["abcd"]);
        assert_eq!(bytes_per_token(&text, &tok).unwrap(), 4.0);
        let one = GreedyTokenizer::new(&["hello"]);
        assert_eq!(bytes_per_token("hello", &one).unwrap(), 5.0);
        assert!(bytes_per_token("", &ByteTokenizer).is_err());
    }

    #[test]
    fn greedy_prefers_longest_and_falls_back_to_bytes() {
        let tok = GreedyTokenizer::new(&["ab", "abc", "한국"]);
        assert_eq!(tok.encode("abcab"), vec![257, 256]);
        assert_eq!(tok.encode("x한국"), vec![u32::from(b'x'), 258]);
        let bytes = tok.encode("한");
        assert_eq!(bytes.len(), 3);
        assert_eq!(tok.vocab_size(), 259);
    }

    #[test]
    fn byte_round_trip() {
        let s = "héllo 세계";
        assert_eq!(ByteTokenizer.decode(&ByteTokenizer.encode(s)), s);
    }
}
