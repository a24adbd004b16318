//! Corpus pre-processing and sampling.
//!
//! Documents move through the pipeline as plain [`Document`] values:
//! length filtering and splitting ([`filter`]), exact and near-duplicate
//! removal ([`filter::exact_dedup`], [`minhash`]), then tokenisation into
//! per-group pools that the [`mixture`] sampler draws training batches from.

pub mod filter;
pub mod minhash;
pub mod mixture;
pub mod synth;
pub mod vocab;

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::fnv1a64;

pub use filter::{exact_dedup, length_filter, split_overlong, FilterReport};
pub use minhash::{minhash_near_dedup, DedupReport, DuplicatePair, MinHashConfig, MinHasher};
pub use mixture::{mixture_ratios_at, MixtureBatch, MixtureSampler, MixtureSchedule, PoolMode, TokenPool};
pub use vocab::{bytes_per_token, vocab_merge, ByteTokenizer, GreedyTokenizer, MergeReport, Tokenizer};

pub const NUM_GROUPS: usize = 8;

/// The eight data-mixture groups, in schedule column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainGroup {
    GeneralWeb,
    Multilingual,
    Korean,
    Academic,
    Specialized,
    Code,
    Math,
    Reasoning,
}

impl DomainGroup {
    pub const ALL: [DomainGroup; NUM_GROUPS] = [
        DomainGroup::GeneralWeb,
        DomainGroup::Multilingual,
        DomainGroup::Korean,
        DomainGroup::Academic,
        DomainGroup::Specialized,
        DomainGroup::Code,
        DomainGroup::Math,
        DomainGroup::Reasoning,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            DomainGroup::GeneralWeb => "general_web",
            DomainGroup::Multilingual => "multilingual",
            DomainGroup::Korean => "korean",
            DomainGroup::Academic => "academic",
            DomainGroup::Specialized => "specialized",
            DomainGroup::Code => "code",
            DomainGroup::Math => "math",
            DomainGroup::Reasoning => "reasoning",
        }
    }
}

impl fmt::Display for DomainGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DomainGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DomainGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Domain(format!("unknown domain group {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub token_count: usize,
    pub domain_group: DomainGroup,
    pub content_hash: u64,
}

impl Document {
    /// Counts tokens by whitespace splitting.
    pub fn new(id: impl Into<String>, text: impl Into<String>, domain_group: DomainGroup) -> Self {
        let text = text.into();
        let token_count = whitespace_token_count(&text);
        Self::with_token_count(id, text, domain_group, token_count)
    }

    pub fn with_token_count(
        id: impl Into<String>,
        text: impl Into<String>,
        domain_group: DomainGroup,
        token_count: usize,
    ) -> Self {
        let text = text.into();
        Document {
            id: id.into(),
            content_hash: fnv1a64(text.as_bytes()),
            text,
            token_count,
            domain_group,
        }
    }

    /// Recounts tokens with `tokenizer`.
    pub fn retokenized(mut self, tokenizer: &dyn Tokenizer) -> Self {
        self.token_count = tokenizer.encode(&self.text).len();
        self
    }
}

pub fn whitespace_token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocumentRecord {
    id: String,
    text: String,
    domain_group: DomainGroup,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    token_count: Option<usize>,
}

/// Reads one document per line; blank lines are skipped. Errors carry the line number.
pub fn read_jsonl(reader: impl BufRead) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocumentRecord =
            serde_json::from_str(&line).map_err(|e| Error::Domain(format!("corpus line {}: {e}", i + 1)))?;
        docs.push(match rec.token_count {
            Some(n) => Document::with_token_count(rec.id, rec.text, rec.domain_group, n),
            None => Document::new(rec.id, rec.text, rec.domain_group),
        });
    }
    Ok(docs)
}

pub fn write_jsonl<'a>(mut writer: impl Write, docs: impl IntoIterator<Item = &'a Document>) -> Result<()> {
    for d in docs {
        let rec = DocumentRecord {
            id: d.id.clone(),
            text: d.text.clone(),
            domain_group: d.domain_group,
            token_count: Some(d.token_count),
        };
        serde_json::to_writer(&mut writer, &rec)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
