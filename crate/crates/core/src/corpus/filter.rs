use std::collections::HashMap;

use super::Document;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FilterReport {
    pub kept: usize,
    pub dropped_short: usize,
    pub dropped_long: usize,
}

/// Keeps documents with `min_tokens <= token_count <= max_tokens`.
pub fn length_filter(
    docs: impl IntoIterator<Item = Document>,
    min_tokens: usize,
    max_tokens: usize,
) -> Result<(Vec<Document>, FilterReport)> {
    if min_tokens > max_tokens {
        return Err(Error::config(
            "length_filter",
            format!("min_tokens {min_tokens} exceeds max_tokens {max_tokens}"),
        ));
    }
    let mut report = FilterReport::default();
    let kept = docs
        .into_iter()
        .filter(|d| {
            if d.token_count < min_tokens {
                report.dropped_short += 1;
                false
            } else if d.token_count > max_tokens {
                report.dropped_long += 1;
                false
            } else {
                report.kept += 1;
                true
            }
        })
        .collect();
    Ok((kept, report))
}

/// Cuts a document into consecutive whitespace-token chunks of at most
/// `max_tokens`. Chunk ids are `"{id}#{k}"`; a document that already fits
/// is returned unchanged.
pub fn split_overlong(doc: Document, max_tokens: usize) -> Result<Vec<Document>> {
    if max_tokens == 0 {
        return Err(Error::config("max_tokens", "must be positive"));
    }
    let starts: Vec<usize> = token_starts(&doc.text);
    if starts.len() <= max_tokens {
        return Ok(vec![doc]);
    }
    let bounds: Vec<usize> = starts.iter().step_by(max_tokens).copied().collect();
    let mut out = Vec::with_capacity(bounds.len());
    for (k, &start) in bounds.iter().enumerate() {
        let end = bounds.get(k + 1).copied().unwrap_or(doc.text.len());
        let text = doc.text[start..end].trim_end();
        out.push(Document::new(format!("{}#{k}", doc.id), text, doc.domain_group));
    }
    Ok(out)
}

fn token_starts(text: &str) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut prev_ws = true;
    for (i, c) in text.char_indices() {
        let ws = c.is_whitespace();
        if prev_ws && !ws {
            starts.push(i);
        }
        prev_ws = ws;
    }
    starts
}

/// Drops later documents whose text is byte-identical to an earlier one.
/// Returns the survivors in input order and the number removed.
pub fn exact_dedup(docs: impl IntoIterator<Item = Document>) -> (Vec<Document>, usize) {
    let mut seen: HashMap<u64, Vec<usize>> = HashMap::new();
    let mut kept: Vec<Document> = Vec::new();
    let mut removed = 0;
    for d in docs {
        let bucket = seen.entry(d.content_hash).or_default();
        if bucket.iter().any(|&i| kept[i].text == d.text) {
            removed += 1;
            continue;
        }
        bucket.push(kept.len());
        kept.push(d);
    }
    (kept, removed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DomainGroup;

    fn doc_with(n: usize) -> Document {
        let text = vec!["tok"; n].join(" ");
        Document::new(format!("d{n}"), text, DomainGroup::GeneralWeb)
    }

    #[test]
    fn short_threshold_boundary() {
        let (kept, r) = length_filter([doc_with(23), doc_with(24)], 24, 4096).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].token_count, 24);
        assert_eq!(
            r,
            FilterReport {
                kept: 1,
                dropped_short: 1,
                dropped_long: 0
            }
        );
    }

    #[test]
    fn vacuous_filter_keeps_everything() {
        let docs: Vec<_> = (0..10).map(doc_with).collect();
        let (kept, _) = length_filter(docs.clone(), 0, usize::MAX).unwrap();
        assert_eq!(kept, docs);
        assert!(length_filter(docs, 5, 4).is_err());
    }

    #[test]
    fn split_preserves_tokens() {
        let d = Document::new("x", "a b  c\nd e f g", DomainGroup::Code);
        let parts = split_overlong(d, 3).unwrap();
        let texts: Vec<&str> = parts.iter().map(|p| p.text.as_str()).collect();
        assert_eq!(texts, ["a b  c", "d e f", "g"]);
        assert_eq!(parts[1].id, "x#1");
        assert!(parts.iter().all(|p| p.token_count <= 3));
        let short = doc_with(3);
        assert_eq!(split_overlong(short.clone(), 3).unwrap(), vec![short]);
    }

    #[test]
    fn exact_dedup_keeps_first() {
        let a = Document::new("1", "same", DomainGroup::Math);
        let b = Document::new("2", "other", DomainGroup::Math);
        let a2 = Document::new("3", "same", DomainGroup::Code);
        let (kept, removed) = exact_dedup([a.clone(), b.clone(), a2]);
        assert_eq!(kept, vec![a, b]);
        assert_eq!(removed, 1);
    }
}
