//! MinHash signatures with LSH banding for near-duplicate detection.
//!
//! Every LSH candidate pair is re-checked with exact Jaccard similarity over
//! the shingle sets before it can remove anything, so banding only affects
//! recall.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Document;
use crate::error::{Error, Result};
use crate::hash::{fnv1a64, fnv1a64_extend, mix64};

/// Mersenne prime 2⁶¹ − 1, the modulus of the hash permutations.
const P61: u64 = (1 << 61) - 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MinHashConfig {
    /// Whitespace tokens per shingle.
    pub shingle_size: usize,
    pub num_hashes: usize,
    pub bands: usize,
    pub rows: usize,
    pub jaccard_threshold: f64,
    pub seed: u64,
}

impl Default for MinHashConfig {
    fn default() -> Self {
        MinHashConfig {
            shingle_size: 5,
            num_hashes: 128,
            bands: 16,
            rows: 8,
            jaccard_threshold: 0.9,
            seed: 0,
        }
    }
}

impl MinHashConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shingle_size == 0 {
            return Err(Error::config("minhash.shingle_size", "must be positive"));
        }
        if self.num_hashes == 0 || self.bands * self.rows != self.num_hashes {
            return Err(Error::config(
                "minhash.bands",
                format!(
                    "bands × rows = {} × {} must equal num_hashes = {}",
                    self.bands, self.rows, self.num_hashes
                ),
            ));
        }
        if !(self.jaccard_threshold > 0.0 && self.jaccard_threshold <= 1.0) {
            return Err(Error::config("minhash.jaccard_threshold", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// A seeded family of `num_hashes` permutations `x ↦ (a·x + b) mod (2⁶¹ − 1)`.
#[derive(Debug, Clone)]
pub struct MinHasher {
    cfg: MinHashConfig,
    coeffs: Vec<(u64, u64)>,
}

impl MinHasher {
    pub fn new(cfg: MinHashConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let coeffs = (0..cfg.num_hashes)
            .map(|_| (rng.random_range(1..P61), rng.random_range(0..P61)))
            .collect();
        Ok(MinHasher { cfg, coeffs })
    }

    pub fn config(&self) -> &MinHashConfig {
        &self.cfg
    }

    /// Sorted, de-duplicated hashes of every window of `shingle_size`
    /// whitespace tokens. Empty when the text is shorter than one shingle.
    pub fn shingles(&self, text: &str) -> Vec<u64> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        let k = self.cfg.shingle_size;
        if tokens.len() < k {
            return Vec::new();
        }
        let mut out: Vec<u64> = tokens
            .windows(k)
            .map(|w| {
                w.iter().fold(fnv1a64(b"shingle"), |h, t| {
                    fnv1a64_extend(fnv1a64_extend(h, t.as_bytes()), &[0x1f])
                })
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Per-permutation minima; `None` for an empty set.
    pub fn signature(&self, shingles: &[u64]) -> Option<Vec<u64>> {
        if shingles.is_empty() {
            return None;
        }
        let xs: Vec<u64> = shingles.iter().map(|&s| mix64(s) % P61).collect();
        Some(
            self.coeffs
                .iter()
                .map(|&(a, b)| xs.iter().map(|&x| permute(a, b, x)).min().expect("non-empty"))
                .collect(),
        )
    }

    /// Fraction of agreeing signature slots, an unbiased Jaccard estimate.
    pub fn estimate(a: &[u64], b: &[u64]) -> f64 {
        let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
        same as f64 / a.len().max(1) as f64
    }

    fn band_keys<'a>(&'a self, sig: &'a [u64]) -> impl Iterator<Item = (usize, u64)> + 'a {
        sig.chunks_exact(self.cfg.rows).enumerate().map(|(band, rows)| {
            let key = rows.iter().fold(fnv1a64(&(band as u64).to_le_bytes()), |h, v| {
                fnv1a64_extend(h, &v.to_le_bytes())
            });
            (band, key)
        })
    }
}

fn permute(a: u64, b: u64, x: u64) -> u64 {
    let v = (a as u128) * (x as u128) + b as u128;
    // fold twice: v < 2¹²² so one fold leaves < 2⁶², the second < 2⁶¹ + 1
    let r = (v & P61 as u128) + (v >> 61);
    let r = (r & P61 as u128) + (r >> 61);
    let r = r as u64;
    if r >= P61 {
        r - P61
    } else {
        r
    }
}

/// Exact Jaccard similarity of two sorted, de-duplicated sets.
pub fn jaccard(a: &[u64], b: &[u64]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    inter as f64 / (a.len() + b.len() - inter) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct DuplicatePair {
    pub id_a: String,
    pub id_b: String,
    pub jaccard: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DedupReport {
    /// Verified pairs with similarity at or above the threshold; `id_a` precedes `id_b`.
    pub pairs: Vec<DuplicatePair>,
    /// LSH candidate pairs that reached exact verification.
    pub candidates: usize,
    pub removed: usize,
    /// Documents with no shingles; they pass through untouched.
    pub flagged_empty: Vec<String>,
}

impl DedupReport {
    /// Writes `id_a,id_b,jaccard`.
    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["id_a", "id_b", "jaccard"])?;
        for p in &self.pairs {
            w.write_record([p.id_a.as_str(), p.id_b.as_str(), &p.jaccard.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Removes near-duplicates: every connected component of verified pairs
/// collapses to its earliest document. Output keeps input order.
pub fn minhash_near_dedup(docs: Vec<Document>, cfg: &MinHashConfig) -> Result<(Vec<Document>, DedupReport)> {
    let hasher = MinHasher::new(cfg.clone())?;
    let shingles: Vec<Vec<u64>> = docs.par_iter().map(|d| hasher.shingles(&d.text)).collect();
    let sigs: Vec<Option<Vec<u64>>> = shingles.par_iter().map(|s| hasher.signature(s)).collect();

    let mut buckets: HashMap<(usize, u64), Vec<usize>> = HashMap::new();
    for (i, sig) in sigs.iter().enumerate() {
        if let Some(sig) = sig {
            for key in hasher.band_keys(sig) {
                buckets.entry(key).or_default().push(i);
            }
        }
    }
    let mut candidates = BTreeSet::new();
    for members in buckets.values() {
        for (x, &i) in members.iter().enumerate() {
            for &j in &members[x + 1..] {
                candidates.insert((i.min(j), i.max(j)));
            }
        }
    }

    let candidates: Vec<(usize, usize)> = candidates.into_iter().collect();
    let verified: Vec<(usize, usize, f64)> = candidates
        .par_iter()
        .filter_map(|&(i, j)| {
            let jac = jaccard(&shingles[i], &shingles[j]);
            (jac >= cfg.jaccard_threshold).then_some((i, j, jac))
        })
        .collect();

    let mut parent: Vec<usize> = (0..docs.len()).collect();
    for &(i, j, _) in &verified {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        // the smaller index stays the root, so each component keeps its earliest member
        let (lo, hi) = (ri.min(rj), ri.max(rj));
        parent[hi] = lo;
    }
    let keep: Vec<bool> = (0..docs.len()).map(|i| find(&mut parent, i) == i).collect();

    let report = DedupReport {
        pairs: verified
            .iter()
            .map(|&(i, j, jac)| DuplicatePair {
                id_a: docs[i].id.clone(),
                id_b: docs[j].id.clone(),
                jaccard: jac,
            })
            .collect(),
        candidates: candidates.len(),
        removed: keep.iter().filter(|&&k| !k).count(),
        flagged_empty: docs
            .iter()
            .zip(&sigs)
            .filter(|(_, s)| s.is_none())
            .map(|(d, _)| d.id.clone())
            .collect(),
    };
    let kept = docs.into_iter().zip(keep).filter_map(|(d, k)| k.then_some(d)).collect();
    Ok((kept, report))
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DomainGroup;

    fn doc(id: &str, words: &[String]) -> Document {
        Document::new(id, words.join(" "), DomainGroup::GeneralWeb)
    }

    fn words(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn config_validation() {
        assert!(MinHashConfig::default().validate().is_ok());
        let bad = MinHashConfig {
            bands: 10,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = MinHashConfig {
            jaccard_threshold: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn permutation_matches_bigint_oracle() {
        for (a, b, x) in [(P61 - 1, P61 - 1, P61 - 1), (3, 5, 7), (1 << 60, 12345, (1 << 61) - 2)] {
            let want = ((a as u128 * x as u128 + b as u128) % P61 as u128) as u64;
            assert_eq!(permute(a, b, x), want);
        }
    }

    #[test]
    fn jaccard_oracle() {
        assert_eq!(jaccard(&[1, 2, 3], &[2, 3, 4]), 0.5);
        assert_eq!(jaccard(&[1], &[2]), 0.0);
        assert_eq!(jaccard(&[5, 6], &[5, 6]), 1.0);
    }

    #[test]
    fn identical_documents_collapse() {
        let w = words("w", 40);
        let docs = vec![doc("a", &w), doc("b", &w)];
        let h = MinHasher::new(MinHashConfig::default()).unwrap();
        let s = h.shingles(&docs[0].text);
        assert_eq!(h.signature(&s), h.signature(&h.shingles(&docs[1].text)));
        let (kept, report) = minhash_near_dedup(docs, &MinHashConfig::default()).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].id, "a");
        assert_eq!(
            report.pairs,
            vec![DuplicatePair {
                id_a: "a".into(),
                id_b: "b".into(),
                jaccard: 1.0
            }]
        );
    }

    #[test]
    fn disjoint_documents_survive() {
        let docs = vec![doc("a", &words("x", 50)), doc("b", &words("y", 50))];
        let h = MinHasher::new(MinHashConfig::default()).unwrap();
        let sa = h.signature(&h.shingles(&docs[0].text)).unwrap();
        let sb = h.signature(&h.shingles(&docs[1].text)).unwrap();
        assert!(MinHasher::estimate(&sa, &sb) < 0.05);
        let (kept, report) = minhash_near_dedup(docs, &MinHashConfig::default()).unwrap();
        assert_eq!(kept.len(), 2);
        assert!(report.pairs.is_empty());
    }

    #[test]
    fn short_documents_are_flagged_and_kept() {
        let docs = vec![doc("tiny", &words("t", 3)), doc("tiny2", &words("t", 3))];
        let (kept, report) = minhash_near_dedup(docs, &MinHashConfig::default()).unwrap();
        assert_eq!(kept.len(), 2);
        assert_eq!(report.flagged_empty, vec!["tiny", "tiny2"]);
    }

    #[test]
    fn chains_collapse_to_earliest() {
        // b is near both a and c; the whole component keeps only a
        let base = words("w", 400);
        let mut b = base.clone();
        b[100] = "zz1".into();
        let mut c = b.clone();
        c[300] = "zz2".into();
        let docs = vec![doc("a", &base), doc("b", &b), doc("c", &c)];
        let (kept, report) = minhash_near_dedup(docs, &MinHashConfig::default()).unwrap();
        assert_eq!(kept.iter().map(|d| d.id.as_str()).collect::<Vec<_>>(), ["a"]);
        assert_eq!(report.removed, 2);
    }

    #[test]
    fn csv_report_header() {
        let r = DedupReport {
            pairs: vec![DuplicatePair {
                id_a: "a".into(),
                id_b: "b".into(),
                jaccard: 0.95,
            }],
            ..Default::default()
        };
        let mut out = Vec::new();
        r.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "id_a,id_b,jaccard\na,b,0.95\n");
    }
}
