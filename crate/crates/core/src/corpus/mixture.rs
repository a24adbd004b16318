//! Linear data-mixture schedule and the batch sampler that follows it.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Document, DomainGroup, Tokenizer, NUM_GROUPS};
use crate::error::{Error, Result};

const SUM_TOLERANCE: f64 = 1e-9;

/// Group ratios at the start and end of the schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSchedule {
    pub initial_ratios: [f64; NUM_GROUPS],
    pub final_ratios: [f64; NUM_GROUPS],
}

impl Default for MixtureSchedule {
    fn default() -> Self {
        Self::pretraining()
    }
}

impl MixtureSchedule {
    /// Stage-1 pre-training mixture.
    pub fn pretraining() -> Self {
        MixtureSchedule {
            initial_ratios: [0.68, 0.07, 0.01, 0.06, 0.05, 0.10, 0.02, 0.01],
            final_ratios: [0.33, 0.00, 0.30, 0.03, 0.01, 0.18, 0.10, 0.05],
        }
    }

    pub fn constant(ratios: [f64; NUM_GROUPS]) -> Self {
        MixtureSchedule {
            initial_ratios: ratios,
            final_ratios: ratios,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("initial_ratios", &self.initial_ratios),
            ("final_ratios", &self.final_ratios),
        ] {
            if let Some(g) = r.iter().position(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::config(
                    format!("mixture.{name}[{g}]"),
                    format!("{} must be a finite non-negative number", r[g]),
                ));
            }
            let sum: f64 = r.iter().sum();
            if (sum - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::config(
                    format!("mixture.{name}"),
                    format!("ratios sum to {sum}, not 1"),
                ));
            }
        }
        Ok(())
    }

    /// Writes `progress,ratio_0..ratio_7` at `points` evenly spaced progress values.
    pub fn write_manifest(&self, points: usize, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["progress".to_string()];
        header.extend((0..NUM_GROUPS).map(|g| format!("ratio_{g}")));
        w.write_record(&header)?;
        for k in 0..points {
            let p = if points == 1 {
                0.0
            } else {
                k as f64 / (points - 1) as f64
            };
            let r = mixture_ratios_at(p, self)?;
            let mut row = vec![p.to_string()];
            row.extend(r.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `(1 − p)·initial + p·final`, which reproduces both endpoint rows exactly.
pub fn mixture_ratios_at(progress: f64, sched: &MixtureSchedule) -> Result<[f64; NUM_GROUPS]> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(Error::Domain(format!("mixture progress {progress} outside [0, 1]")));
    }
    Ok(std::array::from_fn(|g| {
        (1.0 - progress) * sched.initial_ratios[g] + progress * sched.final_ratios[g]
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// Wraps around at the end, so the pool never runs dry.
    #[default]
    Cycle,
    /// Each token is served once; the pool is exhausted afterwards.
    Once,
}

/// A group's token stream, read as consecutive windows.
#[derive(Debug, Clone)]
pub struct TokenPool {
    tokens: Vec<u32>,
    cursor: usize,
    mode: PoolMode,
}

impl TokenPool {
    pub fn new(tokens: Vec<u32>, mode: PoolMode) -> Self {
        TokenPool {
            tokens,
            cursor: 0,
            mode,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// How many more `seq`-token training windows the pool can serve.
    pub fn capacity(&self, seq: usize) -> usize {
        match self.mode {
            _ if self.tokens.is_empty() => 0,
            PoolMode::Cycle => usize::MAX,
            PoolMode::Once => {
                let left = self.tokens.len() - self.cursor;
                if left > seq {
                    (left - 1) / seq
                } else {
                    0
                }
            }
        }
    }

    /// `seq + 1` tokens (inputs plus shifted targets); the cursor advances by `seq`.
    fn take_window(&mut self, seq: usize) -> Option<Vec<u32>> {
        if self.capacity(seq) == 0 {
            return None;
        }
        let n = self.tokens.len();
        let out = (0..=seq).map(|i| self.tokens[(self.cursor + i) % n]).collect();
        self.cursor = match self.mode {
            PoolMode::Cycle => (self.cursor + seq) % n,
            PoolMode::Once => self.cursor + seq,
        };
        Some(out)
    }
}

/// Concatenates each group's tokenised documents, separated by `separator`.
pub fn group_token_streams(
    docs: &[Document],
    tokenizer: &dyn Tokenizer,
    separator: Option<u32>,
) -> [Vec<u32>; NUM_GROUPS] {
    let mut streams: [Vec<u32>; NUM_GROUPS] = Default::default();
    for d in docs {
        let s = &mut streams[d.domain_group.index()];
        if let (Some(sep), false) = (separator, s.is_empty()) {
            s.push(sep);
        }
        s.extend(tokenizer.encode(&d.text));
    }
    streams
}

/// One training batch laid out `[n_seqs, seq_len]`, sequences grouped by domain.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureBatch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub seq_len: usize,
    pub n_seqs: usize,
    pub group_counts: [usize; NUM_GROUPS],
    /// Realized token fraction per group.
    pub realized: [f64; NUM_GROUPS],
    /// Target ratios after renormalising over groups that still have data.
    pub target_ratios: [f64; NUM_GROUPS],
}

/// Draws sequence-aligned batches whose group composition follows the schedule.
#[derive(Debug, Clone)]
pub struct MixtureSampler {
    schedule: MixtureSchedule,
    pools: Vec<TokenPool>,
    seq_len: usize,
    rng: ChaCha8Rng,
}

impl MixtureSampler {
    pub fn new(schedule: MixtureSchedule, pools: Vec<TokenPool>, seq_len: usize, seed: u64) -> Result<Self> {
        schedule.validate()?;
        if pools.len() != NUM_GROUPS {
            return Err(Error::config(
                "pools",
                format!("expected {NUM_GROUPS} pools, got {}", pools.len()),
            ));
        }
        if seq_len == 0 {
            return Err(Error::config("seq_len", "must be positive"));
        }
        Ok(MixtureSampler {
            schedule,
            pools,
            seq_len,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn from_documents(
        schedule: MixtureSchedule,
        docs: &[Document],
        tokenizer: &dyn Tokenizer,
        separator: Option<u32>,
        mode: PoolMode,
        seq_len: usize,
        seed: u64,
    ) -> Result<Self> {
        let pools = group_token_streams(docs, tokenizer, separator)
            .into_iter()
            .map(|t| TokenPool::new(t, mode))
            .collect();
        Self::new(schedule, pools, seq_len, seed)
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn schedule(&self) -> &MixtureSchedule {
        &self.schedule
    }

    pub fn pool(&self, group: DomainGroup) -> &TokenPool {
        &self.pools[group.index()]
    }

    /// Samples `batch_tokens / seq_len` sequences at schedule position `progress`.
    ///
    /// Sequence counts use systematic rounding, so every group gets the floor
    /// or ceiling of its expected count and the expectation is exact. Groups
    /// that run out are capped and their share is redistributed
    /// proportionally over the rest.
    pub fn sample(&mut self, progress: f64, batch_tokens: usize) -> Result<MixtureBatch> {
        if batch_tokens == 0 || !batch_tokens.is_multiple_of(self.seq_len) {
            return Err(Error::config(
                "batch_tokens",
                format!("{batch_tokens} is not a positive multiple of seq_len {}", self.seq_len),
            ));
        }
        let n = batch_tokens / self.seq_len;
        let target = mixture_ratios_at(progress, &self.schedule)?;
        let caps: Vec<usize> = self.pools.iter().map(|p| p.capacity(self.seq_len)).collect();
        if caps.iter().all(|&c| c == 0) {
            return Err(Error::Empty("every token pool is exhausted".into()));
        }
        let mut free: Vec<usize> = (0..NUM_GROUPS).filter(|&g| target[g] > 0.0 && caps[g] > 0).collect();
        if free.is_empty() {
            return Err(Error::Empty("every group with a positive ratio is exhausted".into()));
        }
        let mass: f64 = free.iter().map(|&g| target[g]).sum();
        let mut effective = [0.0; NUM_GROUPS];
        for &g in &free {
            effective[g] = target[g] / mass;
        }

        let mut counts = [0usize; NUM_GROUPS];
        let mut left = n;
        while left > 0 && !free.is_empty() {
            let weight: f64 = free.iter().map(|&g| target[g]).sum();
            let shares: Vec<f64> = free.iter().map(|&g| left as f64 * target[g] / weight).collect();
            let alloc = systematic_round(&shares, left, &mut self.rng);
            let over: Vec<usize> = free
                .iter()
                .zip(&alloc)
                .filter(|&(&g, &a)| a > caps[g])
                .map(|(&g, _)| g)
                .collect();
            if over.is_empty() {
                for (&g, a) in free.iter().zip(alloc) {
                    counts[g] += a;
                }
                left = 0;
            } else {
                for &g in &over {
                    counts[g] = caps[g];
                    left -= caps[g];
                }
                free.retain(|g| !over.contains(g));
            }
        }

        let n_seqs: usize = counts.iter().sum();
        let mut inputs = Vec::with_capacity(n_seqs * self.seq_len);
        let mut targets = Vec::with_capacity(n_seqs * self.seq_len);
        for (g, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                let w = self.pools[g]
                    .take_window(self.seq_len)
                    .expect("count respects capacity");
                inputs.extend_from_slice(&w[..self.seq_len]);
                targets.extend_from_slice(&w[1..]);
            }
        }
        Ok(MixtureBatch {
            inputs,
            targets,
            seq_len: self.seq_len,
            n_seqs,
            group_counts: counts,
            realized: std::array::from_fn(|g| counts[g] as f64 / n_seqs as f64),
            target_ratios: effective,
        })
    }
}

/// Integer allocation of `total` slots with `E[count_i] = shares[i]`, each
/// count within one of its share. `shares` must sum to `total`.
fn systematic_round(shares: &[f64], total: usize, rng: &mut impl Rng) -> Vec<usize> {
    let u: f64 = rng.random();
    let mut out = Vec::with_capacity(shares.len());
    let mut lo = 0.0;
    let mut taken = 0usize;
    for (i, &s) in shares.iter().enumerate() {
        let hi = if i + 1 == shares.len() { total as f64 } else { lo + s };
        // points u, u+1, u+2, ... falling in [lo, hi)
        let upto = ((hi - u).ceil().max(0.0) as usize).min(total);
        out.push(upto - taken);
        taken = upto;
        lo = hi;
    }
    out
}
