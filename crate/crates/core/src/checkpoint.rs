//! Binary checkpoint format.
//!
//! ```text
//! "MOTF" | version u32 | config fingerprint u64 | entry count u64
//! per entry: name length u32 | UTF-8 name | rank u32 | extents u64 × rank | f32 × numel
//! ```
//!
//! All integers and scalars are little-endian. Optimizer moments and run
//! metadata are stored as extra entries under reserved `__` prefixes; a
//! metadata entry packs one `u64` into the bit patterns of two `f32` slots
//! so it survives the round trip exactly.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::hash::fnv1a64_extend;
use crate::model::{ModelConfig, ParamStore};
use crate::tensor::Element;

pub const MAGIC: &[u8; 4] = b"MOTF";
pub const FORMAT_VERSION: u32 = 1;

const META_PREFIX: &str = "__meta__.";
const ADAM_M_PREFIX: &str = "__adam_m__.";
const ADAM_V_PREFIX: &str = "__adam_v__.";
const RESERVED: &str = "__";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {found:?}, expected \"MOTF\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {found} (this build reads {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("truncated checkpoint while reading {what}")]
    Truncated { what: &'static str },
    #[error("config fingerprint mismatch: file has {found:#018x}, config expects {expected:#018x}")]
    FingerprintMismatch { expected: u64, found: u64 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Which part of the run produced the checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Phase {
    #[default]
    Init,
    Pretrain,
    Anneal,
    Dpo,
    Averaged,
}

impl Phase {
    fn code(self) -> u64 {
        match self {
            Phase::Init => 0,
            Phase::Pretrain => 1,
            Phase::Anneal => 2,
            Phase::Dpo => 3,
            Phase::Averaged => 4,
        }
    }

    fn from_code(c: u64) -> Result<Self, CheckpointError> {
        Ok(match c {
            0 => Phase::Init,
            1 => Phase::Pretrain,
            2 => Phase::Anneal,
            3 => Phase::Dpo,
            4 => Phase::Averaged,
            _ => return Err(CheckpointError::Malformed(format!("unknown phase code {c}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CheckpointMeta {
    pub fingerprint: u64,
    pub step: u64,
    pub tokens: u64,
    pub phase: Phase,
}

/// AdamW moments plus the bias-correction step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Element> AdamState<T> {
    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        AdamState {
            step: 0,
            m: params.filled_like(T::zero()),
            v: params.filled_like(T::zero()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamState>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(config: &ModelConfig, params: ParamStore<f32>) -> Self {
        Checkpoint {
            params,
            optimizer: None,
            meta: CheckpointMeta {
                fingerprint: config.fingerprint(),
                ..Default::default()
            },
        }
    }

    /// Hash of every parameter name, shape and scalar bit pattern.
    pub fn param_digest(&self) -> u64 {
        let mut h = crate::hash::fnv1a64(b"params");
        for (name, p) in self.params.iter() {
            h = fnv1a64_extend(h, name.as_bytes());
            for &e in &p.shape {
                h = fnv1a64_extend(h, &(e as u64).to_le_bytes());
            }
            for &x in &p.data {
                h = fnv1a64_extend(h, &x.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries: Vec<(String, &[usize], Vec<u32>)> = Vec::new();
        let mut meta =
            |name: &str, v: u64| entries.push((format!("{META_PREFIX}{name}"), &[2], vec![v as u32, (v >> 32) as u32]));
        meta("step", self.meta.step);
        meta("tokens", self.meta.tokens);
        meta("phase", self.meta.phase.code());
        if let Some(opt) = &self.optimizer {
            meta("adam_step", opt.step);
        }
        for (name, p) in self.params.iter() {
            entries.push((name.clone(), &p.shape, p.data.iter().map(|x| x.to_bits()).collect()));
        }
        if let Some(opt) = &self.optimizer {
            for (prefix, store) in [(ADAM_M_PREFIX, &opt.m), (ADAM_V_PREFIX, &opt.v)] {
                for (name, p) in store.iter() {
                    entries.push((
                        format!("{prefix}{name}"),
                        &p.shape,
                        p.data.iter().map(|x| x.to_bits()).collect(),
                    ));
                }
            }
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.meta.fingerprint.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        for (name, shape, bits) in entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &e in shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for b in bits {
                out.extend_from_slice(&b.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic { found: magic });
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion { found: version });
        }
        let fingerprint = r.u64("fingerprint")?;
        let count = r.u64("entry count")?;

        let mut params = ParamStore::new();
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        let mut meta = CheckpointMeta {
            fingerprint,
            ..Default::default()
        };
        let mut adam_step = None;
        for _ in 0..count {
            let name_len = r.u32("entry name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "entry name")?)
                .map_err(|_| CheckpointError::Malformed("entry name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32("entry rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64("entry extent")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or(CheckpointError::Truncated { what: "entry data" })?;
            let raw = r.take(numel * 4, "entry data")?;
            let bits: Vec<u32> = raw
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if let Some(key) = name.strip_prefix(META_PREFIX) {
                if bits.len() != 2 {
                    return Err(CheckpointError::Malformed(format!(
                        "metadata {key} has {} slots",
                        bits.len()
                    )));
                }
                let val = u64::from(bits[0]) | (u64::from(bits[1]) << 32);
                match key {
                    "step" => meta.step = val,
                    "tokens" => meta.tokens = val,
                    "phase" => meta.phase = Phase::from_code(val)?,
                    "adam_step" => adam_step = Some(val),
                    _ => return Err(CheckpointError::Malformed(format!("unknown metadata {key}"))),
                }
                continue;
            }
            let data: Vec<f32> = bits.into_iter().map(f32::from_bits).collect();
            if let Some(p) = name.strip_prefix(ADAM_M_PREFIX) {
                m.insert(p, shape, data);
            } else if let Some(p) = name.strip_prefix(ADAM_V_PREFIX) {
                v.insert(p, shape, data);
            } else if name.starts_with(RESERVED) {
                return Err(CheckpointError::Malformed(format!("unknown reserved entry {name}")));
            } else {
                params.insert(name, shape, data);
            }
        }
        if r.remaining() != 0 {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", r.remaining())));
        }
        let optimizer = match adam_step {
            Some(step) => {
                if !params.same_layout(&m) || !params.same_layout(&v) {
                    return Err(CheckpointError::Malformed(
                        "optimizer moments do not match parameters".into(),
                    ));
                }
                Some(AdamState { step, m, v })
            }
            None if m.is_empty() && v.is_empty() => None,
            None => {
                return Err(CheckpointError::Malformed(
                    "optimizer moments without step counter".into(),
                ))
            }
        };
        Ok(Checkpoint {
            params,
            optimizer,
            meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    /// Reads a checkpoint without checking the fingerprint.
    pub fn load_unchecked(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Reads a checkpoint and verifies it was produced for `config`.
    pub fn load(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Self, CheckpointError> {
        let ck = Self::load_unchecked(path)?;
        ck.verify(config)?;
        Ok(ck)
    }

    pub fn verify(&self, config: &ModelConfig) -> Result<(), CheckpointError> {
        let expected = config.fingerprint();
        if self.meta.fingerprint != expected {
            return Err(CheckpointError::FingerprintMismatch {
                expected,
                found: self.meta.fingerprint,
            });
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.remaining() < n {
            return Err(CheckpointError::Truncated { what });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};

    fn sample() -> (ModelConfig, Checkpoint) {
        let cfg = ModelConfig {
            hidden_dim: 16,
            n_layers: 1,
            ffn_dim: 8,
            n_heads: 2,
            n_kv_heads: 2,
            vocab_size: 9,
            max_seq_len: 8,
            ..ModelConfig::toy()
        };
        let m = Model::<f32>::init(cfg.clone(), 4).unwrap();
        let mut ck = Checkpoint::new(&cfg, m.params.clone());
        let mut opt = AdamState::zeros_like(&m.params);
        opt.step = (1 << 40) + 3;
        for (_, p) in opt.v.iter_mut() {
            p.data.iter_mut().enumerate().for_each(|(i, x)| *x = i as f32 * 1e-3);
        }
        ck.optimizer = Some(opt);
        ck.meta.step = 12;
        ck.meta.tokens = u64::MAX - 5;
        ck.meta.phase = Phase::Anneal;
        (cfg, ck)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (_, mut ck) = sample();
        // include a NaN payload and negative zero to exercise raw bit copies
        let p = ck.params.get_mut("final_norm").unwrap();
        p.data[0] = f32::from_bits(0x7fc0_1234);
        p.data[1] = -0.0;
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.param_digest(), ck.param_digest());
        assert_eq!(back.optimizer.as_ref().unwrap().step, (1 << 40) + 3);
    }

    #[test]
    fn header_layout() {
        let (cfg, ck) = sample();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"MOTF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), cfg.fingerprint());
    }

    #[test]
    fn corrupt_headers_are_structured_errors() {
        let (_, ck) = sample();
        let mut bytes = ck.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::BadMagic { .. })
        ));
        let mut bytes = ck.to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::UnsupportedVersion { found: 9 })
        ));
        let bytes = ck.to_bytes();
        for cut in [2, 10, 30, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(CheckpointError::Truncated { .. })
            ));
        }
    }

    #[test]
    fn fingerprint_is_checked_on_load() {
        let (cfg, ck) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.motf");
        ck.save(&path).unwrap();
        Checkpoint::load(&path, &cfg).unwrap();
        let mut other = cfg.clone();
        other.rope_theta = 500_000.0;
        assert!(matches!(
            Checkpoint::load(&path, &other),
            Err(CheckpointError::FingerprintMismatch { .. })
        ));
    }
}
