//! Decoder-only transformer assembly, parameter accounting and next-token loss.
//!
//! Blocks are pre-norm: `x += DiffAttn(RMSNorm(x)); x += FFN(RMSNorm(x))`,
//! followed by a final RMSNorm and a tied output projection. The FFN is the
//! gated three-matrix network `W_down(polynorm(x·W_up) ⊙ (x·W_gate))`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, DiffAttnOptions, DiffAttnParams, RopeParams};
use crate::error::{Error, Result};
use crate::hash::fnv1a64;
use crate::polynorm::{self, PolyNormParams};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope_theta: f64,
    #[serde(default = "default_true")]
    pub tied_embeddings: bool,
    #[serde(default = "default_polynorm_eps")]
    pub polynorm_epsilon: f64,
    #[serde(default = "default_rms_eps")]
    pub rmsnorm_epsilon: f64,
}

fn default_true() -> bool {
    true
}
fn default_polynorm_eps() -> f64 {
    1e-6
}
fn default_rms_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    /// Production shape: 2048 hidden, 32 layers, 8192 FFN, 16 heads, 219,520 vocab,
    /// at its pre-extension context (θ = 10,000, 4,096 tokens).
    pub fn motif_2_6b() -> Self {
        ModelConfig {
            hidden_dim: 2048,
            n_layers: 32,
            ffn_dim: 8192,
            n_heads: 16,
            n_kv_heads: 16,
            vocab_size: 219_520,
            max_seq_len: 4096,
            rope_theta: 10_000.0,
            tied_embeddings: true,
            polynorm_epsilon: default_polynorm_eps(),
            rmsnorm_epsilon: default_rms_eps(),
        }
    }

    /// Desk-scale configuration used by tests and the bundled corpus.
    pub fn toy() -> Self {
        ModelConfig {
            hidden_dim: 128,
            n_layers: 4,
            ffn_dim: 512,
            n_heads: 4,
            n_kv_heads: 4,
            vocab_size: 256,
            max_seq_len: 512,
            rope_theta: 10_000.0,
            tied_embeddings: true,
            polynorm_epsilon: default_polynorm_eps(),
            rmsnorm_epsilon: default_rms_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.hidden_dim.is_multiple_of(2 * self.n_heads) {
            return Err(Error::config(
                "hidden_dim",
                format!(
                    "{} is not divisible by 2·n_heads = {}",
                    self.hidden_dim,
                    2 * self.n_heads
                ),
            ));
        }
        if self.n_kv_heads != self.n_heads {
            return Err(Error::config(
                "n_kv_heads",
                format!("must equal n_heads ({}), got {}", self.n_heads, self.n_kv_heads),
            ));
        }
        if !(self.rope_theta > 0.0 && self.rope_theta.is_finite()) {
            return Err(Error::config("rope_theta", "must be a positive finite number"));
        }
        for (field, v) in [
            ("polynorm_epsilon", self.polynorm_epsilon),
            ("rmsnorm_epsilon", self.rmsnorm_epsilon),
        ] {
            if !(v > 0.0) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        Ok(())
    }

    pub fn component_dim(&self) -> usize {
        self.hidden_dim / (2 * self.n_heads)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn rope(&self) -> Result<RopeParams> {
        RopeParams::new(self.rope_theta, self.component_dim(), self.max_seq_len)
    }

    /// 64-bit FNV-1a of the canonical JSON encoding.
    pub fn fingerprint(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serialises");
        fnv1a64(&json)
    }

    /// Names and shapes of every parameter tensor, in initialisation order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (self.hidden_dim, self.ffn_dim, self.vocab_size);
        let mut out = vec![("embed".to_string(), vec![v, d])];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.push((p("attn_norm"), vec![d]));
            for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                out.push((p(w), vec![d, d]));
            }
            for w in ["attn.lambda_q1", "attn.lambda_k1", "attn.lambda_q2", "attn.lambda_k2"] {
                out.push((p(w), vec![self.component_dim()]));
            }
            out.push((p("attn.head_norm"), vec![self.head_dim()]));
            out.push((p("ffn_norm"), vec![d]));
            out.push((p("ffn.w_up"), vec![d, f]));
            out.push((p("ffn.w_gate"), vec![d, f]));
            out.push((p("ffn.w_down"), vec![f, d]));
            out.push((p("ffn.poly_weight"), vec![polynorm::DEGREE]));
            out.push((p("ffn.poly_bias"), vec![1]));
        }
        out.push(("final_norm".to_string(), vec![d]));
        if !self.tied_embeddings {
            out.push(("lm_head".to_string(), vec![d, v]));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub total: u64,
    pub non_embedding: u64,
}

/// Closed-form parameter count. Embeddings are counted once when tied.
pub fn count_parameters(c: &ModelConfig) -> ParamCount {
    let (d, f, v) = (c.hidden_dim as u64, c.ffn_dim as u64, c.vocab_size as u64);
    let comp = (c.hidden_dim / (2 * c.n_heads.max(1))) as u64;
    let head = (c.hidden_dim / c.n_heads.max(1)) as u64;
    let attention = 4 * d * d + 4 * comp + head;
    let ffn = 3 * d * f + polynorm::DEGREE as u64 + 1;
    let norms = 2 * d;
    let per_layer = attention + ffn + norms;
    let embedding = if c.tied_embeddings { v * d } else { 2 * v * d };
    let non_embedding = c.n_layers as u64 * per_layer + d;
    ParamCount {
        total: embedding + non_embedding,
        non_embedding,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Named parameter tensors (or gradients, or optimizer moments).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Param<T>>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { map: BTreeMap::new() }
    }
}

impl<T: Copy> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<T>) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        self.map.insert(name.into(), Param { shape, data });
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|p| p.data.len()).sum()
    }

    /// Same names and shapes, filled with `value`.
    pub fn filled_like<U: Copy>(&self, value: U) -> ParamStore<U> {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            shape: p.shape.clone(),
                            data: vec![value; p.data.len()],
                        },
                    )
                })
                .collect(),
        }
    }

    /// True when both stores have identical names and shapes.
    pub fn same_layout<U>(&self, other: &ParamStore<U>) -> bool {
        self.map.len() == other.map.len()
            && self
                .map
                .iter()
                .zip(&other.map)
                .all(|((ka, a), (kb, b))| ka == kb && a.shape == b.shape)
    }
}

impl<T: Element> ParamStore<T> {
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            shape: p.shape.clone(),
                            data: p.data.iter().map(|&x| U::c(x.as_f64())).collect(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Wraps every parameter as a tensor leaf.
    pub fn bind(&self, requires_grad: bool) -> Bound<T> {
        let tensors = self
            .map
            .iter()
            .map(|(k, p)| {
                let t = Tensor::from_vec(p.data.clone(), &p.shape).expect("store shapes are valid");
                (k.clone(), if requires_grad { t.with_grad() } else { t })
            })
            .collect();
        Bound { tensors }
    }
}

/// Parameters wrapped as tensors for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct Bound<T: Element> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Bound<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::config("parameters", format!("missing tensor {name}")))
    }

    pub fn set(&mut self, name: &str, t: Tensor<T>) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    /// Collects leaf gradients; parameters without one get zeros.
    pub fn grads(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (k, t) in &self.tensors {
            let g = t.grad().unwrap_or_else(|| vec![T::zero(); t.numel()]);
            out.insert(k.clone(), t.shape().to_vec(), g);
        }
        out
    }

    fn attention(&self, config: &ModelConfig, layer: usize) -> Result<DiffAttnParams<T>> {
        let g = |s: &str| self.get(&format!("layers.{layer}.attn.{s}")).cloned();
        Ok(DiffAttnParams {
            n_heads: config.n_heads,
            wq: g("wq")?,
            wk: g("wk")?,
            wv: g("wv")?,
            wo: g("wo")?,
            lambda_q1: g("lambda_q1")?,
            lambda_k1: g("lambda_k1")?,
            lambda_q2: g("lambda_q2")?,
            lambda_k2: g("lambda_k2")?,
            lambda_init: attention::lambda_init(layer + 1)?,
            head_norm: g("head_norm")?,
            norm_epsilon: config.rmsnorm_epsilon,
        })
    }
}

/// Runs the transformer on `tokens` laid out as `[batch, seq]` and returns
/// logits `[batch, seq, vocab]`.
pub fn forward_bound<T: Element>(
    config: &ModelConfig,
    params: &Bound<T>,
    tokens: &[u32],
    batch: usize,
    position_offset: usize,
) -> Result<Tensor<T>> {
    if tokens.is_empty() || batch == 0 || !tokens.len().is_multiple_of(batch) {
        return Err(Error::Empty(format!(
            "{} tokens cannot form {batch} equal sequences",
            tokens.len()
        )));
    }
    let seq = tokens.len() / batch;
    if position_offset + seq > config.max_seq_len {
        return Err(Error::Length {
            len: position_offset + seq,
            max: config.max_seq_len,
        });
    }
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    if let Some(&bad) = ids.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::TokenRange {
            id: bad,
            vocab: config.vocab_size,
        });
    }
    let d = config.hidden_dim;
    let rope = config.rope()?;
    let embed = params.get("embed")?;
    let mut x = embed.embedding(&ids)?.reshape(&[batch, seq, d])?;
    let opts = DiffAttnOptions {
        causal: true,
        position_offset,
        lambda_override: None,
    };
    for l in 0..config.n_layers {
        let g = |s: &str| params.get(&format!("layers.{l}.{s}"));
        let h = x.rms_norm(g("attn_norm")?, config.rmsnorm_epsilon)?;
        let attn = attention::diff_attention_with(&h, &params.attention(config, l)?, &rope, opts)?;
        x = x.add(&attn)?;

        let h = x.rms_norm(g("ffn_norm")?, config.rmsnorm_epsilon)?;
        let poly = PolyNormParams::new(
            g("ffn.poly_weight")?.clone(),
            g("ffn.poly_bias")?.clone(),
            config.polynorm_epsilon,
        )?;
        let up = polynorm::polynorm(&h.matmul(g("ffn.w_up")?)?, &poly)?;
        let gate = h.matmul(g("ffn.w_gate")?)?;
        x = x.add(&up.mul(&gate)?.matmul(g("ffn.w_down")?)?)?;
    }
    let x = x.rms_norm(params.get("final_norm")?, config.rmsnorm_epsilon)?;
    let logits = if config.tied_embeddings {
        x.matmul_nt(embed)?
    } else {
        x.matmul(params.get("lm_head")?)?
    };
    Ok(logits)
}

/// Mean cross-entropy of `logits[t]` against `targets[t]`.
pub fn next_token_loss<T: Element>(logits: &Tensor<T>, targets: &[u32]) -> Result<Tensor<T>> {
    let vocab = *logits.shape().last().expect("logits have rank >= 1");
    let rows = logits.numel() / vocab;
    if targets.len() != rows {
        return Err(Error::config(
            "targets",
            format!("length {} does not match {rows} logit rows", targets.len()),
        ));
    }
    let t: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    Ok(logits.log_softmax_gather(&t)?.mean().neg())
}

/// A configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Element> Model<T> {
    /// Gaussian initialisation (σ = 0.02 for matrices, 0.1 for λ vectors),
    /// unit norm gains, PolyNorm `aᵢ = 1/3, b = 0`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let leaf = name.rsplit('.').next().unwrap_or(&name);
            let data = match leaf {
                _ if leaf.ends_with("norm") => vec![T::one(); n],
                "poly_weight" => vec![T::c(1.0 / 3.0); n],
                "poly_bias" => vec![T::zero(); n],
                _ => {
                    let std = if leaf.starts_with("lambda") { 0.1 } else { 0.02 };
                    Tensor::<T>::randn(&shape, std, &mut rng).to_vec()
                }
            };
            params.insert(name, shape, data);
        }
        Ok(Model { config, params })
    }

    /// Checks that the parameter layout matches the configuration exactly.
    pub fn check_layout(&self) -> Result<()> {
        let expected = self.config.param_shapes();
        if expected.len() != self.params.len() {
            return Err(Error::Incompatible(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.params.len()
            )));
        }
        for (name, shape) in expected {
            match self.params.get(&name) {
                Some(p) if p.shape == shape => {}
                Some(p) => {
                    return Err(Error::Incompatible(format!(
                        "{name}: expected shape {shape:?}, found {:?}",
                        p.shape
                    )))
                }
                None => return Err(Error::Incompatible(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }

    /// Logits `[seq, vocab]` for a single sequence.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        let bound = self.params.bind(false);
        let logits = forward_bound(&self.config, &bound, tokens, 1, 0)?;
        Ok(logits.reshape(&[tokens.len(), self.config.vocab_size])?)
    }

    /// Mean next-token loss over `[batch, seq]` inputs, without gradients.
    pub fn loss(&self, inputs: &[u32], targets: &[u32], batch: usize) -> Result<f64> {
        let bound = self.params.bind(false);
        let logits = forward_bound(&self.config, &bound, inputs, batch, 0)?;
        Ok(next_token_loss(&logits, targets)?.item().as_f64())
    }

    /// Loss and parameter gradients for one `[batch, seq]` micro-batch.
    pub fn loss_and_grads(&self, inputs: &[u32], targets: &[u32], batch: usize) -> Result<(f64, ParamStore<T>)> {
        let bound = self.params.bind(true);
        let logits = forward_bound(&self.config, &bound, inputs, batch, 0)?;
        let loss = next_token_loss(&logits, targets)?;
        loss.backward()?;
        Ok((loss.item().as_f64(), bound.grads()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            hidden_dim: 16,
            n_layers: 2,
            ffn_dim: 24,
            n_heads: 2,
            n_kv_heads: 2,
            vocab_size: 11,
            max_seq_len: 32,
            ..ModelConfig::toy()
        }
    }

    #[test]
    fn table_config_is_valid() {
        ModelConfig::motif_2_6b().validate().unwrap();
        ModelConfig::toy().validate().unwrap();
    }

    #[test]
    fn validation_errors_name_the_field() {
        let mut c = ModelConfig::motif_2_6b();
        c.hidden_dim = 2050;
        let msg = c.validate().unwrap_err().to_string();
        assert!(
            msg.contains("hidden_dim") && msg.contains("2050") && msg.contains("32"),
            "{msg}"
        );
        let mut c = ModelConfig::motif_2_6b();
        c.n_kv_heads = 8;
        assert!(c.validate().unwrap_err().to_string().contains("n_kv_heads"));
        let mut c = ModelConfig::toy();
        c.vocab_size = 0;
        assert!(c.validate().unwrap_err().to_string().contains("vocab_size"));
        let mut c = ModelConfig::toy();
        c.rope_theta = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn table_count_lands_near_published_totals() {
        let c = count_parameters(&ModelConfig::motif_2_6b());
        assert_eq!(c.total, 2_597_206_144);
        assert_eq!(c.non_embedding, 2_147_629_184);
    }

    #[test]
    fn zero_layer_count_is_embeddings_plus_final_norm() {
        let mut c = ModelConfig::toy();
        c.n_layers = 0;
        let n = count_parameters(&c);
        // the final norm gain survives without layers
        assert_eq!(n.total, (c.vocab_size * c.hidden_dim + c.hidden_dim) as u64);
    }

    #[test]
    fn count_matches_instantiated_scalars() {
        for cfg in [
            ModelConfig::toy(),
            tiny(),
            ModelConfig {
                tied_embeddings: false,
                ..tiny()
            },
        ] {
            let m = Model::<f32>::init(cfg.clone(), 0).unwrap();
            assert_eq!(count_parameters(&cfg).total, m.params.num_scalars() as u64);
            m.check_layout().unwrap();
        }
    }

    #[test]
    fn forward_shape_and_errors() {
        let m = Model::<f32>::init(tiny(), 1).unwrap();
        let logits = m.forward(&[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(logits.shape(), &[5, 11]);
        assert!(matches!(m.forward(&[1, 11]), Err(Error::TokenRange { id: 11, .. })));
        assert!(matches!(m.forward(&[0; 33]), Err(Error::Length { len: 33, max: 32 })));
    }

    #[test]
    fn forward_is_causal_and_deterministic() {
        let m = Model::<f32>::init(tiny(), 2).unwrap();
        let a = m.forward(&[3, 1, 4, 1, 5, 9]).unwrap();
        let b = m.forward(&[3, 1, 4, 1, 5, 2]).unwrap();
        let v = 11;
        assert_eq!(&a.data()[..5 * v], &b.data()[..5 * v]);
        assert_ne!(&a.data()[5 * v..], &b.data()[5 * v..]);
        let m2 = Model::<f32>::init(tiny(), 2).unwrap();
        assert_eq!(m2.forward(&[3, 1, 4, 1, 5, 9]).unwrap().data(), a.data());
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Tensor::<f64>::zeros(&[4, 7]);
        let l = next_token_loss(&logits, &[0, 1, 2, 6]).unwrap().item();
        assert!((l - 7f64.ln()).abs() < 1e-14);
        assert!(next_token_loss(&logits, &[0, 1]).is_err());
    }

    #[test]
    fn confident_logits_drive_loss_to_zero() {
        let mut last = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let mut d = vec![0.0; 5];
            d[2] = margin;
            let l = next_token_loss(&Tensor::<f64>::from_vec(d, &[1, 5]).unwrap(), &[2])
                .unwrap()
                .item();
            assert!(l < last);
            last = l;
        }
        assert!(last < 1e-20);
    }

    #[test]
    fn loss_matches_logsumexp_oracle() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits = Tensor::<f64>::randn(&[3, 6], 2.0, &mut rng);
        let targets = [5u32, 0, 3];
        let got = next_token_loss(&logits, &targets).unwrap().item();
        let mut expect = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &logits.data()[r * 6..(r + 1) * 6];
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            expect += lse - row[t as usize];
        }
        assert!((got - expect / 3.0).abs() < 1e-12);
    }

    #[test]
    fn fingerprint_tracks_config() {
        let a = ModelConfig::toy();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.rope_theta = 500_000.0;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
