//! Rotary position embeddings and Differential Attention.
//!
//! Each head owns two query/key sub-projections of width
//! `model_dim / (2·heads)`. The two causal softmax maps are combined as
//! `A₁ − λ·A₂` before weighting the values, where
//! `λ = exp(λq1·λk1) − exp(λq2·λk2) + λ_init`. Head outputs are RMS-normalised
//! with a shared gain and scaled by `1 − λ_init` before the output projection.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{Element, Mask, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeParams {
    pub theta: f64,
    pub head_component_dim: usize,
    pub max_seq_len: usize,
}

impl RopeParams {
    pub fn new(theta: f64, head_component_dim: usize, max_seq_len: usize) -> Result<Self> {
        let p = RopeParams {
            theta,
            head_component_dim,
            max_seq_len,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::config("rope.theta", "must be a positive finite number"));
        }
        if self.head_component_dim == 0 || !self.head_component_dim.is_multiple_of(2) {
            return Err(Error::config(
                "rope.head_component_dim",
                format!("must be even and positive, got {}", self.head_component_dim),
            ));
        }
        if self.max_seq_len == 0 {
            return Err(Error::config("rope.max_seq_len", "must be positive"));
        }
        Ok(())
    }
}

/// `theta^(−2i/dim)` for each rotated pair `i`.
pub fn rope_frequencies(params: &RopeParams) -> Result<Vec<f64>> {
    params.validate()?;
    let d = params.head_component_dim as f64;
    Ok((0..params.head_component_dim / 2)
        .map(|i| params.theta.powf(-2.0 * i as f64 / d))
        .collect())
}

/// Rotates adjacent coordinate pairs of `x[..., seq, heads, dim]` by
/// `(position_offset + s)·freqᵢ`.
pub fn rope_apply<T: Element>(x: &Tensor<T>, position_offset: usize, params: &RopeParams) -> Result<Tensor<T>> {
    let freqs = rope_frequencies(params)?;
    let shape = x.shape().to_vec();
    if shape.len() < 3 || shape[shape.len() - 1] != params.head_component_dim {
        return Err(Error::config(
            "rope.head_component_dim",
            format!(
                "input shape {shape:?} does not end in [seq, heads, {}]",
                params.head_component_dim
            ),
        ));
    }
    let r = shape.len();
    let (seq, heads, dim) = (shape[r - 3], shape[r - 2], shape[r - 1]);
    if position_offset + seq > params.max_seq_len {
        return Err(Error::Length {
            len: position_offset + seq,
            max: params.max_seq_len,
        });
    }
    let half = dim / 2;
    let mut cos = Vec::with_capacity(seq * half);
    let mut sin = Vec::with_capacity(seq * half);
    for s in 0..seq {
        let pos = (position_offset + s) as f64;
        for &f in &freqs {
            let (sn, cs) = (pos * f).sin_cos();
            cos.push(T::c(cs));
            sin.push(T::c(sn));
        }
    }
    let rotate = move |src: &[T], inverse: bool| -> Vec<T> {
        let mut out = vec![T::zero(); src.len()];
        let block = seq * heads * dim;
        for (sb, ob) in src.chunks_exact(block).zip(out.chunks_exact_mut(block)) {
            for s in 0..seq {
                let (cr, sr) = (&cos[s * half..(s + 1) * half], &sin[s * half..(s + 1) * half]);
                for h in 0..heads {
                    let off = (s * heads + h) * dim;
                    for i in 0..half {
                        let (a, b) = (sb[off + 2 * i], sb[off + 2 * i + 1]);
                        let (c, sn) = (cr[i], if inverse { -sr[i] } else { sr[i] });
                        ob[off + 2 * i] = a * c - b * sn;
                        ob[off + 2 * i + 1] = a * sn + b * c;
                    }
                }
            }
        }
        out
    };
    let out = rotate(x.data(), false);
    Ok(Tensor::from_op(
        "rope",
        out,
        shape,
        vec![x.clone()],
        Box::new(move |_, _, g| vec![Some(rotate(g, true))]),
    ))
}

/// Replaces the RoPE base and context length; learned weights are untouched.
pub fn abf_rescale(config: &ModelConfig, new_theta: f64, new_max_len: usize) -> Result<ModelConfig> {
    if !(new_theta >= config.rope_theta) {
        return Err(Error::config(
            "rope_theta",
            format!("cannot shrink from {} to {new_theta}", config.rope_theta),
        ));
    }
    if new_max_len < config.max_seq_len {
        return Err(Error::config(
            "max_seq_len",
            format!("cannot shrink from {} to {new_max_len}", config.max_seq_len),
        ));
    }
    let mut out = config.clone();
    out.rope_theta = new_theta;
    out.max_seq_len = new_max_len;
    out.validate()?;
    Ok(out)
}

/// `0.8 − 0.6·exp(−0.3·(layer − 1))` for 1-based `layer`.
pub fn lambda_init(layer_index: usize) -> Result<f64> {
    if layer_index < 1 {
        return Err(Error::Domain("lambda_init: layer index is 1-based".into()));
    }
    Ok(0.8 - 0.6 * (-0.3 * (layer_index as f64 - 1.0)).exp())
}

/// Weights of one Differential Attention layer. Projections are stored
/// `[in, out]` and applied as `x · W`.
#[derive(Debug, Clone)]
pub struct DiffAttnParams<T: Element> {
    pub n_heads: usize,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub lambda_q1: Tensor<T>,
    pub lambda_k1: Tensor<T>,
    pub lambda_q2: Tensor<T>,
    pub lambda_k2: Tensor<T>,
    pub lambda_init: f64,
    /// Gain of the per-head RMS normaliser, length `model_dim / heads`.
    pub head_norm: Tensor<T>,
    pub norm_epsilon: f64,
}

/// Per-call switches for [`diff_attention_with`].
#[derive(Debug, Clone, Copy)]
pub struct DiffAttnOptions {
    pub causal: bool,
    pub position_offset: usize,
    /// Replaces the computed λ (used to reduce to single-map attention).
    pub lambda_override: Option<f64>,
}

impl Default for DiffAttnOptions {
    fn default() -> Self {
        DiffAttnOptions {
            causal: true,
            position_offset: 0,
            lambda_override: None,
        }
    }
}

impl<T: Element> DiffAttnParams<T> {
    /// Random initialisation as leaves with gradient tracking.
    pub fn init<R: Rng + ?Sized>(model_dim: usize, n_heads: usize, layer_index: usize, rng: &mut R) -> Result<Self> {
        check_split(model_dim, n_heads)?;
        let comp = model_dim / (2 * n_heads);
        let mut w = || Tensor::randn(&[model_dim, model_dim], 0.02, rng).with_grad();
        let (wq, wk, wv, wo) = (w(), w(), w(), w());
        let mut l = || Tensor::randn(&[comp], 0.1, rng).with_grad();
        let (lambda_q1, lambda_k1, lambda_q2, lambda_k2) = (l(), l(), l(), l());
        Ok(DiffAttnParams {
            n_heads,
            wq,
            wk,
            wv,
            wo,
            lambda_q1,
            lambda_k1,
            lambda_q2,
            lambda_k2,
            lambda_init: lambda_init(layer_index)?,
            head_norm: Tensor::full(&[model_dim / n_heads], T::one()).with_grad(),
            norm_epsilon: 1e-5,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn component_dim(&self) -> usize {
        self.model_dim() / (2 * self.n_heads)
    }

    /// `exp(λq1·λk1) − exp(λq2·λk2) + λ_init` as a one-element tensor.
    pub fn lambda(&self) -> Result<Tensor<T>> {
        let a = self.lambda_q1.mul(&self.lambda_k1)?.sum().exp();
        let b = self.lambda_q2.mul(&self.lambda_k2)?.sum().exp();
        Ok(a.sub(&b)?.add_scalar(self.lambda_init))
    }
}

fn check_split(model_dim: usize, n_heads: usize) -> Result<()> {
    if n_heads == 0 || !model_dim.is_multiple_of(2 * n_heads) {
        return Err(Error::config(
            "hidden_dim",
            format!("{model_dim} is not divisible by 2·heads = {}", 2 * n_heads),
        ));
    }
    Ok(())
}

struct Projected<T: Element> {
    /// `[b, 2, h, s, s]` attention maps.
    maps: Tensor<T>,
    /// `[b, 1, h, s, dv]` values.
    values: Tensor<T>,
    batch: usize,
    seq: usize,
}

fn project<T: Element>(
    x: &Tensor<T>,
    p: &DiffAttnParams<T>,
    rope: &RopeParams,
    opts: DiffAttnOptions,
) -> Result<Projected<T>> {
    let d = p.model_dim();
    check_split(d, p.n_heads)?;
    let shape = x.shape().to_vec();
    let (batch, seq) = match shape.as_slice() {
        [s, dd] if *dd == d => (1, *s),
        [b, s, dd] if *dd == d => (*b, *s),
        _ => {
            return Err(Error::config(
                "hidden_dim",
                format!("attention input {shape:?} does not end in model_dim {d}"),
            ))
        }
    };
    let (h, dc) = (p.n_heads, p.component_dim());
    if rope.head_component_dim != dc {
        return Err(Error::config(
            "rope.head_component_dim",
            format!("{} does not match component width {dc}", rope.head_component_dim),
        ));
    }
    let x3 = x.reshape(&[batch, seq, d])?;
    let split_qk = |w: &Tensor<T>| -> Result<Tensor<T>> {
        let y = x3.matmul(w)?.reshape(&[batch, seq, 2 * h, dc])?;
        let y = rope_apply(&y, opts.position_offset, rope)?;
        // [b, s, h, 2, dc] -> [b, 2, h, s, dc]
        Ok(y.reshape(&[batch, seq, h, 2, dc])?.permute(&[0, 3, 2, 1, 4])?)
    };
    let q = split_qk(&p.wq)?;
    let k = split_qk(&p.wk)?;
    let mask = opts.causal.then(|| Mask::causal(seq));
    let maps = q
        .matmul_nt(&k)?
        .scaled_softmax_lastdim(1.0 / (dc as f64).sqrt(), mask.as_ref())?;
    let dv = d / h;
    let values = x3
        .matmul(&p.wv)?
        .reshape(&[batch, seq, h, dv])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[batch, 1, h, seq, dv])?;
    Ok(Projected {
        maps,
        values,
        batch,
        seq,
    })
}

/// Differential attention with default options (causal, no offset).
pub fn diff_attention<T: Element>(
    x: &Tensor<T>,
    params: &DiffAttnParams<T>,
    rope: &RopeParams,
    causal: bool,
) -> Result<Tensor<T>> {
    diff_attention_with(
        x,
        params,
        rope,
        DiffAttnOptions {
            causal,
            ..Default::default()
        },
    )
}

/// Differential attention over `x` shaped `[seq, d]` or `[batch, seq, d]`;
/// the output has the same shape.
pub fn diff_attention_with<T: Element>(
    x: &Tensor<T>,
    p: &DiffAttnParams<T>,
    rope: &RopeParams,
    opts: DiffAttnOptions,
) -> Result<Tensor<T>> {
    let Projected {
        maps,
        values,
        batch,
        seq,
    } = project(x, p, rope, opts)?;
    let (d, h) = (p.model_dim(), p.n_heads);
    let dv = d / h;
    let weighted = maps.matmul(&values)?; // [b, 2, h, s, dv]
    let first = weighted.narrow(1, 0, 1)?.reshape(&[batch, h, seq, dv])?;
    let second = weighted.narrow(1, 1, 1)?.reshape(&[batch, h, seq, dv])?;
    let lambda = match opts.lambda_override {
        Some(v) => Tensor::scalar(T::c(v)),
        None => p.lambda()?,
    };
    // the (1 − λ_init) factor is folded into the shared gain
    let gain = p.head_norm.mul_scalar(1.0 - p.lambda_init);
    let heads = first.sub(&second.scale_by(&lambda)?)?.rms_norm(&gain, p.norm_epsilon)?;
    let merged = heads.permute(&[0, 2, 1, 3])?.reshape(&[batch, seq, d])?;
    let out = merged.matmul(&p.wo)?;
    Ok(out.reshape(x.shape())?)
}

/// The two attention maps `(A₁, A₂)`, each `[batch, heads, seq, seq]`.
pub fn diff_attention_maps<T: Element>(
    x: &Tensor<T>,
    p: &DiffAttnParams<T>,
    rope: &RopeParams,
    opts: DiffAttnOptions,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let pr = project(x, p, rope, opts)?;
    let s = [pr.batch, p.n_heads, pr.seq, pr.seq];
    Ok((
        pr.maps.narrow(1, 0, 1)?.reshape(&s)?,
        pr.maps.narrow(1, 1, 1)?.reshape(&s)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_many, TensorError};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rope(dc: usize, theta: f64) -> RopeParams {
        RopeParams::new(theta, dc, 64).unwrap()
    }

    #[test]
    fn frequencies_closed_form() {
        let f = rope_frequencies(&RopeParams::new(10_000.0, 64, 8).unwrap()).unwrap();
        assert_eq!(f.len(), 32);
        assert_eq!(f[0], 1.0);
        // 10000^(-62/64) = 10^(-3.875)
        assert!((f[31] - 1.333_521_432_163_324e-4).abs() < 1e-15, "{}", f[31]);
        assert!(f.windows(2).all(|w| w[1] < w[0]));
        let g = rope_frequencies(&RopeParams::new(500_000.0, 64, 8).unwrap()).unwrap();
        assert!(f.iter().zip(&g).skip(1).all(|(a, b)| b <= a));
        assert!(RopeParams::new(10_000.0, 7, 8).is_err());
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f32>::randn(&[1, 3, 8], 1.0, &mut rng);
        let y = rope_apply(&x, 0, &rope(8, 10_000.0)).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn rope_matches_rotation_matrix() {
        // dim 2 => single pair with frequency 1; angle = position
        let p = RopeParams::new(10_000.0, 2, 16).unwrap();
        let x = Tensor::<f64>::from_vec([0.3, -1.2].repeat(4), &[4, 1, 2]).unwrap();
        let y = rope_apply(&x, 3, &p).unwrap();
        for s in 0..4 {
            let a = (3 + s) as f64;
            let (c, sn) = (a.cos(), a.sin());
            let expect = [c * 0.3 - sn * -1.2, sn * 0.3 + c * -1.2];
            assert!((y.data()[2 * s] - expect[0]).abs() < 1e-12);
            assert!((y.data()[2 * s + 1] - expect[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_rejects_overlong() {
        let x = Tensor::<f32>::zeros(&[10, 1, 4]);
        let p = RopeParams::new(10_000.0, 4, 8).unwrap();
        assert!(matches!(rope_apply(&x, 0, &p), Err(Error::Length { len: 10, max: 8 })));
        assert!(matches!(
            rope_apply(&x.narrow(0, 0, 6).unwrap(), 3, &p),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn lambda_init_values() {
        assert!((lambda_init(1).unwrap() - 0.2).abs() < 1e-15);
        assert!((lambda_init(2).unwrap() - (0.8 - 0.6 * (-0.3f64).exp())).abs() < 1e-15);
        assert!((lambda_init(2).unwrap() - 0.35551).abs() < 1e-5);
        assert!((lambda_init(200).unwrap() - 0.8).abs() < 1e-12);
        assert!(lambda_init(0).is_err());
    }

    #[test]
    fn lambda_equals_init_with_zero_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = DiffAttnParams::<f64>::init(16, 2, 3, &mut rng).unwrap();
        for t in [&mut p.lambda_q1, &mut p.lambda_k1, &mut p.lambda_q2, &mut p.lambda_k2] {
            *t = Tensor::zeros(&[4]);
        }
        assert_eq!(p.lambda().unwrap().item(), lambda_init(3).unwrap());
    }

    #[test]
    fn indivisible_dim_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            DiffAttnParams::<f32>::init(18, 2, 1, &mut rng),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn single_token_reduces_to_scaled_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = DiffAttnParams::<f64>::init(8, 2, 2, &mut rng).unwrap();
        let x = Tensor::<f64>::randn(&[1, 8], 1.0, &mut rng);
        let out = diff_attention(&x, &p, &rope(2, 10_000.0), true).unwrap();

        let lam = p.lambda().unwrap().item();
        let v = x.matmul(&p.wv).unwrap();
        // pre-norm head output is (1 − λ)·v
        let pre = v.mul_scalar(1.0 - lam).reshape(&[2, 4]).unwrap();
        let normed = pre.rms_norm(&p.head_norm, p.norm_epsilon).unwrap();
        let expect = normed
            .mul_scalar(1.0 - p.lambda_init)
            .reshape(&[1, 8])
            .unwrap()
            .matmul(&p.wo)
            .unwrap();
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn maps_are_row_stochastic_and_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = DiffAttnParams::<f32>::init(32, 4, 1, &mut rng).unwrap();
        let x = Tensor::<f32>::randn(&[2, 7, 32], 3.0, &mut rng);
        let (a1, a2) = diff_attention_maps(&x, &p, &rope(4, 500_000.0), DiffAttnOptions::default()).unwrap();
        for m in [a1, a2] {
            for (r, row) in m.data().chunks(7).enumerate() {
                let q = r % 7;
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(row[q + 1..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn gradient_through_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = DiffAttnParams::<f64>::init(16, 2, 2, &mut rng).unwrap();
        let x = Tensor::<f64>::randn(&[8, 16], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[8, 16], 1.0, &mut rng);
        let r = rope(4, 10_000.0);
        let inputs = [
            x,
            p.wq.clone(),
            p.wk.clone(),
            p.wv.clone(),
            p.wo.clone(),
            p.lambda_q1.clone(),
            p.lambda_k2.clone(),
            p.head_norm.clone(),
        ];
        let err = grad_check_many(
            |xs| {
                let mut q = p.clone();
                q.wq = xs[1].clone();
                q.wk = xs[2].clone();
                q.wv = xs[3].clone();
                q.wo = xs[4].clone();
                q.lambda_q1 = xs[5].clone();
                q.lambda_k2 = xs[6].clone();
                q.head_norm = xs[7].clone();
                let y = diff_attention(&xs[0], &q, &r, true).map_err(|e| TensorError::Invalid(e.to_string()))?;
                y.mul(&w).map(|t| t.sum())
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
