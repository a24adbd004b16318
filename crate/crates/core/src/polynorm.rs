//! PolyNorm activation: `y = Σᵢ₌₁³ aᵢ·ρ(xⁱ) + b`, where `ρ` RMS-normalises
//! over the last axis. The degree is fixed at three.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const DEGREE: usize = 3;

#[derive(Debug, Clone)]
pub struct PolyNormParams<T: Element> {
    /// Power coefficients `a₁..a₃`, shape `[3]`.
    pub weights: Tensor<T>,
    /// Bias `b`, shape `[1]`.
    pub bias: Tensor<T>,
    pub epsilon: f64,
}

impl<T: Element> PolyNormParams<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>, epsilon: f64) -> Result<Self> {
        if weights.shape() != [DEGREE] {
            return Err(Error::config(
                "polynorm.weights",
                format!(
                    "expected exactly {DEGREE} coefficients, got shape {:?}",
                    weights.shape()
                ),
            ));
        }
        if bias.shape() != [1] {
            return Err(Error::config("polynorm.bias", "expected a single value"));
        }
        if !(epsilon > 0.0) {
            return Err(Error::config("polynorm.epsilon", "must be positive"));
        }
        Ok(PolyNormParams { weights, bias, epsilon })
    }

    /// `aᵢ = 1/3`, `b = 0`, as trainable leaves.
    pub fn init(epsilon: f64) -> Result<Self> {
        Self::new(
            Tensor::full(&[DEGREE], T::c(1.0 / 3.0)).with_grad(),
            Tensor::zeros(&[1]).with_grad(),
            epsilon,
        )
    }
}

/// Fused forward and backward over the last axis of `x`.
pub fn polynorm<T: Element>(x: &Tensor<T>, params: &PolyNormParams<T>) -> Result<Tensor<T>> {
    let n = *x.shape().last().expect("tensors have rank >= 1");
    let eps = T::c(params.epsilon);
    let nf = T::c(n as f64);
    let a: [T; DEGREE] = params.weights.data().try_into().expect("validated degree");
    let bias = params.bias.data()[0];
    let xs = x.data();
    let rows = xs.len() / n;

    // inverse RMS of xⁱ for every row and power
    let mut inv = vec![T::zero(); rows * DEGREE];
    for (r, xr) in xs.chunks_exact(n).enumerate() {
        let (mut s1, mut s2, mut s3) = (T::zero(), T::zero(), T::zero());
        for &v in xr {
            let v2 = v * v;
            s1 += v2;
            s2 += v2 * v2;
            s3 += v2 * v2 * v2;
        }
        for (i, s) in [s1, s2, s3].into_iter().enumerate() {
            inv[r * DEGREE + i] = T::one() / (s / nf + eps).sqrt();
        }
    }
    let mut out = Vec::with_capacity(xs.len());
    for (xr, iv) in xs.chunks_exact(n).zip(inv.chunks_exact(DEGREE)) {
        let (c1, c2, c3) = (a[0] * iv[0], a[1] * iv[1], a[2] * iv[2]);
        out.extend(xr.iter().map(|&v| {
            let v2 = v * v;
            c1 * v + c2 * v2 + c3 * v2 * v + bias
        }));
    }

    Ok(Tensor::from_op(
        "polynorm",
        out,
        x.shape().to_vec(),
        vec![x.clone(), params.weights.clone(), params.bias.clone()],
        Box::new(move |p, _, g| {
            let xs = p[0].data();
            let a: [T; DEGREE] = p[1].data().try_into().expect("validated degree");
            let mut ga = [T::zero(); DEGREE];
            let mut gb = T::zero();
            let mut gx = p[0].requires_grad().then(|| Vec::with_capacity(xs.len()));
            for ((xr, gr), iv) in xs.chunks_exact(n).zip(g.chunks_exact(n)).zip(inv.chunks_exact(DEGREE)) {
                // Σ g·xⁱ per power
                let mut dots = [T::zero(); DEGREE];
                for (&v, &gv) in xr.iter().zip(gr) {
                    let v2 = v * v;
                    dots[0] += gv * v;
                    dots[1] += gv * v2;
                    dots[2] += gv * v2 * v;
                    gb += gv;
                }
                for i in 0..DEGREE {
                    ga[i] += dots[i] * iv[i];
                }
                if let Some(gx) = gx.as_mut() {
                    // term i: aᵢ·sᵢ·(g − sᵢ²·xⁱ·dotᵢ/n) · i·xⁱ⁻¹
                    let k: [T; DEGREE] = std::array::from_fn(|i| iv[i] * iv[i] * dots[i] / nf);
                    let c: [T; DEGREE] = std::array::from_fn(|i| a[i] * iv[i]);
                    let (two, three) = (T::c(2.0), T::c(3.0));
                    gx.extend(xr.iter().zip(gr).map(|(&v, &gv)| {
                        let v2 = v * v;
                        let v3 = v2 * v;
                        c[0] * (gv - k[0] * v)
                            + c[1] * (gv - k[1] * v2) * two * v
                            + c[2] * (gv - k[2] * v3) * three * v2
                    }));
                }
            }
            vec![
                gx,
                p[1].requires_grad().then(|| ga.to_vec()),
                p[2].requires_grad().then(|| vec![gb]),
            ]
        }),
    ))
}

/// Unfused composition of primitive ops; the test oracle for [`polynorm`].
#[cfg(test)]
fn polynorm_composed<T: Element>(x: &Tensor<T>, params: &PolyNormParams<T>) -> Result<Tensor<T>> {
    let mut acc: Option<Tensor<T>> = None;
    for i in 0..DEGREE {
        let coeff = params.weights.narrow(0, i, 1)?;
        let term = x.powi(i as i32 + 1).rms_normalize(params.epsilon).scale_by(&coeff)?;
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
    }
    let sum = acc.expect("degree is positive");
    Ok(sum.shift_by(&params.bias)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_many, TensorError};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(a: [f64; 3], b: f64) -> PolyNormParams<f64> {
        PolyNormParams::new(
            Tensor::from_vec(a.to_vec(), &[3]).unwrap(),
            Tensor::from_vec(vec![b], &[1]).unwrap(),
            1e-6,
        )
        .unwrap()
    }

    #[test]
    fn linear_term_is_rms_normalised_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng);
        let y = polynorm(&x, &params([1.0, 0.0, 0.0], 0.0)).unwrap();
        let r = x.rms_normalize(1e-6);
        assert_eq!(y.data(), r.data());
    }

    #[test]
    fn constant_input_gives_ones() {
        let x = Tensor::<f64>::full(&[2, 6], 2.5);
        let y = polynorm(&x, &params([1.0 / 3.0; 3], 0.0)).unwrap();
        for &v in y.data() {
            assert!((v - 1.0).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn odd_symmetry_without_square_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[4, 8], 2.0, &mut rng);
        let p = params([0.7, 0.0, -0.4], 0.0);
        let y = polynorm(&x, &p).unwrap();
        let yn = polynorm(&x.neg(), &p).unwrap();
        for (a, b) in y.data().iter().zip(yn.data()) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn zero_input_is_finite() {
        let y = polynorm(&Tensor::<f32>::zeros(&[2, 4]), &PolyNormParams::init(1e-6).unwrap()).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_wrong_degree() {
        let w = Tensor::<f64>::zeros(&[4]);
        assert!(PolyNormParams::new(w, Tensor::zeros(&[1]), 1e-6).is_err());
        assert!(PolyNormParams::new(Tensor::<f64>::zeros(&[3]), Tensor::zeros(&[1]), 0.0).is_err());
    }

    #[test]
    fn gradient_over_input_and_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let x = Tensor::<f64>::randn(&[4, 16], 1.0, &mut rng);
            let a = Tensor::<f64>::randn(&[3], 0.5, &mut rng);
            let b = Tensor::<f64>::randn(&[1], 0.5, &mut rng);
            let w = Tensor::<f64>::randn(&[4, 16], 1.0, &mut rng);
            let err = grad_check_many(
                |xs| {
                    let y = PolyNormParams::new(xs[1].clone(), xs[2].clone(), 1e-6)
                        .and_then(|p| polynorm(&xs[0], &p))
                        .map_err(|e| TensorError::Invalid(e.to_string()))?;
                    y.mul(&w).map(|t| t.sum())
                },
                &[x, a, b],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn fused_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[5, 12], 1.5, &mut rng);
        let w = Tensor::<f64>::randn(&[5, 12], 1.0, &mut rng);
        let a = Tensor::<f64>::randn(&[3], 0.5, &mut rng);
        let b = Tensor::<f64>::randn(&[1], 0.5, &mut rng);
        let run = |f: fn(&Tensor<f64>, &PolyNormParams<f64>) -> Result<Tensor<f64>>| {
            let leaves = [x.detach().with_grad(), a.detach().with_grad(), b.detach().with_grad()];
            let p = PolyNormParams::new(leaves[1].clone(), leaves[2].clone(), 1e-6).unwrap();
            let y = f(&leaves[0], &p).unwrap();
            y.mul(&w).unwrap().sum().backward().unwrap();
            let grads: Vec<Vec<f64>> = leaves.iter().map(|l| l.grad().unwrap()).collect();
            (y.to_vec(), grads)
        };
        let (y1, g1) = run(polynorm);
        let (y2, g2) = run(polynorm_composed);
        for (u, v) in y1.iter().zip(&y2) {
            assert!((u - v).abs() < 1e-12);
        }
        for (gu, gv) in g1.iter().zip(&g2) {
            for (u, v) in gu.iter().zip(gv) {
                assert!((u - v).abs() < 1e-10, "{u} vs {v}");
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn each_term_is_scale_invariant(
                xs in proptest::collection::vec(-3.0f64..3.0, 8),
                c in 0.1f64..10.0,
                power in 1i32..=3,
            ) {
                prop_assume!(xs.iter().any(|v| v.abs() > 0.1));
                let x = Tensor::from_vec(xs.clone(), &[8]).unwrap();
                let cx = x.mul_scalar(c);
                // eps chosen tiny relative to the signal so the normaliser cancels scale
                let a = x.powi(power).rms_normalize(1e-12);
                let b = cx.powi(power).rms_normalize(1e-12);
                for (u, v) in a.data().iter().zip(b.data()) {
                    prop_assert!((u - v).abs() < 1e-6);
                }
            }
        }
    }
}
