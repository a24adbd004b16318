use super::{numel, Element, Result, Tensor, TensorError};

/// Logical matrix operand: `rows×cols` view of a row-major buffer, optionally transposed.
#[derive(Clone, Copy)]
struct View {
    trans: bool,
    /// Extents of the stored (untransposed) matrix.
    stored_cols: usize,
}

impl View {
    fn strides(self) -> (isize, isize) {
        if self.trans {
            (1, self.stored_cols as isize)
        } else {
            (self.stored_cols as isize, 1)
        }
    }
}

/// `c[m×n] = op(a)[m×k] · op(b)[k×n] + beta·c`.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Element>(m: usize, k: usize, n: usize, a: &[T], va: View, b: &[T], vb: View, c: &mut [T], beta: T) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = va.strides();
    let (rsb, csb) = vb.strides();
    // SAFETY: slice lengths were checked above and `c` is a distinct &mut.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Broadcast plan over the leading (batch) extents of two operands.
struct BatchPlan {
    shape: Vec<usize>,
    offsets: Vec<(usize, usize)>,
}

fn batch_plan(a: &[usize], b: &[usize]) -> Option<BatchPlan> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut shape = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        match (x, y) {
            _ if x == y => shape.push(x),
            (1, _) => shape.push(y),
            (_, 1) => shape.push(x),
            _ => return None,
        }
    }
    let sa = super::strides(&pa);
    let sb = super::strides(&pb);
    let total = numel(&shape);
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let (mut oa, mut ob) = (0, 0);
        for d in 0..rank {
            if pa[d] != 1 {
                oa += idx[d] * sa[d];
            }
            if pb[d] != 1 {
                ob += idx[d] * sb[d];
            }
        }
        offsets.push((oa, ob));
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some(BatchPlan { shape, offsets })
}

impl<T: Element> Tensor<T> {
    /// Batched matrix product `self · other` over the last two extents.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.matmul_impl(other, false)
    }

    /// Batched `self · otherᵀ`, transposing the last two extents of `other`.
    pub fn matmul_nt(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(&self, other: &Tensor<T>, b_trans: bool) -> Result<Tensor<T>> {
        let op = if b_trans { "matmul_nt" } else { "matmul" };
        let (sa, sb) = (self.shape(), other.shape());
        let shape_err = || TensorError::Shape {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (bk, n) = if b_trans {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != bk {
            return Err(shape_err());
        }
        let plan = batch_plan(&sa[..sa.len() - 2], &sb[..sb.len() - 2]).ok_or_else(shape_err)?;
        let (a_sz, b_sz, c_sz) = (m * k, k * n, m * n);
        let vb = View {
            trans: b_trans,
            stored_cols: if b_trans { k } else { n },
        };
        let va = View {
            trans: false,
            stored_cols: k,
        };
        let mut out = vec![T::zero(); plan.offsets.len() * c_sz];
        let (ad, bd) = (self.data(), other.data());
        for (i, &(oa, ob)) in plan.offsets.iter().enumerate() {
            gemm(
                m,
                k,
                n,
                &ad[oa * a_sz..],
                va,
                &bd[ob * b_sz..],
                vb,
                &mut out[i * c_sz..],
                T::zero(),
            );
        }
        let mut shape = plan.shape.clone();
        shape.extend_from_slice(&[m, n]);
        let offsets = plan.offsets;
        Ok(Tensor::from_op(
            op,
            out,
            shape,
            vec![self.clone(), other.clone()],
            Box::new(move |p, _, g| {
                let (a, b) = (&p[0], &p[1]);
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![T::zero(); a.numel()];
                    for (i, &(oa, ob)) in offsets.iter().enumerate() {
                        // dA = dC · op(B)ᵀ
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * c_sz..],
                            View {
                                trans: false,
                                stored_cols: n,
                            },
                            &b.data()[ob * b_sz..],
                            View {
                                trans: !b_trans,
                                stored_cols: if b_trans { k } else { n },
                            },
                            &mut ga[oa * a_sz..],
                            T::one(),
                        );
                    }
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![T::zero(); b.numel()];
                    for (i, &(oa, ob)) in offsets.iter().enumerate() {
                        if b_trans {
                            // B stored n×k: dB = dCᵀ · A
                            gemm(
                                n,
                                m,
                                k,
                                &g[i * c_sz..],
                                View {
                                    trans: true,
                                    stored_cols: n,
                                },
                                &a.data()[oa * a_sz..],
                                View {
                                    trans: false,
                                    stored_cols: k,
                                },
                                &mut gb[ob * b_sz..],
                                T::one(),
                            );
                        } else {
                            // dB = Aᵀ · dC
                            gemm(
                                k,
                                m,
                                n,
                                &a.data()[oa * a_sz..],
                                View {
                                    trans: true,
                                    stored_cols: k,
                                },
                                &g[i * c_sz..],
                                View {
                                    trans: false,
                                    stored_cols: n,
                                },
                                &mut gb[ob * b_sz..],
                                T::one(),
                            );
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_many;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_times_a_is_a() {
        let eye = Tensor::<f64>::from_vec(vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], &[3, 3]).unwrap();
        let a = Tensor::<f64>::from_vec((0..6).map(f64::from).collect(), &[3, 2]).unwrap();
        assert_eq!(eye.matmul(&a).unwrap().data(), a.data());
    }

    #[test]
    fn hand_arithmetic() {
        let a = Tensor::<f64>::from_vec(vec![1., 2., 3., 4.], &[2, 2]).unwrap();
        let b = Tensor::<f64>::from_vec(vec![1., 1.], &[2, 1]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3., 7.]);
    }

    #[test]
    fn nt_matches_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::randn(&[2, 4, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[2, 5, 3], 1.0, &mut rng);
        let bt = b.transpose_last2().unwrap();
        let x = a.matmul_nt(&b).unwrap();
        let y = a.matmul(&bt).unwrap();
        assert_eq!(x.shape(), &[2, 4, 5]);
        for (u, v) in x.data().iter().zip(y.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn inner_mismatch_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 2]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn batch_broadcast_shape() {
        let a = Tensor::<f32>::zeros(&[2, 1, 3, 4]);
        let b = Tensor::<f32>::zeros(&[5, 4, 6]);
        assert_eq!(a.matmul(&b).unwrap().shape(), &[2, 5, 3, 6]);
        let c = Tensor::<f32>::zeros(&[3, 4, 6]);
        assert!(Tensor::<f32>::zeros(&[2, 3, 4]).matmul(&c).is_err());
    }

    #[test]
    fn gradient_5x7_times_7x3() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::<f64>::randn(&[5, 7], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[7, 3], 1.0, &mut rng);
        let err = grad_check_many(|xs| xs[0].matmul(&xs[1]).map(|y| y.sin().sum()), &[a, b], 1e-5).unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn gradient_broadcast_batched_nt() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = Tensor::<f64>::randn(&[2, 3, 4, 5], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[3, 6, 5], 1.0, &mut rng);
        let err = grad_check_many(|xs| xs[0].matmul_nt(&xs[1]).map(|y| y.sin().sum()), &[a, b], 1e-5).unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }
}
