use super::{Element, Result, Tensor, TensorError};

/// Boolean keep-mask whose shape is a suffix of the masked tensor's shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    shape: Vec<usize>,
    keep: Vec<bool>,
}

impl Mask {
    pub fn new(keep: Vec<bool>, shape: &[usize]) -> Result<Self> {
        if keep.len() != super::numel(shape) {
            return Err(TensorError::DataLength {
                len: keep.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Mask {
            shape: shape.to_vec(),
            keep,
        })
    }

    /// Lower-triangular `[n, n]` mask: query `i` sees keys `0..=i`.
    pub fn causal(n: usize) -> Self {
        let keep = (0..n * n).map(|ix| ix % n <= ix / n).collect();
        Mask {
            shape: vec![n, n],
            keep,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
}

#[derive(Clone, Copy)]
enum RowKeep<'a> {
    Prefix(usize),
    Sparse(&'a [bool]),
}

/// Writes `softmax(scale · x)` into `y`; false when `x` is empty.
fn softmax_row<T: Element>(x: &[T], y: &mut [T], scale: T) -> bool {
    if x.is_empty() {
        return false;
    }
    let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v * scale));
    let mut total = T::zero();
    for (o, &v) in y.iter_mut().zip(x) {
        *o = (v * scale - max).exp();
        total += *o;
    }
    let inv = T::one() / total;
    y.iter_mut().for_each(|o| *o *= inv);
    true
}

impl<T: Element> Tensor<T> {
    /// Softmax over the last axis, with optional keep-mask. Masked entries
    /// receive `-inf` before exponentiation and come out exactly zero.
    pub fn softmax_lastdim(&self, mask: Option<&Mask>) -> Result<Tensor<T>> {
        self.scaled_softmax_lastdim(1.0, mask)
    }

    /// `softmax(scale · x)` over the last axis; see [`Tensor::softmax_lastdim`].
    pub fn scaled_softmax_lastdim(&self, scale: f64, mask: Option<&Mask>) -> Result<Tensor<T>> {
        let shape = self.shape();
        if let Some(m) = mask {
            if m.shape.len() > shape.len() || !shape.ends_with(&m.shape) {
                return Err(TensorError::Shape {
                    op: "softmax_lastdim",
                    lhs: shape.to_vec(),
                    rhs: m.shape.clone(),
                });
            }
        }
        let n = *shape.last().expect("tensors have rank >= 1");
        let scale = T::c(scale);
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        // a keep row that is a prefix (the causal case) needs no per-element test
        let rows = mask.map(|m| {
            m.keep
                .chunks_exact(n)
                .map(|k| {
                    let len = k.iter().take_while(|&&b| b).count();
                    if k[len..].iter().any(|&b| b) {
                        RowKeep::Sparse(k)
                    } else {
                        RowKeep::Prefix(len)
                    }
                })
                .collect::<Vec<_>>()
        });
        for (row, (xr, yr)) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)).enumerate() {
            let keep = rows.as_ref().map_or(RowKeep::Prefix(n), |r| r[row % r.len()]);
            let ok = match keep {
                RowKeep::Prefix(len) => softmax_row(&xr[..len], &mut yr[..len], scale),
                RowKeep::Sparse(k) => {
                    let kept: Vec<T> = xr.iter().zip(k).filter(|(_, &b)| b).map(|(&v, _)| v).collect();
                    let mut probs = vec![T::zero(); kept.len()];
                    let ok = softmax_row(&kept, &mut probs, scale);
                    let mut it = probs.into_iter();
                    for (y, &b) in yr.iter_mut().zip(k) {
                        if b {
                            *y = it.next().expect("one probability per kept entry");
                        }
                    }
                    ok
                }
            };
            if !ok {
                return Err(TensorError::DegenerateRow { row });
            }
        }
        Ok(Tensor::from_op(
            "softmax_lastdim",
            out,
            shape.to_vec(),
            vec![self.clone()],
            Box::new(move |_, y, g| {
                let mut gx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = scale * yv * (gv - dot);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `gain ⊙ x / sqrt(mean(x²) + eps)` over the last axis.
    pub fn rms_norm(&self, gain: &Tensor<T>, epsilon: f64) -> Result<Tensor<T>> {
        let n = *self.shape().last().expect("tensors have rank >= 1");
        if gain.shape() != [n] {
            return Err(TensorError::Shape {
                op: "rms_norm",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        Ok(self.rms_impl(Some(gain), epsilon))
    }

    /// `x / sqrt(mean(x²) + eps)` over the last axis, without gain.
    pub fn rms_normalize(&self, epsilon: f64) -> Tensor<T> {
        self.rms_impl(None, epsilon)
    }

    fn rms_impl(&self, gain: Option<&Tensor<T>>, epsilon: f64) -> Tensor<T> {
        assert!(epsilon > 0.0, "rms epsilon must be positive");
        let n = *self.shape().last().expect("tensors have rank >= 1");
        let eps = T::c(epsilon);
        let nf = T::c(n as f64);
        let x = self.data();
        let inv_rms: Vec<T> = x
            .chunks_exact(n)
            .map(|r| {
                let ms = r.iter().map(|&v| v * v).sum::<T>() / nf;
                T::one() / (ms + eps).sqrt()
            })
            .collect();
        let ones;
        let gdata = match gain {
            Some(g) => g.data(),
            None => {
                ones = vec![T::one(); n];
                &ones[..]
            }
        };
        let mut out = Vec::with_capacity(x.len());
        for (r, &s) in x.chunks_exact(n).zip(&inv_rms) {
            out.extend(r.iter().zip(gdata).map(|(&v, &g)| g * v * s));
        }
        let mut parents = vec![self.clone()];
        if let Some(g) = gain {
            parents.push(g.clone());
        }
        let has_gain = gain.is_some();
        Tensor::from_op(
            if has_gain { "rms_norm" } else { "rms_normalize" },
            out,
            self.shape().to_vec(),
            parents,
            Box::new(move |p, _, g| {
                let x = p[0].data();
                let ones;
                let gv = if has_gain {
                    p[1].data()
                } else {
                    ones = vec![T::one(); n];
                    &ones[..]
                };
                let gx = p[0].requires_grad().then(|| {
                    let mut gx = Vec::with_capacity(x.len());
                    for ((xr, gr), &s) in x.chunks_exact(n).zip(g.chunks_exact(n)).zip(&inv_rms) {
                        let dot: T = xr.iter().zip(gr).zip(gv).map(|((&xv, &gg), &w)| xv * gg * w).sum();
                        let k = s * s * s * dot / nf;
                        gx.extend(xr.iter().zip(gr).zip(gv).map(|((&xv, &gg), &w)| s * w * gg - k * xv));
                    }
                    gx
                });
                let mut grads = vec![gx];
                if has_gain {
                    grads.push(p[1].requires_grad().then(|| {
                        let mut gg = vec![T::zero(); n];
                        for ((xr, gr), &s) in x.chunks_exact(n).zip(g.chunks_exact(n)).zip(&inv_rms) {
                            for ((acc, &xv), &gv) in gg.iter_mut().zip(xr).zip(gr) {
                                *acc += gv * xv * s;
                            }
                        }
                        gg
                    }));
                }
                grads
            }),
        )
    }

    /// Row lookup in a `[rows, dim]` table; output `[ids.len(), dim]`.
    pub fn embedding(&self, ids: &[usize]) -> Result<Tensor<T>> {
        if self.rank() != 2 {
            return Err(TensorError::Rank {
                op: "embedding",
                expected: "2".into(),
                shape: self.shape().to_vec(),
            });
        }
        let (rows, dim) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Index {
                op: "embedding",
                index: bad,
                extent: rows,
            });
        }
        if ids.is_empty() {
            return Err(TensorError::Invalid("embedding: empty id list".into()));
        }
        let table = self.data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&table[i * dim..(i + 1) * dim]);
        }
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            "embedding",
            out,
            vec![ids.len(), dim],
            vec![self.clone()],
            Box::new(move |p, _, g| {
                let mut gt = vec![T::zero(); p[0].numel()];
                for (r, &i) in ids.iter().enumerate() {
                    for (a, &b) in gt[i * dim..(i + 1) * dim].iter_mut().zip(&g[r * dim..(r + 1) * dim]) {
                        *a += b;
                    }
                }
                vec![Some(gt)]
            }),
        ))
    }

    /// Log-probability of `targets[r]` under `log_softmax(self[r])` for every
    /// last-axis row `r`; output has one entry per row.
    pub fn log_softmax_gather(&self, targets: &[usize]) -> Result<Tensor<T>> {
        let n = *self.shape().last().expect("tensors have rank >= 1");
        let rows = self.numel() / n;
        if targets.len() != rows {
            return Err(TensorError::Shape {
                op: "log_softmax_gather",
                lhs: self.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(TensorError::Index {
                op: "log_softmax_gather",
                index: bad,
                extent: n,
            });
        }
        let x = self.data();
        let lse: Vec<T> = x
            .chunks_exact(n)
            .map(|r| {
                let max = r.iter().copied().fold(T::neg_infinity(), T::max);
                max + r.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
            })
            .collect();
        let out = x
            .chunks_exact(n)
            .zip(targets)
            .zip(&lse)
            .map(|((r, &t), &l)| r[t] - l)
            .collect();
        let targets = targets.to_vec();
        Ok(Tensor::from_op(
            "log_softmax_gather",
            out,
            vec![rows],
            vec![self.clone()],
            Box::new(move |p, _, g| {
                let x = p[0].data();
                let mut gx = Vec::with_capacity(x.len());
                for (((r, &t), &l), &gr) in x.chunks_exact(n).zip(&targets).zip(&lse).zip(g) {
                    let start = gx.len();
                    gx.extend(r.iter().map(|&v| -gr * (v - l).exp()));
                    gx[start + t] += gr;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Elementwise `log σ(x)`, stable for large |x|.
    pub fn log_sigmoid(&self) -> Tensor<T> {
        self.unary(
            "log_sigmoid",
            |x| x.min(T::zero()) - (-x.abs()).exp().ln_1p(),
            |x, _| T::one() / (T::one() + x.exp()),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, grad_check_many};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let x = Tensor::<f64>::zeros(&[3]);
        let y = x.softmax_lastdim(None).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_entries_do_not_overflow() {
        let x = Tensor::<f32>::from_vec(vec![1000.0, 1000.0], &[2]).unwrap();
        assert_eq!(x.softmax_lastdim(None).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn causal_mask_zeroes_future() {
        let x = Tensor::<f64>::zeros(&[2, 3, 3]);
        let y = x.softmax_lastdim(Some(&Mask::causal(3))).unwrap();
        assert_eq!(&y.data()[..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&y.data()[3..6], &[0.5, 0.5, 0.0]);
        assert_eq!(y.data()[11], 0.0);
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let x = Tensor::<f64>::zeros(&[2, 2]);
        let mask = Mask::new(vec![true, true, false, false], &[2, 2]).unwrap();
        assert_eq!(
            x.softmax_lastdim(Some(&mask)).unwrap_err(),
            TensorError::DegenerateRow { row: 1 }
        );
        let bad = Mask::new(vec![true; 3], &[3]).unwrap();
        assert!(x.softmax_lastdim(Some(&bad)).is_err());
    }

    #[test]
    fn softmax_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
        let err = grad_check(|x| Ok(x.softmax_lastdim(None)?.mul(&w)?.sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
        let mask = Mask::causal(6);
        let x = Tensor::<f64>::randn(&[6, 6], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[6, 6], 1.0, &mut rng);
        let err = grad_check(|x| Ok(x.softmax_lastdim(Some(&mask))?.mul(&w)?.sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn scaled_softmax_matches_prescaled_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[2, 5, 5], 2.0, &mut rng);
        let mask = Mask::causal(5);
        let a = x.scaled_softmax_lastdim(0.25, Some(&mask)).unwrap();
        let b = x.mul_scalar(0.25).softmax_lastdim(Some(&mask)).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-15);
        }
        let w = Tensor::<f64>::randn(&[2, 5, 5], 1.0, &mut rng);
        let err = grad_check(
            |x| Ok(x.scaled_softmax_lastdim(0.25, Some(&mask))?.mul(&w)?.sum()),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn sparse_mask_rows() {
        let keep = vec![true, false, true, false, true, true];
        let mask = Mask::new(keep, &[2, 3]).unwrap();
        let x = Tensor::<f64>::from_vec(vec![1.0, 5.0, 1.0, 9.0, 0.0, 0.0], &[2, 3]).unwrap();
        let y = x.softmax_lastdim(Some(&mask)).unwrap();
        assert_eq!(y.data(), &[0.5, 0.0, 0.5, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn rms_norm_of_ones_and_zeros() {
        let ones = Tensor::<f64>::full(&[2, 5], 1.0);
        let gain = Tensor::<f64>::full(&[5], 1.0);
        for &v in ones.rms_norm(&gain, 1e-12).unwrap().data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
        let zeros = Tensor::<f64>::zeros(&[2, 5]);
        assert!(zeros.rms_norm(&gain, 1e-6).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(ones.rms_norm(&Tensor::full(&[4], 1.0), 1e-6).is_err());
    }

    #[test]
    fn rms_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(&[3, 8], 1.0, &mut rng);
        let g = Tensor::<f64>::randn(&[8], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[3, 8], 1.0, &mut rng);
        let err = grad_check_many(|xs| Ok(xs[0].rms_norm(&xs[1], 1e-6)?.mul(&w)?.sum()), &[x, g], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn embedding_and_gather_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let table = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
        let ids = [1, 4, 1, 0];
        let err = grad_check(
            |t| Ok(t.embedding(&ids)?.log_softmax_gather(&[2, 0, 1, 1])?.sum()),
            &table,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        assert!(table.embedding(&[5]).is_err());
    }

    #[test]
    fn gather_matches_scalar_oracle() {
        let logits = Tensor::<f64>::from_vec(vec![0.5, -1.0, 2.0, 0.0], &[1, 4]).unwrap();
        let lp = logits.log_softmax_gather(&[2]).unwrap().item();
        let z: f64 = [0.5f64, -1.0, 2.0, 0.0].iter().map(|v| v.exp()).sum();
        assert!((lp - (2.0 - z.ln())).abs() < 1e-14);
    }

    #[test]
    fn log_sigmoid_stable_and_differentiable() {
        let x = Tensor::<f64>::from_vec(vec![-800.0, 0.0, 800.0], &[3]).unwrap();
        let y = x.log_sigmoid();
        assert!((y.data()[0] + 800.0).abs() < 1e-9);
        assert!((y.data()[1] + std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(y.data()[2], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn(&[7], 3.0, &mut rng);
        assert!(grad_check(|x| Ok(x.log_sigmoid().sum()), &x, 1e-5).unwrap() < 1e-7);
    }
}
