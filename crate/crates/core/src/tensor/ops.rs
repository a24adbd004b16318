use super::{numel, strides, Element, Op, Result, Tensor, TensorError};

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(TensorError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn one_element<T: Element>(op: &'static str, a: &Tensor<T>, s: &Tensor<T>) -> Result<()> {
    if s.numel() == 1 {
        Ok(())
    } else {
        Err(TensorError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: s.shape().to_vec(),
        })
    }
}

impl<T: Element> Tensor<T> {
    /// Elementwise map with derivative `df(x, y)` expressed through input and output.
    pub(crate) fn unary(&self, tag: &'static str, f: impl Fn(T) -> T, df: fn(T, T) -> T) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(
            tag,
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |p, y, g| {
                let x = p[0].data();
                vec![Some(
                    g.iter()
                        .zip(x.iter().zip(y))
                        .map(|(&g, (&x, &y))| g * df(x, y))
                        .collect(),
                )]
            }),
        )
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let out = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        Ok(Tensor::from_op(
            "add",
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|p, _, g| {
                vec![
                    p[0].requires_grad().then(|| g.to_vec()),
                    p[1].requires_grad().then(|| g.to_vec()),
                ]
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let out = self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        Ok(Tensor::from_op(
            "sub",
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|p, _, g| {
                vec![
                    p[0].requires_grad().then(|| g.to_vec()),
                    p[1].requires_grad().then(|| g.iter().map(|&v| -v).collect()),
                ]
            }),
        ))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let out = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        Ok(Tensor::from_op(
            "mul",
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|p, _, g| {
                let (a, b) = (p[0].data(), p[1].data());
                vec![
                    p[0].requires_grad()
                        .then(|| g.iter().zip(b).map(|(&g, &b)| g * b).collect()),
                    p[1].requires_grad()
                        .then(|| g.iter().zip(a).map(|(&g, &a)| g * a).collect()),
                ]
            }),
        ))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::c(c);
        let out = self.data().iter().map(|&x| x + c).collect();
        Tensor::from_op(
            "add_scalar",
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|_, _, g| vec![Some(g.to_vec())]),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::c(c);
        let out = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op(
            "mul_scalar",
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |_, _, g| vec![Some(g.iter().map(|&v| v * c).collect())]),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.mul_scalar(-1.0)
    }

    /// Multiplies every element by the single value held in `s`.
    pub fn scale_by(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        one_element("scale_by", self, s)?;
        let c = s.data()[0];
        let out = self.data().iter().map(|&x| x * c).collect();
        Ok(Tensor::from_op(
            "scale_by",
            out,
            self.shape().to_vec(),
            vec![self.clone(), s.clone()],
            Box::new(|p, _, g| {
                let c = p[1].data()[0];
                vec![
                    p[0].requires_grad().then(|| g.iter().map(|&v| v * c).collect()),
                    p[1].requires_grad()
                        .then(|| vec![g.iter().zip(p[0].data()).map(|(&g, &x)| g * x).sum()]),
                ]
            }),
        ))
    }

    /// Adds the single value held in `s` to every element.
    pub fn shift_by(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        one_element("shift_by", self, s)?;
        let c = s.data()[0];
        let out = self.data().iter().map(|&x| x + c).collect();
        Ok(Tensor::from_op(
            "shift_by",
            out,
            self.shape().to_vec(),
            vec![self.clone(), s.clone()],
            Box::new(|p, _, g| {
                vec![
                    p[0].requires_grad().then(|| g.to_vec()),
                    p[1].requires_grad().then(|| vec![g.iter().copied().sum()]),
                ]
            }),
        ))
    }

    pub fn powi(&self, n: i32) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&x| x.powi(n)).collect();
        let nf = T::c(f64::from(n));
        Tensor::from_op(
            "powi",
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |p, _, g| {
                vec![Some(
                    g.iter()
                        .zip(p[0].data())
                        .map(|(&g, &x)| g * nf * x.powi(n - 1))
                        .collect(),
                )]
            }),
        )
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary("exp", T::exp, |_, y| y)
    }

    pub fn sin(&self) -> Tensor<T> {
        self.unary("sin", T::sin, |x, _| x.cos())
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self) -> Tensor<T> {
        let total = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![total],
            vec![1],
            vec![self.clone()],
            Box::new(move |_, _, g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        self.sum().mul_scalar(1.0 / self.numel() as f64)
    }

    /// Reinterprets the buffer with a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let op = self.requires_grad().then(|| Op {
            tag: "reshape",
            parents: vec![self.clone()],
            backward: Box::new(|_, _, g: &[T]| vec![Some(g.to_vec())]),
        });
        Ok(Tensor::from_shared(self.shared_data(), shape.to_vec(), op))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        let valid = axes.len() == rank && axes.iter().all(|&a| a < rank && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(TensorError::Invalid(format!(
                "permute: axes {axes:?} invalid for shape {:?}",
                self.shape()
            )));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let out = permute_copy(self.data(), &in_shape, axes);
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let grad_shape = out_shape.clone();
        Ok(Tensor::from_op(
            "permute",
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |_, _, g| vec![Some(permute_copy(g, &grad_shape, &inverse))]),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor<T>> {
        let r = self.rank();
        if r < 2 {
            return Err(TensorError::Rank {
                op: "transpose_last2",
                expected: ">= 2".into(),
                shape: self.shape().to_vec(),
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Index {
                op: "narrow",
                index: axis,
                extent: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::Index {
                op: "narrow",
                index: start + len,
                extent: shape[axis],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis] * inner;
        let mut out = Vec::with_capacity(outer * len * inner);
        let src = self.data();
        for o in 0..outer {
            let base = o * full + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(Tensor::from_op(
            "narrow",
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |p, _, g| {
                let mut gi = vec![T::zero(); p[0].numel()];
                for o in 0..outer {
                    let base = o * full + start * inner;
                    gi[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gi)]
            }),
        ))
    }
}

/// Copies `src` (laid out as `in_shape`) into permuted order, moving
/// whole contiguous runs when trailing axes keep their place.
fn permute_copy<T: Copy>(src: &[T], in_shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = in_shape.len();
    let in_strides = strides(in_shape);
    // trailing axes that stay in place form one contiguous run
    let mut kept = rank;
    while kept > 0 && axes[kept - 1] == kept - 1 {
        kept -= 1;
    }
    let run: usize = in_shape[kept..].iter().product();
    let out_shape: Vec<usize> = axes[..kept].iter().map(|&a| in_shape[a]).collect();
    let step: Vec<usize> = axes[..kept].iter().map(|&a| in_strides[a]).collect();
    let total = numel(in_shape);
    let mut out = Vec::with_capacity(total);
    if kept == 0 {
        out.extend_from_slice(src);
        return out;
    }
    let mut idx = vec![0usize; kept];
    let mut off = 0usize;
    for _ in 0..total / run.max(1) {
        out.extend_from_slice(&src[off..off + run]);
        for d in (0..kept).rev() {
            idx[d] += 1;
            off += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, grad_check_many};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn permute_reorders() {
        let x = t(&[0., 1., 2., 3., 4., 5.], &[2, 3]);
        let y = x.permute(&[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[0., 3., 1., 4., 2., 5.]);
        assert!(x.permute(&[0, 0]).is_err());
        assert!(x.permute(&[0]).is_err());
    }

    #[test]
    fn narrow_middle_axis() {
        let x = t(&(0..24).map(f64::from).collect::<Vec<_>>(), &[2, 3, 4]);
        let y = x.narrow(1, 1, 2).unwrap();
        assert_eq!(y.shape(), &[2, 2, 4]);
        assert_eq!(&y.data()[..4], &[4., 5., 6., 7.]);
        assert_eq!(&y.data()[8..12], &[16., 17., 18., 19.]);
        assert!(x.narrow(1, 2, 2).is_err());
        assert!(x.narrow(3, 0, 1).is_err());
    }

    #[test]
    fn reshape_shares_and_checks() {
        let x = t(&[1., 2., 3., 4.], &[2, 2]);
        assert_eq!(x.reshape(&[4]).unwrap().data(), x.data());
        assert!(x.reshape(&[3]).is_err());
    }

    #[test]
    fn sum_of_sin_matches_cosine() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[12], 1.0, &mut rng);
        let err = grad_check(|x| Ok(x.sin().sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
        let linear = grad_check(|x| Ok(x.sum()), &x, 1e-5).unwrap();
        assert!(linear < 1e-9, "{linear}");
    }

    #[test]
    fn shape_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[4, 2, 3], 1.0, &mut rng);
        let err = grad_check_many(
            |xs| {
                let y = xs[0].permute(&[2, 0, 1])?.narrow(2, 1, 2)?;
                let z = xs[1].narrow(2, 0, 2)?.mul(&y)?;
                Ok(z.reshape(&[16])?.powi(3).sum())
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for seed in 0..10 {
            let _ = seed;
            let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
            let s = Tensor::<f64>::randn(&[1], 1.0, &mut rng);
            let err = grad_check_many(
                |xs| {
                    let y = xs[0].mul(&xs[1])?.sub(&xs[0].exp())?.add(&xs[1].powi(2))?;
                    let y = y.scale_by(&xs[2])?.shift_by(&xs[2])?.add_scalar(0.3).mul_scalar(0.7);
                    Ok(y.sin().mean())
                },
                &[a, b, s],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{err}");
        }
    }
}
