use super::{Result, Tensor, TensorError};

/// Finite-difference gradient oracle for a single input.
///
/// Returns the maximum over coordinates of
/// `|analytic − central difference| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    grad_check_many(|xs| f(&xs[0]), std::slice::from_ref(x), h)
}

/// [`grad_check`] over several inputs at once; the error is the maximum over all of them.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let y = f(xs)?;
        if y.numel() != 1 {
            return Err(TensorError::Rank {
                op: "grad_check",
                expected: "scalar".into(),
                shape: y.shape().to_vec(),
            });
        }
        let v = y.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TensorError::NonFinite(format!("f(x) = {v}")))
        }
    };

    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach().with_grad()).collect();
    let y = f(&leaves)?;
    eval(&leaves)?;
    y.backward()?;

    let mut worst = 0.0f64;
    for (which, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let base = leaf.to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let probe = |delta: f64| -> Result<f64> {
                let mut data = base.clone();
                data[i] += delta;
                let mut xs: Vec<Tensor<f64>> = inputs.iter().map(Tensor::detach).collect();
                xs[which] = Tensor::from_vec(data, leaf.shape())?;
                eval(&xs)
            };
            let numeric = (probe(h)? - probe(-h)?) / (2.0 * h);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
