//! Central-difference gradient verification.

use super::scalar::Scalar;
use super::tensor::{no_grad, Tensor, TensorError};

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(x+h) - f(x-h)) / 2h`, element by element over every tensor in
/// `inputs`, and returns the worst relative error. The relative-error
/// denominator is floored at 1e-8 so near-zero gradients do not blow up the
/// ratio.
///
/// `f` must be a deterministic scalar-valued function of the `inputs`
/// (typically closed over), re-runnable any number of times. Inputs are
/// perturbed in place and restored, so they must be leaf tensors whose
/// buffers are not aliased elsewhere.
pub fn finite_diff_check<T: Scalar>(
    mut f: impl FnMut() -> Result<Tensor<T>, TensorError>,
    inputs: &[Tensor<T>],
    h: T,
) -> Result<f64, TensorError> {
    // Analytic pass.
    for t in inputs {
        t.zero_grad();
    }
    let out = f()?;
    if out.numel() != 1 {
        return Err(TensorError::BackwardNonScalar {
            shape: out.shape().to_vec(),
        });
    }
    if !out.item().is_finite() {
        return Err(TensorError::NonFinite {
            op: "finite_diff_check",
        });
    }
    out.backward()?;
    let analytic: Vec<Vec<T>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![T::zero(); t.numel()]))
        .collect();

    let two_h = h.to_f64() * 2.0;
    let mut worst = 0.0f64;
    for (input, grads) in inputs.iter().zip(&analytic) {
        for j in 0..input.numel() {
            let original = input.data()[j];
            input.data_mut()[j] = original + h;
            let plus = no_grad(&mut f)?.item().to_f64();
            input.data_mut()[j] = original - h;
            let minus = no_grad(&mut f)?.item().to_f64();
            input.data_mut()[j] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(TensorError::NonFinite {
                    op: "finite_diff_check",
                });
            }
            let numeric = (plus - minus) / two_h;
            let a = grads[j].to_f64();
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_exactly() {
        // Central difference is exact for quadratics up to rounding.
        let x = Tensor::<f64>::param(vec![1.0], &[1]).unwrap();
        let err = finite_diff_check(|| x.mul(&x), &[x.clone()], 1e-4).unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn softmax_row_sum_is_constant() {
        // f = sum(softmax(x)) == 1 everywhere, so the gradient is ~0.
        let x = Tensor::<f64>::param(vec![0.3, -1.2, 2.0, 0.0], &[1, 4]).unwrap();
        let err = finite_diff_check(|| Ok(x.softmax_rows()?.sum_all()), &[x.clone()], 1e-4).unwrap();
        assert!(err < 1e-8, "relative error {err}");
        // And the analytic gradient itself is numerically zero.
        let g = x.grad().unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let x = Tensor::<f64>::param(vec![f64::INFINITY], &[1]).unwrap();
        let err = finite_diff_check(|| Ok(x.sum_all()), &[x.clone()], 1e-4).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }
}
