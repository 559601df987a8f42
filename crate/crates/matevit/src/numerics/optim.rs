//! SGD with momentum and the cosine-annealed learning-rate schedule.

use super::scalar::Scalar;
use super::tensor::{Tensor, TensorError};

/// One SGD-with-momentum update across all parameters:
/// `v <- momentum * v + g`, `p <- p - lr * v`.
///
/// Parameters with no accumulated gradient are treated as having zero
/// gradient. Velocity buffers must match parameter shapes.
pub fn sgd_momentum_step<T: Scalar>(
    params: &[Tensor<T>],
    velocity: &mut [Vec<T>],
    lr: T,
    momentum: T,
) {
    assert_eq!(params.len(), velocity.len(), "one velocity per parameter");
    for (p, v) in params.iter().zip(velocity.iter_mut()) {
        debug_assert_eq!(p.numel(), v.len());
        let grad = p.grad();
        let mut data = p.data_mut();
        for j in 0..data.len() {
            let g = grad.as_ref().map_or(T::zero(), |g| g[j]);
            v[j] = momentum * v[j] + g;
            data[j] = data[j] - lr * v[j];
        }
    }
}

/// Cosine annealing: `lr_min + (lr0 - lr_min) * (1 + cos(pi * t / total)) / 2`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, lr_min: f64) -> Result<f64, TensorError> {
    if total == 0 {
        return Err(TensorError::ZeroTotalSteps);
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + phase.cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64]) -> Tensor<f64> {
        Tensor::param(values.to_vec(), &[values.len()]).unwrap()
    }

    #[test]
    fn zero_momentum_is_plain_gradient_descent() {
        let p = param(&[10.0]);
        let loss = p.mul(&p).unwrap().sum_all(); // grad = 2p = 20
        loss.backward().unwrap();
        let mut v = vec![vec![0.0]];
        sgd_momentum_step(&[p.clone()], &mut v, 1.0, 0.0);
        assert_eq!(p.to_vec(), vec![-10.0]);
    }

    #[test]
    fn momentum_recurrence_matches_hand_computation() {
        // Constant gradient 1, momentum 0.9, lr 1:
        // step 1: v=1, p -= 1; step 2: v=1.9, p -= 1.9; total 2.9.
        let p = param(&[0.0]);
        let mut v = vec![vec![0.0]];
        for _ in 0..2 {
            p.zero_grad();
            let loss = p.sum_all(); // grad = 1
            loss.backward().unwrap();
            sgd_momentum_step(&[p.clone()], &mut v, 1.0, 0.9);
        }
        assert!((p.to_vec()[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let p = param(&[1.5, -2.5]);
        let loss = p.mul(&p).unwrap().sum_all();
        loss.backward().unwrap();
        let mut v = vec![vec![0.0, 0.0]];
        sgd_momentum_step(&[p.clone()], &mut v, 0.0, 0.9);
        assert_eq!(p.to_vec(), vec![1.5, -2.5]);
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        // Initial value equals lr0 = 0.01.
        assert!((cosine_lr(0, 100, 0.01, 0.0).unwrap() - 0.01).abs() < 1e-15);
        // cos(pi) = -1 lands on lr_min.
        assert!((cosine_lr(100, 100, 0.01, 1e-4).unwrap() - 1e-4).abs() < 1e-15);
        // cos(pi/2) = 0 lands halfway.
        let mid = cosine_lr(50, 100, 0.01, 0.002).unwrap();
        assert!((mid - (0.01 + 0.002) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_total_steps_is_an_error() {
        assert!(matches!(
            cosine_lr(0, 0, 0.01, 0.0),
            Err(TensorError::ZeroTotalSteps)
        ));
    }
}
