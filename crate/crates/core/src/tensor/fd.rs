use super::Tensor;

/// Central-difference gradient of a scalar function.
///
/// Used as an independent oracle for the tape; it never touches `Tape`.
///
/// # Panics
/// If `step` is not strictly positive.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    assert!(step > 0.0, "finite difference step must be positive, got {step}");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_gives_ones() {
        let x = Tensor::vector(vec![0.3, -2.0, 7.5]);
        let g = finite_diff_grad(|t| t.sum(), &x, 1e-4);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::vector(vec![3.0]);
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &x, 1e-4);
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_gives_zeros() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let g = finite_diff_grad(|_| 4.2, &x, 1e-4);
        assert_eq!(g.data(), &[0.0, 0.0]);
    }
}
