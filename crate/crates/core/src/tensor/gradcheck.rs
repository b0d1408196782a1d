use super::Tensor;

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central-difference gradient of a scalar function of a tensor:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad<F>(f: F, at: &Tensor, h: f64) -> Tensor
where
    F: Fn(&Tensor) -> f64,
{
    let mut probe = at.clone();
    let mut grad = Tensor::zeros_like(at);
    for i in 0..at.len() {
        let x = at.data()[i];
        probe.data_mut()[i] = x + h;
        let plus = f(&probe);
        probe.data_mut()[i] = x - h;
        let minus = f(&probe);
        probe.data_mut()[i] = x;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// `|a - b| <= max(abs, rel * max(|a|, |b|))`.
pub fn allclose(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    let diff = (a - b).abs();
    diff <= abs || diff <= rel * a.abs().max(b.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.0, 4.0, 2.0, 0.0, 9.5]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().sum(), &x, DEFAULT_FD_STEP);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::vector(vec![3.0]);
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &x, DEFAULT_FD_STEP);
        assert!((g.data()[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn allclose_floors() {
        assert!(allclose(1e-12, 0.0, 1e-6, 1e-9));
        assert!(allclose(1.0, 1.0 + 1e-7, 1e-6, 0.0));
        assert!(!allclose(1.0, 1.001, 1e-6, 1e-9));
    }
}
