use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;

/// Fan-in scaled uniform weights in `±sqrt(6 / fan_in)`, whose standard
/// deviation is `sqrt(2 / fan_in)`. Each layer index draws from its own
/// ChaCha stream of `seed`.
pub fn init_weight(shape: &[usize], fan_in: usize, seed: u64, layer: u64) -> Tensor {
    assert!(fan_in > 0, "fan_in must be positive");
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(layer);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    t
}

pub fn init_bias(len: usize) -> Tensor {
    Tensor::zeros(&[len])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bias_is_zero() {
        assert!(init_bias(64).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = init_weight(&[3, 3, 4, 8], 36, 42, 2);
        let b = init_weight(&[3, 3, 4, 8], 36, 42, 2);
        assert_eq!(a, b);
        let c = init_weight(&[3, 3, 4, 8], 36, 42, 3);
        assert_ne!(a, c);
    }

    #[test]
    fn weight_std_follows_fan_in() {
        let w = init_weight(&[512, 512], 512, 7, 0);
        let bound = (6.0f64 / 512.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let target = (2.0f64 / 512.0).sqrt();
        assert!(
            (var.sqrt() / target - 1.0).abs() < 0.1,
            "std {}",
            var.sqrt()
        );
    }
}
