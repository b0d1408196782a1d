use super::Dataset;
use crate::error::{Error, Result};
use crate::skin::CHANNELS;
use crate::tensor::Tensor;

/// Lower bound applied to fitted standard deviations.
pub const STD_FLOOR: f64 = 1e-12;

/// Per-channel z-score statistics fitted on a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != CHANNELS || std.len() != CHANNELS {
            return Err(Error::NormalizationMismatch(format!(
                "expected {CHANNELS} means and stds, got {} and {}",
                mean.len(),
                std.len()
            )));
        }
        if !mean.iter().all(|m| m.is_finite()) || !std.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::NormalizationMismatch(
                "means must be finite and stds strictly positive".into(),
            ));
        }
        Ok(Self { mean, std })
    }

    /// Mean 0 / std 1 on every channel.
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; CHANNELS],
            std: vec![1.0; CHANNELS],
        }
    }
}

/// Population mean and standard deviation of every channel.
pub fn fit_normalization(train: &Dataset) -> Result<NormStats> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = train.len() as f64;
    let mut mean = vec![0.0; CHANNELS];
    for s in &train.samples {
        for (m, v) in mean.iter_mut().zip(&s.delta_b) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; CHANNELS];
    for s in &train.samples {
        for ((acc, v), m) in var.iter_mut().zip(&s.delta_b).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    let std = var
        .into_iter()
        .map(|v| (v / n).sqrt().max(STD_FLOOR))
        .collect();
    NormStats::new(mean, std)
}

pub fn apply_normalization(delta_b: &[f64; CHANNELS], stats: &NormStats) -> [f64; CHANNELS] {
    let mut out = [0.0; CHANNELS];
    for (k, o) in out.iter_mut().enumerate() {
        *o = (delta_b[k] - stats.mean[k]) / stats.std[k];
    }
    out
}

/// Normalized `[4, 4, 3]` model input. Channel `3 s + a` is already
/// row-major over (sensor row, sensor column, axis).
pub fn model_input(delta_b: &[f64; CHANNELS], stats: &NormStats) -> Tensor {
    Tensor::new(vec![4, 4, 3], apply_normalization(delta_b, stats).to_vec()).expect("48 channels")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Sample, TrajectorySpec};
    use crate::skin::{ContactLabel, SkinConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(rows: Vec<[f64; CHANNELS]>) -> Dataset {
        let mut ds = Dataset::empty(SkinConfig::default(), TrajectorySpec::default());
        ds.samples = rows
            .into_iter()
            .map(|delta_b| Sample {
                delta_b,
                label: ContactLabel::new(1.0, 1.0, 1.0),
            })
            .collect();
        ds
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(matches!(
            fit_normalization(&dataset(vec![])),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn constant_channel_is_floored() {
        let ds = dataset(vec![[3.0; CHANNELS]; 4]);
        let s = fit_normalization(&ds).unwrap();
        assert!(s.std.iter().all(|&v| v == STD_FLOOR));
        assert!(apply_normalization(&[3.0; CHANNELS], &s)
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn plus_minus_one_is_unchanged() {
        let ds = dataset(vec![[-1.0; CHANNELS], [1.0; CHANNELS]]);
        let s = fit_normalization(&ds).unwrap();
        assert!(s.mean.iter().all(|&v| v == 0.0));
        assert!(s.std.iter().all(|&v| v == 1.0));
        assert_eq!(apply_normalization(&[-1.0; CHANNELS], &s), [-1.0; CHANNELS]);
    }

    #[test]
    fn normalized_training_channels_are_standard() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows = (0..500)
            .map(|_| {
                let mut r = [0.0; CHANNELS];
                for (k, v) in r.iter_mut().enumerate() {
                    *v = rng.random_range(-1.0..1.0) * (k as f64 + 1.0) * 30.0 + k as f64 * 7.0;
                }
                r
            })
            .collect();
        let ds = dataset(rows);
        let s = fit_normalization(&ds).unwrap();
        let z: Vec<[f64; CHANNELS]> = ds
            .samples
            .iter()
            .map(|x| apply_normalization(&x.delta_b, &s))
            .collect();
        for k in 0..CHANNELS {
            let n = z.len() as f64;
            let m = z.iter().map(|r| r[k]).sum::<f64>() / n;
            let sd = (z.iter().map(|r| (r[k] - m).powi(2)).sum::<f64>() / n).sqrt();
            assert!(
                m.abs() < 1e-9 && (sd - 1.0).abs() < 1e-9,
                "channel {k}: {m} {sd}"
            );
        }
    }

    #[test]
    fn stats_validation() {
        assert!(NormStats::new(vec![0.0; 47], vec![1.0; 47]).is_err());
        assert!(NormStats::new(vec![0.0; 48], vec![0.0; 48]).is_err());
        assert!(NormStats::new(vec![f64::NAN; 48], vec![1.0; 48]).is_err());
    }
}
