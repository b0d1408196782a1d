use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    /// Shuffle samples, then cut.
    Random,
    /// Assign whole `(x, y)` locations to one side.
    HeldOutLocations,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SplitMode::Random),
            "held-out-locations" => Ok(SplitMode::HeldOutLocations),
            other => Err(Error::InvalidConfig(format!(
                "unknown split mode `{other}` (random | held-out-locations)"
            ))),
        }
    }
}

fn round_half_up(v: f64) -> usize {
    (v + 0.5).floor() as usize
}

/// Partitions `ds` into `(train, test)`; the test side receives
/// `round_half_up(n * test_fraction)` samples (random mode) or locations
/// (held-out mode).
pub fn split(
    ds: &Dataset,
    mode: SplitMode,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let (train, test) = match mode {
        SplitMode::Random => {
            let mut order: Vec<usize> = (0..ds.len()).collect();
            order.shuffle(&mut rng);
            let n_test = round_half_up(ds.len() as f64 * test_fraction);
            let test = order[..n_test.min(order.len())]
                .iter()
                .map(|&i| ds.samples[i].clone())
                .collect::<Vec<_>>();
            let train = order[n_test.min(order.len())..]
                .iter()
                .map(|&i| ds.samples[i].clone())
                .collect::<Vec<_>>();
            (train, test)
        }
        SplitMode::HeldOutLocations => {
            let key = |s: &super::Sample| (s.label.x_mm.to_bits(), s.label.y_mm.to_bits());
            let mut locations = Vec::new();
            let mut seen = HashMap::new();
            for s in &ds.samples {
                seen.entry(key(s)).or_insert_with(|| {
                    locations.push(key(s));
                    locations.len() - 1
                });
            }
            locations.shuffle(&mut rng);
            let n_test = round_half_up(locations.len() as f64 * test_fraction).min(locations.len());
            let held: std::collections::HashSet<_> = locations[..n_test].iter().copied().collect();
            let (test, train): (Vec<_>, Vec<_>) = ds
                .samples
                .iter()
                .cloned()
                .partition(|s| held.contains(&key(s)));
            (train, test)
        }
    };
    if test.is_empty() {
        return Err(Error::EmptySplit { side: "test" });
    }
    if train.is_empty() {
        return Err(Error::EmptySplit { side: "train" });
    }
    Ok((ds.with_samples(train), ds.with_samples(test)))
}
