//! Synthetic indentation datasets: a serpentine grid trajectory over the
//! skin, one simulated ΔB frame per (point, depth, repeat), CSV persistence,
//! train/test splitting and per-channel z-score normalization.

mod csv;
mod norm;
mod split;

pub use self::csv::{load_csv, save_csv, CSV_MAGIC};
pub use norm::{apply_normalization, fit_normalization, model_input, NormStats, STD_FLOOR};
pub use split::{split, SplitMode};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{KvList, KvMap};
use crate::error::{Error, Result};
use crate::skin::{deform, delta_frame, read_sensors, ContactLabel, SkinConfig, CHANNELS};

/// Indentation protocol: a centred `grid_nx x grid_ny` grid, each point
/// pressed at every depth of the schedule `repeats_per_depth` times.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpec {
    pub grid_nx: usize,
    pub grid_ny: usize,
    pub pitch_mm: f64,
    pub depth_schedule_mm: Vec<f64>,
    pub repeats_per_depth: usize,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            grid_nx: 19,
            grid_ny: 19,
            pitch_mm: 7.5,
            depth_schedule_mm: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            repeats_per_depth: 5,
        }
    }
}

impl TrajectorySpec {
    /// First grid coordinate on each axis, centring the grid on the skin.
    fn origin(&self, config: &SkinConfig) -> (f64, f64) {
        let span_x = (self.grid_nx.saturating_sub(1)) as f64 * self.pitch_mm;
        let span_y = (self.grid_ny.saturating_sub(1)) as f64 * self.pitch_mm;
        (
            (config.area_x_mm - span_x) / 2.0,
            (config.area_y_mm - span_y) / 2.0,
        )
    }

    pub fn validate(&self, config: &SkinConfig) -> Result<()> {
        if self.grid_nx == 0
            || self.grid_ny == 0
            || self.repeats_per_depth == 0
            || !(self.pitch_mm > 0.0)
        {
            return Err(Error::InvalidConfig(format!(
                "degenerate trajectory {self:?}"
            )));
        }
        let (ox, oy) = self.origin(config);
        if ox < 0.0 || oy < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "{} x {} grid at {} mm pitch exceeds the {} x {} mm skin",
                self.grid_nx, self.grid_ny, self.pitch_mm, config.area_x_mm, config.area_y_mm
            )));
        }
        if let Some(d) = self
            .depth_schedule_mm
            .iter()
            .find(|&&d| !(0.0..=config.z_max_mm).contains(&d))
        {
            return Err(Error::InvalidConfig(format!(
                "depth {d} mm outside [0, {}] mm",
                config.z_max_mm
            )));
        }
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut KvList) {
        kv.usize("grid_nx", self.grid_nx);
        kv.usize("grid_ny", self.grid_ny);
        kv.f64("grid_pitch_mm", self.pitch_mm);
        kv.f64_list("depth_schedule_mm", &self.depth_schedule_mm);
        kv.usize("repeats_per_depth", self.repeats_per_depth);
    }

    pub fn read_kv(&mut self, kv: &mut KvMap) -> Result<()> {
        kv.take_usize("grid_nx", &mut self.grid_nx)?;
        kv.take_usize("grid_ny", &mut self.grid_ny)?;
        kv.take_f64("grid_pitch_mm", &mut self.pitch_mm)?;
        kv.take_f64_list("depth_schedule_mm", &mut self.depth_schedule_mm)?;
        kv.take_usize("repeats_per_depth", &mut self.repeats_per_depth)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub delta_b: [f64; CHANNELS],
    pub label: ContactLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SkinConfig,
    pub trajectory: TrajectorySpec,
    pub samples: Vec<Sample>,
    pub normalization: Option<NormStats>,
}

impl Dataset {
    pub fn empty(config: SkinConfig, trajectory: TrajectorySpec) -> Self {
        Self {
            config,
            trajectory,
            samples: Vec::new(),
            normalization: None,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same metadata, different samples.
    pub(crate) fn with_samples(&self, samples: Vec<Sample>) -> Self {
        Self {
            config: self.config.clone(),
            trajectory: self.trajectory.clone(),
            samples,
            normalization: self.normalization.clone(),
        }
    }
}

/// Grid points in serpentine row-major order (even rows left to right, odd
/// rows right to left), each expanded into one label per depth and repeat.
pub fn grid_trajectory(spec: &TrajectorySpec, config: &SkinConfig) -> Result<Vec<ContactLabel>> {
    spec.validate(config)?;
    let (ox, oy) = spec.origin(config);
    let mut out = Vec::with_capacity(
        spec.grid_nx * spec.grid_ny * spec.depth_schedule_mm.len() * spec.repeats_per_depth,
    );
    for iy in 0..spec.grid_ny {
        for k in 0..spec.grid_nx {
            let ix = if iy % 2 == 0 { k } else { spec.grid_nx - 1 - k };
            let x = ox + ix as f64 * spec.pitch_mm;
            let y = oy + iy as f64 * spec.pitch_mm;
            for &z in &spec.depth_schedule_mm {
                for _ in 0..spec.repeats_per_depth {
                    out.push(ContactLabel::new(x, y, z));
                }
            }
        }
    }
    Ok(out)
}

/// Simulates every trajectory label and keeps the contact samples (`z > 0`).
/// Label `i` draws its sensor noise from ChaCha stream `i` of `seed`, which
/// is recorded in the returned config.
pub fn generate_dataset(config: &SkinConfig, spec: &TrajectorySpec, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let labels = grid_trajectory(spec, config)?;
    let baseline = config.baseline()?;
    let mut samples = Vec::with_capacity(labels.len());
    for (i, label) in labels.into_iter().enumerate() {
        if label.z_mm <= 0.0 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let magnets = deform(config, &label)?;
        let frame = read_sensors(config, &magnets, &mut rng)?;
        samples.push(Sample {
            delta_b: delta_frame(&frame, &baseline),
            label,
        });
    }
    Ok(Dataset {
        config: SkinConfig {
            seed,
            ..config.clone()
        },
        trajectory: spec.clone(),
        samples,
        normalization: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_is_centred() {
        let cfg = SkinConfig::default();
        let spec = TrajectorySpec {
            depth_schedule_mm: vec![1.0],
            repeats_per_depth: 1,
            ..TrajectorySpec::default()
        };
        let labels = grid_trajectory(&spec, &cfg).unwrap();
        assert_eq!(labels.len(), 361);
        let mut pts: Vec<(u64, u64)> = labels
            .iter()
            .map(|l| (l.x_mm.to_bits(), l.y_mm.to_bits()))
            .collect();
        pts.sort();
        pts.dedup();
        assert_eq!(pts.len(), 361);
        let min_x = labels.iter().map(|l| l.x_mm).fold(f64::INFINITY, f64::min);
        let max_x = labels
            .iter()
            .map(|l| l.x_mm)
            .fold(f64::NEG_INFINITY, f64::max);
        let min_y = labels.iter().map(|l| l.y_mm).fold(f64::INFINITY, f64::min);
        let max_y = labels
            .iter()
            .map(|l| l.y_mm)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((min_x, max_x, min_y, max_y), (2.5, 137.5, 2.5, 137.5));
    }

    #[test]
    fn single_point_grid_is_centre() {
        let spec = TrajectorySpec {
            grid_nx: 1,
            grid_ny: 1,
            depth_schedule_mm: vec![2.0],
            repeats_per_depth: 1,
            ..TrajectorySpec::default()
        };
        let labels = grid_trajectory(&spec, &SkinConfig::default()).unwrap();
        assert_eq!(labels, vec![ContactLabel::new(70.0, 70.0, 2.0)]);
    }

    #[test]
    fn two_by_two_serpentine() {
        let spec = TrajectorySpec {
            grid_nx: 2,
            grid_ny: 2,
            pitch_mm: 10.0,
            depth_schedule_mm: vec![1.0],
            repeats_per_depth: 1,
        };
        let labels = grid_trajectory(&spec, &SkinConfig::default()).unwrap();
        // Grid indices (0,0), (1,0), (1,1), (0,1) with origin 65 mm.
        let want = [(65.0, 65.0), (75.0, 65.0), (75.0, 75.0), (65.0, 75.0)];
        let got: Vec<(f64, f64)> = labels.iter().map(|l| (l.x_mm, l.y_mm)).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn expansion_order_and_count() {
        let spec = TrajectorySpec {
            grid_nx: 3,
            grid_ny: 2,
            pitch_mm: 5.0,
            depth_schedule_mm: vec![1.0, 3.0],
            repeats_per_depth: 2,
        };
        let labels = grid_trajectory(&spec, &SkinConfig::default()).unwrap();
        assert_eq!(labels.len(), 3 * 2 * 2 * 2);
        let z: Vec<f64> = labels[..4].iter().map(|l| l.z_mm).collect();
        assert_eq!(z, [1.0, 1.0, 3.0, 3.0]);
    }

    #[test]
    fn oversized_grid_is_rejected() {
        let spec = TrajectorySpec {
            grid_nx: 20,
            pitch_mm: 7.5,
            ..TrajectorySpec::default()
        };
        assert!(matches!(
            grid_trajectory(&spec, &SkinConfig::default()),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn zero_depth_schedule_yields_no_samples() {
        let spec = TrajectorySpec {
            grid_nx: 3,
            grid_ny: 3,
            depth_schedule_mm: vec![0.0],
            repeats_per_depth: 2,
            ..TrajectorySpec::default()
        };
        let ds = generate_dataset(&SkinConfig::default(), &spec, 1).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn noiseless_repeats_are_identical() {
        let mut cfg = SkinConfig::default();
        cfg.noise_sigma_ut = 0.0;
        let spec = TrajectorySpec {
            grid_nx: 3,
            grid_ny: 3,
            depth_schedule_mm: vec![1.0, 4.0],
            repeats_per_depth: 2,
            ..TrajectorySpec::default()
        };
        let ds = generate_dataset(&cfg, &spec, 1).unwrap();
        for pair in ds.samples.chunks_exact(2) {
            assert_eq!(
                pair[0].delta_b.map(f64::to_bits),
                pair[1].delta_b.map(f64::to_bits)
            );
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = TrajectorySpec {
            grid_nx: 4,
            grid_ny: 4,
            ..TrajectorySpec::default()
        };
        let a = generate_dataset(&SkinConfig::default(), &spec, 3).unwrap();
        let b = generate_dataset(&SkinConfig::default(), &spec, 3).unwrap();
        let c = generate_dataset(&SkinConfig::default(), &spec, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 4 * 4 * 5 * 5);
    }
}
