//! Test-set metrics, per-location error maps and a nearest-sensor
//! comparator.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::{model_input, Dataset, NormStats, Sample};
use crate::error::{Error, Result};
use crate::model::{forward, ModelParams};
use crate::skin::{ContactLabel, SkinConfig, CHANNELS, SENSORS};

#[derive(Debug, Clone, PartialEq)]
pub struct SampleError {
    pub label: ContactLabel,
    pub prediction: [f64; 3],
    pub xy_error_mm: f64,
    pub z_error_mm: f64,
}

impl SampleError {
    pub fn new(label: ContactLabel, prediction: [f64; 3]) -> Self {
        Self {
            xy_error_mm: (prediction[0] - label.x_mm).hypot(prediction[1] - label.y_mm),
            z_error_mm: (prediction[2] - label.z_mm).abs(),
            label,
            prediction,
        }
    }
}

/// Per-sample errors with their population mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub records: Vec<SampleError>,
    pub xy_mean: f64,
    pub xy_std: f64,
    pub z_mean: f64,
    pub z_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ErrorReport {
    pub fn from_records(records: Vec<SampleError>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (xy_mean, xy_std) = mean_std(records.iter().map(|r| r.xy_error_mm));
        let (z_mean, z_std) = mean_std(records.iter().map(|r| r.z_error_mm));
        Ok(Self {
            records,
            xy_mean,
            xy_std,
            z_mean,
            z_std,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Single human-readable line.
    pub fn summary(&self) -> String {
        format!(
            "n={} xy error {:.3} +/- {:.3} mm, z error {:.3} +/- {:.3} mm",
            self.len(),
            self.xy_mean,
            self.xy_std,
            self.z_mean,
            self.z_std
        )
    }

    /// `key=value` lines, values at full precision.
    pub fn to_key_values(&self) -> String {
        format!(
            "samples={}\nxy_mean_mm={:?}\nxy_std_mm={:?}\nz_mean_mm={:?}\nz_std_mm={:?}\n",
            self.len(),
            self.xy_mean,
            self.xy_std,
            self.z_mean,
            self.z_std
        )
    }
}

/// Scores an arbitrary predictor over `test`.
pub fn evaluate_with<F>(test: &Dataset, mut predict: F) -> Result<ErrorReport>
where
    F: FnMut(&Sample) -> Result<[f64; 3]>,
{
    let records = test
        .samples
        .iter()
        .map(|s| Ok(SampleError::new(s.label, predict(s)?)))
        .collect::<Result<Vec<_>>>()?;
    ErrorReport::from_records(records)
}

/// Scores the network on `test` using the training normalization `stats`.
/// A test set that carries different statistics is rejected.
pub fn evaluate(params: &ModelParams, stats: &NormStats, test: &Dataset) -> Result<ErrorReport> {
    if let Some(own) = &test.normalization {
        if own != stats {
            return Err(Error::NormalizationMismatch(
                "test set statistics differ from the checkpoint's training statistics".into(),
            ));
        }
    }
    evaluate_with(test, |s| forward(params, &model_input(&s.delta_b, stats)))
}

/// Mean errors per distinct `(x, y)` location, in first-appearance order.
pub fn error_map(report: &ErrorReport) -> Vec<(f64, f64, f64, f64)> {
    let mut index = HashMap::new();
    let mut acc: Vec<(f64, f64, f64, f64, usize)> = Vec::new();
    for r in &report.records {
        let key = (r.label.x_mm.to_bits(), r.label.y_mm.to_bits());
        let i = *index.entry(key).or_insert_with(|| {
            acc.push((r.label.x_mm, r.label.y_mm, 0.0, 0.0, 0));
            acc.len() - 1
        });
        acc[i].2 += r.xy_error_mm;
        acc[i].3 += r.z_error_mm;
        acc[i].4 += 1;
    }
    acc.into_iter()
        .map(|(x, y, xy, z, n)| (x, y, xy / n as f64, z / n as f64))
        .collect()
}

/// Writes `x_mm,y_mm,xy_err_mm,z_err_mm`, one row per location.
pub fn error_map_export(report: &ErrorReport, path: &Path) -> Result<()> {
    let mut out = String::from("x_mm,y_mm,xy_err_mm,z_err_mm\n");
    for (x, y, xy, z) in error_map(report) {
        let _ = writeln!(out, "{x},{y},{xy},{z}");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Position of the sensor with the largest |ΔB| (first index on ties).
pub fn nearest_sensor_baseline(delta_b: &[f64; CHANNELS], config: &SkinConfig) -> [f64; 2] {
    let mut best = (0, f64::NEG_INFINITY);
    for s in 0..SENSORS {
        let b = &delta_b[3 * s..3 * s + 3];
        let mag = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
        if mag > best.1 {
            best = (s, mag);
        }
    }
    let p = config.sensor_positions()[best.0];
    [p[0], p[1]]
}

/// Scores the nearest-sensor comparator; its depth estimate is always 0.
pub fn evaluate_baseline(test: &Dataset) -> Result<ErrorReport> {
    evaluate_with(test, |s| {
        let [x, y] = nearest_sensor_baseline(&s.delta_b, &test.config);
        Ok([x, y, 0.0])
    })
}
