//! Analytic forward model of the magnet-lattice skin.
//!
//! A contact at `(x, y)` with indentation `z` pushes every magnet down by a
//! Gaussian bump `w = -z exp(-r^2 / 2 sigma^2)` and tilts its moment to the
//! local surface normal of that bump. Each Hall sensor sees the superposed
//! point-dipole field of all magnets plus Gaussian noise.
//!
//! Units are millimetres and microtesla. The moment unit is mA·mm², for which
//! `mu0 / 4pi` equals [`FIELD_CONSTANT`] μT·mm³/(mA·mm²).

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::config::{KvList, KvMap};
use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// `mu0 / 4pi` in μT·mm³ per mA·mm² of moment.
pub const FIELD_CONSTANT: f64 = 0.1;

/// Sensors per frame (4 x 4 grid).
pub const SENSORS: usize = 16;
/// Channels per frame: channel `3 * s + a` is axis `a` (x, y, z) of sensor `s`.
pub const CHANNELS: usize = 3 * SENSORS;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridLayout {
    pub count_x: usize,
    pub count_y: usize,
    pub pitch_mm: f64,
    /// Position of the first row/column on both axes.
    pub origin_offset_mm: f64,
}

impl GridLayout {
    /// Row-major (rows along y) in-plane positions.
    pub fn positions(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.count_x * self.count_y);
        for row in 0..self.count_y {
            for col in 0..self.count_x {
                out.push([
                    self.origin_offset_mm + col as f64 * self.pitch_mm,
                    self.origin_offset_mm + row as f64 * self.pitch_mm,
                ]);
            }
        }
        out
    }

    fn validate(&self, what: &str, area: (f64, f64)) -> Result<()> {
        if self.count_x == 0
            || self.count_y == 0
            || !(self.pitch_mm > 0.0)
            || !(self.origin_offset_mm >= 0.0)
        {
            return Err(Error::InvalidConfig(format!(
                "{what} grid {self:?} has non-positive counts or pitch"
            )));
        }
        let far_x = self.origin_offset_mm + (self.count_x - 1) as f64 * self.pitch_mm;
        let far_y = self.origin_offset_mm + (self.count_y - 1) as f64 * self.pitch_mm;
        if far_x > area.0 || far_y > area.1 {
            return Err(Error::InvalidConfig(format!(
                "{what} grid extends outside the skin area"
            )));
        }
        Ok(())
    }
}

/// Physical description of the simulated skin.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinConfig {
    pub area_x_mm: f64,
    pub area_y_mm: f64,
    pub magnet_grid: GridLayout,
    pub sensor_grid: GridLayout,
    /// Vertical gap between the magnet rest plane (z = 0) and the sensors.
    pub sensor_standoff_mm: f64,
    /// Per-magnet moment magnitude; the rest moment points along +z.
    pub dipole_moment_ma_mm2: f64,
    pub kernel_sigma_mm: f64,
    pub noise_sigma_ut: f64,
    /// Minimum magnet-sensor distance before the point-dipole model is
    /// considered singular.
    pub r_min_mm: f64,
    pub z_max_mm: f64,
    pub sample_rate_hz: f64,
    pub seed: u64,
}

impl Default for SkinConfig {
    fn default() -> Self {
        Self {
            area_x_mm: 140.0,
            area_y_mm: 140.0,
            magnet_grid: GridLayout {
                count_x: 7,
                count_y: 7,
                pitch_mm: 20.0,
                origin_offset_mm: 10.0,
            },
            sensor_grid: GridLayout {
                count_x: 4,
                count_y: 4,
                pitch_mm: 30.0,
                origin_offset_mm: 25.0,
            },
            sensor_standoff_mm: 10.0,
            dipole_moment_ma_mm2: 7.2e6,
            kernel_sigma_mm: 15.0,
            noise_sigma_ut: 0.5,
            r_min_mm: 1.0,
            z_max_mm: 5.0,
            sample_rate_hz: 41.7,
            seed: 0,
        }
    }
}

impl SkinConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("area_x_mm", self.area_x_mm),
            ("area_y_mm", self.area_y_mm),
            ("sensor_standoff_mm", self.sensor_standoff_mm),
            ("dipole_moment_ma_mm2", self.dipole_moment_ma_mm2),
            ("kernel_sigma_mm", self.kernel_sigma_mm),
            ("r_min_mm", self.r_min_mm),
            ("z_max_mm", self.z_max_mm),
            ("sample_rate_hz", self.sample_rate_hz),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if !(self.noise_sigma_ut >= 0.0 && self.noise_sigma_ut.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise_sigma_ut must be >= 0, got {}",
                self.noise_sigma_ut
            )));
        }
        let area = (self.area_x_mm, self.area_y_mm);
        self.magnet_grid.validate("magnet", area)?;
        self.sensor_grid.validate("sensor", area)?;
        if self.sensor_grid.count_x * self.sensor_grid.count_y != SENSORS {
            return Err(Error::InvalidConfig(format!(
                "sensor grid must hold {SENSORS} sensors (4 x 4), got {} x {}",
                self.sensor_grid.count_x, self.sensor_grid.count_y
            )));
        }
        Ok(())
    }

    pub fn sensor_positions(&self) -> Vec<Vec3> {
        self.sensor_grid
            .positions()
            .into_iter()
            .map(|[x, y]| [x, y, -self.sensor_standoff_mm])
            .collect()
    }

    pub fn rest_magnets(&self) -> Vec<MagnetState> {
        self.magnet_grid
            .positions()
            .into_iter()
            .map(|[x, y]| MagnetState {
                position_mm: [x, y, 0.0],
                moment_ma_mm2: [0.0, 0.0, self.dipole_moment_ma_mm2],
            })
            .collect()
    }

    /// Noise-free reading with every magnet at rest.
    pub fn baseline(&self) -> Result<SensorFrame> {
        read_sensors_exact(self, &self.rest_magnets(), 0.0)
    }

    pub fn to_kv(&self, kv: &mut KvList) {
        kv.f64("area_x_mm", self.area_x_mm);
        kv.f64("area_y_mm", self.area_y_mm);
        kv.usize("magnet_count_x", self.magnet_grid.count_x);
        kv.usize("magnet_count_y", self.magnet_grid.count_y);
        kv.f64("magnet_pitch_mm", self.magnet_grid.pitch_mm);
        kv.f64("magnet_offset_mm", self.magnet_grid.origin_offset_mm);
        kv.usize("sensor_count_x", self.sensor_grid.count_x);
        kv.usize("sensor_count_y", self.sensor_grid.count_y);
        kv.f64("sensor_pitch_mm", self.sensor_grid.pitch_mm);
        kv.f64("sensor_offset_mm", self.sensor_grid.origin_offset_mm);
        kv.f64("sensor_standoff_mm", self.sensor_standoff_mm);
        kv.f64("dipole_moment_ma_mm2", self.dipole_moment_ma_mm2);
        kv.f64("kernel_sigma_mm", self.kernel_sigma_mm);
        kv.f64("noise_sigma_ut", self.noise_sigma_ut);
        kv.f64("r_min_mm", self.r_min_mm);
        kv.f64("z_max_mm", self.z_max_mm);
        kv.f64("sample_rate_hz", self.sample_rate_hz);
        kv.int("seed", self.seed);
    }

    /// Overrides fields whose keys are present in `kv`.
    pub fn read_kv(&mut self, kv: &mut KvMap) -> Result<()> {
        kv.take_f64("area_x_mm", &mut self.area_x_mm)?;
        kv.take_f64("area_y_mm", &mut self.area_y_mm)?;
        kv.take_usize("magnet_count_x", &mut self.magnet_grid.count_x)?;
        kv.take_usize("magnet_count_y", &mut self.magnet_grid.count_y)?;
        kv.take_f64("magnet_pitch_mm", &mut self.magnet_grid.pitch_mm)?;
        kv.take_f64("magnet_offset_mm", &mut self.magnet_grid.origin_offset_mm)?;
        kv.take_usize("sensor_count_x", &mut self.sensor_grid.count_x)?;
        kv.take_usize("sensor_count_y", &mut self.sensor_grid.count_y)?;
        kv.take_f64("sensor_pitch_mm", &mut self.sensor_grid.pitch_mm)?;
        kv.take_f64("sensor_offset_mm", &mut self.sensor_grid.origin_offset_mm)?;
        kv.take_f64("sensor_standoff_mm", &mut self.sensor_standoff_mm)?;
        kv.take_f64("dipole_moment_ma_mm2", &mut self.dipole_moment_ma_mm2)?;
        kv.take_f64("kernel_sigma_mm", &mut self.kernel_sigma_mm)?;
        kv.take_f64("noise_sigma_ut", &mut self.noise_sigma_ut)?;
        kv.take_f64("r_min_mm", &mut self.r_min_mm)?;
        kv.take_f64("z_max_mm", &mut self.z_max_mm)?;
        kv.take_f64("sample_rate_hz", &mut self.sample_rate_hz)?;
        kv.take_u64("seed", &mut self.seed)?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical key/value rendering.
    pub fn digest(&self) -> String {
        let mut kv = KvList::default();
        self.to_kv(&mut kv);
        kv.digest()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MagnetState {
    pub position_mm: Vec3,
    pub moment_ma_mm2: Vec3,
}

/// Ground-truth contact: in-plane position and indentation depth (mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactLabel {
    pub x_mm: f64,
    pub y_mm: f64,
    pub z_mm: f64,
}

impl ContactLabel {
    pub fn new(x_mm: f64, y_mm: f64, z_mm: f64) -> Self {
        Self { x_mm, y_mm, z_mm }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x_mm, self.y_mm, self.z_mm]
    }

    pub fn validate(&self, config: &SkinConfig) -> Result<()> {
        let ok = (0.0..=config.area_x_mm).contains(&self.x_mm)
            && (0.0..=config.area_y_mm).contains(&self.y_mm)
            && (0.0..=config.z_max_mm).contains(&self.z_mm);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidContact(format!(
                "{self:?} outside [0, {}] x [0, {}] x [0, {}]",
                config.area_x_mm, config.area_y_mm, config.z_max_mm
            )))
        }
    }
}

/// One 48-channel reading, sensor-major with axis order (x, y, z).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorFrame {
    pub t_ms: f64,
    pub b_ut: [f64; CHANNELS],
}

impl SensorFrame {
    pub fn zeros() -> Self {
        Self {
            t_ms: 0.0,
            b_ut: [0.0; CHANNELS],
        }
    }
}

/// Query point closer to a dipole than the configured singularity radius.
#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("query is {distance_mm} mm from the dipole, below r_min {r_min_mm} mm")]
pub struct NearField {
    pub distance_mm: f64,
    pub r_min_mm: f64,
}

/// Point-dipole flux density at `query` (μT):
/// `B = k (3 (m·r̂) r̂ - m) / |r|^3` with `r = query - source`.
pub fn dipole_field(
    moment: Vec3,
    source: Vec3,
    query: Vec3,
    r_min_mm: f64,
) -> Result<Vec3, NearField> {
    let r = [
        query[0] - source[0],
        query[1] - source[1],
        query[2] - source[2],
    ];
    let d2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    let d = d2.sqrt();
    if !(d >= r_min_mm) {
        return Err(NearField {
            distance_mm: d,
            r_min_mm,
        });
    }
    let inv_d = 1.0 / d;
    let rh = [r[0] * inv_d, r[1] * inv_d, r[2] * inv_d];
    let mr = moment[0] * rh[0] + moment[1] * rh[1] + moment[2] * rh[2];
    let k = FIELD_CONSTANT / (d2 * d);
    Ok([
        k * (3.0 * mr * rh[0] - moment[0]),
        k * (3.0 * mr * rh[1] - moment[1]),
        k * (3.0 * mr * rh[2] - moment[2]),
    ])
}

/// Magnet poses under a single normal contact.
pub fn deform(config: &SkinConfig, contact: &ContactLabel) -> Result<Vec<MagnetState>> {
    contact.validate(config)?;
    let sigma2 = config.kernel_sigma_mm * config.kernel_sigma_mm;
    let m = config.dipole_moment_ma_mm2;
    let z = contact.z_mm;
    Ok(config
        .magnet_grid
        .positions()
        .into_iter()
        .map(|[px, py]| {
            if z == 0.0 {
                return MagnetState {
                    position_mm: [px, py, 0.0],
                    moment_ma_mm2: [0.0, 0.0, m],
                };
            }
            let (dx, dy) = (px - contact.x_mm, py - contact.y_mm);
            let r = dx.hypot(dy);
            let g = (-r * r / (2.0 * sigma2)).exp();
            let w = -z * g;
            // The dent's surface rises away from the contact, so the normal
            // (and the moment) leans back toward the contact point.
            let theta = (z * (r / sigma2) * g).atan();
            let (ux, uy) = if r > 0.0 {
                (dx / r, dy / r)
            } else {
                (0.0, 0.0)
            };
            let (s, c) = theta.sin_cos();
            MagnetState {
                position_mm: [px, py, w],
                moment_ma_mm2: [-m * s * ux, -m * s * uy, m * c],
            }
        })
        .collect())
}

fn read_sensors_exact(
    config: &SkinConfig,
    magnets: &[MagnetState],
    t_ms: f64,
) -> Result<SensorFrame> {
    let mut frame = SensorFrame {
        t_ms,
        b_ut: [0.0; CHANNELS],
    };
    for (s, q) in config.sensor_positions().into_iter().enumerate() {
        let mut acc = [0.0; 3];
        for (i, mag) in magnets.iter().enumerate() {
            let b = dipole_field(mag.moment_ma_mm2, mag.position_mm, q, config.r_min_mm).map_err(
                |e| Error::Singularity {
                    magnet: i,
                    sensor: s,
                    distance_mm: e.distance_mm,
                    r_min_mm: e.r_min_mm,
                },
            )?;
            acc[0] += b[0];
            acc[1] += b[1];
            acc[2] += b[2];
        }
        frame.b_ut[3 * s..3 * s + 3].copy_from_slice(&acc);
    }
    Ok(frame)
}

/// Superposed field of `magnets` at every sensor plus i.i.d. Gaussian noise
/// of `config.noise_sigma_ut` per channel drawn from `rng`. With zero noise
/// the generator is not touched.
pub fn read_sensors<R: Rng + ?Sized>(
    config: &SkinConfig,
    magnets: &[MagnetState],
    rng: &mut R,
) -> Result<SensorFrame> {
    let mut frame = read_sensors_exact(config, magnets, 0.0)?;
    if config.noise_sigma_ut > 0.0 {
        for v in frame.b_ut.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v += config.noise_sigma_ut * n;
        }
    }
    Ok(frame)
}

/// Channel-wise `frame - baseline`.
pub fn delta_frame(frame: &SensorFrame, baseline: &SensorFrame) -> [f64; CHANNELS] {
    let mut out = [0.0; CHANNELS];
    for (o, (a, b)) in out.iter_mut().zip(frame.b_ut.iter().zip(&baseline.b_ut)) {
        *o = a - b;
    }
    out
}
