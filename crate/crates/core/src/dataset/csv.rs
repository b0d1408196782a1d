use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Dataset, NormStats, Sample, TrajectorySpec};
use crate::config::{KvList, KvMap};
use crate::error::{Error, Result};
use crate::skin::{ContactLabel, SkinConfig, CHANNELS};

pub const CSV_MAGIC: &str = "magskin-dataset v1";

fn column_header() -> String {
    let mut s = String::from("x_mm,y_mm,z_mm");
    for k in 0..CHANNELS {
        let _ = write!(s, ",c{k:03}");
    }
    s
}

/// Sample values use scientific notation with nine fractional digits.
fn fmt(v: f64) -> String {
    format!("{v:.9e}")
}

/// Writes the header, one line per sample, then `#config`, `#trajectory`
/// and `#norm` comment lines. Norm stats are written at full precision.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(64 + ds.len() * 51 * 17);
    out.push_str(CSV_MAGIC);
    out.push('\n');
    out.push_str(&ds.config.digest());
    out.push('\n');
    out.push_str(&column_header());
    out.push('\n');
    for s in &ds.samples {
        let fields = s.label.as_array().into_iter().chain(s.delta_b).map(fmt);
        out.push_str(&fields.collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    let mut kv = KvList::default();
    ds.config.to_kv(&mut kv);
    for (k, v) in &kv.0 {
        let _ = writeln!(out, "#config {k} = {v}");
    }
    let mut kv = KvList::default();
    ds.trajectory.to_kv(&mut kv);
    for (k, v) in &kv.0 {
        let _ = writeln!(out, "#trajectory {k} = {v}");
    }
    if let Some(n) = &ds.normalization {
        for (tag, vals) in [("mean", &n.mean), ("std", &n.std)] {
            let vals: Vec<String> = vals.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "#norm {tag} {}", vals.join(","));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

    match lines.next() {
        Some((_, l)) if l == CSV_MAGIC => {}
        Some((n, l)) => return Err(err(n, format!("expected `{CSV_MAGIC}`, found `{l}`"))),
        None => return Err(err(1, "empty file".into())),
    }
    let digest = match lines.next() {
        Some((_, l)) if !l.is_empty() && l.bytes().all(|b| b.is_ascii_hexdigit()) => l.to_string(),
        Some((n, l)) => return Err(err(n, format!("expected a hex config digest, found `{l}`"))),
        None => return Err(err(2, "missing config digest".into())),
    };
    match lines.next() {
        Some((_, l)) if l == column_header() => {}
        Some((n, l)) => {
            let channels = l.split(',').filter(|c| c.starts_with('c')).count();
            let msg = if channels != CHANNELS {
                format!("expected {CHANNELS} channel columns, found {channels}")
            } else {
                format!("malformed column header `{l}`")
            };
            return Err(err(n, msg));
        }
        None => return Err(err(3, "missing column header".into())),
    }

    let mut samples = Vec::new();
    let mut config_text = String::new();
    let mut trajectory_text = String::new();
    let (mut mean, mut std) = (None, None);
    let mut config_line = 0;
    for (n, line) in lines {
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(kv) = rest.strip_prefix("config ") {
                config_line = config_line.max(n);
                config_text.push_str(kv);
                config_text.push('\n');
            } else if let Some(kv) = rest.strip_prefix("trajectory ") {
                trajectory_text.push_str(kv);
                trajectory_text.push('\n');
            } else if let Some(rest) = rest.strip_prefix("norm ") {
                let (tag, vals) = rest
                    .split_once(' ')
                    .ok_or_else(|| err(n, "malformed #norm line".into()))?;
                let vals = vals
                    .split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<f64>, _>>()
                    .map_err(|e| err(n, format!("bad #norm value: {e}")))?;
                match tag {
                    "mean" => mean = Some(vals),
                    "std" => std = Some(vals),
                    other => return Err(err(n, format!("unknown #norm field `{other}`"))),
                }
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 + CHANNELS {
            return Err(err(
                n,
                format!(
                    "expected 3 label and {CHANNELS} channel fields, found {}",
                    fields.len()
                ),
            ));
        }
        let mut vals = [0.0; 3 + CHANNELS];
        for (i, (slot, f)) in vals.iter_mut().zip(&fields).enumerate() {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| err(n, format!("column {}: `{f}` is not a number", i + 1)))?;
            if !v.is_finite() {
                return Err(err(n, format!("column {}: non-finite value `{f}`", i + 1)));
            }
            *slot = v;
        }
        let mut delta_b = [0.0; CHANNELS];
        delta_b.copy_from_slice(&vals[3..]);
        samples.push(Sample {
            delta_b,
            label: ContactLabel::new(vals[0], vals[1], vals[2]),
        });
    }

    let mut config = SkinConfig::default();
    if !config_text.is_empty() {
        let mut kv = KvMap::parse(&config_text).map_err(|e| err(config_line, e.to_string()))?;
        config.read_kv(&mut kv)?;
        kv.finish()?;
        if config.digest() != digest {
            return Err(err(
                2,
                "config digest does not match the #config lines".into(),
            ));
        }
    }
    let mut trajectory = TrajectorySpec::default();
    if !trajectory_text.is_empty() {
        let mut kv = KvMap::parse(&trajectory_text)?;
        trajectory.read_kv(&mut kv)?;
        kv.finish()?;
    }
    let normalization = match (mean, std) {
        (Some(m), Some(s)) => Some(NormStats::new(m, s)?),
        (None, None) => None,
        _ => {
            return Err(Error::NormalizationMismatch(
                "#norm needs both mean and std".into(),
            ))
        }
    };
    Ok(Dataset {
        config,
        trajectory,
        samples,
        normalization,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{fit_normalization, generate_dataset};

    fn small() -> Dataset {
        let spec = TrajectorySpec {
            grid_nx: 3,
            grid_ny: 2,
            depth_schedule_mm: vec![0.5, 4.5],
            repeats_per_depth: 2,
            ..TrajectorySpec::default()
        };
        generate_dataset(&SkinConfig::default(), &spec, 9).unwrap()
    }

    fn rel_close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-9 * a.abs().max(b.abs()) || a == b
    }

    #[test]
    fn round_trip_within_tolerance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let mut ds = small();
        ds.normalization = Some(fit_normalization(&ds).unwrap());
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.config, ds.config);
        assert_eq!(back.trajectory, ds.trajectory);
        assert_eq!(back.normalization, ds.normalization);
        assert_eq!(back.len(), ds.len());
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            for (x, y) in a
                .label
                .as_array()
                .iter()
                .chain(&a.delta_b)
                .zip(b.label.as_array().iter().chain(&b.delta_b))
            {
                assert!(rel_close(*x, *y), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn worst_case_mantissas_survive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let mut ds = Dataset::empty(SkinConfig::default(), TrajectorySpec::default());
        let mut delta_b = [0.0; CHANNELS];
        for (k, v) in delta_b.iter_mut().enumerate() {
            *v = (1.0 + 4.999_999e-9 * (k as f64 / 47.0)) * 10f64.powi(k as i32 - 24);
        }
        ds.samples.push(Sample {
            delta_b,
            label: ContactLabel::new(1.000_000_000_49, 139.999_999_95, 0.1),
        });
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path).unwrap();
        for (x, y) in delta_b.iter().zip(&back.samples[0].delta_b) {
            assert!(rel_close(*x, *y), "{x} vs {y}");
        }
    }

    #[test]
    fn header_layout_and_line_endings() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        save_csv(&small(), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(!text.contains('\r'));
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "magskin-dataset v1");
        assert_eq!(lines.next().unwrap(), small().config.digest());
        let cols = lines.next().unwrap();
        assert!(cols.starts_with("x_mm,y_mm,z_mm,c000,c001,"));
        assert!(cols.ends_with(",c047"));
        assert_eq!(cols.split(',').count(), 51);
    }

    #[test]
    fn empty_sample_section_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = Dataset::empty(SkinConfig::default(), TrajectorySpec::default());
        save_csv(&ds, &path).unwrap();
        assert!(load_csv(&path).unwrap().is_empty());
        fs::write(&path, format!("{CSV_MAGIC}\nabc123\n{}\n", column_header())).unwrap();
        assert!(load_csv(&path).unwrap().is_empty());
    }

    fn parse_error_line(content: &str) -> usize {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, content).unwrap();
        match load_csv(&path) {
            Err(Error::Parse { line, .. }) => line,
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_inputs_name_the_line() {
        let header = format!("{CSV_MAGIC}\nabc\n{}\n", column_header());
        let row = |n: usize, v: &str| {
            let mut f = vec!["1".to_string(); n];
            f[5] = v.to_string();
            f.join(",") + "\n"
        };
        assert_eq!(parse_error_line("magskin-dataset v2\nabc\n"), 1);
        assert_eq!(parse_error_line(&format!("{CSV_MAGIC}\nnot hex\n")), 2);
        let cols47 = column_header().trim_end_matches(",c047").to_string();
        assert_eq!(
            parse_error_line(&format!("{CSV_MAGIC}\nabc\n{cols47}\n")),
            3
        );
        assert_eq!(
            parse_error_line(&format!("{header}{}{}", row(51, "2"), row(50, "2"))),
            5
        );
        assert_eq!(parse_error_line(&format!("{header}{}", row(51, "NaN"))), 4);
        assert_eq!(
            parse_error_line(&format!("{header}{}{}", row(51, "1"), row(51, "inf"))),
            5
        );
        assert_eq!(parse_error_line(&format!("{header}{}", row(51, "abc"))), 4);
    }
}
