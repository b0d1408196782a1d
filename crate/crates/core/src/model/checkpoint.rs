//! Binary checkpoint: magic `MSKN`, `u32` version, `u32` tensor count, then
//! per tensor a `u32` name length, the UTF-8 name, a `u32` rank, `u64`
//! extents and the raw `f64` values; finally the 48 normalization means and
//! 48 standard deviations. All integers and floats are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Architecture, ModelParams};
use crate::dataset::NormStats;
use crate::error::{Error, Result};
use crate::skin::CHANNELS;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSKN";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(
    params: &ModelParams,
    stats: &NormStats,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut buf = Vec::with_capacity(8 * params.param_count() + 1024);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let named = params.named_tensors();
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in stats.mean.iter().chain(&stats.std) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Loads a checkpoint of the default architecture.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, NormStats)> {
    load_checkpoint_for(path, &Architecture::default())
}

pub fn load_checkpoint_for(
    path: impl AsRef<Path>,
    arch: &Architecture,
) -> Result<(ModelParams, NormStats)> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad magic, not a magskin checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let expected = arch.param_shapes();
    let count = r.u32("layer count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for k in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| Error::Format(format!("tensor {k} name is not UTF-8")))?;
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::Format(format!(
                "tensor `{name}` has implausible rank {rank}"
            )));
        }
        let shape = (0..rank)
            .map(|_| r.u64("extent").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        match expected.get(k) {
            Some((exp_name, exp_shape)) if *exp_name == name && *exp_shape == shape => {}
            Some((exp_name, exp_shape)) => {
                return Err(Error::LayerMismatch {
                    layer: if *exp_name == name {
                        name
                    } else {
                        format!("{name} (expected {exp_name})")
                    },
                    expected: exp_shape.clone(),
                    found: shape,
                })
            }
            None => {
                return Err(Error::LayerMismatch {
                    layer: name,
                    expected: vec![],
                    found: shape,
                })
            }
        }
        let n: usize = shape.iter().product();
        let data = r.f64s(n, "tensor data")?;
        tensors.push(Tensor::new(shape, data)?);
    }
    if count < expected.len() {
        let (name, shape) = &expected[count];
        return Err(Error::LayerMismatch {
            layer: name.clone(),
            expected: shape.clone(),
            found: vec![],
        });
    }
    let mean = r.f64s(CHANNELS, "normalization means")?;
    let std = r.f64s(CHANNELS, "normalization stds")?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let params = ModelParams::from_tensors(arch, tensors)?;
    let stats = NormStats::new(mean, std)?;
    Ok((params, stats))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated file while reading {what} at byte {}",
                    self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::Format(format!("{what} too large")))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
