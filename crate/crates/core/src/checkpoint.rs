//! Binary checkpoints (little-endian).
//!
//! ```text
//! "DIALCKPT" | version u32 | epoch u32 | count u32
//! count × { name_len u32 | name | rank u32 | dims u32[rank] | f64[prod(dims)] }
//! optional: "VEL" | steps u64 | count u32 | count × record as above
//! ```
//!
//! Payloads are always 64-bit, so 32-bit models round-trip exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ArchSpec, ModelParams};
use crate::tensor::{Scalar, Tensor};
use crate::train::OptimizerState;

pub const MAGIC: &[u8; 8] = b"DIALCKPT";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;
const VEL_MARKER: &[u8; 3] = b"VEL";

/// Checkpoint contents before they are matched against an architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCheckpoint {
    pub epoch: u32,
    pub params: Vec<(String, Tensor<f64>)>,
    pub velocities: Option<(u64, Vec<(String, Tensor<f64>)>)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_record<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    for v in t.to_f64_vec() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Serializes named tensors and, optionally, `(steps, velocities)` aligned
/// with them.
pub fn encode_named<T: Scalar>(
    params: &[(&str, &Tensor<T>)],
    velocities: Option<(u64, &[Tensor<T>])>,
    epoch: usize,
) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + params.iter().map(|(_, t)| 16 + t.len() * 8).sum::<usize>());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize)?;
    put_u32(&mut out, epoch)?;
    put_u32(&mut out, params.len())?;
    for (name, t) in params {
        put_record(&mut out, name, t)?;
    }
    if let Some((steps, vel)) = velocities {
        if vel.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer holds {} velocities for {} parameters",
                vel.len(),
                params.len()
            )));
        }
        out.extend_from_slice(VEL_MARKER);
        out.extend_from_slice(&steps.to_le_bytes());
        put_u32(&mut out, vel.len())?;
        for ((name, _), v) in params.iter().zip(vel) {
            put_record(&mut out, name, v)?;
        }
    }
    Ok(out)
}

pub fn encode<T: Scalar>(model: &ModelParams<T>, optimizer: Option<&OptimizerState<T>>, epoch: usize) -> Result<Vec<u8>> {
    let named: Vec<(&str, &Tensor<T>)> = model.params().iter().map(|p| (p.name.as_str(), &p.value)).collect();
    encode_named(&named, optimizer.map(|o| (o.steps, &o.velocities[..])), epoch)
}

/// Writes to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    let mut file = fs::File::create(tmp).map_err(|e| Error::io(tmp, e))?;
    file.write_all(bytes).and_then(|_| file.sync_all()).map_err(|e| Error::io(tmp, e))?;
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint<T: Scalar>(
    model: &ModelParams<T>,
    optimizer: Option<&OptimizerState<T>>,
    epoch: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    write_atomic(path.as_ref(), &encode(model, optimizer, epoch)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(self.path, format!("truncated checkpoint at byte {}", self.at)));
        };
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn record(&mut self) -> Result<(String, Tensor<f64>)> {
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::format(self.path, "parameter name is not UTF-8"))?
            .to_owned();
        let rank = self.u32()? as usize;
        let dims = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(self.path, format!("`{name}`: dimensions overflow")))?;
        let payload = self.take(count.saturating_mul(8))?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::format(self.path, format!("`{name}`: {e}")))?;
        Ok((name, t))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<RawCheckpoint> {
    let mut r = Reader { bytes, at: 0, path };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let epoch = r.u32()?;
    let count = r.u32()? as usize;
    let params = (0..count).map(|_| r.record()).collect::<Result<Vec<_>>>()?;
    let velocities = if r.at == bytes.len() {
        None
    } else {
        if r.take(VEL_MARKER.len())? != VEL_MARKER {
            return Err(Error::format(path, format!("unexpected bytes at offset {}", r.at - 3)));
        }
        let steps = r.u64()?;
        let n = r.u32()? as usize;
        let vel = (0..n).map(|_| r.record()).collect::<Result<Vec<_>>>()?;
        if r.at != bytes.len() {
            return Err(Error::format(path, "trailing bytes after velocities"));
        }
        Some((steps, vel))
    };
    Ok(RawCheckpoint {
        epoch,
        params,
        velocities,
    })
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<RawCheckpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Loads a checkpoint and checks it against `arch`.
pub fn load_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    arch: &ArchSpec,
) -> Result<(ModelParams<T>, Option<OptimizerState<T>>, usize)> {
    let path = path.as_ref();
    let raw = read_checkpoint(path)?;
    let named = raw.params.into_iter().map(|(n, t)| (n, t.cast())).collect();
    let model = ModelParams::from_named(arch, named).map_err(|e| Error::format(path, e.to_string()))?;
    let optimizer = match raw.velocities {
        None => None,
        Some((steps, vel)) => {
            if vel.len() != model.params().len() {
                return Err(Error::format(path, "velocity count does not match parameters"));
            }
            let mut velocities = Vec::with_capacity(vel.len());
            for (p, (name, v)) in model.params().iter().zip(vel) {
                if p.name != name || p.value.shape() != v.shape() {
                    return Err(Error::format(path, format!("velocity `{name}` does not match `{}`", p.name)));
                }
                velocities.push(v.cast());
            }
            Some(OptimizerState { velocities, steps })
        }
    };
    Ok((model, optimizer, raw.epoch as usize))
}
