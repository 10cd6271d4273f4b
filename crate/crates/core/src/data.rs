//! Datasets: IDX (MNIST) ingestion and synthetic 2-d generators.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Inputs `[n, ...]` with aligned labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split<T: Scalar = f32> {
    pub x: Tensor<T>,
    pub y: Vec<usize>,
}

impl<T: Scalar> Split<T> {
    pub fn new(x: Tensor<T>, y: Vec<usize>) -> Result<Self> {
        if x.rank() < 2 || x.batch_len() != y.len() {
            return Err(Error::ShapeMismatch {
                op: "split",
                lhs: x.shape().to_vec(),
                rhs: vec![y.len()],
            });
        }
        Ok(Split { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Ok(Split {
            x: self.x.select(indices)?,
            y: indices.iter().map(|&i| self.y[i]).collect(),
        })
    }

    /// Examples `[start, end)`.
    pub fn range(&self, start: usize, end: usize) -> Result<Self> {
        Ok(Split {
            x: self.x.slice_batch(start, end)?,
            y: self.y[start..end].to_vec(),
        })
    }

    /// Splits off the last `fraction` of the examples (at least one).
    pub fn split_tail(&self, fraction: f64) -> Result<(Self, Self)> {
        let n = self.len();
        let tail = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
        if n < 2 {
            return Err(Error::InvalidArgument(format!("cannot split {n} examples")));
        }
        Ok((self.range(0, n - tail)?, self.range(n - tail, n)?))
    }

    pub fn cast<U: Scalar>(&self) -> Split<U> {
        Split {
            x: self.x.cast(),
            y: self.y.clone(),
        }
    }
}

/// A labeled dataset with disjoint train/validation/test partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHandle<T: Scalar = f32> {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub train: Split<T>,
    pub val: Split<T>,
    pub test: Split<T>,
}

impl<T: Scalar> DatasetHandle<T> {
    pub fn validate(&self) -> Result<()> {
        for (part, split) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            if split.x.shape()[1..] != self.input_shape[..] {
                return Err(Error::InvalidArgument(format!(
                    "{}: {part} examples have shape {:?}, expected {:?}",
                    self.name,
                    &split.x.shape()[1..],
                    self.input_shape
                )));
            }
            if let Some(&label) = split.y.iter().find(|&&l| l >= self.num_classes) {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: self.num_classes,
                });
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> DatasetHandle<U> {
        DatasetHandle {
            name: self.name.clone(),
            input_shape: self.input_shape.clone(),
            num_classes: self.num_classes,
            train: self.train.cast(),
            val: self.val.cast(),
            test: self.test.cast(),
        }
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

/// Parses an IDX buffer with the expected magic; returns dims and payload.
fn parse_idx<'a>(bytes: &'a [u8], magic: u32, path: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(Error::format(
            path,
            format!("bad magic 0x{found:08x}, expected 0x{magic:08x}"),
        ));
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank)
        .map(|i| be_u32(bytes, 4 + 4 * i, path).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * rank;
    let len: usize = dims.iter().product();
    let payload = bytes
        .get(start..start + len)
        .ok_or_else(|| Error::format(path, format!("truncated payload: expected {len} bytes")))?;
    Ok((dims, payload))
}

/// Reads an IDX image/label pair (optionally gzip-compressed). Pixels are
/// scaled to `[0, 1]` and images get a leading channel axis: `[n, 1, h, w]`.
pub fn load_idx<T: Scalar>(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Split<T>> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let image_bytes = read_maybe_gz(ip)?;
    let label_bytes = read_maybe_gz(lp)?;
    let (idims, pixels) = parse_idx(&image_bytes, IDX_IMAGES_MAGIC, ip)?;
    let (ldims, labels) = parse_idx(&label_bytes, IDX_LABELS_MAGIC, lp)?;
    if idims[0] != ldims[0] {
        return Err(Error::format(
            lp,
            format!("{} labels for {} images", ldims[0], idims[0]),
        ));
    }
    if idims[0] == 0 {
        return Err(Error::format(ip, "no images"));
    }
    let scale = 1.0 / 255.0;
    let x = Tensor::new(
        vec![idims[0], 1, idims[1], idims[2]],
        pixels.iter().map(|&b| T::from_f64_lossy(b as f64 * scale)).collect(),
    )?;
    Split::new(x, labels.iter().map(|&l| l as usize).collect())
}

/// Fraction of the training files held out (from the end) for validation.
pub const VALIDATION_FRACTION: f64 = 0.1;

/// MNIST from a directory holding the four standard IDX files (`.gz` or raw).
pub fn load_mnist<T: Scalar>(dir: impl AsRef<Path>) -> Result<DatasetHandle<T>> {
    let dir = dir.as_ref();
    let find = |stem: &str| {
        let gz = dir.join(format!("{stem}.gz"));
        if gz.exists() {
            gz
        } else {
            dir.join(stem)
        }
    };
    let full = load_idx(find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"))?;
    let test = load_idx(find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte"))?;
    let (train, val) = full.split_tail(VALIDATION_FRACTION)?;
    let handle = DatasetHandle {
        name: "mnist".into(),
        input_shape: full.x.shape()[1..].to_vec(),
        num_classes: 10,
        train,
        val,
        test,
    };
    handle.validate()?;
    Ok(handle)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Two interleaved half circles, labels 0 (upper) and 1 (lower).
    TwoMoons,
    /// Isotropic Gaussian clusters with means evenly spaced on a radius-3 circle.
    GaussMix { classes: usize },
}

impl SyntheticKind {
    pub fn parse(name: &str, classes: usize) -> Result<Self> {
        match name {
            "two_moons" | "two-moons" => Ok(SyntheticKind::TwoMoons),
            "gauss_mix" | "gauss-mix" => Ok(SyntheticKind::GaussMix { classes }),
            other => Err(Error::InvalidArgument(format!(
                "unknown synthetic dataset `{other}` (expected two_moons or gauss_mix)"
            ))),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            SyntheticKind::TwoMoons => 2,
            SyntheticKind::GaussMix { classes } => *classes,
        }
    }
}

fn synthetic_points<T: Scalar>(kind: SyntheticKind, n: usize, noise: f64, rng: &mut ChaCha8Rng) -> Result<Split<T>> {
    let k = kind.num_classes();
    let mut xs = Vec::with_capacity(2 * n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % k;
        let (px, py) = match kind {
            SyntheticKind::TwoMoons => {
                let t = rng.gen_range(0.0..=std::f64::consts::PI);
                if label == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                }
            }
            SyntheticKind::GaussMix { .. } => {
                let angle = 2.0 * std::f64::consts::PI * label as f64 / k as f64;
                (3.0 * angle.cos(), 3.0 * angle.sin())
            }
        };
        let ex: f64 = rng.sample(StandardNormal);
        let ey: f64 = rng.sample(StandardNormal);
        xs.push(T::from_f64_lossy(px + noise * ex));
        xs.push(T::from_f64_lossy(py + noise * ey));
        ys.push(label);
    }
    // interleave classes randomly so contiguous slices stay balanced on average
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Split::new(Tensor::new(vec![n, 2], xs)?, ys)?.select(&order)
}

/// `n` training points (the last 10% held out for validation) plus an
/// independent test set of `n` points, deterministic per seed.
pub fn gen_synthetic<T: Scalar>(kind: SyntheticKind, n: usize, noise: f64, seed: u64) -> Result<DatasetHandle<T>> {
    if n < 4 {
        return Err(Error::InvalidArgument(format!("synthetic datasets need n >= 4, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise must be >= 0, got {noise}")));
    }
    if let SyntheticKind::GaussMix { classes } = kind {
        if classes < 2 {
            return Err(Error::InvalidArgument(format!("gauss_mix needs >= 2 classes, got {classes}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let full = synthetic_points(kind, n, noise, &mut rng)?;
    rng.set_stream(1);
    let test = synthetic_points(kind, n, noise, &mut rng)?;
    let (train, val) = full.split_tail(VALIDATION_FRACTION)?;
    Ok(DatasetHandle {
        name: match kind {
            SyntheticKind::TwoMoons => "two_moons".into(),
            SyntheticKind::GaussMix { classes } => format!("gauss_mix{classes}"),
        },
        input_shape: vec![2],
        num_classes: kind.num_classes(),
        train,
        val,
        test,
    })
}
