//! IDX datasets, train/validation splits, batching and synthetic regression
//! targets.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;
/// Share of the examples that goes to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[N x C x H x W]` or `[N x D]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub name: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, name: impl Into<String>) -> Result<Self> {
        if images.shape()[0] != labels.len() {
            return Err(Error::Format(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        Ok(Self {
            images,
            labels,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example shape, e.g. `[1, 28, 28]`.
    pub fn example_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Examples at `idx`, flattened to `[n x D]`.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let d = self.images.cols();
        let src = self.images.data();
        let mut x = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            x.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::new(vec![idx.len(), d], x)?, labels))
    }

    /// A new dataset holding the examples at `idx`.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let (x, labels) = self.gather(idx)?;
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(self.example_shape());
        Dataset::new(x.reshape(shape)?, labels, self.name.clone())
    }

    /// All examples flattened to `[N x D]`.
    pub fn flat(&self) -> Result<Tensor> {
        self.images.clone().reshape(vec![self.len(), self.images.cols()])
    }
}

/// Reads a whole file, transparently inflating gzip.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(b: &[u8], at: usize, what: &str) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_be_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parses IDX image bytes into `[N x 1 x H x W]` scaled by `1/255`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!("image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, "images")? as usize;
    let h = be_u32(bytes, 8, "images")? as usize;
    let w = be_u32(bytes, 12, "images")? as usize;
    let body = &bytes[16..];
    let need = n * h * w;
    if body.len() < need {
        return Err(Error::Format(format!("images: {} pixel bytes, header needs {need}", body.len())));
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::Format("images: empty dimension in header".into()));
    }
    let px = body[..need].iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(vec![n, 1, h, w], px)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!("label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Format(format!("labels: {} bytes, header needs {n}", body.len())));
    }
    Ok(body[..n].iter().map(|&b| usize::from(b)).collect())
}

/// Loads an image/label IDX pair (plain or gzip).
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let x = parse_idx_images(&read_maybe_gz(images)?)?;
    let y = parse_idx_labels(&read_maybe_gz(labels)?)?;
    if x.shape()[0] != y.len() {
        return Err(Error::Format(format!("{} images but {} labels", x.shape()[0], y.len())));
    }
    let name = images
        .file_name()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    Dataset::new(x, y, name)
}

/// Serializes a dataset as an uncompressed IDX pair. Pixels are written as
/// `round(255 v)`.
pub fn write_idx(ds: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let shape = ds.example_shape();
    let (h, w) = match shape {
        [1, h, w] | [h, w] => (*h, *w),
        _ => return Err(Error::Format(format!("cannot write example shape {shape:?} as IDX"))),
    };
    let mut f = File::create(images)?;
    for v in [IMAGE_MAGIC, ds.len() as u32, h as u32, w as u32] {
        f.write_all(&v.to_be_bytes())?;
    }
    let px: Vec<u8> = ds.images.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    f.write_all(&px)?;
    let mut f = File::create(labels)?;
    for v in [LABEL_MAGIC, ds.len() as u32] {
        f.write_all(&v.to_be_bytes())?;
    }
    let lb = ds
        .labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::Format(format!("label {l} does not fit a byte"))))
        .collect::<Result<Vec<u8>>>()?;
    f.write_all(&lb)?;
    Ok(())
}

/// Index lists of a seeded 80/20 split; `train` has `floor(0.8 N)` entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

pub fn split_indices(n: usize, seed: u64) -> Result<Split> {
    if n == 0 {
        return Err(Error::Format("cannot split an empty dataset".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (TRAIN_FRACTION * n as f64).floor() as usize;
    let val = idx.split_off(n_train);
    Ok(Split { train: idx, val })
}

pub fn split(ds: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    let s = split_indices(ds.len(), seed)?;
    Ok((ds.subset(&s.train)?, ds.subset(&s.val)?))
}

/// Mini-batch index lists for one epoch; the last partial batch is kept.
pub fn batch_indices(n: usize, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Per-epoch batch schedule: epoch `e` is shuffled by its own stream
/// derived from `seed`.
#[derive(Clone, Debug)]
pub struct Batcher {
    n: usize,
    batch_size: usize,
    seed: u64,
}

impl Batcher {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(Self { n, batch_size, seed })
    }

    pub fn epoch(&self, e: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(e);
        batch_indices(self.n, self.batch_size, &mut rng).expect("batch size checked")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RegressionTarget {
    /// `6 sin(x)`
    Sin6,
    /// `x^2`
    Square,
    /// `20 x`
    Lin20,
}

impl RegressionTarget {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Self::Sin6 => 6.0 * x.sin(),
            Self::Square => x * x,
            Self::Lin20 => 20.0 * x,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SIN6" => Ok(Self::Sin6),
            "SQUARE" => Ok(Self::Square),
            "LIN20" => Ok(Self::Lin20),
            _ => Err(Error::Config(format!("unknown regression target `{s}`"))),
        }
    }
}

pub const REG_RANGE: (f64, f64) = (-4.0, 4.0);
pub const REG_NOISE: f64 = 0.5;

/// `n` points with `x ~ U(range)` and `y = f(x) + N(0, noise^2)`, as
/// `[n x 1]` tensors.
pub fn synth_regression(
    target: RegressionTarget,
    n: usize,
    noise_std: f64,
    range: (f64, f64),
    seed: u64,
) -> Result<(Tensor, Tensor)> {
    if n == 0 {
        return Err(Error::Config("regression sample count must be positive".into()));
    }
    if !(range.0 < range.1) {
        return Err(Error::Config(format!("empty regression range {range:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ux = Uniform::new(range.0, range.1).map_err(|e| Error::Config(e.to_string()))?;
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let xs: Vec<f64> = (0..n).map(|_| ux.sample(&mut rng)).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| target.eval(x) + noise.sample(&mut rng)).collect();
    Ok((Tensor::new(vec![n, 1], xs)?, Tensor::new(vec![n, 1], ys)?))
}
