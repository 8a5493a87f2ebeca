//! Datasets: deterministic synthetic blobs and the CIFAR-10 binary batches.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Shape;
use crate::rng::{RngState, Stream};
use crate::tensor::{Dims, Tensor4D};

/// Bytes per CIFAR-10 record: one label byte then 3×32×32 pixels in CHW order.
pub const CIFAR10_RECORD: usize = 3073;

const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    SyntheticBlobs {
        seed: u64,
        /// Standard deviation of the per-pixel Gaussian noise.
        noise: f32,
        /// Gaussian bumps summed into each class prototype.
        blobs_per_class: usize,
        /// Peak bump amplitudes are drawn from `[amplitude/2, amplitude]`.
        #[serde(default = "default_amplitude")]
        amplitude: f32,
    },
    Cifar10BinaryDir {
        path: PathBuf,
    },
}

fn default_amplitude() -> f32 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augmentation {
    /// Zero padding for random crops; 0 disables cropping.
    #[serde(default)]
    pub random_crop_pad: usize,
    #[serde(default)]
    pub horizontal_flip: bool,
}

impl Augmentation {
    pub fn is_off(&self) -> bool {
        self.random_crop_pad == 0 && !self.horizontal_flip
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub train_size: usize,
    pub test_size: usize,
    pub classes: usize,
    pub image: Shape,
    #[serde(default)]
    pub augmentation: Augmentation,
}

impl DatasetSpec {
    /// Blob dataset used by the toy experiments.
    pub fn toy_blobs(seed: u64) -> Self {
        DatasetSpec {
            source: DataSource::SyntheticBlobs {
                seed,
                noise: 0.5,
                blobs_per_class: 3,
                amplitude: 1.0,
            },
            train_size: 256,
            test_size: 256,
            classes: 4,
            image: Shape::new(3, 8, 8),
            augmentation: Augmentation::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 || self.test_size == 0 {
            return Err(Error::Data("train_size and test_size must be >= 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Data("need at least 2 classes".into()));
        }
        if self.image.is_empty() {
            return Err(Error::Data("image dims must be >= 1".into()));
        }
        if let DataSource::Cifar10BinaryDir { .. } = self.source {
            if self.image != Shape::new(3, 32, 32) || self.classes != 10 {
                return Err(Error::Data("cifar10 requires image 3x32x32 and 10 classes".into()));
            }
        }
        Ok(())
    }

    pub fn load(&self) -> Result<Splits> {
        self.validate()?;
        match &self.source {
            DataSource::SyntheticBlobs {
                seed,
                noise,
                blobs_per_class,
                amplitude,
            } => Ok(synthetic_blobs(self, *seed, *noise, *blobs_per_class, *amplitude)),
            DataSource::Cifar10BinaryDir { path } => load_cifar10(path, self.train_size, self.test_size),
        }
    }
}

/// `blobs[:key=value,...]`, `cifar10:DIR`, or a path to a JSON `DatasetSpec`.
///
/// Blob keys: seed, noise, blobs, amplitude, train, test, classes, size, channels.
impl FromStr for DatasetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(dir) = s.strip_prefix("cifar10:") {
            return Ok(DatasetSpec {
                source: DataSource::Cifar10BinaryDir { path: dir.into() },
                train_size: 50_000,
                test_size: 10_000,
                classes: 10,
                image: Shape::new(3, 32, 32),
                augmentation: Augmentation::default(),
            });
        }
        if s == "blobs" || s.starts_with("blobs:") {
            let mut spec = DatasetSpec::toy_blobs(42);
            let opts = s.strip_prefix("blobs:").unwrap_or("");
            for kv in opts.split(',').filter(|kv| !kv.is_empty()) {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("expected key=value, got {kv:?}")))?;
                let num =
                    |v: &str| -> Result<usize> { v.parse().map_err(|_| Error::Config(format!("bad value for {k}: {v:?}"))) };
                let DataSource::SyntheticBlobs {
                    seed,
                    noise,
                    blobs_per_class,
                    amplitude,
                } = &mut spec.source
                else {
                    unreachable!()
                };
                match k {
                    "seed" => *seed = num(v)? as u64,
                    "noise" => *noise = v.parse().map_err(|_| Error::Config(format!("bad noise {v:?}")))?,
                    "blobs" => *blobs_per_class = num(v)?,
                    "amplitude" => *amplitude = v.parse().map_err(|_| Error::Config(format!("bad amplitude {v:?}")))?,
                    "train" => spec.train_size = num(v)?,
                    "test" => spec.test_size = num(v)?,
                    "classes" => spec.classes = num(v)?,
                    "size" => {
                        let n = num(v)?;
                        spec.image = Shape::new(spec.image.c, n, n);
                    }
                    "channels" => spec.image.c = num(v)?,
                    other => return Err(Error::Config(format!("unknown blobs option {other:?}"))),
                }
            }
            return Ok(spec);
        }
        let text = std::fs::read_to_string(s).map_err(|e| Error::io(s, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor4D,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor4D, Vec<usize>) {
        (self.images.select(indices), indices.iter().map(|&i| self.labels[i]).collect())
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

fn synthetic_blobs(spec: &DatasetSpec, seed: u64, noise: f32, blobs: usize, amplitude: f32) -> Splits {
    let rng = RngState::new(seed);
    let shape = spec.image;
    let mut proto_rng = rng.stream(Stream::Data, 0);
    let prototypes: Vec<Vec<f32>> = (0..spec.classes)
        .map(|_| {
            let mut img = vec![0f32; shape.len()];
            for _ in 0..blobs.max(1) {
                let c = proto_rng.random_range(0..shape.c);
                let cy = proto_rng.random_range(0.0..shape.h as f32);
                let cx = proto_rng.random_range(0.0..shape.w as f32);
                let sigma = proto_rng.random_range(0.8..2.0f32);
                let amp = amplitude * proto_rng.random_range(0.5..1.0f32) * if proto_rng.random::<bool>() { 1.0 } else { -1.0 };
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                        img[(c * shape.h + y) * shape.w + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
            img
        })
        .collect();

    let make = |count: usize, stream_index: u32| -> Dataset {
        let mut r = rng.stream(Stream::Data, stream_index);
        let mut data = Vec::with_capacity(count * shape.len());
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let label = i % spec.classes;
            labels.push(label);
            for &p in &prototypes[label] {
                let z: f32 = r.sample(StandardNormal);
                data.push(p + noise * z);
            }
        }
        Dataset {
            images: Tensor4D::from_vec(Dims::new(count, shape.c, shape.h, shape.w), data).expect("sized above"),
            labels,
        }
    };
    Splits {
        train: make(spec.train_size, 1),
        test: make(spec.test_size, 2),
    }
}

/// Parses CIFAR-10 binary records, normalizing pixels per channel.
pub fn parse_cifar10_records(bytes: &[u8], limit: usize) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR10_RECORD) {
        return Err(Error::Data(format!(
            "cifar10 batch length {} is not a multiple of {CIFAR10_RECORD}",
            bytes.len()
        )));
    }
    let records: Vec<&[u8]> = bytes.chunks_exact(CIFAR10_RECORD).take(limit).collect();
    if records.is_empty() {
        return Err(Error::Data("no cifar10 records".into()));
    }
    let mut data = Vec::with_capacity(records.len() * 3072);
    let mut labels = Vec::with_capacity(records.len());
    for rec in &records {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Data(format!("cifar10 label {label} out of range")));
        }
        labels.push(label);
        for (i, &px) in rec[1..].iter().enumerate() {
            let c = i / 1024;
            data.push((px as f32 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]);
        }
    }
    Ok(Dataset {
        images: Tensor4D::from_vec(Dims::new(records.len(), 3, 32, 32), data)?,
        labels,
    })
}

fn load_cifar10(dir: &Path, train_size: usize, test_size: usize) -> Result<Splits> {
    let read = |name: &str| -> Result<Vec<u8>> {
        let p = dir.join(name);
        std::fs::read(&p).map_err(|e| Error::io(p, e))
    };
    let mut train_bytes = Vec::new();
    for i in 1..=5 {
        if train_bytes.len() >= train_size * CIFAR10_RECORD {
            break;
        }
        train_bytes.extend(read(&format!("data_batch_{i}.bin"))?);
    }
    Ok(Splits {
        train: parse_cifar10_records(&train_bytes, train_size)?,
        test: parse_cifar10_records(&read("test_batch.bin")?, test_size)?,
    })
}

/// Random crop (zero padded) and horizontal flip, drawing from `rng`.
pub fn augment(batch: &mut Tensor4D, aug: &Augmentation, rng: &mut impl Rng) {
    if aug.is_off() {
        return;
    }
    let d = batch.dims();
    let pad = aug.random_crop_pad;
    let mut plane = vec![0f32; d.plane()];
    for n in 0..d.n {
        let (dy, dx) = if pad > 0 {
            (
                rng.random_range(0..=2 * pad) as isize - pad as isize,
                rng.random_range(0..=2 * pad) as isize - pad as isize,
            )
        } else {
            (0, 0)
        };
        let flip = aug.horizontal_flip && rng.random::<bool>();
        for c in 0..d.c {
            let start = batch.index(n, c, 0, 0);
            plane.copy_from_slice(&batch.data()[start..start + d.plane()]);
            let dst = &mut batch.data_mut()[start..start + d.plane()];
            for y in 0..d.h {
                for x in 0..d.w {
                    let sx = if flip { d.w - 1 - x } else { x };
                    let iy = y as isize + dy;
                    let ix = sx as isize + dx;
                    dst[y * d.w + x] = if iy >= 0 && ix >= 0 && (iy as usize) < d.h && (ix as usize) < d.w {
                        plane[iy as usize * d.w + ix as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
}

/// Deterministic permutation of `0..n` from the given stream.
pub fn permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
