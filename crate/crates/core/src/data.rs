//! Dataset ingestion: MNIST IDX and CIFAR-10 binary loaders (with matching
//! writers for subsetting and tests), deterministic synthetic generators,
//! and the image corruption suite.

use std::fs::{self, File};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::FeatureShape;
use crate::rng::Stream;
use crate::Mat;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("shape: {0}")]
    Shape(String),
    #[error("empty dataset: {0}")]
    Empty(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// An in-memory dataset: one example per row, inputs normalized to [0, 1]
/// for image data.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    pub name: String,
    pub split: Split,
    pub inputs: Mat,
    pub labels: Vec<usize>,
    pub shape: FeatureShape,
    pub num_classes: usize,
}

impl DatasetHandle {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First `n` examples (the whole set if `n` is 0 or exceeds the length).
    pub fn take(&self, n: usize) -> DatasetHandle {
        if n == 0 || n >= self.len() {
            return self.clone();
        }
        let dim = self.inputs.cols();
        let mut data = Vec::with_capacity(n * dim);
        for i in 0..n {
            data.extend_from_slice(self.inputs.row(i));
        }
        DatasetHandle {
            name: self.name.clone(),
            split: self.split,
            inputs: Mat::from_vec(n, dim, data),
            labels: self.labels[..n].to_vec(),
            shape: self.shape,
            num_classes: self.num_classes,
        }
    }

    /// Gathers the listed rows into a batch.
    pub fn gather(&self, indices: &[usize]) -> (Mat, Vec<usize>) {
        let dim = self.inputs.cols();
        let mut data = Vec::with_capacity(indices.len() * dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        (Mat::from_vec(indices.len(), dim, data), labels)
    }

    pub fn max_input_norm(&self) -> f64 {
        (0..self.len())
            .map(|i| {
                self.inputs
                    .row(i)
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }
}

// ---------------------------------------------------------------------------
// MNIST IDX
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct ByteReader {
    data: Vec<u8>,
    pos: usize,
}

impl ByteReader {
    fn open(path: &Path) -> Result<Self, DataError> {
        let mut data = Vec::new();
        File::open(path)?.read_to_end(&mut data)?;
        Ok(Self { data, pos: 0 })
    }

    fn u32_be(&mut self) -> Result<u32, DataError> {
        if self.pos + 4 > self.data.len() {
            return Err(DataError::Parse {
                offset: self.pos as u64,
                message: "truncated while reading u32".into(),
            });
        }
        let v = u32::from_be_bytes(self.data[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn bytes(&mut self, n: usize) -> Result<&[u8], DataError> {
        if self.pos + n > self.data.len() {
            return Err(DataError::Parse {
                offset: self.pos as u64,
                message: format!(
                    "truncated: need {n} bytes, {} remain",
                    self.data.len() - self.pos
                ),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Loads an MNIST-format IDX pair from `dir` (raw, not gzipped):
/// `train-images-idx3-ubyte` / `train-labels-idx1-ubyte` for the train
/// split, the `t10k-` pair for test. Pixels are scaled to [0, 1].
pub fn load_mnist_idx(dir: &Path, split: Split) -> Result<DatasetHandle, DataError> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let labels = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    load_idx_pair(&images, &labels, split)
}

/// Loads an explicit IDX image/label file pair.
pub fn load_idx_pair(
    images_path: &Path,
    labels_path: &Path,
    split: Split,
) -> Result<DatasetHandle, DataError> {
    let mut r = ByteReader::open(images_path)?;
    let magic = r.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::Parse {
            offset: 0,
            message: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let pixels = r.bytes(count * rows * cols)?;
    let inputs = Mat::from_vec(
        count,
        rows * cols,
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    );

    let mut r = ByteReader::open(labels_path)?;
    let magic = r.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::Parse {
            offset: 0,
            message: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let label_count = r.u32_be()? as usize;
    if label_count != count {
        return Err(DataError::Parse {
            offset: 4,
            message: format!("{label_count} labels for {count} images"),
        });
    }
    let labels: Vec<usize> = r.bytes(count)?.iter().map(|&b| b as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(DataError::Parse {
            offset: 8,
            message: format!("label {bad} out of range 0..=9"),
        });
    }

    Ok(DatasetHandle {
        name: "mnist".into(),
        split,
        inputs,
        labels,
        shape: FeatureShape::Image {
            channels: 1,
            height: rows,
            width: cols,
        },
        num_classes: 10,
    })
}

/// Writes a dataset as a raw IDX pair (inverse of [`load_mnist_idx`];
/// pixels are quantized to u8). Single-channel image data only.
pub fn write_mnist_idx(dir: &Path, data: &DatasetHandle) -> Result<(), DataError> {
    let FeatureShape::Image {
        channels: 1,
        height,
        width,
    } = data.shape
    else {
        return Err(DataError::Shape(format!(
            "IDX writer needs single-channel images, got {}",
            data.shape
        )));
    };
    fs::create_dir_all(dir)?;
    let prefix = match data.split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let mut img = Vec::with_capacity(16 + data.len() * height * width);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(data.len() as u32).to_be_bytes());
    img.extend_from_slice(&(height as u32).to_be_bytes());
    img.extend_from_slice(&(width as u32).to_be_bytes());
    for i in 0..data.len() {
        img.extend(
            data.inputs
                .row(i)
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    File::create(dir.join(format!("{prefix}-images-idx3-ubyte")))?.write_all(&img)?;

    let mut lab = Vec::with_capacity(8 + data.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(data.len() as u32).to_be_bytes());
    lab.extend(data.labels.iter().map(|&l| l as u8));
    File::create(dir.join(format!("{prefix}-labels-idx1-ubyte")))?.write_all(&lab)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary
// ---------------------------------------------------------------------------

const CIFAR_RECORD: usize = 3073;

/// Loads CIFAR-10 binary batches. `path` may be a single `.bin` file or a
/// directory holding the canonical `data_batch_*.bin` (train split) /
/// `test_batch.bin` (test split).
pub fn load_cifar10_bin(path: &Path, split: Split) -> Result<DatasetHandle, DataError> {
    let files: Vec<std::path::PathBuf> = if path.is_dir() {
        let mut names: Vec<_> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                match split {
                    Split::Train => name.starts_with("data_batch") && name.ends_with(".bin"),
                    Split::Test => name == "test_batch.bin",
                }
            })
            .collect();
        names.sort();
        names
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(DataError::Empty(format!(
            "no CIFAR-10 {} batches under {}",
            split.name(),
            path.display()
        )));
    }

    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for file in &files {
        let mut bytes = Vec::new();
        File::open(file)?.read_to_end(&mut bytes)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(DataError::Parse {
                offset: (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
                message: format!(
                    "{} has {} bytes, not a multiple of the {CIFAR_RECORD}-byte record",
                    file.display(),
                    bytes.len()
                ),
            });
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            let label = rec[0] as usize;
            if label > 9 {
                return Err(DataError::Parse {
                    offset: (labels.len() * CIFAR_RECORD) as u64,
                    message: format!("label {label} out of range 0..=9"),
                });
            }
            labels.push(label);
            inputs.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }

    let count = labels.len();
    Ok(DatasetHandle {
        name: "cifar10".into(),
        split,
        inputs: Mat::from_vec(count, 3072, inputs),
        labels,
        shape: FeatureShape::Image {
            channels: 3,
            height: 32,
            width: 32,
        },
        num_classes: 10,
    })
}

/// Writes a dataset as one CIFAR-10 binary batch file (3x32x32 images).
pub fn write_cifar10_bin(path: &Path, data: &DatasetHandle) -> Result<(), DataError> {
    if data.shape
        != (FeatureShape::Image {
            channels: 3,
            height: 32,
            width: 32,
        })
    {
        return Err(DataError::Shape(format!(
            "CIFAR writer needs 3x32x32 images, got {}",
            data.shape
        )));
    }
    let mut bytes = Vec::with_capacity(data.len() * CIFAR_RECORD);
    for i in 0..data.len() {
        bytes.push(data.labels[i] as u8);
        bytes.extend(
            data.inputs
                .row(i)
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    File::create(path)?.write_all(&bytes)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Gaussian clusters around seeded random centers scaled by `separation`.
/// The centers depend only on the seed; the per-example noise stream depends
/// on the split, so train and test draw disjoint samples from one
/// distribution.
pub fn synth_blobs(
    classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
    split: Split,
) -> Result<DatasetHandle, DataError> {
    if per_class == 0 || classes == 0 {
        return Err(DataError::Empty("per_class and classes must be > 0".into()));
    }
    if separation <= 0.0 {
        return Err(DataError::Shape("separation must be > 0".into()));
    }
    let mut center_stream = Stream::substream(seed, 0);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..dim)
                .map(|_| center_stream.normal_f64() * separation)
                .collect()
        })
        .collect();
    let mut stream = Stream::substream(seed, 1 + split as u64);
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        for _ in 0..per_class {
            for d in 0..dim {
                data.push(centers[c][d] + stream.normal_f64());
            }
            labels.push(c);
        }
    }
    Ok(DatasetHandle {
        name: "blobs".into(),
        split,
        inputs: Mat::from_vec(n, dim, data),
        labels,
        shape: FeatureShape::Flat(dim),
        num_classes: classes,
    })
}

/// Deterministic 28x28 single-channel image classes: each class is a seeded
/// coarse glyph upsampled to full resolution; samples add a random shift of
/// up to 2 pixels and Gaussian pixel noise, clipped to [0, 1]. A stand-in
/// for digit data when the real corpus is not on disk. Glyphs depend only
/// on the seed; sample noise depends on the split, so train and test share
/// the class structure but draw disjoint examples.
pub fn synth_images(
    classes: usize,
    per_class: usize,
    noise: f64,
    seed: u64,
    split: Split,
) -> Result<DatasetHandle, DataError> {
    if per_class == 0 || classes == 0 {
        return Err(DataError::Empty("per_class and classes must be > 0".into()));
    }
    const SIDE: usize = 28;
    const COARSE: usize = 7;
    let up = SIDE / COARSE;
    let mut glyph_stream = Stream::substream(seed, 0);
    // Per-class glyph: a sparse coarse pattern, smoothed by upsampling.
    let glyphs: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..COARSE * COARSE)
                .map(|_| {
                    if glyph_stream.uniform_f64() < 0.35 {
                        0.55 + 0.45 * glyph_stream.uniform_f64()
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();

    let mut stream = Stream::substream(seed, 1 + split as u64);
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * SIDE * SIDE);
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        for _ in 0..per_class {
            let dy = stream.bounded(5) as isize - 2;
            let dx = stream.bounded(5) as isize - 2;
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let sy = y as isize - dy;
                    let sx = x as isize - dx;
                    let base = if sy >= 0 && sy < SIDE as isize && sx >= 0 && sx < SIDE as isize {
                        glyphs[c][(sy as usize / up).min(COARSE - 1) * COARSE
                            + (sx as usize / up).min(COARSE - 1)]
                    } else {
                        0.0
                    };
                    data.push((base + noise * stream.normal_f64()).clamp(0.0, 1.0));
                }
            }
            labels.push(c);
        }
    }
    Ok(DatasetHandle {
        name: "synth-images".into(),
        split,
        inputs: Mat::from_vec(n, SIDE * SIDE, data),
        labels,
        shape: FeatureShape::Image {
            channels: 1,
            height: SIDE,
            width: SIDE,
        },
        num_classes: classes,
    })
}

// ---------------------------------------------------------------------------
// Corruptions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    BoxBlur,
    Contrast,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::BoxBlur,
        CorruptionKind::Contrast,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::BoxBlur => "box_blur",
            CorruptionKind::Contrast => "contrast",
        }
    }
}

const NOISE_STD: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
const IMPULSE_FRACTION: [f64; 5] = [0.01, 0.03, 0.06, 0.10, 0.17];
const BLUR_KERNEL: [usize; 5] = [3, 3, 5, 5, 7];
const BLUR_PASSES: [usize; 5] = [1, 1, 1, 2, 2];
const CONTRAST_FACTOR: [f64; 5] = [0.75, 0.5, 0.4, 0.3, 0.15];

/// Applies one corruption at severity 1..=5 to an image dataset,
/// deterministically for a fixed seed. Values are clipped to [0, 1].
pub fn corrupt_dataset(
    data: &DatasetHandle,
    kind: CorruptionKind,
    severity: usize,
    seed: u64,
) -> Result<DatasetHandle, DataError> {
    let FeatureShape::Image {
        channels,
        height,
        width,
    } = data.shape
    else {
        return Err(DataError::Shape(format!(
            "corruptions need image data, got flat {}",
            data.shape
        )));
    };
    if !(1..=5).contains(&severity) {
        return Err(DataError::Shape(format!(
            "severity {severity} outside 1..=5"
        )));
    }
    let s = severity - 1;
    let mut stream = Stream::substream(seed, severity as u64);
    let mut out = data.inputs.clone();
    let n = data.len();

    match kind {
        CorruptionKind::GaussianNoise => {
            let std = NOISE_STD[s];
            for v in out.data_mut() {
                *v = (*v + std * stream.normal_f64()).clamp(0.0, 1.0);
            }
        }
        CorruptionKind::ImpulseNoise => {
            let frac = IMPULSE_FRACTION[s];
            for v in out.data_mut() {
                if stream.uniform_f64() < frac {
                    *v = if stream.uniform_f64() < 0.5 { 0.0 } else { 1.0 };
                }
            }
        }
        CorruptionKind::BoxBlur => {
            let k = BLUR_KERNEL[s];
            let passes = BLUR_PASSES[s];
            for i in 0..n {
                let mut img = out.row(i).to_vec();
                for _ in 0..passes {
                    img = box_blur(&img, channels, height, width, k);
                }
                out.row_mut(i).copy_from_slice(&img);
            }
        }
        CorruptionKind::Contrast => {
            let factor = CONTRAST_FACTOR[s];
            for i in 0..n {
                let row = out.row_mut(i);
                let mean = row.iter().sum::<f64>() / row.len() as f64;
                for v in row {
                    *v = (mean + factor * (*v - mean)).clamp(0.0, 1.0);
                }
            }
        }
    }

    Ok(DatasetHandle {
        name: format!("{}-{}-s{}", data.name, kind.name(), severity),
        inputs: out,
        ..data.clone()
    })
}

/// Box filter with replicate borders, applied per channel.
fn box_blur(img: &[f64], channels: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut out = vec![0.0; img.len()];
    let inv = 1.0 / (k * k) as f64;
    for c in 0..channels {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sy = (y + dy).clamp(0, h as isize - 1) as usize;
                        let sx = (x + dx).clamp(0, w as isize - 1) as usize;
                        acc += img[(c * h + sy) * w + sx];
                    }
                }
                out[(c * h + y as usize) * w + x as usize] = acc * inv;
            }
        }
    }
    out
}
