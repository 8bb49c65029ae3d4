//! CIFAR-10 binary loading, normalization, batching and synthetic fixtures.
//!
//! A batch file is a sequence of 3073-byte records: one label byte followed by
//! 3072 pixel bytes (1024 red, 1024 green, 1024 blue, each row-major 32x32).

use std::fs;
use std::path::{Path, PathBuf};

use crate::augment::Rng;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const IMAGE_BYTES: usize = CHANNELS * IMAGE_SIDE * IMAGE_SIDE;
pub const RECORD_BYTES: usize = IMAGE_BYTES + 1;
pub const NUM_CLASSES: usize = 10;
pub const RECORDS_PER_FILE: usize = 10_000;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";
pub const DATA_DIR_ENV: &str = "MIXRES_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Test,
}

/// Images `N x 3 x H x W` and their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
    pub name: SplitName,
}

impl DatasetSplit {
    pub fn new(images: Tensor<f32>, labels: Vec<u8>, name: SplitName) -> Result<Self> {
        let &[n, CHANNELS, _, _] = images.shape() else {
            return Err(Error::Dimension(format!(
                "dataset images must be N x 3 x H x W, got {:?}",
                images.shape()
            )));
        };
        if n != labels.len() {
            return Err(Error::Dimension(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Validation(format!("label {l} outside [0, 9]")));
        }
        Ok(Self { images, labels, name })
    }

    /// Builds a split from raw CIFAR pixel bytes, scaling them to `[0, 1]`.
    pub fn from_bytes(labels: Vec<u8>, pixels: &[u8], name: SplitName) -> Result<Self> {
        let n = labels.len();
        if pixels.len() != n * IMAGE_BYTES {
            return Err(Error::Dimension(format!("{} pixel bytes for {n} images", pixels.len())));
        }
        let data = pixels.iter().map(|&b| b as f32 / 255.0).collect();
        let images = Tensor::new(&[n, CHANNELS, IMAGE_SIDE, IMAGE_SIDE], data)?;
        Self::new(images, labels, name)
    }

    /// Pixel bytes of an unnormalized split, `round(255 x)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.images
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.images.numel() / self.len().max(1)
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            name: self.name,
        })
    }

    /// The first `n` samples (all of them if `n` exceeds the split).
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        self.select(&(0..n).collect::<Vec<_>>())
    }

    /// Splits off the last `n` samples as a second split.
    pub fn split_tail(&self, n: usize) -> Result<(Self, Self)> {
        if n == 0 || n >= self.len() {
            return Err(Error::Config(format!("cannot hold out {n} of {} samples", self.len())));
        }
        let cut = self.len() - n;
        let head = self.select(&(0..cut).collect::<Vec<_>>())?;
        let tail = self.select(&(cut..self.len()).collect::<Vec<_>>())?;
        Ok((head, tail))
    }
}

/// Parses the concatenated records of one batch file.
pub fn parse_records(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.is_empty() {
        return Err(Error::format(path, "empty batch file"));
    }
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::format(
            path,
            format!(
                "length {} is not a multiple of the {RECORD_BYTES}-byte record size",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * IMAGE_BYTES);
    for (i, record) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        if record[0] as usize >= NUM_CLASSES {
            return Err(Error::format(path, format!("record {i} has label byte {}", record[0])));
        }
        labels.push(record[0]);
        pixels.extend_from_slice(&record[1..]);
    }
    Ok((labels, pixels))
}

pub fn encode_records(labels: &[u8], pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != labels.len() * IMAGE_BYTES {
        return Err(Error::Dimension(format!(
            "{} pixel bytes for {} labels",
            pixels.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(Error::Validation(format!("label {l} out of range")));
    }
    let mut out = Vec::with_capacity(labels.len() * RECORD_BYTES);
    for (label, image) in labels.iter().zip(pixels.chunks_exact(IMAGE_BYTES)) {
        out.push(*label);
        out.extend_from_slice(image);
    }
    Ok(out)
}

pub fn read_batch_file(path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_records(&bytes, path)
}

pub fn write_batch_file(path: &Path, labels: &[u8], pixels: &[u8]) -> Result<()> {
    let bytes = encode_records(labels, pixels)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads the five training batches and the test batch from `dir`.
pub fn load_cifar10_binary(dir: &Path) -> Result<(DatasetSplit, DatasetSplit)> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for name in TRAIN_FILES {
        let (l, p) = read_batch_file(&dir.join(name))?;
        labels.extend(l);
        pixels.extend(p);
    }
    let train = DatasetSplit::from_bytes(labels, &pixels, SplitName::Train)?;
    let (l, p) = read_batch_file(&dir.join(TEST_FILE))?;
    let test = DatasetSplit::from_bytes(l, &p, SplitName::Test)?;
    Ok((train, test))
}

/// Sizes of every expected batch file in `dir`.
pub fn batch_file_sizes(dir: &Path) -> Result<Vec<(String, u64)>> {
    TRAIN_FILES
        .iter()
        .chain(std::iter::once(&TEST_FILE))
        .map(|name| {
            let path = dir.join(name);
            let meta = fs::metadata(&path).map_err(|e| Error::io(&path, e))?;
            Ok((name.to_string(), meta.len()))
        })
        .collect()
}

/// Dataset directory from the environment, if set.
pub fn data_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from)
}

/// Writes a split in the CIFAR-10 layout (training data spread over the five
/// batch files), useful for fixtures.
pub fn write_cifar10_dir(dir: &Path, train: &DatasetSplit, test: &DatasetSplit) -> Result<()> {
    if train.len() < TRAIN_FILES.len() || test.is_empty() {
        return Err(Error::Usage(format!(
            "need at least {} training and 1 test sample, got {} and {}",
            TRAIN_FILES.len(),
            train.len(),
            test.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes = train.to_bytes();
    let per_file = train.len().div_ceil(TRAIN_FILES.len());
    for (f, name) in TRAIN_FILES.iter().enumerate() {
        let lo = (f * per_file).min(train.len());
        let hi = ((f + 1) * per_file).min(train.len());
        write_batch_file(
            &dir.join(name),
            &train.labels[lo..hi],
            &bytes[lo * IMAGE_BYTES..hi * IMAGE_BYTES],
        )?;
    }
    write_batch_file(&dir.join(TEST_FILE), &test.labels, &test.to_bytes())
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

pub fn compute_norm_stats(train: &DatasetSplit) -> Result<NormStats> {
    let plane = train.image_len() / CHANNELS;
    let data = train.images.data();
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for c in 0..CHANNELS {
        let values = || {
            data.chunks(plane)
                .skip(c)
                .step_by(CHANNELS)
                .flatten()
                .map(|&v| v as f64)
        };
        let count = (train.len() * plane) as f64;
        let m = values().sum::<f64>() / count;
        let var = values().map(|v| (v - m).powi(2)).sum::<f64>() / count;
        if var.sqrt() <= 1e-12 {
            return Err(Error::DegenerateData(format!(
                "channel {c} has zero standard deviation"
            )));
        }
        mean[c] = m;
        std[c] = var.sqrt();
    }
    Ok(NormStats { mean, std })
}

fn map_channels(split: &DatasetSplit, f: impl Fn(usize, f64) -> f64) -> Result<DatasetSplit> {
    let plane = split.image_len() / CHANNELS;
    let data = split
        .images
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| f((i / plane) % CHANNELS, v as f64) as f32)
        .collect();
    Ok(DatasetSplit {
        images: Tensor::new(split.images.shape(), data)?,
        labels: split.labels.clone(),
        name: split.name,
    })
}

/// `(x - mean) / std` per channel.
pub fn normalize(split: &DatasetSplit, stats: &NormStats) -> Result<DatasetSplit> {
    if stats.std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::DegenerateData("normalization std must be positive".into()));
    }
    map_channels(split, |c, v| (v - stats.mean[c]) / stats.std[c])
}

pub fn denormalize(split: &DatasetSplit, stats: &NormStats) -> Result<DatasetSplit> {
    map_channels(split, |c, v| v * stats.std[c] + stats.mean[c])
}

/// One mini-batch drawn from a split.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
}

/// Iterates a split in batches; the last batch may be short.
pub struct BatchIter<'a> {
    split: &'a DatasetSplit,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn batch_iter(split: &DatasetSplit, batch_size: usize, shuffle: bool, seed: u64) -> BatchIter<'_> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let order = if shuffle {
        Rng::seed(seed).permutation(split.len())
    } else {
        (0..split.len()).collect()
    };
    BatchIter {
        split,
        order,
        batch_size,
        pos: 0,
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let images = self
            .split
            .images
            .select_rows(&indices)
            .expect("indices come from the split");
        let labels = indices.iter().map(|&i| self.split.labels[i]).collect();
        Some(Batch {
            indices,
            images,
            labels,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for BatchIter<'_> {}

/// Characteristic color of class `c` out of `k`; distinct points on a circle in RGB.
pub fn class_color(c: usize, k: usize) -> [f32; 3] {
    let phase = std::f64::consts::TAU * c as f64 / k as f64;
    std::array::from_fn(|j| (0.5 + 0.4 * (phase + j as f64 * std::f64::consts::TAU / 3.0).sin()) as f32)
}

/// Class-separable blobs: each image is its class color plus Gaussian noise.
pub fn synthetic_dataset(n: usize, num_classes: usize, seed: u64) -> DatasetSplit {
    synthetic_dataset_with_noise(n, num_classes, seed, 0.1, SplitName::Train)
}

pub fn synthetic_dataset_with_noise(
    n: usize,
    num_classes: usize,
    seed: u64,
    noise: f64,
    name: SplitName,
) -> DatasetSplit {
    assert!((1..=NUM_CLASSES).contains(&num_classes) && n >= num_classes);
    let mut rng = Rng::seed(seed);
    let labels: Vec<u8> = (0..n).map(|i| (i % num_classes) as u8).collect();
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    let mut data = Vec::with_capacity(n * IMAGE_BYTES);
    for &label in &labels {
        let color = class_color(label as usize, num_classes);
        for channel_value in color {
            for _ in 0..plane {
                let v = channel_value as f64 + noise * rng.normal();
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    let images = Tensor::new(&[n, CHANNELS, IMAGE_SIDE, IMAGE_SIDE], data).expect("synthetic shape is consistent");
    DatasetSplit { images, labels, name }
}
