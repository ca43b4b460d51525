//! CIFAR-10 binary ingestion, a synthetic stand-in dataset, and seeded
//! mini-batching.
//!
//! Pixels are held as 8-bit codes and exposed as `code / 255`, so every
//! dataset (including synthetic ones) round-trips through the binary record
//! format bit for bit.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_IMAGE_SIZE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
pub const RECORD_BYTES: usize = 1 + 3 * CIFAR_IMAGE_SIZE * CIFAR_IMAGE_SIZE;
pub const TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    image_size: usize,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(pixels: Vec<u8>, labels: Vec<u8>, image_size: usize, num_classes: usize, split: Split) -> Result<Self> {
        let per_image = 3 * image_size * image_size;
        if image_size == 0 || pixels.len() != labels.len() * per_image {
            return Err(Error::Config(format!(
                "{} pixel bytes do not form {} images of 3x{image_size}x{image_size}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Input(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Dataset { pixels, labels, image_size, num_classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    fn image_len(&self) -> usize {
        3 * self.image_size * self.image_size
    }

    /// Raw 8-bit pixel codes of image `i`, channel planes in R, G, B order.
    pub fn raw_image(&self, i: usize) -> &[u8] {
        &self.pixels[i * self.image_len()..(i + 1) * self.image_len()]
    }

    /// Image `i` as a `[3, S, S]` tensor scaled to `[0, 1]`.
    pub fn image(&self, i: usize) -> Tensor {
        let s = self.image_size;
        Tensor::new(vec![3, s, s], self.raw_image(i).iter().map(|&p| scale(p)).collect())
            .expect("dataset images have a fixed size")
    }

    /// Stacks the given examples into a `[m, 3, S, S]` batch, preserving order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(self.raw_image(i).iter().map(|&p| scale(p)));
        }
        let s = self.image_size;
        let labels = indices.iter().map(|&i| self.labels[i] as usize).collect();
        (Tensor::new(vec![indices.len(), 3, s, s], data).expect("non-empty batch"), labels)
    }

    /// The first `n` examples (or all, when `n` exceeds the size).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            pixels: self.pixels[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..*self
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Encodes the dataset as CIFAR-10 binary records.
    pub fn to_records(&self) -> Result<Vec<u8>> {
        if self.image_size != CIFAR_IMAGE_SIZE || self.num_classes > 256 {
            return Err(Error::Config(format!(
                "binary records hold 32x32 images, dataset has {0}x{0}",
                self.image_size
            )));
        }
        let mut out = Vec::with_capacity(self.len() * RECORD_BYTES);
        for i in 0..self.len() {
            out.push(self.labels[i]);
            out.extend_from_slice(self.raw_image(i));
        }
        Ok(out)
    }

    pub fn write_records(&self, path: &Path) -> Result<()> {
        let bytes = self.to_records()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    fn concat(parts: Vec<Dataset>, split: Split) -> Dataset {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            pixels.extend(p.pixels);
            labels.extend(p.labels);
        }
        Dataset { pixels, labels, image_size: CIFAR_IMAGE_SIZE, num_classes: CIFAR_CLASSES, split }
    }
}

fn scale(p: u8) -> f64 {
    p as f64 / 255.0
}

/// Parses a buffer of 3,073-byte records: one label byte, then 1,024 bytes
/// each of the red, green and blue planes in row-major order.
pub fn parse_records(bytes: &[u8], split: Split) -> Result<Dataset> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::Format(format!(
            "{} bytes is not a multiple of the {RECORD_BYTES}-byte record size",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (RECORD_BYTES - 1));
    for (i, record) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        if record[0] as usize >= CIFAR_CLASSES {
            return Err(Error::Format(format!("record {i} has label {}", record[0])));
        }
        labels.push(record[0]);
        pixels.extend_from_slice(&record[1..]);
    }
    Dataset::new(pixels, labels, CIFAR_IMAGE_SIZE, CIFAR_CLASSES, split)
}

pub fn read_records(path: &Path, split: Split) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_records(&bytes, split).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Whether `dir` holds the six extracted CIFAR-10 binary files.
pub fn cifar10_present(dir: &Path) -> bool {
    TRAIN_FILES.iter().chain(std::iter::once(&TEST_FILE)).all(|f| dir.join(f).is_file())
}

/// Loads `data_batch_1..5.bin` as the training split and `test_batch.bin`
/// as the validation split.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let parts = TRAIN_FILES
        .iter()
        .map(|f| read_records(&dir.join(f), Split::Train))
        .collect::<Result<Vec<_>>>()?;
    let train = Dataset::concat(parts, Split::Train);
    let validation = read_records(&dir.join(TEST_FILE), Split::Validation)?;
    Ok((train, validation))
}

/// Class-conditional images whose per-channel means identify the class.
///
/// Class `k` gets a background colour on a circle around mid-grey, lying in
/// the plane orthogonal to the grey axis. Each image adds a grey Gaussian
/// blob at a random position and per-pixel noise; both shift the channel
/// means only along the grey axis or average out. Labels are assigned
/// round-robin.
pub fn make_synthetic(n: usize, num_classes: usize, image_size: usize, split: Split, seed: u64) -> Result<Dataset> {
    if num_classes == 0 || num_classes > 256 || n < num_classes || image_size == 0 {
        return Err(Error::Config(format!(
            "synthetic dataset needs n >= classes >= 1 and a positive size, got n={n} classes={num_classes} size={image_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.08).expect("valid sigma");
    let u = [1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt(), 0.0];
    let v = [1.0 / 6f64.sqrt(), 1.0 / 6f64.sqrt(), -2.0 / 6f64.sqrt()];
    let plane = image_size * image_size;
    let mut pixels = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % num_classes;
        let theta = std::f64::consts::TAU * k as f64 / num_classes as f64;
        let colour: Vec<f64> = (0..3).map(|c| 0.5 + 0.25 * (theta.cos() * u[c] + theta.sin() * v[c])).collect();
        let cy = rng.gen_range(0.0..image_size as f64);
        let cx = rng.gen_range(0.0..image_size as f64);
        let width = (image_size as f64 / 6.0).max(0.5);
        for c in colour.iter().take(3) {
            for y in 0..image_size {
                for x in 0..image_size {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let blob = 0.2 * (-d2 / (2.0 * width * width)).exp();
                    let value = (c + blob + noise.sample(&mut rng)).clamp(0.0, 1.0);
                    pixels.push((value * 255.0).round() as u8);
                }
            }
        }
        labels.push(k as u8);
    }
    Dataset::new(pixels, labels, image_size, num_classes, split)
}

/// One mini-batch with the dataset indices it was drawn from.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Single-pass iterator over one epoch of mini-batches.
#[derive(Debug)]
pub struct BatchIterator<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
    drop_last: bool,
}

impl<'a> BatchIterator<'a> {
    /// Shuffles with `ChaCha8(seed)`; pass `run_seed + epoch` for per-epoch
    /// orders.
    pub fn shuffled(dataset: &'a Dataset, batch_size: usize, seed: u64, drop_last: bool) -> Result<Self> {
        let mut it = Self::sequential(dataset, batch_size, drop_last)?;
        it.order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(it)
    }

    /// Visits examples in dataset order.
    pub fn sequential(dataset: &'a Dataset, batch_size: usize, drop_last: bool) -> Result<Self> {
        if batch_size == 0 || batch_size > dataset.len() {
            return Err(Error::Config(format!(
                "batch size {batch_size} must lie in 1..={}",
                dataset.len()
            )));
        }
        Ok(BatchIterator { dataset, batch_size, order: (0..dataset.len()).collect(), cursor: 0, drop_last })
    }

    pub fn num_batches(&self) -> usize {
        let n = self.order.len();
        if self.drop_last {
            n / self.batch_size
        } else {
            n.div_ceil(self.batch_size)
        }
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let remaining = self.order.len() - self.cursor;
        if remaining == 0 || (self.drop_last && remaining < self.batch_size) {
            return None;
        }
        let take = remaining.min(self.batch_size);
        let indices = self.order[self.cursor..self.cursor + take].to_vec();
        self.cursor += take;
        let (images, labels) = self.dataset.gather(&indices);
        Some(Batch { images, labels, indices })
    }
}
