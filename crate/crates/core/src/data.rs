//! MNIST (IDX) and CIFAR-10 (binary batch) loading, normalization and batching.
//!
//! Pixel statistics are always computed on the training split and shared by
//! both splits. Images are kept in `f64`, flattened to `N×784` for MNIST and
//! `N×3×32×32` for CIFAR-10.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::nn::DatasetKind;
use crate::rng::{streams, RngStream};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

pub const CIFAR_RECORD_BYTES: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_PIXELS: usize = 3 * 32 * 32;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Per-channel affine map `x = (raw - mean) / std`, raw pixels in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Population mean and std per channel of channel-major raw images, each
    /// `channels × plane` bytes long.
    pub fn from_raw(raw: &[u8], channels: usize, plane: usize) -> Result<Self> {
        let per_image = channels * plane;
        if per_image == 0 || raw.is_empty() || !raw.len().is_multiple_of(per_image) {
            return Err(Error::DatasetEmpty);
        }
        let images = raw.len() / per_image;
        let count = (images * plane) as f64;
        let mut mean = vec![0.0; channels];
        for img in raw.chunks_exact(per_image) {
            for (c, p) in img.chunks_exact(plane).enumerate() {
                mean[c] += p.iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; channels];
        for img in raw.chunks_exact(per_image) {
            for (c, p) in img.chunks_exact(plane).enumerate() {
                var[c] += p.iter().map(|&v| (v as f64 - mean[c]).powi(2)).sum::<f64>();
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / count).sqrt()).collect();
        if std.contains(&0.0) {
            return Err(Error::InvalidParameter(
                "constant pixel channel; cannot normalize".into(),
            ));
        }
        Ok(Normalization { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn apply(&self, raw: &[u8], plane: usize) -> Vec<f64> {
        let c = self.channels();
        raw.iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / plane) % c;
                (v as f64 - self.mean[ch]) / self.std[ch]
            })
            .collect()
    }

    /// Raw pixel values of one channel-major image.
    pub fn invert(&self, image: &[f64]) -> Vec<f64> {
        let plane = image.len() / self.channels();
        image
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = i / plane;
                v * self.std[ch] + self.mean[ch]
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    normalization: Normalization,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, normalization: Normalization) -> Result<Self> {
        let n = images.shape()[0];
        if n != labels.len() {
            return Err(Error::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        Ok(Dataset {
            images,
            labels,
            normalization,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    /// Shape of one example, without the batch axis.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let s = self.sample_len();
        &self.images.data()[i * s..(i + 1) * s]
    }

    /// Copies the listed examples, in order, into a batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let s = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * s);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (
            Tensor::new(shape, data).expect("gather of a non-empty index set"),
            labels,
        )
    }

    /// Examples at `indices`, keeping this dataset's normalization record.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::DatasetEmpty);
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidParameter(format!(
                "subset index {bad} out of range for {} examples",
                self.len()
            )));
        }
        let (images, labels) = self.gather(indices);
        Dataset::new(images, labels, self.normalization.clone())
    }

    /// `n` examples drawn without replacement from the subset stream of `seed`.
    /// `n ≥ len` returns the full dataset unchanged.
    pub fn shuffled_subset(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n >= self.len() {
            return Ok(self.clone());
        }
        let mut perm = RngStream::new(seed, streams::SUBSET).permutation(self.len());
        perm.truncate(n);
        self.subset(&perm)
    }
}

/// Number of batches with the last partial batch kept.
pub fn batch_count(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Batches over a fixed visiting order.
pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a> Batches<'a> {
    pub fn new(dataset: &'a Dataset, order: Vec<usize>, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be at least 1".into()));
        }
        Ok(Batches {
            dataset,
            order,
            batch_size,
            pos: 0,
        })
    }

    /// One shuffled epoch drawing its permutation from `rng`.
    pub fn shuffled(dataset: &'a Dataset, batch_size: usize, rng: &mut RngStream) -> Result<Self> {
        Batches::new(dataset, rng.permutation(dataset.len()), batch_size)
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.dataset.gather(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = batch_count(self.order.len() - self.pos, self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for Batches<'_> {}

/// A single shuffled epoch from the shuffle stream of `shuffle_seed`.
pub fn batches(dataset: &Dataset, batch_size: usize, shuffle_seed: u64) -> Result<Batches<'_>> {
    let mut rng = RngStream::new(shuffle_seed, streams::SHUFFLE);
    Batches::shuffled(dataset, batch_size, &mut rng)
}

/// Reads `path`, or `path.gz` when the plain file is absent. Gzip content is
/// detected by its magic bytes, not the extension.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let actual: PathBuf = if path.exists() {
        path.to_path_buf()
    } else {
        let mut gz = path.as_os_str().to_owned();
        gz.push(".gz");
        let gz = PathBuf::from(gz);
        if gz.exists() {
            gz
        } else {
            path.to_path_buf()
        }
    };
    let bytes = std::fs::read(&actual).map_err(|e| Error::io(&actual, e))?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(&actual, e))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::TruncatedFile(format!("{what}: header ends at byte {}", bytes.len())))
}

/// IDX image file contents: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], what: &str) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, what)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            what: what.into(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, what)? as usize;
    let rows = be_u32(bytes, 8, what)? as usize;
    let cols = be_u32(bytes, 12, what)? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::TruncatedFile(format!(
            "{what}: expected {need} pixel bytes, found {}",
            body.len()
        )));
    }
    Ok((n, rows, cols, body[..need].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], what: &str) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, what)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            what: what.into(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, what)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::TruncatedFile(format!(
            "{what}: expected {n} labels, found {}",
            body.len()
        )));
    }
    Ok(body[..n].to_vec())
}

fn labels_to_usize(raw: &[u8]) -> Result<Vec<usize>> {
    raw.iter()
        .map(|&l| {
            if (l as usize) < 10 {
                Ok(l as usize)
            } else {
                Err(Error::LabelOutOfRange {
                    label: l as usize,
                    classes: 10,
                })
            }
        })
        .collect()
}

fn read_idx_pair(dir: &Path, images: &str, labels: &str) -> Result<(Vec<u8>, Vec<u8>)> {
    let (n, rows, cols, pixels) = parse_idx_images(&read_maybe_gz(&dir.join(images))?, images)?;
    let lab = parse_idx_labels(&read_maybe_gz(&dir.join(labels))?, labels)?;
    if n != lab.len() {
        return Err(Error::CountMismatch {
            images: n,
            labels: lab.len(),
        });
    }
    if rows * cols != 784 {
        return Err(Error::shape("MNIST image", &[28, 28], &[rows, cols]));
    }
    Ok((pixels, lab))
}

fn build_split(
    raw: &[u8],
    labels: &[u8],
    sample: &[usize],
    plane: usize,
    norm: &Normalization,
) -> Result<Dataset> {
    if labels.is_empty() {
        return Err(Error::DatasetEmpty);
    }
    let mut shape = vec![labels.len()];
    shape.extend_from_slice(sample);
    let images = Tensor::new(shape, norm.apply(raw, plane))?;
    Dataset::new(images, labels_to_usize(labels)?, norm.clone())
}

/// `(train, test)` from the four IDX files in `dir`, each optionally gzipped.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let (train_px, train_lab) = read_idx_pair(dir, MNIST_FILES[0], MNIST_FILES[1])?;
    let (test_px, test_lab) = read_idx_pair(dir, MNIST_FILES[2], MNIST_FILES[3])?;
    let norm = Normalization::from_raw(&train_px, 1, 784)?;
    Ok((
        build_split(&train_px, &train_lab, &[784], 784, &norm)?,
        build_split(&test_px, &test_lab, &[784], 784, &norm)?,
    ))
}

/// Splits CIFAR-10 binary records into `(pixels, labels)`.
pub fn parse_cifar_records(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.is_empty() {
        return Err(Error::TruncatedFile(format!("{}: empty", path.display())));
    }
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(Error::RecordSizeMismatch {
            path: path.to_path_buf(),
            len: bytes.len(),
            record: CIFAR_RECORD_BYTES,
        });
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((pixels, labels))
}

fn cifar_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if !dir.join(CIFAR_TEST_FILE).exists() && nested.join(CIFAR_TEST_FILE).exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn read_cifar(files: &[PathBuf]) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let (p, l) = parse_cifar_records(&read_maybe_gz(f)?, f)?;
        pixels.extend(p);
        labels.extend(l);
    }
    Ok((pixels, labels))
}

/// `(train, test)` from the CIFAR-10 binary batches in `dir` (or its
/// `cifar-10-batches-bin` subdirectory).
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let dir = cifar_dir(dir);
    let train_files: Vec<PathBuf> = CIFAR_TRAIN_FILES.iter().map(|f| dir.join(f)).collect();
    let (train_px, train_lab) = read_cifar(&train_files)?;
    let (test_px, test_lab) = read_cifar(&[dir.join(CIFAR_TEST_FILE)])?;
    let norm = Normalization::from_raw(&train_px, 3, 1024)?;
    let sample = [3, 32, 32];
    Ok((
        build_split(&train_px, &train_lab, &sample, 1024, &norm)?,
        build_split(&test_px, &test_lab, &sample, 1024, &norm)?,
    ))
}

pub fn load(kind: DatasetKind, dir: &Path) -> Result<(Dataset, Dataset)> {
    match kind {
        DatasetKind::Mnist => load_mnist(dir),
        DatasetKind::Cifar10 => load_cifar10(dir),
    }
}

/// Paths of the files a loader would read from `dir`, after resolving the
/// optional `.gz` suffix and the CIFAR-10 subdirectory. Missing files are
/// listed under their plain name.
pub fn dataset_files(kind: DatasetKind, dir: &Path) -> Vec<PathBuf> {
    let base = match kind {
        DatasetKind::Mnist => dir.to_path_buf(),
        DatasetKind::Cifar10 => cifar_dir(dir),
    };
    expected_files(kind)
        .into_iter()
        .map(|name| {
            let plain = base.join(name);
            let gz = base.join(format!("{name}.gz"));
            if !plain.exists() && gz.exists() {
                gz
            } else {
                plain
            }
        })
        .collect()
}

/// Files a dataset directory is expected to hold.
pub fn expected_files(kind: DatasetKind) -> Vec<&'static str> {
    match kind {
        DatasetKind::Mnist => MNIST_FILES.to_vec(),
        DatasetKind::Cifar10 => CIFAR_TRAIN_FILES
            .iter()
            .copied()
            .chain(std::iter::once(CIFAR_TEST_FILE))
            .collect(),
    }
}

/// Writes uncompressed IDX files; used to build small fixtures.
pub fn write_idx(dir: &Path, prefix: &str, pixels: &[u8], labels: &[u8], rows: usize, cols: usize) -> Result<()> {
    let n = labels.len();
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + n);
    for v in [IDX_LABELS_MAGIC, n as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    let ip = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lp = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    std::fs::write(&ip, img).map_err(|e| Error::io(&ip, e))?;
    std::fs::write(&lp, lab).map_err(|e| Error::io(&lp, e))?;
    Ok(())
}
