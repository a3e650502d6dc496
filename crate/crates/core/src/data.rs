//! MNIST (IDX) and CIFAR-10 (binary) loaders, normalization and seeded batching.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MNIST_MEAN: f32 = 0.1307;
pub const MNIST_STD: f32 = 0.3081;
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

pub const IDX_IMAGE_MAGIC: u32 = 2051;
pub const IDX_LABEL_MAGIC: u32 = 2049;
pub const CIFAR_RECORD: usize = 3073;
pub const NUM_CLASSES: usize = 10;

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found}, expected {expected}")]
    BadMagic { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: truncated ({got} bytes, need {need})")]
    Truncated { path: PathBuf, got: usize, need: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: {len} bytes is not a whole number of {CIFAR_RECORD}-byte records")]
    Framing { path: PathBuf, len: usize },
    #[error("{path}: label {label} at record {index} is out of range")]
    Label { path: PathBuf, index: usize, label: u8 },
    #[error("no input files")]
    Empty,
    #[error("batch size must be at least 1")]
    BatchSize,
    #[error("index {index} out of range for {len} examples")]
    Index { index: usize, len: usize },
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Normalized images `[N, C, H, W]` with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<u8>,
    split: Split,
    source_checksum: String,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn digest<'a>(parts: impl IntoIterator<Item = &'a [u8]>) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Parses an IDX header, returning `(dims, payload)`.
fn idx_payload<'a>(path: &Path, raw: &'a [u8], magic: u32, rank: usize) -> Result<(Vec<usize>, &'a [u8])> {
    let header = 4 + 4 * rank;
    if raw.len() < 4 {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            got: raw.len(),
            need: header,
        });
    }
    let found = be_u32(raw, 0);
    if found != magic {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            found,
            expected: magic,
        });
    }
    if raw.len() < header {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            got: raw.len(),
            need: header,
        });
    }
    let dims: Vec<usize> = (0..rank).map(|i| be_u32(raw, 4 + 4 * i) as usize).collect();
    let need = dims.iter().product::<usize>() + header;
    if raw.len() < need {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            got: raw.len(),
            need,
        });
    }
    Ok((dims, &raw[header..need]))
}

fn check_labels(path: &Path, labels: &[u8]) -> Result<()> {
    match labels.iter().position(|&l| l as usize >= NUM_CLASSES) {
        Some(index) => Err(DataError::Label {
            path: path.to_path_buf(),
            index,
            label: labels[index],
        }),
        None => Ok(()),
    }
}

pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let raw_images = read(ip)?;
    let raw_labels = read(lp)?;
    let (dims, pixels) = idx_payload(ip, &raw_images, IDX_IMAGE_MAGIC, 3)?;
    let (ldims, labels) = idx_payload(lp, &raw_labels, IDX_LABEL_MAGIC, 1)?;
    if dims[0] != ldims[0] {
        return Err(DataError::CountMismatch {
            images: dims[0],
            labels: ldims[0],
        });
    }
    check_labels(lp, labels)?;
    let data = pixels
        .iter()
        .map(|&p| (p as f32 / 255.0 - MNIST_MEAN) / MNIST_STD)
        .collect();
    let images = Tensor::from_vec(&[dims[0], 1, dims[1], dims[2]], data).map_err(|_| DataError::Empty)?;
    Ok(Dataset {
        images,
        labels: labels.to_vec(),
        split,
        source_checksum: digest([raw_images.as_slice(), raw_labels.as_slice()]),
    })
}

/// Loads the train and test splits from a directory holding the four IDX files.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let d = dir.as_ref();
    let train = load_mnist_idx(d.join(MNIST_FILES[0]), d.join(MNIST_FILES[1]), Split::Train)?;
    let test = load_mnist_idx(d.join(MNIST_FILES[2]), d.join(MNIST_FILES[3]), Split::Test)?;
    Ok((train, test))
}

pub fn load_cifar10_bin<P: AsRef<Path>>(batch_paths: &[P], split: Split) -> Result<Dataset> {
    if batch_paths.is_empty() {
        return Err(DataError::Empty);
    }
    let plane = 32 * 32;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut hasher = Sha256::new();
    for p in batch_paths {
        let p = p.as_ref();
        let raw = read(p)?;
        if raw.is_empty() || raw.len() % CIFAR_RECORD != 0 {
            return Err(DataError::Framing {
                path: p.to_path_buf(),
                len: raw.len(),
            });
        }
        hasher.update(&raw);
        for (index, rec) in raw.chunks_exact(CIFAR_RECORD).enumerate() {
            if rec[0] as usize >= NUM_CLASSES {
                return Err(DataError::Label {
                    path: p.to_path_buf(),
                    index,
                    label: rec[0],
                });
            }
            labels.push(rec[0]);
            for (ch, px) in rec[1..].chunks_exact(plane).enumerate() {
                data.extend(px.iter().map(|&v| (v as f32 / 255.0 - CIFAR_MEAN[ch]) / CIFAR_STD[ch]));
            }
        }
    }
    let n = labels.len();
    Ok(Dataset {
        images: Tensor::from_vec(&[n, 3, 32, 32], data).map_err(|_| DataError::Empty)?,
        labels,
        split,
        source_checksum: hex::encode(hasher.finalize()),
    })
}

/// Loads the five training batches and the test batch from `dir`.
pub fn load_cifar10_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let d = dir.as_ref();
    let train: Vec<PathBuf> = CIFAR_TRAIN_FILES.iter().map(|f| d.join(f)).collect();
    Ok((
        load_cifar10_bin(&train, Split::Train)?,
        load_cifar10_bin(&[d.join(CIFAR_TEST_FILE)], Split::Test)?,
    ))
}

/// `n` CIFAR-format records whose pixels depend on the label: each class gets
/// its own colour and stripe orientation, plus per-pixel noise.
pub fn synthetic_cifar_records(n: usize, rng: &mut Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(n * CIFAR_RECORD);
    for _ in 0..n {
        let label = rng.below(NUM_CLASSES);
        out.push(label as u8);
        let horizontal = label % 2 == 0;
        let period = 2 + label / 2;
        for ch in 0..3 {
            let base = 40.0 + 60.0 * ((label + ch) % 3) as f64;
            for i in 0..32 {
                for j in 0..32 {
                    let t = if horizontal { i } else { j };
                    let stripe = if (t / period) % 2 == 0 { 70.0 } else { 0.0 };
                    let v = base + stripe + 25.0 * rng.standard_normal();
                    out.push(v.clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    out
}

/// Writes a synthetic dataset in the CIFAR-10 binary layout: five training
/// batches of `per_batch` records and one test batch of `test` records.
pub fn write_synthetic_cifar(dir: impl AsRef<Path>, per_batch: usize, test: usize, seed: u64) -> Result<()> {
    let d = dir.as_ref();
    let mut rng = Rng::new(seed);
    let write = |name: &str, bytes: Vec<u8>| {
        let path = d.join(name);
        std::fs::write(&path, bytes).map_err(|source| DataError::Io { path, source })
    };
    for f in CIFAR_TRAIN_FILES {
        write(f, synthetic_cifar_records(per_batch, &mut rng))?;
    }
    write(CIFAR_TEST_FILE, synthetic_cifar_records(test, &mut rng))
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<u8>, split: Split) -> Result<Self> {
        let n = images.shape().first().copied().unwrap_or(0);
        if n != labels.len() {
            return Err(DataError::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        check_labels(Path::new("<memory>"), &labels)?;
        let source_checksum = digest([labels.as_slice()]);
        Ok(Self {
            images,
            labels,
            split,
            source_checksum,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// SHA-256 of the raw source files.
    pub fn source_checksum(&self) -> &str {
        &self.source_checksum
    }

    /// `[C, H, W]` of one example.
    pub fn item_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// SHA-256 of the normalized tensor and labels.
    pub fn content_checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in self.images.data() {
            h.update(v.to_le_bytes());
        }
        h.update(&self.labels);
        hex::encode(h.finalize())
    }

    /// The first `n` examples (all of them if `n ≥ len`).
    pub fn head(&self, n: usize) -> Dataset {
        if n >= self.len() {
            return self.clone();
        }
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.gather(&idx).expect("indices in range");
        Dataset {
            images,
            labels: labels.into_iter().map(|l| l as u8).collect(),
            split: self.split,
            source_checksum: self.source_checksum.clone(),
        }
    }

    /// Copies the listed examples into a batch tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        if let Some(&index) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(DataError::Index { index, len: self.len() });
        }
        if indices.is_empty() {
            return Err(DataError::Empty);
        }
        let x = self.images.slice_batch(indices);
        Ok((x, indices.iter().map(|&i| self.labels[i] as usize).collect()))
    }

    /// Consecutive batches in storage order.
    pub fn sequential(&self, batch_size: usize) -> Result<impl Iterator<Item = Batch> + '_> {
        if batch_size == 0 {
            return Err(DataError::BatchSize);
        }
        Ok((0..self.len()).step_by(batch_size).map(move |start| {
            let idx: Vec<usize> = (start..(start + batch_size).min(self.len())).collect();
            let (x, labels) = self.gather(&idx).expect("indices in range");
            Batch { x, labels, indices: idx }
        }))
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor<f32>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Shuffled mini-batches over a dataset, reshuffled every epoch from its own rng.
#[derive(Debug, Clone)]
pub struct BatchIterator<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    drop_last: bool,
    rng: Rng,
}

impl<'a> BatchIterator<'a> {
    pub fn new(dataset: &'a Dataset, batch_size: usize, drop_last: bool, rng: Rng) -> Result<Self> {
        if batch_size == 0 {
            return Err(DataError::BatchSize);
        }
        Ok(Self {
            dataset,
            batch_size,
            drop_last,
            rng,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        let n = self.dataset.len();
        if self.drop_last {
            n / self.batch_size
        } else {
            n.div_ceil(self.batch_size)
        }
    }

    /// Index lists for the next epoch.
    pub fn epoch_indices(&mut self) -> Vec<Vec<usize>> {
        let order = self.rng.permutation(self.dataset.len());
        order
            .chunks(self.batch_size)
            .filter(|c| !self.drop_last || c.len() == self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// The next epoch's batches, materialized lazily.
    pub fn epoch(&mut self) -> impl Iterator<Item = Batch> + 'a {
        let ds = self.dataset;
        self.epoch_indices().into_iter().map(move |indices| {
            let (x, labels) = ds.gather(&indices).expect("indices in range");
            Batch { x, labels, indices }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_images(n: usize, h: usize, w: usize, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGE_MAGIC, n as u32, h as u32, w as u32] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend((0..n * h * w).map(fill));
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_LABEL_MAGIC, labels.len() as u32] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(labels);
        b
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    #[test]
    fn idx_header_and_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let ip = write(dir.path(), "i", &idx_images(3, 28, 28, |k| if k == 1 { 255 } else { 0 }));
        let lp = write(dir.path(), "l", &idx_labels(&[1, 2, 9]));
        let ds = load_mnist_idx(&ip, &lp, Split::Test).unwrap();
        assert_eq!(ds.images().shape(), &[3, 1, 28, 28]);
        assert_eq!(ds.labels(), &[1, 2, 9]);
        let zero = (0.0 - 0.1307f32) / 0.3081;
        assert!((ds.images().data()[0] - zero).abs() < 1e-6);
        assert!((ds.images().data()[0] + 0.4242).abs() < 1e-4);
        assert!((ds.images().data()[1] - (1.0 - 0.1307) / 0.3081).abs() < 1e-6);
    }

    #[test]
    fn swapped_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ip = write(dir.path(), "i", &idx_images(2, 28, 28, |_| 0));
        let lp = write(dir.path(), "l", &idx_labels(&[1, 2]));
        let err = load_mnist_idx(&lp, &ip, Split::Train).unwrap_err();
        assert!(matches!(err, DataError::BadMagic { found: 2049, expected: 2051, .. }));
    }

    #[test]
    fn truncated_and_mismatched_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = idx_images(2, 28, 28, |_| 0);
        img.pop();
        let ip = write(dir.path(), "i", &img);
        let lp = write(dir.path(), "l", &idx_labels(&[1, 2]));
        assert!(matches!(
            load_mnist_idx(&ip, &lp, Split::Train),
            Err(DataError::Truncated { .. })
        ));
        let ip = write(dir.path(), "i2", &idx_images(3, 28, 28, |_| 0));
        assert!(matches!(
            load_mnist_idx(&ip, &lp, Split::Train),
            Err(DataError::CountMismatch { images: 3, labels: 2 })
        ));
    }

    #[test]
    fn cifar_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![7u8];
        rec.extend(std::iter::repeat(255).take(1024));
        rec.extend(std::iter::repeat(0).take(2048));
        let p = write(dir.path(), "b", &[rec.clone(), rec.clone()].concat());
        let ds = load_cifar10_bin(&[&p], Split::Train).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels(), &[7, 7]);
        assert_eq!(ds.images().shape(), &[2, 3, 32, 32]);
        let d = ds.images().data();
        assert!((d[0] - (1.0 - 0.4914) / 0.2470).abs() < 1e-5);
        assert!((d[1024] - (0.0 - 0.4822) / 0.2435).abs() < 1e-5);
        assert!((d[2048] - (0.0 - 0.4465) / 0.2616).abs() < 1e-5);
    }

    #[test]
    fn cifar_framing_and_label_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "b", &vec![0u8; 3074]);
        assert!(matches!(load_cifar10_bin(&[&p], Split::Train), Err(DataError::Framing { len: 3074, .. })));
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 10;
        let p = write(dir.path(), "c", &rec);
        assert!(matches!(load_cifar10_bin(&[&p], Split::Train), Err(DataError::Label { label: 10, .. })));
    }

    #[test]
    fn synthetic_cifar_round_trips_through_loader() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_cifar(dir.path(), 4, 3, 1).unwrap();
        let (train, test) = load_cifar10_dir(dir.path()).unwrap();
        assert_eq!((train.len(), test.len()), (20, 3));
        assert_ne!(train.source_checksum(), test.source_checksum());
    }

    fn tiny(n: usize) -> Dataset {
        let x = Tensor::from_vec(&[n, 1, 1, 1], (0..n).map(|i| i as f32).collect()).unwrap();
        Dataset::new(x, (0..n).map(|i| (i % 10) as u8).collect(), Split::Train).unwrap()
    }

    #[test]
    fn batch_sizes_keep_short_tail() {
        let ds = tiny(10);
        let mut it = BatchIterator::new(&ds, 3, false, Rng::new(0)).unwrap();
        let sizes: Vec<usize> = it.epoch().map(|b| b.labels.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        assert_eq!(it.batches_per_epoch(), 4);
        let mut it = BatchIterator::new(&ds, 3, true, Rng::new(0)).unwrap();
        assert_eq!(it.epoch_indices().len(), 3);
    }

    #[test]
    fn same_seed_same_order_and_full_cover() {
        let ds = tiny(37);
        let mut a = BatchIterator::new(&ds, 5, false, Rng::new(11)).unwrap();
        let mut b = BatchIterator::new(&ds, 5, false, Rng::new(11)).unwrap();
        for _ in 0..3 {
            let ea = a.epoch_indices();
            assert_eq!(ea, b.epoch_indices());
            let mut all: Vec<usize> = ea.concat();
            all.sort_unstable();
            assert_eq!(all, (0..37).collect::<Vec<_>>());
        }
    }

    #[test]
    fn batch_contents_match_indices() {
        let ds = tiny(9);
        let mut it = BatchIterator::new(&ds, 4, false, Rng::new(2)).unwrap();
        for b in it.epoch() {
            for (k, &i) in b.indices.iter().enumerate() {
                assert_eq!(b.x.data()[k], i as f32);
                assert_eq!(b.labels[k], i % 10);
            }
        }
    }

    #[test]
    fn zero_batch_size_rejected() {
        let ds = tiny(3);
        assert!(BatchIterator::new(&ds, 0, false, Rng::new(0)).is_err());
        assert!(ds.sequential(0).is_err());
    }

    #[test]
    fn sequential_is_storage_order() {
        let ds = tiny(7);
        let idx: Vec<usize> = ds.sequential(3).unwrap().flat_map(|b| b.indices).collect();
        assert_eq!(idx, (0..7).collect::<Vec<_>>());
    }
}
