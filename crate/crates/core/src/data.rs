//! Dataset containers and loaders: MNIST IDX files, CIFAR-10 binary batches,
//! seeded train/validation splitting, label coding and mini-batch iteration.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LabelCoding;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR10_RECORD_BYTES: usize = 3073;

pub const MNIST_VALIDATION: usize = 5000;
pub const CIFAR10_VALIDATION: usize = 5000;
/// Reference constants for the smallNORB protocol (not loadable here).
pub const SMALLNORB_VALIDATION: usize = 4860;
pub const SMALLNORB_BATCH: usize = 405;

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Validation,
    Test,
}

/// Images `N×H×W×C` in `[0, 1]` with class indices.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: SplitTag,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: SplitTag) -> Result<Self> {
        if images.rank() == 0 || images.shape()[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{:?} images vs {} labels", images.shape(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of a single example.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize], split: SplitTag) -> Dataset {
        Dataset {
            images: self.images.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split,
        }
    }

    /// First `n` examples (or all, if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.split)
    }
}

/// Train / validation / test triple.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, offset: u64, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset,
        detail: detail.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| parse_err(path, offset as u64, "truncated header"))
}

/// Reads an unsigned-byte IDX file. Image files (`0x00000803`) become
/// `N×rows×cols×1` scaled by 1/255; label files (`0x00000801`) become a
/// length-`N` vector of raw values.
pub fn read_idx(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    parse_idx(&read_file(path)?, path)
}

pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let magic = be_u32(bytes, 0, path)?;
    let (ndims, divisor) = match magic {
        IDX_IMAGES_MAGIC => (3, 255.0),
        IDX_LABELS_MAGIC => (1, 1.0),
        other => return Err(parse_err(path, 0, format!("bad magic 0x{other:08x}"))),
    };
    let mut dims = Vec::with_capacity(ndims + 1);
    for d in 0..ndims {
        dims.push(be_u32(bytes, 4 + 4 * d, path)? as usize);
    }
    let header = 4 + 4 * ndims;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| parse_err(path, 4, format!("dimensions {dims:?} overflow")))?;
    let body = &bytes[header..];
    if body.len() < count {
        return Err(parse_err(
            path,
            bytes.len() as u64,
            format!(
                "truncated: dimensions {dims:?} need {count} bytes, found {}",
                body.len()
            ),
        ));
    }
    if body.len() > count {
        return Err(parse_err(
            path,
            (header + count) as u64,
            format!("{} trailing bytes", body.len() - count),
        ));
    }
    let data: Vec<f64> = body.iter().map(|&b| f64::from(b) / divisor).collect();
    if ndims == 3 {
        dims.push(1);
    }
    Tensor::new(dims, data)
}

/// Loads one pair of MNIST image/label IDX files.
pub fn read_mnist_pair(images: &Path, labels: &Path, split: SplitTag) -> Result<Dataset> {
    let imgs = read_idx(images)?;
    if imgs.rank() != 4 {
        return Err(parse_err(images, 0, "not an image file"));
    }
    let labs = read_idx(labels)?;
    if labs.rank() != 1 {
        return Err(parse_err(labels, 0, "not a label file"));
    }
    if labs.numel() != imgs.shape()[0] {
        return Err(parse_err(
            labels,
            4,
            format!("{} labels for {} images", labs.numel(), imgs.shape()[0]),
        ));
    }
    let labels_vec: Vec<usize> = labs.data().iter().map(|&v| v as usize).collect();
    if let Some(pos) = labels_vec.iter().position(|&l| l >= 10) {
        return Err(parse_err(labels, (8 + pos) as u64, format!("label {} ≥ 10", labels_vec[pos])));
    }
    Dataset::new(imgs, labels_vec, 10, split)
}

/// Loads MNIST from `dir` (uncompressed files with their canonical names).
/// Returns `(train, test)`: 60000 and 10000 images of 28×28×1.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let p = |name: &str| dir.join(name);
    let train = read_mnist_pair(&p(MNIST_FILES[0]), &p(MNIST_FILES[1]), SplitTag::Train)?;
    let test = read_mnist_pair(&p(MNIST_FILES[2]), &p(MNIST_FILES[3]), SplitTag::Test)?;
    Ok((train, test))
}

/// Reads one CIFAR-10 binary batch: 3073-byte records of `label, R[1024],
/// G[1024], B[1024]`, returned as `N×32×32×3` in `[0, 1]`.
pub fn read_cifar10(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    parse_cifar10(&read_file(path)?, path, SplitTag::Train)
}

pub fn parse_cifar10(bytes: &[u8], path: &Path, split: SplitTag) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(parse_err(path, 0, "empty CIFAR-10 batch"));
    }
    if !bytes.len().is_multiple_of(CIFAR10_RECORD_BYTES) {
        let whole = bytes.len() / CIFAR10_RECORD_BYTES * CIFAR10_RECORD_BYTES;
        return Err(parse_err(
            path,
            whole as u64,
            format!(
                "size {} is not a multiple of {CIFAR10_RECORD_BYTES}",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR10_RECORD_BYTES;
    let plane = 32 * 32;
    let mut data = vec![0.0; n * plane * 3];
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR10_RECORD_BYTES).enumerate() {
        if rec[0] >= 10 {
            return Err(parse_err(
                path,
                (r * CIFAR10_RECORD_BYTES) as u64,
                format!("label {} ≥ 10", rec[0]),
            ));
        }
        labels.push(rec[0] as usize);
        let px = &rec[1..];
        let out = &mut data[r * plane * 3..(r + 1) * plane * 3];
        for p in 0..plane {
            for c in 0..3 {
                out[p * 3 + c] = f64::from(px[c * plane + p]) / 255.0;
            }
        }
    }
    Dataset::new(Tensor::new([n, 32, 32, 3], data)?, labels, 10, split)
}

/// Loads `data_batch_1..5.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 1..=5 {
        let part = read_cifar10(dir.join(format!("data_batch_{i}.bin")))?;
        labels.extend(part.labels);
        images.extend(part.images.into_data());
    }
    let n = labels.len();
    let train = Dataset::new(Tensor::new([n, 32, 32, 3], images)?, labels, 10, SplitTag::Train)?;
    let mut test = read_cifar10(dir.join("test_batch.bin"))?;
    test.split = SplitTag::Test;
    Ok((train, test))
}

/// Seeded random hold-out of a validation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub validation: usize,
}

/// Splits `dataset` into `(train, validation)`. Both keep the original
/// relative order of their examples.
pub fn split(dataset: &Dataset, plan: SplitPlan) -> Result<(Dataset, Dataset)> {
    if plan.validation >= dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "validation size {} must be smaller than dataset size {}",
            plan.validation,
            dataset.len()
        )));
    }
    let (train_idx, val_idx) = split_indices(dataset.len(), plan);
    Ok((
        dataset.subset(&train_idx, SplitTag::Train),
        dataset.subset(&val_idx, SplitTag::Validation),
    ))
}

pub(crate) fn split_indices(n: usize, plan: SplitPlan) -> (Vec<usize>, Vec<usize>) {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(plan.seed));
    let mut val = perm[..plan.validation].to_vec();
    let mut train = perm[plan.validation..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Builds MNIST train/validation/test splits from a data directory.
pub fn mnist_splits(dir: impl AsRef<Path>, split_seed: u64) -> Result<Splits> {
    let (full_train, test) = load_mnist(dir)?;
    let (train, validation) = split(
        &full_train,
        SplitPlan {
            seed: split_seed,
            validation: MNIST_VALIDATION,
        },
    )?;
    Ok(Splits {
        train,
        validation,
        test,
    })
}

pub fn cifar10_splits(dir: impl AsRef<Path>, split_seed: u64) -> Result<Splits> {
    let (full_train, test) = load_cifar10(dir)?;
    let (train, validation) = split(
        &full_train,
        SplitPlan {
            seed: split_seed,
            validation: CIFAR10_VALIDATION,
        },
    )?;
    Ok(Splits {
        train,
        validation,
        test,
    })
}

/// Encodes class indices as `m×K` targets.
pub fn encode_labels(indices: &[usize], k: usize, coding: LabelCoding) -> Result<Tensor> {
    let off = match coding {
        LabelCoding::ZeroOne => 0.0,
        LabelCoding::PlusMinusOne => -1.0,
    };
    let mut t = Tensor::full([indices.len(), k], off);
    for (i, &c) in indices.iter().enumerate() {
        if c >= k {
            return Err(Error::InvalidArgument(format!(
                "class index {c} out of range for {k} classes"
            )));
        }
        t.data_mut()[i * k + c] = 1.0;
    }
    Ok(t)
}

/// Shuffled index order for one epoch, keyed by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

/// One mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Mini-batches over a shuffled epoch order; the final short batch is kept.
pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(Batch {
            images: self.dataset.images.gather_rows(idx),
            labels: idx.iter().map(|&i| self.dataset.labels[i]).collect(),
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for Batches<'_> {}

pub fn batches(dataset: &Dataset, size: usize, seed: u64, epoch: usize) -> Result<Batches<'_>> {
    if size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    Ok(Batches {
        dataset,
        order: epoch_order(dataset.len(), seed, epoch),
        size,
        pos: 0,
    })
}

/// Batches in stored order, without shuffling.
pub fn sequential_batches(dataset: &Dataset, size: usize) -> Result<Batches<'_>> {
    if size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    Ok(Batches {
        dataset,
        order: (0..dataset.len()).collect(),
        size,
        pos: 0,
    })
}

/// Class-dependent noisy images, for exercising architectures without real
/// data. Each class has a fixed random template; samples add uniform noise.
pub fn synthetic_images(
    n: usize,
    shape: [usize; 3],
    classes: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per: usize = shape.iter().product();
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..per).map(|_| rng.random::<f64>()).collect())
        .collect();
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        data.extend(
            templates[c]
                .iter()
                .map(|&t| (t + noise * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0)),
        );
    }
    Dataset::new(
        Tensor::new([n, shape[0], shape[1], shape[2]], data)?,
        labels,
        classes,
        SplitTag::Train,
    )
}

/// Data directory: `MARGINLAB_DATA_DIR` if set, else `fallback`.
pub fn data_dir(fallback: impl Into<PathBuf>) -> PathBuf {
    std::env::var_os("MARGINLAB_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| fallback.into())
}
