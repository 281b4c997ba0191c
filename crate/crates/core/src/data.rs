//! In-memory labelled datasets and loaders for the IDX (MNIST) and
//! CIFAR-10 binary formats.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const IDX_IMAGE_MAGIC: u32 = 2051;
pub const IDX_LABEL_MAGIC: u32 = 2049;
pub const CIFAR10_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, ...sample shape]`
    inputs: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rank() < 2 {
            return Err(Error::InvalidArgument("dataset inputs need a sample axis and a feature axis".into()));
        }
        if inputs.shape()[0] != labels.len() {
            return Err(Error::Format(format!(
                "{} samples but {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Dataset { inputs, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Gather the given samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * per..(i + 1) * per]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let x = Tensor::new(shape, data).expect("gathered batch matches its shape");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Contiguous range of samples.
    pub fn slice(&self, start: usize, end: usize) -> (Tensor, Vec<usize>) {
        let idx: Vec<usize> = (start..end).collect();
        self.batch(&idx)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (inputs, labels) = self.batch(indices);
        Dataset {
            inputs,
            labels,
            classes: self.classes,
        }
    }

    /// `size` samples spread as evenly as possible over the classes,
    /// chosen deterministically from `seed`. Sample order follows the
    /// original dataset.
    pub fn balanced_subset(&self, size: usize, seed: u64) -> Result<Dataset> {
        if size > self.len() {
            return Err(Error::InvalidArgument(format!(
                "subset of {size} requested from {} samples",
                self.len()
            )));
        }
        let mut rng = rng::stream(seed, rng::STREAM_SUBSET);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        for pool in &mut by_class {
            pool.shuffle(&mut rng);
        }
        // Round-robin over classes so a short class does not stall the quota.
        let mut chosen = Vec::with_capacity(size);
        let mut cursor = vec![0usize; self.classes];
        while chosen.len() < size {
            for c in 0..self.classes {
                if chosen.len() == size {
                    break;
                }
                if cursor[c] < by_class[c].len() {
                    chosen.push(by_class[c][cursor[c]]);
                    cursor[c] += 1;
                }
            }
        }
        chosen.sort_unstable();
        Ok(self.subset(&chosen))
    }
}

/// Inputs uniform in `[0, 1]`, labels uniform over the classes.
pub fn make_random_dataset(n: usize, input_shape: &[usize], classes: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || classes == 0 {
        return Err(Error::InvalidArgument("random dataset needs n > 0 and at least one class".into()));
    }
    let mut rng = rng::stream(seed, rng::STREAM_DATA);
    let per: usize = input_shape.iter().product();
    let data: Vec<f64> = (0..n * per).map(|_| rng.gen::<f64>()).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    let mut shape = vec![n];
    shape.extend_from_slice(input_shape);
    Dataset::new(Tensor::new(shape, data)?, labels, classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// First existing file among `name` and `name.gz`.
fn locate(dir: &Path, name: &str) -> Result<PathBuf> {
    for candidate in [dir.join(name), dir.join(format!("{name}.gz"))] {
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{} not found (also tried .gz)", dir.join(name).display()),
    )))
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parse an IDX image file into `[N, 1, rows, cols]` values in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0, "idx images")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format(format!("idx images: bad magic {magic}, expected {IDX_IMAGE_MAGIC}")));
    }
    let n = be_u32(bytes, 4, "idx images")? as usize;
    let rows = be_u32(bytes, 8, "idx images")? as usize;
    let cols = be_u32(bytes, 12, "idx images")? as usize;
    let body = &bytes[16..];
    let expected = n * rows * cols;
    if body.len() < expected {
        return Err(Error::Format(format!(
            "idx images: truncated, {} pixel bytes for {n} images of {rows}x{cols}",
            body.len()
        )));
    }
    let data = body[..expected].iter().map(|&p| p as f64 / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "idx labels")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Format(format!("idx labels: bad magic {magic}, expected {IDX_LABEL_MAGIC}")));
    }
    let n = be_u32(bytes, 4, "idx labels")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Format(format!("idx labels: truncated, {} of {n} labels", body.len())));
    }
    Ok(body[..n].iter().map(|&l| l as usize).collect())
}

/// Load MNIST from `dir` (standard IDX file names, optionally gzipped).
/// With `subset`, a class-balanced deterministic subset is returned.
pub fn load_mnist(dir: &Path, split: Split, subset: Option<usize>, seed: u64) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = parse_idx_images(&read_maybe_gz(&locate(dir, &format!("{prefix}-images-idx3-ubyte"))?)?)?;
    let labels = parse_idx_labels(&read_maybe_gz(&locate(dir, &format!("{prefix}-labels-idx1-ubyte"))?)?)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::Format(format!(
            "mnist {prefix}: {} images but {} labels",
            images.shape()[0],
            labels.len()
        )));
    }
    let ds = Dataset::new(images, labels, 10)?;
    match subset {
        Some(n) => ds.balanced_subset(n, seed),
        None => Ok(ds),
    }
}

/// Parse concatenated CIFAR-10 binary records into `[N, 3, 32, 32]`.
pub fn parse_cifar10(bytes: &[u8]) -> Result<(Tensor, Vec<usize>)> {
    if bytes.is_empty() || bytes.len() % CIFAR10_RECORD != 0 {
        return Err(Error::Format(format!(
            "cifar-10: file length {} is not a positive multiple of {CIFAR10_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR10_RECORD;
    let mut data = Vec::with_capacity(n * (CIFAR10_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR10_RECORD) {
        if rec[0] > 9 {
            return Err(Error::Format(format!("cifar-10: label {} out of range", rec[0])));
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&p| p as f64 / 255.0));
    }
    Ok((Tensor::new(vec![n, 3, 32, 32], data)?, labels))
}

/// Load CIFAR-10 binary batches from `dir` (`data_batch_1..5.bin` for
/// training, `test_batch.bin` for testing).
pub fn load_cifar10(dir: &Path, split: Split, subset: Option<usize>, seed: u64) -> Result<Dataset> {
    let names: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for name in names {
        let (t, l) = parse_cifar10(&read_maybe_gz(&locate(dir, &name)?)?)?;
        data.extend_from_slice(t.data());
        labels.extend(l);
    }
    let ds = Dataset::new(Tensor::new(vec![labels.len(), 3, 32, 32], data)?, labels, 10)?;
    match subset {
        Some(n) => ds.balanced_subset(n, seed),
        None => Ok(ds),
    }
}
