//! Dataset ingestion: MNIST IDX files, CIFAR-10 binary batches, and synthetic
//! sources (Gaussian noise and a deterministic 10-class digit-like set that is
//! written as real IDX files and read back through the same loader).

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::{MlsError, Result};
use crate::tensor::{with_path, RngStream, Tensor4};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Loaded dataset with normalized images (n, c, h, w) and class labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub train_images: Tensor4,
    pub train_labels: Vec<u8>,
    pub test_images: Tensor4,
    pub test_labels: Vec<u8>,
    pub classes: usize,
}

impl Dataset {
    pub fn truncate(&mut self, train: usize, test: usize) {
        truncate_split(&mut self.train_images, &mut self.train_labels, train);
        truncate_split(&mut self.test_images, &mut self.test_labels, test);
    }

    /// Gather a minibatch as (images, labels).
    pub fn batch(&self, images: &Tensor4, labels: &[u8], idxs: &[usize]) -> (Tensor4, Vec<u8>) {
        let [_, c, h, w] = images.dims();
        let sample = c * h * w;
        let mut data = Vec::with_capacity(idxs.len() * sample);
        let mut lab = Vec::with_capacity(idxs.len());
        for &i in idxs {
            data.extend_from_slice(&images.data()[i * sample..(i + 1) * sample]);
            lab.push(labels[i]);
        }
        (Tensor4::new([idxs.len(), c, h, w], data).unwrap(), lab)
    }
}

fn truncate_split(images: &mut Tensor4, labels: &mut Vec<u8>, keep: usize) {
    let [n, c, h, w] = images.dims();
    if keep == 0 || keep >= n {
        return;
    }
    let mut data = images.data().to_vec();
    data.truncate(keep * c * h * w);
    *images = Tensor4::new([keep, c, h, w], data).unwrap();
    labels.truncate(keep);
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let mut gz = path.as_os_str().to_owned();
    gz.push(".gz");
    let gz = PathBuf::from(gz);
    let (file, gzipped) = if path.exists() {
        (std::fs::File::open(path)?, false)
    } else if gz.exists() {
        (std::fs::File::open(&gz)?, true)
    } else {
        return Err(MlsError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} (also tried .gz)", path.display()),
        )));
    };
    let buf = std::io::BufReader::new(file);
    Ok(if gzipped {
        Box::new(GzDecoder::new(buf))
    } else {
        Box::new(buf)
    })
}

fn read_u32_be(r: &mut dyn Read, offset: u64, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| MlsError::Format {
        path: String::new(),
        offset,
        msg: format!("truncated while reading {what}"),
    })?;
    Ok(u32::from_be_bytes(b))
}

fn read_bytes(r: &mut dyn Read, n: usize, offset: u64, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|_| MlsError::Format {
        path: String::new(),
        offset,
        msg: format!("truncated while reading {what}"),
    })?;
    Ok(buf)
}

/// Read an IDX image file (big-endian magic 0x00000803, then counts/rows/cols
/// and raw pixels). Returns pixels in [0,1].
pub fn read_idx_images(path: &Path) -> Result<(Tensor4, usize, usize)> {
    let mut r = open_maybe_gz(path)?;
    let inner = (|| -> Result<(Tensor4, usize, usize)> {
        let magic = read_u32_be(&mut *r, 0, "magic")?;
        if magic != IDX_IMAGES_MAGIC {
            return Err(MlsError::Format {
                path: String::new(),
                offset: 0,
                msg: format!("bad image magic {magic:#010x}, expected 0x00000803"),
            });
        }
        let n = read_u32_be(&mut *r, 4, "image count")? as usize;
        let rows = read_u32_be(&mut *r, 8, "rows")? as usize;
        let cols = read_u32_be(&mut *r, 12, "cols")? as usize;
        let raw = read_bytes(&mut *r, n * rows * cols, 16, "pixels")?;
        let data: Vec<f64> = raw.iter().map(|&p| p as f64 / 255.0).collect();
        Ok((Tensor4::new([n, 1, rows, cols], data)?, rows, cols))
    })();
    inner.map_err(|e| with_path(e, path))
}

/// Read an IDX label file (big-endian magic 0x00000801).
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut r = open_maybe_gz(path)?;
    let inner = (|| -> Result<Vec<u8>> {
        let magic = read_u32_be(&mut *r, 0, "magic")?;
        if magic != IDX_LABELS_MAGIC {
            return Err(MlsError::Format {
                path: String::new(),
                offset: 0,
                msg: format!("bad label magic {magic:#010x}, expected 0x00000801"),
            });
        }
        let n = read_u32_be(&mut *r, 4, "label count")? as usize;
        read_bytes(&mut *r, n, 8, "labels")
    })();
    inner.map_err(|e| with_path(e, path))
}

/// Write an IDX image file from pixels in [0,1].
pub fn write_idx_images(images: &Tensor4, path: &Path) -> Result<()> {
    let [n, c, h, w] = images.dims();
    if c != 1 {
        return Err(MlsError::InvalidInput(
            "IDX images are single-channel".into(),
        ));
    }
    let f = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(f);
    out.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    out.write_all(&(n as u32).to_be_bytes())?;
    out.write_all(&(h as u32).to_be_bytes())?;
    out.write_all(&(w as u32).to_be_bytes())?;
    for v in images.data() {
        out.write_all(&[(v.clamp(0.0, 1.0) * 255.0).round() as u8])?;
    }
    Ok(())
}

pub fn write_idx_labels(labels: &[u8], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(f);
    out.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    out.write_all(&(labels.len() as u32).to_be_bytes())?;
    out.write_all(labels)?;
    Ok(())
}

fn normalize(images: &mut Tensor4, means: &[f64], stds: &[f64]) {
    let [n, c, h, w] = images.dims();
    let plane = h * w;
    let data = images.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            for v in &mut data[base..base + plane] {
                *v = (*v - means[ci]) / stds[ci];
            }
        }
    }
}

/// MNIST normalization constants (dataset mean/std of the [0,1] pixels).
pub const MNIST_MEAN: f64 = 0.1307;
pub const MNIST_STD: f64 = 0.3081;

/// CIFAR-10 per-channel normalization constants.
pub const CIFAR10_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

/// Load the four MNIST IDX files (optionally .gz) from a directory and
/// normalize pixels to roughly zero mean, unit variance.
pub fn load_mnist(dir: &Path) -> Result<Dataset> {
    let file = |stem: &str| dir.join(stem);
    let (mut train_images, _, _) = read_idx_images(&file("train-images-idx3-ubyte"))?;
    let train_labels = read_idx_labels(&file("train-labels-idx1-ubyte"))?;
    let (mut test_images, _, _) = read_idx_images(&file("t10k-images-idx3-ubyte"))?;
    let test_labels = read_idx_labels(&file("t10k-labels-idx1-ubyte"))?;
    check_counts(&train_images, &train_labels, "train")?;
    check_counts(&test_images, &test_labels, "test")?;
    normalize(&mut train_images, &[MNIST_MEAN], &[MNIST_STD]);
    normalize(&mut test_images, &[MNIST_MEAN], &[MNIST_STD]);
    Ok(Dataset {
        name: "mnist".into(),
        train_images,
        train_labels,
        test_images,
        test_labels,
        classes: 10,
    })
}

fn check_counts(images: &Tensor4, labels: &[u8], split: &str) -> Result<()> {
    if images.dims()[0] != labels.len() {
        return Err(MlsError::InvalidInput(format!(
            "{split}: {} images vs {} labels",
            images.dims()[0],
            labels.len()
        )));
    }
    Ok(())
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_PER_FILE: usize = 10_000;

fn read_cifar_file(path: &Path, images: &mut Vec<f64>, labels: &mut Vec<u8>) -> Result<()> {
    let mut r = open_maybe_gz(path)?;
    let inner = (|| -> Result<()> {
        let mut rec = [0u8; CIFAR_RECORD];
        for i in 0..CIFAR_PER_FILE {
            r.read_exact(&mut rec).map_err(|_| MlsError::Format {
                path: String::new(),
                offset: (i * CIFAR_RECORD) as u64,
                msg: format!("truncated record {i}, expected {CIFAR_PER_FILE} records"),
            })?;
            labels.push(rec[0]);
            images.extend(rec[1..].iter().map(|&p| p as f64 / 255.0));
        }
        Ok(())
    })();
    inner.map_err(|e| with_path(e, path))
}

/// Load CIFAR-10 binary batches (data_batch_1..5.bin + test_batch.bin) from a
/// directory.
pub fn load_cifar10(dir: &Path) -> Result<Dataset> {
    let mut train = Vec::new();
    let mut train_labels = Vec::new();
    for i in 1..=5 {
        read_cifar_file(
            &dir.join(format!("data_batch_{i}.bin")),
            &mut train,
            &mut train_labels,
        )?;
    }
    let mut test = Vec::new();
    let mut test_labels = Vec::new();
    read_cifar_file(&dir.join("test_batch.bin"), &mut test, &mut test_labels)?;
    let mut train_images = Tensor4::new([train_labels.len(), 3, 32, 32], train)?;
    let mut test_images = Tensor4::new([test_labels.len(), 3, 32, 32], test)?;
    normalize(&mut train_images, &CIFAR10_MEAN, &CIFAR10_STD);
    normalize(&mut test_images, &CIFAR10_MEAN, &CIFAR10_STD);
    Ok(Dataset {
        name: "cifar10".into(),
        train_images,
        train_labels,
        test_images,
        test_labels,
        classes: 10,
    })
}

/// Pure-noise dataset (not learnable); exercises the full pipeline cheaply.
pub fn synthetic_gaussian(
    n_train: usize,
    n_test: usize,
    dims: [usize; 3],
    classes: usize,
    seed: u64,
) -> Dataset {
    let make = |n: usize, tag: u64| {
        let s = RngStream::new(seed, 0, tag);
        let [c, h, w] = dims;
        let total = n * c * h * w;
        let images =
            Tensor4::new([n, c, h, w], (0..total).map(|i| s.normal(i as u64)).collect()).unwrap();
        let labels = (0..n)
            .map(|i| ((s.unit(1_000_000 + i as u64) * classes as f64) as usize % classes) as u8)
            .collect();
        (images, labels)
    };
    let (train_images, train_labels) = make(n_train, 1);
    let (test_images, test_labels) = make(n_test, 2);
    Dataset {
        name: "synthetic-gaussian".into(),
        train_images,
        train_labels,
        test_images,
        test_labels,
        classes,
    }
}

/// Deterministic learnable 10-class digit-like image: a mixture of
/// class-specific Gaussian blobs with per-sample translation jitter and pixel
/// noise. Pixels land in [0,1] like MNIST.
fn digit_image(class: u8, sample_seed: u64, stream: &RngStream) -> Vec<f64> {
    let side = 28usize;
    let mut img = vec![0.0f64; side * side];
    let proto = RngStream::new(0xD161 + class as u64, 0, 7);
    let dx = (stream.unit(sample_seed * 4) - 0.5) * 9.0;
    let dy = (stream.unit(sample_seed * 4 + 1) - 0.5) * 9.0;
    for b in 0..4u64 {
        let cx = 5.0 + 18.0 * proto.unit(b * 2) + dx;
        let cy = 5.0 + 18.0 * proto.unit(b * 2 + 1) + dy;
        let sigma = 1.5 + 1.2 * proto.unit(100 + b);
        let amp = 0.55 + 0.4 * proto.unit(200 + b);
        for y in 0..side {
            for x in 0..side {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                img[y * side + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    for (i, v) in img.iter_mut().enumerate() {
        let noise = 0.15 * stream.normal(sample_seed * 1024 + i as u64);
        *v = (*v + noise).clamp(0.0, 1.0);
    }
    img
}

/// Generate the synthetic digit dataset as real IDX files under `dir`
/// (train/t10k image+label pairs), so it can be ingested by [`load_mnist`].
pub fn write_synthetic_digits(dir: &Path, n_train: usize, n_test: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let make = |n: usize, tag: u64| -> (Tensor4, Vec<u8>) {
        let s = RngStream::new(seed, 0, tag);
        let mut data = Vec::with_capacity(n * 784);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = ((s.unit(i as u64) * 10.0) as usize % 10) as u8;
            data.extend(digit_image(class, i as u64 + 1, &s));
            labels.push(class);
        }
        (Tensor4::new([n, 1, 28, 28], data).unwrap(), labels)
    };
    let (train, train_labels) = make(n_train, 11);
    let (test, test_labels) = make(n_test, 12);
    write_idx_images(&train, &dir.join("train-images-idx3-ubyte"))?;
    write_idx_labels(&train_labels, &dir.join("train-labels-idx1-ubyte"))?;
    write_idx_images(&test, &dir.join("t10k-images-idx3-ubyte"))?;
    write_idx_labels(&test_labels, &dir.join("t10k-labels-idx1-ubyte"))?;
    Ok(())
}

/// Find a real MNIST directory ($MLS_MNIST_DIR, then ./data/mnist), or
/// generate the synthetic digit set under `fallback_dir` and load that.
pub fn mnist_or_synthetic(fallback_dir: &Path, n_train: usize, n_test: usize) -> Result<Dataset> {
    let candidates: Vec<PathBuf> = std::env::var_os("MLS_MNIST_DIR")
        .map(PathBuf::from)
        .into_iter()
        .chain([PathBuf::from("data/mnist")])
        .collect();
    for dir in candidates {
        if dir.join("train-images-idx3-ubyte").exists()
            || dir.join("train-images-idx3-ubyte.gz").exists()
        {
            let mut ds = load_mnist(&dir)?;
            ds.truncate(n_train, n_test);
            return Ok(ds);
        }
    }
    write_synthetic_digits(fallback_dir, n_train, n_test, 1234)?;
    let mut ds = load_mnist(fallback_dir)?;
    ds.name = "synthetic-digits".into();
    ds.truncate(n_train, n_test);
    Ok(ds)
}
