//! IDX (MNIST/Fashion-MNIST) and CIFAR-10 binary readers.

use super::{DataError, Dataset};
use crate::autodiff::Tensor;
use byteorder::{BigEndian, ReadBytesExt};
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn idx_err(path: &Path, detail: impl Into<String>) -> DataError {
    DataError::IdxFormat { path: path.display().to_string(), detail: detail.into() }
}

/// Parse a pair of big-endian IDX files (images + labels) into a dataset;
/// pixels are scaled to [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let mut ir = BufReader::new(File::open(images_path)?);
    let magic = ir.read_u32::<BigEndian>()?;
    if magic != IMAGE_MAGIC {
        return Err(idx_err(
            images_path,
            format!("bad magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        ));
    }
    let n = ir.read_u32::<BigEndian>()? as usize;
    let h = ir.read_u32::<BigEndian>()? as usize;
    let w = ir.read_u32::<BigEndian>()? as usize;
    let mut raw = vec![0u8; n * h * w];
    ir.read_exact(&mut raw).map_err(|_| idx_err(images_path, "truncated image data"))?;

    let mut lr = BufReader::new(File::open(labels_path)?);
    let magic = lr.read_u32::<BigEndian>()?;
    if magic != LABEL_MAGIC {
        return Err(idx_err(
            labels_path,
            format!("bad magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        ));
    }
    let n_labels = lr.read_u32::<BigEndian>()? as usize;
    if n_labels != n {
        return Err(DataError::CountMismatch { images: n, labels: n_labels });
    }
    let mut label_bytes = vec![0u8; n];
    lr.read_exact(&mut label_bytes).map_err(|_| idx_err(labels_path, "truncated label data"))?;

    let data: Vec<f32> = raw.iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().map(|&m| m + 1).unwrap_or(0).max(10);
    Ok(Dataset {
        images: Tensor { shape: vec![n, 1, h, w], data, requires_grad: false, grad: None },
        labels,
        class_count,
    })
}

/// Load the four standard IDX files from a directory; `train` selects the
/// train or t10k pair.
pub fn load_idx_dir(dir: &Path, train: bool) -> Result<Dataset, DataError> {
    let (images, labels) = if train {
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
    } else {
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
    };
    load_idx(&dir.join(images), &dir.join(labels))
}

/// CIFAR-10 binary batches (3073-byte records: label + 3x32x32 pixels).
pub fn load_cifar10_dir(dir: &Path, train: bool) -> Result<Dataset, DataError> {
    let files: Vec<String> = if train {
        (1..=5).map(|i| format!("data_batch_{i}.bin")).collect()
    } else {
        vec!["test_batch.bin".to_string()]
    };
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for name in files {
        let path = dir.join(&name);
        let mut bytes = Vec::new();
        BufReader::new(File::open(&path)?).read_to_end(&mut bytes)?;
        if bytes.len() % 3073 != 0 {
            return Err(idx_err(&path, format!("size {} not a multiple of 3073", bytes.len())));
        }
        for rec in bytes.chunks(3073) {
            let label = rec[0] as usize;
            if label > 9 {
                return Err(idx_err(&path, format!("label {label} out of range")));
            }
            labels.push(label);
            data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    let n = labels.len();
    Ok(Dataset {
        images: Tensor { shape: vec![n, 3, 32, 32], data, requires_grad: false, grad: None },
        labels,
        class_count: 10,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use byteorder::{BigEndian, WriteBytesExt};
    use std::io::Write;

    fn write_idx_pair(dir: &Path, n: usize, h: usize, w: usize, image_magic: u32) -> (std::path::PathBuf, std::path::PathBuf) {
        let images = dir.join("images-idx3-ubyte");
        let labels = dir.join("labels-idx1-ubyte");
        let mut f = File::create(&images).unwrap();
        f.write_u32::<BigEndian>(image_magic).unwrap();
        f.write_u32::<BigEndian>(n as u32).unwrap();
        f.write_u32::<BigEndian>(h as u32).unwrap();
        f.write_u32::<BigEndian>(w as u32).unwrap();
        let pixels: Vec<u8> = (0..n * h * w).map(|i| (i % 256) as u8).collect();
        f.write_all(&pixels).unwrap();
        let mut f = File::create(&labels).unwrap();
        f.write_u32::<BigEndian>(LABEL_MAGIC).unwrap();
        f.write_u32::<BigEndian>(n as u32).unwrap();
        let lab: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        f.write_all(&lab).unwrap();
        (images, labels)
    }

    #[test]
    fn parses_valid_idx_pair() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = write_idx_pair(dir.path(), 12, 4, 4, IMAGE_MAGIC);
        let ds = load_idx(&images, &labels).unwrap();
        assert_eq!(ds.images.shape, vec![12, 1, 4, 4]);
        assert_eq!(ds.len(), 12);
        assert!(ds.images.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(ds.labels.iter().all(|&l| l < 10));
        // pixel scaling: raw byte value divided by 255
        assert!((ds.images.data[63] - 63.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_tampered_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = write_idx_pair(dir.path(), 4, 2, 2, 0xdeadbeef);
        let err = load_idx(&images, &labels).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("0x00000803"), "error must name the expected magic: {msg}");
    }

    #[test]
    fn rejects_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (images, _) = write_idx_pair(dir.path(), 4, 2, 2, IMAGE_MAGIC);
        // rewrite labels with a different count
        let labels = dir.path().join("labels-idx1-ubyte");
        let mut f = File::create(&labels).unwrap();
        f.write_u32::<BigEndian>(LABEL_MAGIC).unwrap();
        f.write_u32::<BigEndian>(5).unwrap();
        f.write_all(&[0, 1, 2, 3, 4]).unwrap();
        let err = load_idx(&images, &labels).unwrap_err();
        assert!(matches!(err, DataError::CountMismatch { images: 4, labels: 5 }));
    }

    #[test]
    fn rejects_truncated_images() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("short-images");
        let labels = dir.path().join("short-labels");
        let mut f = File::create(&images).unwrap();
        f.write_u32::<BigEndian>(IMAGE_MAGIC).unwrap();
        f.write_u32::<BigEndian>(10).unwrap();
        f.write_u32::<BigEndian>(4).unwrap();
        f.write_u32::<BigEndian>(4).unwrap();
        f.write_all(&[0u8; 3]).unwrap(); // far too short
        let mut f = File::create(&labels).unwrap();
        f.write_u32::<BigEndian>(LABEL_MAGIC).unwrap();
        f.write_u32::<BigEndian>(10).unwrap();
        f.write_all(&[0u8; 10]).unwrap();
        let err = load_idx(&images, &labels).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn loading_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = write_idx_pair(dir.path(), 8, 3, 3, IMAGE_MAGIC);
        let a = load_idx(&images, &labels).unwrap();
        let b = load_idx(&images, &labels).unwrap();
        assert_eq!(a.images.data, b.images.data);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn cifar_records_parse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test_batch.bin");
        let mut f = File::create(&path).unwrap();
        for i in 0..3u8 {
            f.write_all(&[i]).unwrap();
            f.write_all(&vec![128u8; 3072]).unwrap();
        }
        let ds = load_cifar10_dir(dir.path(), false).unwrap();
        assert_eq!(ds.images.shape, vec![3, 3, 32, 32]);
        assert_eq!(ds.labels, vec![0, 1, 2]);
    }

    /// Real-data check, exercised when the standard MNIST files are present.
    #[test]
    fn mnist_train_has_60000_28x28_images() {
        let dir = match std::env::var("FATSIM_DATA_DIR") {
            Ok(d) => std::path::PathBuf::from(d),
            Err(_) => {
                let fallback = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
                    .join("../../data/mnist");
                if !fallback.join("train-images-idx3-ubyte").exists() {
                    eprintln!("skipping: MNIST files not found");
                    return;
                }
                fallback
            }
        };
        let ds = load_idx_dir(&dir, true).unwrap();
        assert_eq!(ds.images.shape, vec![60_000, 1, 28, 28]);
        assert!(ds.labels.iter().all(|&l| l < 10));
    }
}
