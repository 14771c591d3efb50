//! CIFAR-10 binary format loader.
//!
//! Each record is 1 label byte followed by 3072 pixel bytes in row-major
//! R, G, B planes — exactly the (C, H, W) layout [`Dataset`] stores.

use super::Dataset;
use crate::error::{Error, Result};
use std::path::Path;

const RECORD_BYTES: usize = 1 + 3 * 32 * 32;

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// Parse one CIFAR binary batch file into (images, labels).
pub fn load_cifar10_file(path: &Path) -> Result<(Vec<u8>, Vec<u16>)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::Parse {
            offset: (bytes.len() / RECORD_BYTES * RECORD_BYTES) as u64,
            msg: format!(
                "{}: file size {} is not a multiple of the {RECORD_BYTES}-byte record",
                path.display(),
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut images = Vec::with_capacity(n * (RECORD_BYTES - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = rec[0];
        if label > 9 {
            return Err(Error::Parse {
                offset: (i * RECORD_BYTES) as u64,
                msg: format!("label byte {label} out of range 0..=9"),
            });
        }
        labels.push(label as u16);
        images.extend_from_slice(&rec[1..]);
    }
    Ok((images, labels))
}

/// Load the five training batches plus the test batch from `dir`.
/// The test set inherits the training set's normalization statistics.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in TRAIN_FILES {
        let (im, la) = load_cifar10_file(&dir.join(f))?;
        images.extend_from_slice(&im);
        labels.extend_from_slice(&la);
    }
    let n = labels.len();
    let train = Dataset::new("cifar10-train", images, (n, 3, 32, 32), labels, 10)?;

    let (im, la) = load_cifar10_file(&dir.join(TEST_FILE))?;
    let nt = la.len();
    let mut test = Dataset::new("cifar10-test", im, (nt, 3, 32, 32), la, 10)?;
    test.mean = train.mean.clone();
    test.std = train.std.clone();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write_records(path: &Path, records: &[(u8, u8)]) {
        // (label, fill byte) per record
        let mut bytes = Vec::new();
        for &(label, fill) in records {
            bytes.push(label);
            bytes.extend(std::iter::repeat(fill).take(3072));
        }
        std::fs::write(path, bytes).unwrap();
    }

    #[test]
    fn parses_synthetic_record() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("one.bin");
        write_records(&p, &[(7, 128)]);
        let (images, labels) = load_cifar10_file(&p).unwrap();
        assert_eq!(labels, vec![7]);
        assert_eq!(images.len(), 3072);
        assert!(images.iter().all(|&b| b == 128));
    }

    #[test]
    fn wrong_size_reports_offset_of_partial_record() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.bin");
        // ten records minus one byte... use the spec's example: 30731 bytes
        std::fs::write(&p, vec![0u8; 30_731]).unwrap();
        match load_cifar10_file(&p) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, (30_731 / 3073 * 3073) as u64),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn loads_directory_with_all_six_files() {
        let dir = tempdir().unwrap();
        for (i, f) in TRAIN_FILES.iter().enumerate() {
            write_records(&dir.path().join(f), &[(i as u8, 10), ((i + 1) as u8, 20)]);
        }
        write_records(&dir.path().join(TEST_FILE), &[(9, 30)]);
        let (train, test) = load_cifar10(dir.path()).unwrap();
        assert_eq!(train.n, 10);
        assert_eq!(test.n, 1);
        assert_eq!(test.mean, train.mean, "test must reuse train stats");
    }

    #[test]
    fn bad_label_byte_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("lab.bin");
        write_records(&p, &[(11, 0)]);
        assert!(matches!(load_cifar10_file(&p), Err(Error::Parse { .. })));
    }
}
