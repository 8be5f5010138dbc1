use std::path::{Path, PathBuf};

use super::{sha256_hex, DataSplits, Dataset, Split, Targets};
use crate::error::{CometError, Result};
use crate::numerics::Matrix;

/// One label byte followed by 1024 red, 1024 green and 1024 blue pixel bytes.
pub const CIFAR10_RECORD_BYTES: usize = 3073;
const PIXELS: usize = 3072;
const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

/// Decodes a batch file's bytes into `(inputs, labels)` with pixels mapped to `x / 255 - 0.5`.
pub fn parse_cifar10_batch(bytes: &[u8], path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    if bytes.is_empty() || bytes.len() % CIFAR10_RECORD_BYTES != 0 {
        return Err(CometError::Ingestion {
            path: path.to_path_buf(),
            reason: format!(
                "truncated batch: {} bytes is not a positive multiple of {CIFAR10_RECORD_BYTES}",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR10_RECORD_BYTES;
    let mut inputs = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR10_RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(CometError::Corruption {
                path: path.to_path_buf(),
                reason: format!("record {i} has label byte {label}"),
            });
        }
        labels.push(label);
        inputs.extend(rec[1..].iter().map(|&p| p as f32 / 255.0 - 0.5));
    }
    Ok((inputs, labels))
}

fn read_batches(dir: &Path, names: &[&str]) -> Result<(Matrix, Vec<usize>, String)> {
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut hashes = Vec::new();
    for name in names {
        let path: PathBuf = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| CometError::Ingestion {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let (x, y) = parse_cifar10_batch(&bytes, &path)?;
        inputs.extend(x);
        labels.extend(y);
        hashes.push(format!("{name}={}", &sha256_hex(&bytes)[..16]));
    }
    let n = labels.len();
    Ok((Matrix::from_vec(n, PIXELS, inputs)?, labels, hashes.join(",")))
}

/// Loads the canonical 50k/10k binary split from `dir`. `train_limit` keeps only
/// the leading training records (and skips reading batches beyond them).
pub fn load_cifar10(dir: &Path, train_limit: Option<usize>) -> Result<DataSplits> {
    let needed = match train_limit {
        Some(n) => n.div_ceil(10_000).clamp(1, TRAIN_FILES.len()),
        None => TRAIN_FILES.len(),
    };
    let (train_x, train_y, train_hash) = read_batches(dir, &TRAIN_FILES[..needed])?;
    let (test_x, test_y, test_hash) = read_batches(dir, &[TEST_FILE])?;
    let provenance = format!("cifar10({train_hash},{test_hash})");
    let mut splits = DataSplits {
        train: Dataset::new(
            train_x,
            Targets::Labels { labels: train_y, classes: 10 },
            Split::Train,
            provenance.clone(),
        )?,
        eval: Dataset::new(
            test_x,
            Targets::Labels { labels: test_y, classes: 10 },
            Split::Eval,
            provenance,
        )?,
    };
    if let Some(n) = train_limit {
        splits = splits.truncate_train(n);
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, pixel: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend(std::iter::repeat(pixel).take(PIXELS));
        r
    }

    #[test]
    fn parses_well_formed_records() {
        let bytes: Vec<u8> = (0..20).flat_map(|i| record((i % 10) as u8, 0)).collect();
        let (x, y) = parse_cifar10_batch(&bytes, Path::new("b")).unwrap();
        assert_eq!(y.len(), 20);
        assert!(y.iter().all(|&l| l < 10));
        assert_eq!(x.len(), 20 * PIXELS);
        assert!(x.iter().all(|&v| v == -0.5));
    }

    #[test]
    fn white_record_normalizes_to_half() {
        let (x, _) = parse_cifar10_batch(&record(3, 255), Path::new("b")).unwrap();
        assert!(x.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn truncated_and_corrupt() {
        let mut bytes = record(1, 7);
        bytes.push(0);
        let err = parse_cifar10_batch(&bytes, Path::new("data_batch_9.bin")).unwrap_err();
        assert!(matches!(err, CometError::Ingestion { .. }));
        assert!(err.to_string().contains("data_batch_9.bin"));
        let err = parse_cifar10_batch(&record(10, 0), Path::new("b")).unwrap_err();
        assert!(matches!(err, CometError::Corruption { .. }));
    }

    #[test]
    fn loads_directory_and_names_missing_batch() {
        let dir = tempfile::tempdir().unwrap();
        let batch: Vec<u8> = (0..3).flat_map(|i| record(i as u8, 128)).collect();
        std::fs::write(dir.path().join("data_batch_1.bin"), &batch).unwrap();
        let err = load_cifar10(dir.path(), Some(3)).unwrap_err();
        assert!(err.to_string().contains("test_batch.bin"));
        std::fs::write(dir.path().join("test_batch.bin"), &batch).unwrap();
        let d = load_cifar10(dir.path(), Some(2)).unwrap();
        assert_eq!(d.train.len(), 2);
        assert_eq!(d.eval.len(), 3);
        let again = load_cifar10(dir.path(), Some(2)).unwrap();
        assert_eq!(d.provenance(), again.provenance());
        let err = load_cifar10(dir.path(), None).unwrap_err();
        assert!(err.to_string().contains("data_batch_2.bin"));
    }
}
