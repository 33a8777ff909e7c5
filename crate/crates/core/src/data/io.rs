//! Dataset file format (all integers and floats little-endian):
//!
//! ```text
//! offset  size        field
//! 0       8           magic "TRIMODDS"
//! 8       4           version (u32) = 1
//! 12      8           n_samples (u64)
//! 20      8           vision width (u64)
//! 28      8           radiomics width (u64)
//! 36      8           clinical width (u64)
//! 44      8           seed (u64)
//! 52      n           labels, one byte per sample
//! 52+n    8·n·W       features as f64, sample-major; per sample the vision,
//!                     radiomics, then clinical vector (W = sum of widths)
//! end-32  32          SHA-256 of every preceding byte
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{DataError, Dataset, Modality, ModalitySample, ModalityWidths};

pub const DATASET_MAGIC: &[u8; 8] = b"TRIMODDS";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 52;
const CHECKSUM_LEN: usize = 32;

fn encode(dataset: &Dataset) -> Vec<u8> {
    let w = dataset.widths();
    let n = dataset.len();
    let mut out = Vec::with_capacity(HEADER_LEN + n + n * w.total() * 8 + CHECKSUM_LEN);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    for v in [n, w.vision, w.radiomics, w.clinical] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&dataset.seed().to_le_bytes());
    out.extend(dataset.samples().iter().map(|s| s.label));
    for s in dataset.samples() {
        for m in Modality::ALL {
            for v in s.features(m) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Hex SHA-256 of the dataset's file encoding.
pub fn dataset_digest(dataset: &Dataset) -> String {
    Sha256::digest(encode(dataset)).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes atomically: the file appears complete or not at all.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    write_atomic(path, &encode(dataset))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| DataError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| DataError::io(path, e))?;
    tmp.persist(path).map_err(|e| DataError::io(path, e.error))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    load_dataset_checked(path, None)
}

/// Loads a dataset, failing with [`DataError::WidthMismatch`] if the header
/// disagrees with `expected`.
pub fn load_dataset_checked(path: &Path, expected: Option<ModalityWidths>) -> Result<Dataset, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let corrupt = |reason: String| DataError::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(format!(
            "truncated header: {} bytes, need {HEADER_LEN}",
            bytes.len()
        )));
    }
    if &bytes[..8] != DATASET_MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != DATASET_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let field = |i: usize| u64::from_le_bytes(bytes[12 + 8 * i..20 + 8 * i].try_into().expect("8 bytes"));
    let to_usize = |v: u64| usize::try_from(v).map_err(|_| corrupt(format!("header field {v} too large")));
    let n = to_usize(field(0))?;
    let widths = ModalityWidths {
        vision: to_usize(field(1))?,
        radiomics: to_usize(field(2))?,
        clinical: to_usize(field(3))?,
    };
    let seed = field(4);

    if let Some(expected) = expected {
        for m in Modality::ALL {
            if widths.get(m) != expected.get(m) {
                return Err(DataError::WidthMismatch {
                    modality: m,
                    expected: expected.get(m),
                    found: widths.get(m),
                });
            }
        }
    }

    let row = widths.total();
    let expected_len = n
        .checked_mul(row)
        .and_then(|v| v.checked_mul(8))
        .and_then(|v| v.checked_add(HEADER_LEN + n + CHECKSUM_LEN))
        .ok_or_else(|| corrupt("header sizes overflow".into()))?;
    if bytes.len() != expected_len {
        return Err(corrupt(format!(
            "size mismatch: header implies {expected_len} bytes, file has {}",
            bytes.len()
        )));
    }
    let body = &bytes[..bytes.len() - CHECKSUM_LEN];
    if Sha256::digest(body).as_slice() != &bytes[bytes.len() - CHECKSUM_LEN..] {
        return Err(DataError::ChecksumMismatch {
            path: path.to_path_buf(),
        });
    }

    let labels = &bytes[HEADER_LEN..HEADER_LEN + n];
    let mut floats = bytes[HEADER_LEN + n..bytes.len() - CHECKSUM_LEN]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut take = |k: usize| -> Vec<f64> { floats.by_ref().take(k).collect() };
    let samples = labels
        .iter()
        .map(|&label| ModalitySample {
            vision: take(widths.vision),
            radiomics: take(widths.radiomics),
            clinical: take(widths.clinical),
            label,
        })
        .collect();
    Dataset::new(widths, seed, samples).map_err(|e| corrupt(e.to_string()))
}

/// One row per sample: `label, vision_0.., radiomics_0.., clinical_0..`.
pub fn export_csv(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["label".to_string()];
    for m in Modality::ALL {
        header.extend((0..dataset.widths().get(m)).map(|i| format!("{m}_{i}")));
    }
    w.write_record(&header)?;
    for s in dataset.samples() {
        let mut record = vec![s.label.to_string()];
        for m in Modality::ALL {
            record.extend(s.features(m).iter().map(|v| v.to_string()));
        }
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| DataError::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthSpec};

    fn tiny() -> Dataset {
        let spec = SynthSpec {
            n_samples: 10,
            n_positive: 4,
            widths: ModalityWidths {
                vision: 6,
                radiomics: 5,
                clinical: 3,
            },
            seed: 9,
            ..SynthSpec::default()
        };
        generate(&spec).unwrap().dataset
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tmds");
        let data = tiny();
        save_dataset(&data, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, data);
        for (a, b) in back.samples().iter().zip(data.samples()) {
            for m in Modality::ALL {
                let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(a.features(m)), bits(b.features(m)));
            }
        }
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tmds");
        save_dataset(&tiny(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        assert!(matches!(load_dataset(&path), Err(DataError::Corrupt { .. })));
        fs::write(&path, &bytes[..20]).unwrap();
        assert!(matches!(load_dataset(&path), Err(DataError::Corrupt { .. })));
    }

    #[test]
    fn flipped_payload_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tmds");
        save_dataset(&tiny(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[HEADER_LEN + 20] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_dataset(&path), Err(DataError::ChecksumMismatch { .. })));
    }

    #[test]
    fn edited_width_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tmds");
        let data = tiny();
        save_dataset(&data, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[28..36].copy_from_slice(&4u64.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        let err = load_dataset_checked(&path, Some(data.widths())).unwrap_err();
        match err {
            DataError::WidthMismatch {
                modality,
                expected,
                found,
            } => {
                assert_eq!(modality, Modality::Radiomics);
                assert_eq!((expected, found), (5, 4));
            }
            other => panic!("unexpected {other}"),
        }
        assert!(load_dataset(&path).is_err());
    }

    #[test]
    fn missing_directory_leaves_no_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing").join("d.tmds");
        assert!(matches!(save_dataset(&tiny(), &path), Err(DataError::Io { .. })));
        assert!(!path.exists());
    }

    #[test]
    fn csv_has_named_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        export_csv(&tiny(), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("label,vision_0,"));
        assert!(header.ends_with("clinical_2"));
        assert_eq!(header.split(',').count(), 1 + 6 + 5 + 3);
        assert_eq!(lines.count(), 10);
    }
}
