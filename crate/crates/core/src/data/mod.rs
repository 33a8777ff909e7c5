//! Triple-modality datasets: in-memory representation, synthetic
//! generation, the binary dataset file, CSV export, and fold planning.

mod folds;
mod io;
mod modality;
mod synth;

use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Tensor;

pub use folds::{make_folds, Fold, FoldPlan};
pub(crate) use io::write_atomic;
pub use io::{
    dataset_digest, export_csv, load_dataset, load_dataset_checked, save_dataset, DATASET_MAGIC, DATASET_VERSION,
};
pub use modality::{Modality, ModalityWidths, CLINICAL_WIDTH, RADIOMICS_WIDTH, VISION_WIDTH};
pub use synth::{generate, probe_accuracy, GeneratedData, SignalLayout, SynthSpec, SyntheticGenerator};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt dataset file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("width mismatch for {modality}: expected {expected}, found {found}")]
    WidthMismatch {
        modality: Modality,
        expected: usize,
        found: usize,
    },
    #[error("checksum mismatch in {path}")]
    ChecksumMismatch { path: PathBuf },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid fold request: {0}")]
    InvalidFolds(String),
    #[error("invalid sample {index}: {reason}")]
    InvalidSample { index: usize, reason: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}

/// One subject: three raw feature vectors and a prognosis label
/// (1 = good, 0 = bad).
#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySample {
    pub vision: Vec<f64>,
    pub radiomics: Vec<f64>,
    pub clinical: Vec<f64>,
    pub label: u8,
}

impl ModalitySample {
    pub fn features(&self, m: Modality) -> &[f64] {
        match m {
            Modality::Vision => &self.vision,
            Modality::Radiomics => &self.radiomics,
            Modality::Clinical => &self.clinical,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    widths: ModalityWidths,
    seed: u64,
    samples: Vec<ModalitySample>,
}

impl Dataset {
    pub fn new(widths: ModalityWidths, seed: u64, samples: Vec<ModalitySample>) -> Result<Self, DataError> {
        for (index, s) in samples.iter().enumerate() {
            for m in Modality::ALL {
                if s.features(m).len() != widths.get(m) {
                    return Err(DataError::InvalidSample {
                        index,
                        reason: format!(
                            "{m} has {} features, header says {}",
                            s.features(m).len(),
                            widths.get(m)
                        ),
                    });
                }
            }
            if s.label > 1 {
                return Err(DataError::InvalidSample {
                    index,
                    reason: format!("label {} is not 0 or 1", s.label),
                });
            }
        }
        Ok(Self { widths, seed, samples })
    }

    pub fn widths(&self) -> ModalityWidths {
        self.widths
    }

    /// Seed recorded in the header (the generator seed for synthetic data).
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn samples(&self) -> &[ModalitySample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label as usize).collect()
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.label == 1).count()
    }

    /// Stacks the selected samples into per-modality `[B × width]` tensors.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        assert!(!indices.is_empty(), "empty batch");
        let inputs = Modality::ALL.map(|m| {
            let width = self.widths.get(m);
            let mut data = Vec::with_capacity(indices.len() * width);
            for &i in indices {
                data.extend_from_slice(self.samples[i].features(m));
            }
            Tensor::new(&[indices.len(), width], data).expect("validated widths")
        });
        Batch {
            inputs,
            labels: indices.iter().map(|&i| self.samples[i].label as usize).collect(),
        }
    }
}

/// Per-modality input tensors for a group of samples.
#[derive(Debug, Clone)]
pub struct Batch {
    inputs: [Tensor; 3],
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: [Tensor; 3], labels: Vec<usize>) -> Self {
        Self { inputs, labels }
    }

    pub fn input(&self, m: Modality) -> &Tensor {
        &self.inputs[m.slot()]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}
