use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// One of the three per-subject feature sources. The numeric index (1, 2, 3)
/// fixes the cyclic cross-attention order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    /// Deep visual features (CT stub).
    Vision,
    Radiomics,
    /// Clinical record features (the "text" modality).
    Clinical,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Vision, Modality::Radiomics, Modality::Clinical];

    /// 1-based index: vision 1, radiomics 2, clinical 3.
    pub fn index(self) -> usize {
        self.slot() + 1
    }

    pub(crate) fn slot(self) -> usize {
        match self {
            Modality::Vision => 0,
            Modality::Radiomics => 1,
            Modality::Clinical => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        i.checked_sub(1).and_then(|s| Self::ALL.get(s).copied())
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Vision => "vision",
            Modality::Radiomics => "radiomics",
            Modality::Clinical => "clinical",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vision" | "image" => Ok(Modality::Vision),
            "radiomics" => Ok(Modality::Radiomics),
            "clinical" | "text" => Ok(Modality::Clinical),
            other => Err(format!("unknown modality `{other}`")),
        }
    }
}

/// Raw feature width of each modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityWidths {
    pub vision: usize,
    pub radiomics: usize,
    pub clinical: usize,
}

/// 23 blood-count/biochemistry + 16 fat-analysis + 3 basic fields.
pub const CLINICAL_WIDTH: usize = 23 + 16 + 3;
pub const RADIOMICS_WIDTH: usize = 1781;
pub const VISION_WIDTH: usize = 2048;

impl Default for ModalityWidths {
    fn default() -> Self {
        Self {
            vision: VISION_WIDTH,
            radiomics: RADIOMICS_WIDTH,
            clinical: CLINICAL_WIDTH,
        }
    }
}

impl ModalityWidths {
    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Vision => self.vision,
            Modality::Radiomics => self.radiomics,
            Modality::Clinical => self.clinical,
        }
    }

    pub fn total(&self) -> usize {
        self.vision + self.radiomics + self.clinical
    }
}
