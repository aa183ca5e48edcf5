//! Fixed finding codebook shared by every module.
//!
//! Slot order follows the CheXbert labeler output: thirteen pathologies
//! followed by "No Finding" in slot 13. Corpus files, frequency tables and
//! reports all index findings through this table.

/// Number of slots in a label vector.
pub const LABEL_SLOTS: usize = 14;

/// Number of pathology slots (everything except "No Finding").
pub const PATHOLOGIES: usize = 13;

/// Slot index of "No Finding".
pub const NO_FINDING: usize = 13;

pub const FINDING_NAMES: [&str; LABEL_SLOTS] = [
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Opacity",
    "Lung Lesion",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
    "No Finding",
];

/// Integer codes used in corpus files.
pub mod codes {
    pub const NEGATIVE: i64 = -1;
    pub const ABSENT: i64 = 0;
    pub const POSITIVE: i64 = 1;
    pub const UNCERTAIN: i64 = 2;
}

pub fn finding_index(name: &str) -> Option<usize> {
    FINDING_NAMES
        .iter()
        .position(|n| n.eq_ignore_ascii_case(name))
}
