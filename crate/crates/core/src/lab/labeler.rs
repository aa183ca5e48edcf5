//! Deterministic keyword labeler for synthetic report text.

use crate::codebook::PATHOLOGIES;
use crate::model::{FindingLabel, LabelVector};

/// One single-token keyword per pathology, in codebook order.
pub const KEYWORDS: [&str; PATHOLOGIES] = [
    "mediastinum",
    "cardiomegaly",
    "opacity",
    "lesion",
    "edema",
    "consolidation",
    "pneumonia",
    "atelectasis",
    "pneumothorax",
    "effusion",
    "thickening",
    "fracture",
    "device",
];

pub fn keyword_index(word: &str) -> Option<usize> {
    KEYWORDS.iter().position(|k| *k == word)
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Positive when a keyword occurs un-negated, Negative when it only occurs
/// as `no <keyword>`, Absent otherwise.
pub fn keyword_label(text: &str) -> LabelVector {
    let words = words(text);
    let mut out = LabelVector::absent();
    for (i, w) in words.iter().enumerate() {
        let Some(j) = keyword_index(w) else { continue };
        let negated = i > 0 && words[i - 1] == "no";
        match (negated, out.get(j)) {
            (false, _) => out = out.with(j, FindingLabel::Positive),
            (true, FindingLabel::Absent) => out = out.with(j, FindingLabel::Negative),
            _ => {}
        }
    }
    out
}
