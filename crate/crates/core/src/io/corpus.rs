//! JSONL corpus files: one study per line.
//!
//! See `docs/corpus_format.md` for the field reference. Labels are integer
//! coded (`-1` Negative, `0` Absent, `1` Positive, `2` Uncertain) and report
//! sentences are re-derived from `findings_text` on load.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    parse_label_vector, EmbeddingRef, ImageRecord, Report, Study, ViewProbs, ViewTag,
};

/// Fraction of bad lines above which a corpus is rejected.
pub const MAX_BAD_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageLine {
    image_id: String,
    view_tag: ViewTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    view_probs: Option<[f64; 4]>,
    embedding: EmbeddingRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    clip: Option<EmbeddingRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportLine {
    findings_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<Vec<i64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sentence_embeddings: Option<Vec<EmbeddingRef>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StudyLine {
    study_id: String,
    images: Vec<ImageLine>,
    report: ReportLine,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prior1: Option<ReportLine>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prior2: Option<ReportLine>,
}

impl ReportLine {
    fn into_report(self) -> Result<Report> {
        let mut report = Report::from_text(self.findings_text);
        if let Some(raw) = self.labels {
            report.label_vectors = Some(
                raw.iter()
                    .map(|v| parse_label_vector(v))
                    .collect::<Result<_>>()?,
            );
        }
        report.sentence_embeddings = self.sentence_embeddings;
        report.validate()?;
        Ok(report)
    }

    fn from_report(r: &Report) -> Self {
        Self {
            findings_text: r.findings_text.clone(),
            labels: r
                .label_vectors
                .as_ref()
                .map(|lv| lv.iter().map(|l| l.to_codes().to_vec()).collect()),
            sentence_embeddings: r.sentence_embeddings.clone(),
        }
    }
}

impl StudyLine {
    fn into_study(self) -> Result<Study> {
        let images = self
            .images
            .into_iter()
            .map(|i| {
                Ok(ImageRecord {
                    image_id: i.image_id,
                    view_tag: i.view_tag,
                    view_probs: i.view_probs.map(ViewProbs::new).transpose()?,
                    embedding: i.embedding,
                    clip: i.clip,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let study = Study {
            study_id: self.study_id,
            images,
            report: self.report.into_report()?,
            prior1: self.prior1.map(ReportLine::into_report).transpose()?,
            prior2: self.prior2.map(ReportLine::into_report).transpose()?,
        };
        study.validate()?;
        Ok(study)
    }

    fn from_study(s: &Study) -> Self {
        Self {
            study_id: s.study_id.clone(),
            images: s
                .images
                .iter()
                .map(|i| ImageLine {
                    image_id: i.image_id.clone(),
                    view_tag: i.view_tag.clone(),
                    view_probs: i.view_probs.map(|p| p.values()),
                    embedding: i.embedding.clone(),
                    clip: i.clip.clone(),
                })
                .collect(),
            report: ReportLine::from_report(&s.report),
            prior1: s.prior1.as_ref().map(ReportLine::from_report),
            prior2: s.prior2.as_ref().map(ReportLine::from_report),
        }
    }
}

pub fn parse_study_line(line: &str) -> Result<Study> {
    serde_json::from_str::<StudyLine>(line)?.into_study()
}

pub fn study_to_line(study: &Study) -> Result<String> {
    Ok(serde_json::to_string(&StudyLine::from_study(study))?)
}

#[derive(Debug, Default)]
pub struct LoadedCorpus {
    pub studies: Vec<Study>,
    /// One [`Error::ParseError`] per rejected line.
    pub errors: Vec<Error>,
    /// Non-blank lines seen.
    pub lines: usize,
}

/// Parses a corpus from any reader. Blank lines are skipped; bad lines are
/// collected rather than aborting the load, up to [`MAX_BAD_FRACTION`].
pub fn parse_corpus(reader: impl BufRead) -> Result<LoadedCorpus> {
    let mut out = LoadedCorpus::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::ParseError {
            line_no,
            source: Box::new(Error::io("<corpus>", e)),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.lines += 1;
        match parse_study_line(&line) {
            Ok(s) => out.studies.push(s),
            Err(e) => out.errors.push(Error::ParseError {
                line_no,
                source: Box::new(e),
            }),
        }
    }
    let bad = out.errors.len();
    if bad as f64 > MAX_BAD_FRACTION * out.lines as f64 {
        return Err(Error::CorpusRejected {
            bad,
            total: out.lines,
        });
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<LoadedCorpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(BufReader::new(file))
}

pub fn write_corpus(path: impl AsRef<Path>, studies: &[Study]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in studies {
        writeln!(w, "{}", study_to_line(s)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, labels: &str) -> String {
        format!(
            r#"{{"study_id":"{id}","images":[{{"image_id":"{id}-0","view_tag":"PA","embedding":{{"file":"{id}.emb","rows":[0,4]}}}}],"report":{{"findings_text":"Small effusion.","labels":[{labels}]}}}}"#
        )
    }

    const OK_LABELS: &str = "[0,0,0,0,0,0,0,0,0,1,0,0,0,0]";

    #[test]
    fn parses_valid_lines() {
        let text = (0..3)
            .map(|i| line(&format!("s{i}"), OK_LABELS))
            .collect::<Vec<_>>()
            .join("\n");
        let c = parse_corpus(text.as_bytes()).unwrap();
        assert_eq!(c.studies.len(), 3);
        assert!(c.errors.is_empty());
        assert_eq!(c.studies[1].report.sentences, vec!["Small effusion."]);
    }

    #[test]
    fn isolates_bad_lines() {
        let mut lines: Vec<String> = (0..100)
            .map(|i| line(&format!("s{i}"), OK_LABELS))
            .collect();
        lines[41] = "{not json".into();
        let c = parse_corpus(lines.join("\n").as_bytes()).unwrap();
        assert_eq!(c.studies.len(), 99);
        assert_eq!(c.errors.len(), 1);
        assert!(matches!(c.errors[0], Error::ParseError { line_no: 42, .. }));
    }

    #[test]
    fn invalid_label_code_is_carried() {
        let bad = line("s0", "[0,0,0,0,0,0,0,7,0,0,0,0,0,0]");
        let mut lines: Vec<String> = (1..20).map(|i| line(&format!("s{i}"), OK_LABELS)).collect();
        lines.push(bad);
        let c = parse_corpus(lines.join("\n").as_bytes()).unwrap();
        match &c.errors[0] {
            Error::ParseError {
                line_no: 20,
                source,
            } => {
                assert!(matches!(
                    **source,
                    Error::InvalidLabelCode { index: 7, value: 7 }
                ))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_mostly_bad_corpus() {
        let text = format!("{}\n{{\n{{\n", line("a", OK_LABELS));
        assert!(matches!(
            parse_corpus(text.as_bytes()),
            Err(Error::CorpusRejected { bad: 2, total: 3 })
        ));
    }

    #[test]
    fn label_count_must_match_sentences() {
        let text = line("a", &format!("{OK_LABELS},{OK_LABELS}"));
        assert!(parse_study_line(&text).is_err());
    }

    #[test]
    fn line_round_trip() {
        let s = parse_study_line(&line("x", OK_LABELS)).unwrap();
        let again = parse_study_line(&study_to_line(&s).unwrap()).unwrap();
        assert_eq!(s, again);
    }
}
