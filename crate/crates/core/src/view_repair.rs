//! View-label repair: reconcile DICOM-style view tags with view-classifier
//! probabilities and split a study's images into frontal and lateral sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ImageRecord, Study, ViewProbs, ViewTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    ExcludeImage,
    TreatAsFrontal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepairPolicy {
    /// Minimum classifier confidence to resolve an UNK or special tag.
    pub theta_assign: f64,
    /// Minimum classifier confidence to overrule an explicit tag.
    pub theta_override: f64,
    pub fallback: Fallback,
}

impl Default for RepairPolicy {
    fn default() -> Self {
        Self {
            theta_assign: 0.70,
            theta_override: 0.90,
            fallback: Fallback::ExcludeImage,
        }
    }
}

impl RepairPolicy {
    pub fn validate(&self) -> Result<()> {
        let ok = self.theta_assign > 0.0
            && self.theta_assign <= self.theta_override
            && self.theta_override <= 1.0;
        if !ok {
            return Err(Error::Config(format!(
                "repair thresholds must satisfy 0 < theta_assign <= theta_override <= 1, got {} / {}",
                self.theta_assign, self.theta_override
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ResolvedView {
    Pa,
    Ap,
    Lateral,
    Excluded,
}

impl ResolvedView {
    pub fn is_frontal(self) -> bool {
        matches!(self, ResolvedView::Pa | ResolvedView::Ap)
    }

    /// The explicit tag a resolved view re-encodes to. Excluded images carry no
    /// usable tag and map back to UNK.
    pub fn as_tag(self) -> ViewTag {
        match self {
            ResolvedView::Pa => ViewTag::Pa,
            ResolvedView::Ap => ViewTag::Ap,
            ResolvedView::Lateral => ViewTag::Lateral,
            ResolvedView::Excluded => ViewTag::Unk,
        }
    }

    fn from_class(class: usize) -> Self {
        match class {
            ViewProbs::PA => ResolvedView::Pa,
            ViewProbs::AP => ResolvedView::Ap,
            ViewProbs::LATERAL => ResolvedView::Lateral,
            _ => ResolvedView::Excluded,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    KeptOriginal,
    ResolvedUnknown,
    Overridden,
    FellBack,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepairedView {
    pub resolved: ResolvedView,
    pub provenance: Provenance,
    /// Classifier probability backing the decision; 1.0 for an explicit tag
    /// kept without classifier output, 0.0 for a fallback without one.
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    Frontal,
    Lateral,
    Other,
}

fn class_family(class: usize) -> Family {
    match class {
        ViewProbs::PA | ViewProbs::AP => Family::Frontal,
        ViewProbs::LATERAL => Family::Lateral,
        _ => Family::Other,
    }
}

pub fn repair_view(
    tag: &ViewTag,
    probs: Option<&ViewProbs>,
    policy: &RepairPolicy,
) -> RepairedView {
    let explicit = match tag {
        ViewTag::Pa => Some((ResolvedView::Pa, ViewProbs::PA)),
        ViewTag::Ap => Some((ResolvedView::Ap, ViewProbs::AP)),
        ViewTag::Lateral | ViewTag::Ll => Some((ResolvedView::Lateral, ViewProbs::LATERAL)),
        ViewTag::Unk | ViewTag::Special(_) => None,
    };

    match (explicit, probs) {
        (Some((resolved, _)), None) => RepairedView {
            resolved,
            provenance: Provenance::KeptOriginal,
            confidence: 1.0,
        },
        (Some((resolved, tag_class)), Some(p)) => {
            let (class, top) = p.argmax();
            if class_family(class) != class_family(tag_class) && top >= policy.theta_override {
                RepairedView {
                    resolved: ResolvedView::from_class(class),
                    provenance: Provenance::Overridden,
                    confidence: top,
                }
            } else {
                RepairedView {
                    resolved,
                    provenance: Provenance::KeptOriginal,
                    confidence: p.values()[tag_class],
                }
            }
        }
        (None, Some(p)) => {
            let (class, top) = p.argmax();
            if top >= policy.theta_assign {
                RepairedView {
                    resolved: ResolvedView::from_class(class),
                    provenance: Provenance::ResolvedUnknown,
                    confidence: top,
                }
            } else {
                fall_back(Some(p), policy)
            }
        }
        (None, None) => fall_back(None, policy),
    }
}

fn fall_back(probs: Option<&ViewProbs>, policy: &RepairPolicy) -> RepairedView {
    match policy.fallback {
        Fallback::ExcludeImage => RepairedView {
            resolved: ResolvedView::Excluded,
            provenance: Provenance::FellBack,
            confidence: probs.map_or(0.0, |p| p.argmax().1),
        },
        Fallback::TreatAsFrontal => {
            let (resolved, confidence) = match probs {
                Some(p) => {
                    let v = p.values();
                    if v[ViewProbs::AP] > v[ViewProbs::PA] {
                        (ResolvedView::Ap, v[ViewProbs::AP])
                    } else {
                        (ResolvedView::Pa, v[ViewProbs::PA])
                    }
                }
                None => (ResolvedView::Pa, 0.0),
            };
            RepairedView {
                resolved,
                provenance: Provenance::FellBack,
                confidence,
            }
        }
    }
}

/// One repair decision, as written to the audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewAudit {
    pub study_id: String,
    pub image_id: String,
    pub original_tag: ViewTag,
    #[serde(flatten)]
    pub repaired: RepairedView,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitViews {
    /// Frontal images with their tags rewritten to the resolved view.
    pub frontal: Vec<ImageRecord>,
    pub lateral: Vec<ImageRecord>,
    /// One entry per input image, in input order.
    pub audit: Vec<ViewAudit>,
}

impl SplitViews {
    pub fn excluded(&self) -> usize {
        self.audit.len() - self.frontal.len() - self.lateral.len()
    }
}

pub fn split_views(study: &Study, policy: &RepairPolicy) -> Result<SplitViews> {
    let split = repair_study(study, policy);
    if split.frontal.is_empty() && split.lateral.is_empty() {
        return Err(Error::NoUsableViews(study.study_id.clone()));
    }
    Ok(split)
}

/// Like [`split_views`] but total: a study whose images are all excluded
/// yields empty frontal and lateral sets and a complete audit.
pub fn repair_study(study: &Study, policy: &RepairPolicy) -> SplitViews {
    let mut frontal = Vec::new();
    let mut lateral = Vec::new();
    let mut audit = Vec::with_capacity(study.images.len());

    for img in &study.images {
        let repaired = repair_view(&img.view_tag, img.view_probs.as_ref(), policy);
        let mut routed = img.clone();
        routed.view_tag = repaired.resolved.as_tag();
        match repaired.resolved {
            ResolvedView::Pa | ResolvedView::Ap => frontal.push(routed),
            ResolvedView::Lateral => lateral.push(routed),
            ResolvedView::Excluded => {}
        }
        audit.push(ViewAudit {
            study_id: study.study_id.clone(),
            image_id: img.image_id.clone(),
            original_tag: img.view_tag.clone(),
            repaired,
        });
    }

    SplitViews {
        frontal,
        lateral,
        audit,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EmbeddingRef, Report};
    use proptest::prelude::*;

    fn probs(v: [f64; 4]) -> ViewProbs {
        ViewProbs::new(v).unwrap()
    }

    fn image(id: &str, tag: ViewTag, p: Option<[f64; 4]>) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            view_tag: tag,
            view_probs: p.map(probs),
            embedding: EmbeddingRef::new("x.emb", 0..4).unwrap(),
            clip: None,
        }
    }

    fn study(images: Vec<ImageRecord>) -> Study {
        Study {
            study_id: "s1".into(),
            images,
            report: Report::from_text("Stable."),
            prior1: None,
            prior2: None,
        }
    }

    #[test]
    fn resolves_unknown_frontal_as_ap() {
        let r = repair_view(
            &ViewTag::Unk,
            Some(&probs([0.02, 0.95, 0.02, 0.01])),
            &RepairPolicy::default(),
        );
        assert_eq!(r.resolved, ResolvedView::Ap);
        assert_eq!(r.provenance, Provenance::ResolvedUnknown);
        assert_eq!(r.confidence, 0.95);
    }

    #[test]
    fn keeps_agreeing_explicit_tag() {
        let r = repair_view(
            &ViewTag::Pa,
            Some(&probs([0.9, 0.05, 0.03, 0.02])),
            &RepairPolicy::default(),
        );
        assert_eq!(
            r,
            RepairedView {
                resolved: ResolvedView::Pa,
                provenance: Provenance::KeptOriginal,
                confidence: 0.9
            }
        );
    }

    #[test]
    fn overrides_confident_disagreement() {
        let r = repair_view(
            &ViewTag::Pa,
            Some(&probs([0.01, 0.01, 0.97, 0.01])),
            &RepairPolicy::default(),
        );
        assert_eq!(r.resolved, ResolvedView::Lateral);
        assert_eq!(r.provenance, Provenance::Overridden);
        assert_eq!(r.confidence, 0.97);

        // Same family: PA tag, AP argmax never overrides.
        let r = repair_view(
            &ViewTag::Pa,
            Some(&probs([0.02, 0.96, 0.01, 0.01])),
            &RepairPolicy::default(),
        );
        assert_eq!(r.resolved, ResolvedView::Pa);
        assert_eq!(r.provenance, Provenance::KeptOriginal);
    }

    #[test]
    fn ll_normalizes_to_lateral() {
        let r = repair_view(&ViewTag::Ll, None, &RepairPolicy::default());
        assert_eq!(r.resolved, ResolvedView::Lateral);
        assert_eq!(r.provenance, Provenance::KeptOriginal);
    }

    #[test]
    fn fallback_paths() {
        let special = ViewTag::Special("SWIMMERS".into());
        let excl = RepairPolicy::default();
        let r = repair_view(&special, None, &excl);
        assert_eq!(
            (r.resolved, r.provenance),
            (ResolvedView::Excluded, Provenance::FellBack)
        );

        let frontal = RepairPolicy {
            fallback: Fallback::TreatAsFrontal,
            ..excl
        };
        let r = repair_view(&special, Some(&probs([0.2, 0.3, 0.4, 0.1])), &frontal);
        assert_eq!(
            (r.resolved, r.provenance),
            (ResolvedView::Ap, Provenance::FellBack)
        );
        assert_eq!(r.confidence, 0.3);
    }

    #[test]
    fn other_argmax_excludes() {
        let r = repair_view(
            &ViewTag::Unk,
            Some(&probs([0.1, 0.1, 0.0, 0.8])),
            &RepairPolicy::default(),
        );
        assert_eq!(
            (r.resolved, r.provenance),
            (ResolvedView::Excluded, Provenance::ResolvedUnknown)
        );
    }

    #[test]
    fn splits_plain_study() {
        let s = study(vec![
            image("a", ViewTag::Pa, None),
            image("b", ViewTag::Lateral, None),
        ]);
        let out = split_views(&s, &RepairPolicy::default()).unwrap();
        assert_eq!(out.frontal.len(), 1);
        assert_eq!(out.frontal[0].image_id, "a");
        assert_eq!(out.lateral[0].image_id, "b");
        assert_eq!(out.audit.len(), 2);
    }

    #[test]
    fn splits_repaired_study() {
        // Hand trace: UNK with p_AP = 0.95 >= 0.70 resolves to AP; LL is an
        // explicit lateral tag without probabilities and stays lateral.
        let s = study(vec![
            image("a", ViewTag::Unk, Some([0.02, 0.95, 0.02, 0.01])),
            image("b", ViewTag::Ll, None),
        ]);
        let out = split_views(&s, &RepairPolicy::default()).unwrap();
        assert_eq!(out.frontal.len(), 1);
        assert_eq!(out.frontal[0].view_tag, ViewTag::Ap);
        assert_eq!(out.lateral.len(), 1);
        assert_eq!(out.lateral[0].view_tag, ViewTag::Lateral);
        assert_eq!(out.audit[0].original_tag, ViewTag::Unk);
        assert_eq!(
            out.audit[0].repaired.provenance,
            Provenance::ResolvedUnknown
        );
        assert_eq!(out.audit[1].repaired.provenance, Provenance::KeptOriginal);
    }

    #[test]
    fn all_excluded_is_an_error() {
        let s = study(vec![image("a", ViewTag::Special("X".into()), None)]);
        assert!(matches!(
            split_views(&s, &RepairPolicy::default()),
            Err(Error::NoUsableViews(id)) if id == "s1"
        ));
    }

    #[test]
    fn policy_validation() {
        assert!(RepairPolicy::default().validate().is_ok());
        let bad = RepairPolicy {
            theta_assign: 0.95,
            theta_override: 0.9,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    fn tag_strategy() -> impl Strategy<Value = ViewTag> {
        prop_oneof![
            Just(ViewTag::Pa),
            Just(ViewTag::Ap),
            Just(ViewTag::Lateral),
            Just(ViewTag::Ll),
            Just(ViewTag::Unk),
            Just(ViewTag::Special("OBLIQUE".into())),
        ]
    }

    fn probs_strategy() -> impl Strategy<Value = Option<ViewProbs>> {
        prop::option::of(
            prop::array::uniform4(0.0f64..1.0).prop_filter_map("nonzero", |raw| {
                let total: f64 = raw.iter().sum();
                (total > 1e-3).then(|| probs(raw.map(|x| x / total)))
            }),
        )
    }

    fn policy_strategy() -> impl Strategy<Value = RepairPolicy> {
        (0.3f64..1.0, 0.0f64..1.0, any::<bool>()).prop_map(|(a, frac, frontal)| RepairPolicy {
            theta_assign: a,
            theta_override: a + (1.0 - a) * frac,
            fallback: if frontal {
                Fallback::TreatAsFrontal
            } else {
                Fallback::ExcludeImage
            },
        })
    }

    proptest! {
        #[test]
        fn repair_is_idempotent(tag in tag_strategy(), p in probs_strategy(), policy in policy_strategy()) {
            let first = repair_view(&tag, p.as_ref(), &policy);
            let again = repair_view(&first.resolved.as_tag(), p.as_ref(), &policy);
            prop_assert_eq!(again.resolved, first.resolved);
        }

        #[test]
        fn kept_original_matches_tag(tag in tag_strategy(), p in probs_strategy(), policy in policy_strategy()) {
            let r = repair_view(&tag, p.as_ref(), &policy);
            if r.provenance == Provenance::KeptOriginal {
                let expected = match tag {
                    ViewTag::Pa => ResolvedView::Pa,
                    ViewTag::Ap => ResolvedView::Ap,
                    _ => ResolvedView::Lateral,
                };
                prop_assert_eq!(r.resolved, expected);
            }
        }

        #[test]
        fn override_count_monotone(
            cases in prop::collection::vec((tag_strategy(), probs_strategy()), 1..40),
            policy in policy_strategy(),
            bump in 0.0f64..0.5,
        ) {
            let raised = RepairPolicy {
                theta_override: (policy.theta_override + bump).min(1.0),
                ..policy
            };
            let count = |pol: &RepairPolicy| {
                cases
                    .iter()
                    .filter(|(t, p)| repair_view(t, p.as_ref(), pol).provenance == Provenance::Overridden)
                    .count()
            };
            prop_assert!(count(&raised) <= count(&policy));
        }

        #[test]
        fn split_partitions_images(
            cases in prop::collection::vec((tag_strategy(), probs_strategy()), 1..12),
            policy in policy_strategy(),
        ) {
            let images = cases
                .into_iter()
                .enumerate()
                .map(|(i, (tag, p))| ImageRecord {
                    image_id: format!("i{i}"),
                    view_tag: tag,
                    view_probs: p,
                    embedding: EmbeddingRef::new("x.emb", 0..1).unwrap(),
                    clip: None,
                })
                .collect::<Vec<_>>();
            let n = images.len();
            match split_views(&study(images), &policy) {
                Ok(out) => {
                    prop_assert_eq!(out.audit.len(), n);
                    prop_assert_eq!(out.frontal.len() + out.lateral.len() + out.excluded(), n);
                }
                Err(Error::NoUsableViews(_)) => {}
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }
    }
}
