mod common;

use common::{kept_positions, matches_oracle, synthetic_filter_inputs};
use proptest::prelude::*;
use sure_core::cef::{
    filter_prior, FilterConfig, FilterMode, PriorSource, SentenceRecord, StrictScope,
};
use sure_core::model::{FindingLabel, LabelVector};

fn cfg(
    mode: FilterMode,
    tau: f64,
    gap: f64,
    scope: StrictScope,
    require_positive: bool,
) -> FilterConfig {
    FilterConfig {
        mode,
        tau,
        tau_high_plus: tau + gap,
        require_positive,
        strict_scope: scope,
    }
}

fn label_strategy() -> impl Strategy<Value = LabelVector> {
    prop::collection::vec(0usize..4, 14).prop_map(|codes| {
        let mut lv = LabelVector::absent();
        for (j, c) in codes.into_iter().enumerate() {
            let l = [
                FindingLabel::Absent,
                FindingLabel::Positive,
                FindingLabel::Negative,
                FindingLabel::Uncertain,
            ][c];
            lv = lv.with(j, l);
        }
        lv
    })
}

fn record_strategy(dim: usize) -> impl Strategy<Value = SentenceRecord> {
    (
        any::<bool>(),
        label_strategy(),
        prop::collection::vec(-1.0f64..1.0, dim),
        0u32..1000,
    )
        .prop_map(|(p2, labels, mut embedding, id)| {
            if embedding.iter().all(|x| *x == 0.0) {
                embedding[0] = 1.0;
            }
            SentenceRecord {
                text: format!("s{id}"),
                source: if p2 {
                    PriorSource::Prior2
                } else {
                    PriorSource::Prior1
                },
                labels,
                embedding,
                similarity: None,
            }
        })
}

fn case() -> impl Strategy<Value = (Vec<SentenceRecord>, Vec<f64>, f64, f64, bool)> {
    (
        prop::collection::vec(record_strategy(4), 0..12),
        prop::collection::vec(0.1f64..1.0, 4),
        -0.5f64..0.8,
        0.01f64..0.5,
        any::<bool>(),
    )
}

proptest! {
    #[test]
    fn random_records_match_oracle((records, image, tau, gap, scope_all) in case(), require_positive in any::<bool>()) {
        let scope = if scope_all { StrictScope::AllPrior2 } else { StrictScope::VanishedOnly };
        for mode in [FilterMode::None, FilterMode::Fixed, FilterMode::Dynamic] {
            let c = cfg(mode, tau, gap, scope, require_positive);
            let out = filter_prior(&records, &image, &c).unwrap();
            prop_assert!(matches_oracle(&out, &records, &image, &c));
            prop_assert_eq!(out.retained.len() + out.dropped.len(), records.len());
        }
    }

    #[test]
    fn random_records_are_nested((records, image, tau, gap, scope_all) in case()) {
        let scope = if scope_all { StrictScope::AllPrior2 } else { StrictScope::VanishedOnly };
        let kept = |mode| {
            let out = filter_prior(&records, &image, &cfg(mode, tau, gap, scope, true)).unwrap();
            kept_positions(&out, &records)
        };
        let none = kept(FilterMode::None);
        let fixed = kept(FilterMode::Fixed);
        let dynamic = kept(FilterMode::Dynamic);
        prop_assert!(fixed.iter().all(|i| none.contains(i)));
        prop_assert!(dynamic.iter().all(|i| fixed.contains(i)));
    }
}

#[test]
fn synthetic_studies_match_oracle_across_thresholds() {
    let inputs = synthetic_filter_inputs(300, 21);
    assert!(inputs.len() > 200);
    for tau in [-0.05, 0.0, 0.1, 0.22, 0.35] {
        for mode in [FilterMode::None, FilterMode::Fixed, FilterMode::Dynamic] {
            for scope in [StrictScope::VanishedOnly, StrictScope::AllPrior2] {
                let c = cfg(mode, tau, 0.08, scope, true);
                for (records, image) in &inputs {
                    let out = filter_prior(records, image, &c).unwrap();
                    assert!(
                        matches_oracle(&out, records, image, &c),
                        "tau {tau} {mode:?} {scope:?}"
                    );
                }
            }
        }
    }
}

#[test]
fn threshold_equality_is_kept() {
    let lv = LabelVector::absent().with(2, FindingLabel::Positive);
    let rec = |source, embedding: Vec<f64>| SentenceRecord {
        text: "x".into(),
        source,
        labels: lv,
        embedding,
        similarity: None,
    };
    // Cosine of exactly 0.5 against [1, 0].
    let records = vec![rec(PriorSource::Prior1, vec![0.5, 0.75f64.sqrt()])];
    let sim = common::oracle_cosine(&[1.0, 0.0], &records[0].embedding);
    let c = cfg(FilterMode::Fixed, sim, 0.1, StrictScope::VanishedOnly, true);
    assert_eq!(
        filter_prior(&records, &[1.0, 0.0], &c)
            .unwrap()
            .retained
            .len(),
        1
    );
    let c = cfg(
        FilterMode::Fixed,
        sim + 1e-12,
        0.1,
        StrictScope::VanishedOnly,
        true,
    );
    assert_eq!(
        filter_prior(&records, &[1.0, 0.0], &c)
            .unwrap()
            .retained
            .len(),
        0
    );
}
