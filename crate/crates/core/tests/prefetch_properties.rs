mod common;

use std::collections::BTreeSet;

use common::{arb_world, check_list, ctx};
use medgate::domain::{date_of, StudyUid, UsagePattern};
use medgate::mlp::MlpConfig;
use medgate::prefetch::{
    long_term_prefetch, short_term_prefetch, AgeBucket, CandidateSource, PrefetchConfig, ScorerBook,
};
use proptest::prelude::*;

fn permissive() -> PrefetchConfig {
    PrefetchConfig {
        score_floor: 0.0,
        ..Default::default()
    }
}

proptest! {
    #[test]
    fn long_term_lists_are_safe(w in arb_world(), util in 0.0f64..0.3, seed in any::<u64>(), pending in 0u64..500) {
        let scorers = ScorerBook::new(&MlpConfig::default(), seed).unwrap();
        let cfg = permissive();
        let list = long_term_prefetch(&w.counters, ctx(&w), util, 0.3, pending, &scorers, &cfg);
        check_list(&w, &list)?;
        let free = w.cache.free_space().saturating_sub(pending);
        let bytes: u64 = list.iter().map(|c| c.size_bytes).sum();
        prop_assert!(bytes as f64 <= cfg.fill_fraction * free as f64);
        let today = date_of(w.now);
        let top = w.counters.top_k(cfg.top_k);
        for c in &list {
            prop_assert_eq!(c.source, CandidateSource::LongTerm);
            let st = w.index.get(&c.study_uid).unwrap();
            let cell = (st.modality.clone(), AgeBucket::of(st.study_date, w.now));
            prop_assert!(cell.1 != AgeBucket::Older);
            prop_assert!(top.contains(&cell));
            prop_assert!(st.study_date <= today);
        }
    }

    #[test]
    fn long_term_is_silent_when_busy(w in arb_world(), util in 0.3f64..=1.0, seed in any::<u64>()) {
        let scorers = ScorerBook::new(&MlpConfig::default(), seed).unwrap();
        prop_assert!(long_term_prefetch(&w.counters, ctx(&w), util, 0.3, 0, &scorers, &permissive()).is_empty());
        let free = w.cache.free_space();
        prop_assert!(long_term_prefetch(&w.counters, ctx(&w), 0.0, 0.3, free, &scorers, &permissive()).is_empty());
    }

    #[test]
    fn short_term_lists_are_safe(
        w in arb_world(),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 0..10),
        pattern in 0usize..4,
        seed in any::<u64>(),
    ) {
        let scorers = ScorerBook::new(&MlpConfig::default(), seed).unwrap();
        let all: Vec<StudyUid> = w.index.iter().map(|s| s.study_uid.clone()).collect();
        let results: Vec<StudyUid> = picks.iter().map(|i| i.get(&all).clone()).collect();
        let predicted = UsagePattern::from_index(pattern).unwrap();
        let cfg = permissive();
        let list = short_term_prefetch(&results, predicted, "WS1", ctx(&w), &scorers, &cfg);
        check_list(&w, &list)?;
        let bytes: u64 = list.iter().map(|c| c.size_bytes).sum();
        prop_assert!(bytes as f64 <= cfg.short_term_budget_fraction * w.cache.capacity_bytes() as f64);
        if matches!(predicted, UsagePattern::InconsequentQuery | UsagePattern::Other) {
            prop_assert!(list.iter().all(|c| c.source == CandidateSource::QueryResults));
            prop_assert!(list.iter().all(|c| results.contains(&c.study_uid)));
        }
        if predicted == UsagePattern::PatientRevising && !list.is_empty() {
            let patients: BTreeSet<_> = list.iter().map(|c| &w.index.get(&c.study_uid).unwrap().patient_id).collect();
            prop_assert_eq!(patients.len(), 1);
        }
        let floor = PrefetchConfig::default();
        let strict = short_term_prefetch(&results, predicted, "WS1", ctx(&w), &scorers, &floor);
        prop_assert!(strict.iter().all(|c| c.score >= floor.score_floor));
    }
}
