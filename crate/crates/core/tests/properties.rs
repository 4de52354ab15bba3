use drs_core::augment::{build_tap_set, expand_dialogue};
use drs_core::corpus::{compute_stats, parse_line, Dialogue, Special, Tokenizer, Vocabulary};
use drs_core::encode::{encode_pair, truncate, truncation_lengths};
use drs_core::eval::{group_metrics, rank_group};
use proptest::prelude::*;
use std::collections::BTreeSet;

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,4}"
}

fn utterance() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..6).prop_map(|w| w.join(" "))
}

fn dialogue() -> impl Strategy<Value = Dialogue> {
    (prop::collection::vec(utterance(), 1..6), utterance(), any::<bool>())
        .prop_map(|(turns, response, label)| Dialogue::new(turns, response, label))
}

proptest! {
    #[test]
    fn tsv_roundtrip(d in dialogue()) {
        prop_assert_eq!(parse_line(&d.to_tsv()).unwrap(), d);
    }

    #[test]
    fn stats_counts_add_up(ds in prop::collection::vec(dialogue(), 1..30)) {
        let s = compute_stats(&ds).unwrap();
        prop_assert_eq!(s.pair_count, s.positive_count + s.negative_count);
        prop_assert!(s.avg_turns >= 1.0);
        prop_assert!(s.distinct_response_count <= s.pair_count);
    }

    #[test]
    fn truncation_fills_budget_and_keeps_ends(c in 0usize..200, r in 0usize..200, budget in 8usize..300) {
        let (kc, kr) = truncation_lengths(c, r, budget);
        prop_assert!(kc <= c && kr <= r);
        prop_assert_eq!(kc + kr, (c + r).min(budget));
        let ctx: Vec<usize> = (0..c).collect();
        let resp: Vec<usize> = (1000..1000 + r).collect();
        let (tc, tr) = truncate(&ctx, &resp, budget);
        prop_assert_eq!(&tc[..], &ctx[c - kc..]);
        prop_assert_eq!(&tr[..], &resp[..kr]);
    }

    #[test]
    fn encoded_layout(d in dialogue(), len in 8usize..40) {
        let vocab = Vocabulary::build(std::slice::from_ref(&d), &Tokenizer::default(), 1, None).unwrap();
        let inst = encode_pair(&d.turns, &d.response, &vocab, len, d.label).unwrap();
        prop_assert_eq!(inst.token_ids.len(), len);
        prop_assert_eq!(inst.segment_ids.len(), len);
        prop_assert_eq!(inst.attention_mask.len(), len);
        prop_assert_eq!(inst.mlm_labels.len(), len);
        prop_assert_eq!(inst.token_ids[0], Special::Start.id());
        let real = inst.real_len();
        prop_assert!(inst.attention_mask[..real].iter().all(|&m| m == 1));
        prop_assert!(inst.attention_mask[real..].iter().all(|&m| m == 0));
        prop_assert!(inst.token_ids[real..].iter().all(|&t| t == Special::Pad.id()));
        let seps: Vec<usize> = (0..real).filter(|&i| inst.token_ids[i] == Special::Separator.id()).collect();
        prop_assert_eq!(seps.len(), 2);
        prop_assert_eq!(seps[1], real - 1);
        for i in 0..real {
            prop_assert_eq!(inst.segment_ids[i], u8::from(i > seps[0]));
        }
        prop_assert!(inst.mlm_labels.iter().all(Option::is_none));
    }

    #[test]
    fn expansion_law(d in dialogue(), idx in 0usize..100) {
        let d = Dialogue { label: true, ..d };
        let pairs = expand_dialogue(&d, idx).unwrap();
        prop_assert_eq!(pairs.len(), d.turns.len());
        for (t, p) in pairs.iter().enumerate() {
            prop_assert!(p.label);
            prop_assert_eq!(&p.context[..], &d.turns[..t + 1]);
            let expected = if t + 1 < d.turns.len() { &d.turns[t + 1] } else { &d.response };
            prop_assert_eq!(&p.response, expected);
        }
        let origins: BTreeSet<_> = pairs.iter().map(|p| p.origin).collect();
        prop_assert_eq!(origins.len(), pairs.len());
    }

    #[test]
    fn tap_set_is_deterministic(ds in prop::collection::vec(dialogue(), 2..12), seed in any::<u64>()) {
        let mut ds = ds;
        ds[0].label = true;
        ds[0].response = "alpha".into();
        ds[1].response = "beta".into();
        let a = build_tap_set(&ds, 1, seed);
        let b = build_tap_set(&ds, 1, seed);
        prop_assert_eq!(&a, &b);
        if let Ok(set) = a {
            let positives = set.iter().filter(|p| p.label).count();
            let expected: usize = ds.iter().filter(|d| d.label).map(|d| d.turns.len()).sum();
            prop_assert_eq!(positives, expected);
            prop_assert_eq!(set.len(), 2 * positives);
        }
    }

    #[test]
    fn metric_bounds_and_monotonicity(labels in prop::collection::vec(any::<bool>(), 1..12)) {
        prop_assume!(labels.iter().any(|&l| l));
        let m = group_metrics(&labels).unwrap();
        for v in m.recall.iter().chain([&m.precision_at_1, &m.average_precision, &m.reciprocal_rank]) {
            prop_assert!((0.0..=1.0).contains(v));
        }
        prop_assert!(m.recall[0] <= m.recall[1] && m.recall[1] <= m.recall[2]);
        if labels.len() <= 5 {
            prop_assert_eq!(m.recall[2], 1.0);
        }
    }

    #[test]
    fn ranking_ignores_input_order(scores in prop::collection::vec(0u8..5, 1..10), rot in 0usize..10) {
        let n = scores.len();
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let labels: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let ranked = rank_group(&scores, &labels).unwrap();
        let mut seen = ranked.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        for w in ranked.windows(2) {
            prop_assert!(scores[w[0]] > scores[w[1]] || (scores[w[0]] == scores[w[1]] && w[0] < w[1]));
        }
        // with distinct scores, rotating the candidates leaves the ranked labels unchanged
        let distinct: Vec<f64> = (0..n).map(|i| scores[i] * 100.0 + i as f64).collect();
        let order = |s: &[f64], l: &[bool]| -> Vec<bool> {
            rank_group(s, l).unwrap().into_iter().map(|i| l[i]).collect()
        };
        let k = rot % n;
        let mut rs = distinct.clone();
        rs.rotate_left(k);
        let mut rl = labels.clone();
        rl.rotate_left(k);
        prop_assert_eq!(order(&distinct, &labels), order(&rs, &rl));
    }
}
