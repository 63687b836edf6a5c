use mtlg2p::checkpoint::{from_bytes, to_bytes};
use mtlg2p::lexicon::{
    batch_count, batch_examples, build_vocabs, downsample_balanced, encode_all, parse_lexicon_str, write_lexicon,
    ClassCounts, LexiconEntry, UnknownPolicy,
};
use mtlg2p::metrics::{aer, classifier_metrics, g2p_wer, levenshtein, per};
use mtlg2p::model::{Model, ModelConfig};
use mtlg2p::train::{TrainConfig, TrainState};
use proptest::collection::vec;
use proptest::prelude::*;
use std::path::Path;

fn seq() -> impl Strategy<Value = Vec<u8>> {
    vec(0u8..5, 0..9)
}

fn entries() -> impl Strategy<Value = Vec<LexiconEntry>> {
    vec(("[a-e]{1,5}", vec("[p-t]", 1..4), any::<bool>()), 1..40).prop_map(|rows| {
        let mut seen = std::collections::HashSet::new();
        rows.into_iter()
            .filter(|(w, _, _)| seen.insert(w.clone()))
            .map(|(w, p, f)| {
                let p: Vec<&str> = p.iter().map(String::as_str).collect();
                LexiconEntry::new(w, &p, Some(f))
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn edit_distance_is_a_metric(a in seq(), b in seq(), c in seq()) {
        let d = |x: &[u8], y: &[u8]| levenshtein(x, y).distance();
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert_eq!(d(&a, &a), 0);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        prop_assert!(d(&a, &b) >= a.len().abs_diff(b.len()));
        prop_assert!(d(&a, &b) <= a.len().max(b.len()));
    }

    #[test]
    fn edit_operations_account_for_both_sides(a in seq(), b in seq()) {
        let ops = levenshtein(&a, &b);
        prop_assert_eq!(ops.matches + ops.substitutions + ops.deletions, a.len());
        prop_assert_eq!(ops.matches + ops.substitutions + ops.insertions, b.len());
    }

    #[test]
    fn error_rates_are_bounded(pairs in vec((vec(0u8..4, 1..6), vec(0u8..4, 0..6)), 1..20)) {
        let w = g2p_wer(&pairs).unwrap();
        prop_assert!((0.0..=100.0).contains(&w));
        let p = per(&pairs).unwrap();
        prop_assert!(p >= 0.0);
        prop_assert_eq!(p == 0.0, w == 0.0);
        let same: Vec<_> = pairs.iter().map(|(r, _)| (r.clone(), r.clone())).collect();
        prop_assert_eq!(per(&same).unwrap(), 0.0);
    }

    #[test]
    fn aer_is_a_share(total in 0usize..5000, recognized in 0usize..5000) {
        let r = recognized.min(total);
        let a = aer(total, r);
        prop_assert!((0.0..=100.0).contains(&a));
        if total > 0 {
            prop_assert!((a - 100.0 * (total - r) as f64 / total as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_ratios_are_finite(data in vec((0.0f64..=1.0, any::<bool>()), 1..50)) {
        let (p, y): (Vec<f64>, Vec<bool>) = data.into_iter().unzip();
        let m = classifier_metrics(&p, &y, 0.5).unwrap();
        for v in [m.accuracy, m.precision, m.recall, m.f1] {
            prop_assert!(v.is_finite() && (0.0..=100.0).contains(&v));
        }
        prop_assert_eq!(m.counts.total(), p.len());
    }

    #[test]
    fn downsampling_balances_and_keeps_positives(flags in vec(any::<bool>(), 2..200), seed in any::<u64>()) {
        let all: Vec<LexiconEntry> = flags
            .iter()
            .enumerate()
            .map(|(i, &f)| LexiconEntry::new(format!("w{i}"), &["a"], Some(f)))
            .collect();
        let c = ClassCounts::of(&all);
        let out = downsample_balanced(&all, seed);
        if c.positives > c.total - c.positives {
            prop_assert!(out.is_err());
        } else {
            let out = out.unwrap();
            let oc = ClassCounts::of(&out);
            prop_assert_eq!(oc.total, 2 * c.positives);
            prop_assert_eq!(oc.positives, c.positives);
            prop_assert!(out.iter().all(|e| all.contains(e)));
            prop_assert_eq!(out, downsample_balanced(&all, seed).unwrap());
        }
    }

    #[test]
    fn lexicon_text_round_trips(lex in entries(), flags in any::<bool>()) {
        let text = write_lexicon(&lex, flags);
        let parsed = parse_lexicon_str(&text, Path::new("p.tsv"), flags).unwrap();
        let expect: Vec<LexiconEntry> = lex
            .iter()
            .map(|e| LexiconEntry { anglicism: if flags { e.anglicism } else { None }, ..e.clone() })
            .collect();
        prop_assert_eq!(parsed.entries, expect);
    }

    #[test]
    fn batches_partition_the_data(lex in entries(), size in 1usize..9, epoch in 0u64..4) {
        let vocab = build_vocabs(&lex).unwrap();
        let (ex, _, _) = encode_all(&lex, &vocab, UnknownPolicy::Error).unwrap();
        let batches = batch_examples(&ex, size, 3, epoch).unwrap();
        prop_assert_eq!(batches.len(), batch_count(ex.len(), size));
        prop_assert_eq!(batches.iter().map(|b| b.size).sum::<usize>(), ex.len());
        prop_assert!(batches.iter().all(|b| b.size <= size && b.size > 0));
    }

    #[test]
    fn rate_is_initial_over_powers_of_two(trace in vec(0.0f64..3.0, 1..120)) {
        let mut s = TrainState::new(&TrainConfig::default());
        for v in trace {
            s.lr_schedule_update(v);
            prop_assert_eq!(s.lr, 0.007 / 2f64.powi(s.halvings as i32));
            prop_assert!(s.checks_since_best < s.patience);
            if s.should_stop() {
                break;
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoints_round_trip(lex in entries(), seed in any::<u64>(), hidden in 1usize..6, layers in 1usize..3) {
        let vocab = build_vocabs(&lex).unwrap();
        let cfg = ModelConfig {
            embed_dim: 3,
            hidden_dim: hidden,
            layers,
            classifier_hidden1: 2,
            classifier_hidden2: 2,
            ..ModelConfig::for_vocab(&vocab)
        };
        let m: Model<f32> = Model::new(cfg, vocab, seed).unwrap();
        let bytes = to_bytes(&m).unwrap();
        let back: Model<f32> = from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(to_bytes(&back).unwrap(), bytes);
    }
}
