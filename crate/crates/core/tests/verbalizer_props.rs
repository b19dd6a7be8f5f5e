mod common;

use proptest::prelude::*;

use prompt_pipe::tokenization::TokenizedInput;
use prompt_pipe::tokenization::Tokenizer;
use prompt_pipe::verbalizer::{
    calibrate, project, project_calibrated, Aggregation, Verbalizer, VerbalizerError,
};

const LABEL_WORDS: [&str; 10] = [
    "bad",
    "good",
    "wonderful",
    "great",
    "terrible",
    "greatest",
    "unhappy",
    "fun",
    "dull",
    "boring",
];

fn aggregation() -> impl Strategy<Value = Aggregation> {
    prop_oneof![
        Just(Aggregation::MeanLogProb),
        Just(Aggregation::Max),
        Just(Aggregation::First)
    ]
}

fn entries() -> impl Strategy<Value = Entries> {
    proptest::collection::vec(
        proptest::collection::vec(proptest::sample::select(LABEL_WORDS.to_vec()), 1..4),
        2..5,
    )
    .prop_map(|classes| {
        classes
            .into_iter()
            .enumerate()
            .map(|(i, ws)| (format!("c{i}"), ws.into_iter().map(String::from).collect()))
            .collect()
    })
}

fn build(entries: Entries, tok: &Tokenizer) -> Verbalizer {
    Verbalizer::new(entries, tok).unwrap()
}

fn logits(rows: usize, v: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, v), rows)
}

type Entries = Vec<(String, Vec<String>)>;

fn case() -> impl Strategy<Value = (Entries, Vec<Vec<f64>>, Aggregation)> {
    let v = common::fixture_vocab().len();
    (
        entries(),
        (1usize..4).prop_flat_map(move |r| logits(r, v)),
        aggregation(),
    )
}

fn all_ids(v: &Verbalizer) -> Vec<Vec<Vec<u32>>> {
    (0..v.num_classes())
        .map(|c| v.label_word_ids(c).to_vec())
        .collect()
}

fn dummy_input() -> TokenizedInput {
    TokenizedInput {
        input_ids: vec![],
        attention_mask: vec![],
        loss_ids: vec![],
        shortenable_ids: vec![],
        soft_slot_ids: vec![],
        mask_positions: vec![],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn shift_invariance((e, rows, agg) in case(), shifts in proptest::collection::vec(-50.0f64..50.0, 3)) {
        let tok = common::wordpiece();
        let v = build(e, &tok);
        let base = project(&rows, &v, agg).unwrap();
        let shifted: Vec<Vec<f64>> = rows
            .iter()
            .zip(&shifts)
            .map(|(r, c)| r.iter().map(|x| x + c).collect())
            .collect();
        let moved = project(&shifted, &v, agg).unwrap();
        for (a, b) in base.scores.iter().zip(&moved.scores) {
            prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_brute_force((e, rows, agg) in case()) {
        let tok = common::wordpiece();
        let v = build(e, &tok);
        let fast = project(&rows, &v, agg).unwrap();
        let slow = common::naive_project(&rows, &all_ids(&v), agg);
        for (a, b) in fast.scores.iter().zip(&slow) {
            prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        prop_assert_eq!(fast.predicted, common::naive_argmax(&fast.scores));
    }

    #[test]
    fn uniform_prior_keeps_argmax((e, rows, agg) in case(), level in -5.0f64..5.0) {
        let tok = common::wordpiece();
        let v = build(e, &tok);
        let uniform = vec![vec![level; v.vocab_size()]; rows.len()];
        let prior = calibrate(|_| Ok::<_, VerbalizerError>(uniform), &v, &dummy_input()).unwrap();
        let raw = project(&rows, &v, agg).unwrap();
        let cal = project_calibrated(&rows, &v, agg, Some(&prior)).unwrap();
        let ln_v = (v.vocab_size() as f64).ln() * rows.len() as f64;
        for (r, c) in raw.scores.iter().zip(&cal.scores) {
            prop_assert!((c - r - ln_v).abs() < 1e-9);
        }
        prop_assert_eq!(raw.predicted, cal.predicted);
    }

    #[test]
    fn aggregation_bounds((e, rows, _agg) in case()) {
        let tok = common::wordpiece();
        let v = build(e, &tok);
        let mean = project(&rows, &v, Aggregation::MeanLogProb).unwrap();
        let max = project(&rows, &v, Aggregation::Max).unwrap();
        let first = project(&rows, &v, Aggregation::First).unwrap();
        for c in 0..v.num_classes() {
            prop_assert!(mean.scores[c] <= max.scores[c] + 1e-12);
            prop_assert!(first.scores[c] <= max.scores[c] + 1e-12);
            prop_assert!(max.scores[c] <= 0.0);
        }
    }

    #[test]
    fn label_word_order_is_irrelevant_for_mean_and_max((e, rows, _agg) in case()) {
        let tok = common::wordpiece();
        let reversed: Vec<_> = e
            .iter()
            .map(|(c, ws)| (c.clone(), ws.iter().rev().cloned().collect::<Vec<_>>()))
            .collect();
        let a = build(e, &tok);
        let b = build(reversed, &tok);
        for agg in [Aggregation::MeanLogProb, Aggregation::Max] {
            let sa = project(&rows, &a, agg).unwrap();
            let sb = project(&rows, &b, agg).unwrap();
            for (x, y) in sa.scores.iter().zip(&sb.scores) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn class_order_permutes_scores((e, rows, agg) in case()) {
        let tok = common::wordpiece();
        let mut rev = e.clone();
        rev.reverse();
        let a = project(&rows, &build(e, &tok), agg).unwrap();
        let b = project(&rows, &build(rev, &tok), agg).unwrap();
        let n = a.scores.len();
        for c in 0..n {
            prop_assert_eq!(a.scores[c], b.scores[n - 1 - c]);
        }
    }
}

#[test]
fn reference_verbalizer_shape() {
    let tok = common::wordpiece();
    let v =
        prompt_pipe::verbalizer::load_verbalizer(common::fixture("verbalizer.json"), &tok).unwrap();
    assert_eq!(v.classes(), ["negative", "positive"]);
    assert_eq!(v.label_words(0).len(), 1);
    assert_eq!(v.label_words(1).len(), 3);
}
