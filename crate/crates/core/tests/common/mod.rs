//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use prompt_pipe::template::{PostProcessing, TemplateNode};
use prompt_pipe::tokenization::{build_tokenizer, Tokenizer, TokenizerKind, Vocab};
use prompt_pipe::verbalizer::Aggregation;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

pub fn fixture_vocab() -> Vocab {
    Vocab::load(fixture("vocab.txt")).unwrap()
}

pub fn wordpiece() -> Tokenizer {
    build_tokenizer(TokenizerKind::WordPiece, fixture_vocab()).unwrap()
}

/// The seven reference templates with their expected node lists.
pub fn reference_templates() -> Vec<(&'static str, &'static str, Vec<TemplateNode>)> {
    use TemplateNode as N;
    vec![
        (
            "A",
            r#"a {"mask"} news: {"meta": "title"} {"meta": "description"}"#,
            vec![
                N::text("a "),
                N::mask(),
                N::text(" news: "),
                N::meta("title"),
                N::text(" "),
                N::meta("description"),
            ],
        ),
        (
            "B",
            r#"{"meta": "sentence"}. In this sentence, {"meta": "entity"} is a {"mask"},"#,
            vec![
                N::meta("sentence"),
                N::text(". In this sentence, "),
                N::meta("entity"),
                N::text(" is a "),
                N::mask(),
                N::text(","),
            ],
        ),
        (
            "C",
            r#"{"meta": "premise"} {"meta": "hypothesis"} {"soft": "Does the first sentence entails the second ?"} {"mask"} {"soft"}."#,
            vec![
                N::meta("premise"),
                N::text(" "),
                N::meta("hypothesis"),
                N::text(" "),
                N::soft_init("Does the first sentence entails the second ?"),
                N::text(" "),
                N::mask(),
                N::text(" "),
                N::soft(),
                N::text("."),
            ],
        ),
        (
            "D",
            r#"{"soft": None, "duplicate": 100} {"meta": "text"} {"mask"}"#,
            vec![
                N::soft().with_duplicate(100),
                N::text(" "),
                N::meta("text"),
                N::text(" "),
                N::mask(),
            ],
        ),
        (
            "E",
            r#"{"meta": "context", "post_processing": lambda s: s.rstrip(string.punctuation)}. {"soft": "It was"} {"mask"}"#,
            vec![
                N::meta("context").with_post_processing(PostProcessing::StripTrailingPunctuation),
                N::text(". "),
                N::soft_init("It was"),
                N::text(" "),
                N::mask(),
            ],
        ),
        (
            "F",
            r#"{"meta": "premise"} {"meta": "hypothesis"} {"soft": "Does"} {"soft": "the", "soft_id": 1} first sentence entails {"soft_id": 1} second?"#,
            vec![
                N::meta("premise"),
                N::text(" "),
                N::meta("hypothesis"),
                N::text(" "),
                N::soft_init("Does"),
                N::text(" "),
                N::soft_init("the").with_soft_id(1),
                N::text(" first sentence entails "),
                N::soft().with_soft_id(1),
                N::text(" second?"),
            ],
        ),
        (
            "G",
            r#"a {"mask"} news: {"meta": "title", "shortenable": False} {"meta": "description"}"#,
            vec![
                N::text("a "),
                N::mask(),
                N::text(" news: "),
                N::meta("title").with_shortenable(false),
                N::text(" "),
                N::meta("description"),
            ],
        ),
    ]
}

/// Reference WordPiece: for each start offset, scan the whole vocabulary
/// for the longest matching piece, then walk the resulting jump table.
pub fn wordpiece_oracle(vocab: &Vocab, text: &str) -> Vec<u32> {
    let unk = vocab.id("[UNK]").unwrap();
    let mut out = Vec::new();
    for word in oracle_words(text) {
        if word.chars().count() > 100 {
            out.push(unk);
            continue;
        }
        let n = word.len();
        // best[i] = (end offset, id) of the longest piece starting at i
        let mut best: Vec<Option<(usize, u32)>> = vec![None; n];
        for (start, slot) in best.iter_mut().enumerate() {
            if !word.is_char_boundary(start) {
                continue;
            }
            for (id, piece) in vocab.tokens().iter().enumerate() {
                let surface = if start == 0 {
                    if piece.starts_with("##") {
                        continue;
                    }
                    piece.as_str()
                } else {
                    match piece.strip_prefix("##") {
                        Some(rest) => rest,
                        None => continue,
                    }
                };
                if surface.is_empty() || !word[start..].starts_with(surface) {
                    continue;
                }
                let end = start + surface.len();
                if slot.is_none_or(|(e, _)| end > e) {
                    *slot = Some((end, id as u32));
                }
            }
        }
        let mut pieces = Vec::new();
        let mut i = 0;
        while i < n {
            match best[i] {
                Some((end, id)) => {
                    pieces.push(id);
                    i = end;
                }
                None => {
                    pieces = vec![unk];
                    break;
                }
            }
        }
        out.extend(pieces);
    }
    out
}

fn oracle_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_whitespace() || c.is_ascii_punctuation() {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
            if c.is_ascii_punctuation() {
                words.push(c.to_string());
            }
        } else {
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

/// Textbook projection: explicit softmax probabilities, log taken after
/// normalization, no max-shift.
pub fn naive_project(
    logits: &[Vec<f64>],
    word_ids: &[Vec<Vec<u32>>],
    agg: Aggregation,
) -> Vec<f64> {
    let mut totals = vec![0.0; word_ids.len()];
    for row in logits {
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        let logp = |id: u32| (row[id as usize].exp() / z).ln();
        for (c, words) in word_ids.iter().enumerate() {
            let ws: Vec<f64> = words
                .iter()
                .map(|p| p.iter().map(|&id| logp(id)).sum::<f64>() / p.len() as f64)
                .collect();
            totals[c] += match agg {
                Aggregation::MeanLogProb => ws.iter().sum::<f64>() / ws.len() as f64,
                Aggregation::Max => ws.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                Aggregation::First => ws[0],
            };
        }
    }
    totals
}

pub fn naive_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}
