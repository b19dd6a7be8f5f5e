//! Label words, projection of mask-position logits onto classes, and
//! content-free calibration.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::{Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenization::{TokenizedInput, Tokenizer};

#[derive(Debug, Error)]
pub enum VerbalizerError {
    #[error("cannot read verbalizer file: {0}")]
    UnreadableFile(String),
    #[error("class {0:?} has no label words")]
    EmptyClass(String),
    #[error("class {0:?} is listed twice")]
    DuplicateClass(String),
    #[error("verbalizer has no classes")]
    NoClasses,
    #[error("label word {word:?} of class {class:?} tokenizes to nothing")]
    EmptyLabelWord { class: String, word: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("class lists differ between score sets")]
    ClassListMismatch,
}

/// A class order plus one or more label words per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Verbalizer {
    classes: Vec<String>,
    label_words: Vec<Vec<String>>,
    label_word_ids: Vec<Vec<Vec<u32>>>,
    vocab_size: usize,
}

/// Keeps file order and duplicate keys, which a map type would hide.
struct OrderedEntries(Vec<(String, Vec<String>)>);

impl<'de> Deserialize<'de> for OrderedEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct EntriesVisitor;
        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = OrderedEntries;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map from class name to a list of label words")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut entries = Vec::new();
                while let Some(entry) = map.next_entry::<String, Vec<String>>()? {
                    entries.push(entry);
                }
                Ok(OrderedEntries(entries))
            }
        }
        deserializer.deserialize_map(EntriesVisitor)
    }
}

impl Verbalizer {
    pub fn new(
        entries: Vec<(String, Vec<String>)>,
        tok: &Tokenizer,
    ) -> Result<Self, VerbalizerError> {
        if entries.is_empty() {
            return Err(VerbalizerError::NoClasses);
        }
        let mut classes: Vec<String> = Vec::with_capacity(entries.len());
        let mut label_words = Vec::with_capacity(entries.len());
        let mut label_word_ids = Vec::with_capacity(entries.len());
        for (class, words) in entries {
            if classes.contains(&class) {
                return Err(VerbalizerError::DuplicateClass(class));
            }
            if words.is_empty() {
                return Err(VerbalizerError::EmptyClass(class));
            }
            let mut ids = Vec::with_capacity(words.len());
            for word in &words {
                let pieces = tok.tokenize(word);
                if pieces.is_empty() {
                    return Err(VerbalizerError::EmptyLabelWord {
                        class,
                        word: word.clone(),
                    });
                }
                ids.push(pieces);
            }
            classes.push(class);
            label_words.push(words);
            label_word_ids.push(ids);
        }
        Ok(Verbalizer {
            classes,
            label_words,
            label_word_ids,
            vocab_size: tok.vocab().len(),
        })
    }

    pub fn from_json_str(json: &str, tok: &Tokenizer) -> Result<Self, VerbalizerError> {
        let OrderedEntries(entries) = serde_json::from_str(json)
            .map_err(|e| VerbalizerError::UnreadableFile(e.to_string()))?;
        Self::new(entries, tok)
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn label_words(&self, class: usize) -> &[String] {
        &self.label_words[class]
    }

    /// Subword ids of each label word of `class`.
    pub fn label_word_ids(&self, class: usize) -> &[Vec<u32>] {
        &self.label_word_ids[class]
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }
}

pub fn load_verbalizer(
    path: impl AsRef<Path>,
    tok: &Tokenizer,
) -> Result<Verbalizer, VerbalizerError> {
    let path = path.as_ref();
    let json = fs::read_to_string(path)
        .map_err(|e| VerbalizerError::UnreadableFile(format!("{}: {e}", path.display())))?;
    Verbalizer::from_json_str(&json, tok)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    MeanLogProb,
    Max,
    First,
}

impl Aggregation {
    fn combine(self, word_scores: &[f64]) -> f64 {
        match self {
            Aggregation::MeanLogProb => word_scores.iter().sum::<f64>() / word_scores.len() as f64,
            Aggregation::Max => word_scores
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max),
            Aggregation::First => word_scores[0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScores {
    pub scores: Vec<f64>,
    pub predicted: usize,
}

impl ClassScores {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let predicted = argmax(&scores);
        ClassScores { scores, predicted }
    }

    /// Scores renormalized into a log-distribution over classes.
    pub fn normalized(&self) -> Vec<f64> {
        log_softmax(&self.scores)
    }
}

/// First index of the maximum; NaN never wins.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] || values[best].is_nan() {
            best = i;
        }
    }
    best
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return row.iter().map(|&x| x - max).collect();
    }
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}

/// Prior log-probability of every label word, per mask position, measured on
/// a content-free input. Indexed `[position][class][word]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationPrior {
    pub per_position: Vec<Vec<Vec<f64>>>,
}

fn word_log_probs(log_probs: &[f64], v: &Verbalizer) -> Vec<Vec<f64>> {
    v.label_word_ids
        .iter()
        .map(|words| {
            words
                .iter()
                .map(|pieces| {
                    pieces.iter().map(|&id| log_probs[id as usize]).sum::<f64>()
                        / pieces.len() as f64
                })
                .collect()
        })
        .collect()
}

fn check_rows(logits: &[Vec<f64>], vocab_size: usize) -> Result<(), VerbalizerError> {
    if logits.is_empty() {
        return Err(VerbalizerError::DimensionMismatch(
            "no mask positions".into(),
        ));
    }
    if let Some((i, row)) = logits
        .iter()
        .enumerate()
        .find(|(_, r)| r.len() != vocab_size)
    {
        return Err(VerbalizerError::DimensionMismatch(format!(
            "row {i} has {} logits, vocab has {vocab_size}",
            row.len()
        )));
    }
    Ok(())
}

/// Projects one logits row per mask position onto classes. Each word scores
/// as the mean log-probability of its subwords; words combine per class by
/// `aggregation`; positions combine by summation.
pub fn project(
    logits: &[Vec<f64>],
    v: &Verbalizer,
    aggregation: Aggregation,
) -> Result<ClassScores, VerbalizerError> {
    project_calibrated(logits, v, aggregation, None)
}

pub fn project_calibrated(
    logits: &[Vec<f64>],
    v: &Verbalizer,
    aggregation: Aggregation,
    prior: Option<&CalibrationPrior>,
) -> Result<ClassScores, VerbalizerError> {
    let per_position = vec![v; logits.len()];
    project_positions(logits, &per_position, aggregation, prior)
}

/// Like [`project_calibrated`] with a separate verbalizer for each mask
/// position. All verbalizers must share one class list.
pub fn project_positions(
    logits: &[Vec<f64>],
    verbalizers: &[&Verbalizer],
    aggregation: Aggregation,
    prior: Option<&CalibrationPrior>,
) -> Result<ClassScores, VerbalizerError> {
    let Some(first) = verbalizers.first() else {
        return Err(VerbalizerError::DimensionMismatch(
            "no mask positions".into(),
        ));
    };
    if verbalizers.len() != logits.len() {
        return Err(VerbalizerError::DimensionMismatch(format!(
            "{} verbalizers for {} mask positions",
            verbalizers.len(),
            logits.len()
        )));
    }
    if verbalizers.iter().any(|v| v.classes != first.classes) {
        return Err(VerbalizerError::ClassListMismatch);
    }
    check_rows(logits, first.vocab_size)?;
    if let Some(p) = prior {
        if p.per_position.len() != logits.len() {
            return Err(VerbalizerError::DimensionMismatch(format!(
                "calibration prior covers {} positions, input has {}",
                p.per_position.len(),
                logits.len()
            )));
        }
    }

    let mut totals = vec![0.0; first.num_classes()];
    for (pos, (row, v)) in logits.iter().zip(verbalizers).enumerate() {
        let mut words = word_log_probs(&log_softmax(row), v);
        if let Some(p) = prior {
            let pw = &p.per_position[pos];
            if pw.len() != words.len() || pw.iter().zip(&words).any(|(a, b)| a.len() != b.len()) {
                return Err(VerbalizerError::DimensionMismatch(
                    "calibration prior was built for a different verbalizer".into(),
                ));
            }
            for (class_words, class_prior) in words.iter_mut().zip(pw) {
                for (w, p) in class_words.iter_mut().zip(class_prior) {
                    *w -= p;
                }
            }
        }
        for (total, class_words) in totals.iter_mut().zip(&words) {
            *total += aggregation.combine(class_words);
        }
    }
    Ok(ClassScores::from_scores(totals))
}

/// Measures label-word priors by scoring the content-free input.
pub fn calibrate<F, E>(
    scores_fn: F,
    v: &Verbalizer,
    content_free_input: &TokenizedInput,
) -> Result<CalibrationPrior, E>
where
    F: FnOnce(&TokenizedInput) -> Result<Vec<Vec<f64>>, E>,
    E: From<VerbalizerError>,
{
    let logits = scores_fn(content_free_input)?;
    check_rows(&logits, v.vocab_size)?;
    Ok(CalibrationPrior {
        per_position: logits
            .iter()
            .map(|row| word_log_probs(&log_softmax(row), v))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenization::{build_tokenizer, TokenizerKind, Vocab};

    const WORDS: [&str; 4] = ["bad", "good", "wonderful", "great"];

    fn tok() -> Tokenizer {
        let mut toks = vec!["[PAD]", "[UNK]", "[MASK]", "[CLS]", "[SEP]"];
        toks.extend(WORDS);
        toks.extend(["won", "##der", "##ful"]);
        let v = Vocab::from_tokens(toks.into_iter().map(String::from).collect()).unwrap();
        build_tokenizer(TokenizerKind::WordPiece, v).unwrap()
    }

    fn fig3() -> Verbalizer {
        Verbalizer::from_json_str(
            r#"{"negative": ["bad"], "positive": ["good", "wonderful", "great"]}"#,
            &tok(),
        )
        .unwrap()
    }

    /// A row whose log-softmax puts the given log-probs on the label words.
    fn row_with_log_probs(lp: [f64; 4]) -> Vec<f64> {
        let mass: f64 = lp.iter().map(|x| x.exp()).sum();
        assert!(mass < 1.0);
        let rest = (1.0 - mass) / 8.0;
        let mut row = vec![rest.ln(); 12];
        for (i, x) in lp.iter().enumerate() {
            row[5 + i] = *x;
        }
        row
    }

    #[test]
    fn load_shapes() {
        let v = fig3();
        assert_eq!(v.classes(), ["negative", "positive"]);
        assert_eq!(v.label_words(0).len(), 1);
        assert_eq!(v.label_words(1).len(), 3);
        assert!(matches!(
            Verbalizer::from_json_str(r#"{"positive": []}"#, &tok()),
            Err(VerbalizerError::EmptyClass(_))
        ));
        assert!(matches!(
            Verbalizer::from_json_str(r#"{"a": ["bad"], "a": ["good"]}"#, &tok()),
            Err(VerbalizerError::DuplicateClass(_))
        ));
        assert!(matches!(
            Verbalizer::from_json_str("[1]", &tok()),
            Err(VerbalizerError::UnreadableFile(_))
        ));
        assert!(matches!(
            load_verbalizer("/nonexistent/verbalizer.json", &tok()),
            Err(VerbalizerError::UnreadableFile(_))
        ));
        let single = Verbalizer::from_json_str(r#"{"a": ["x"]}"#, &tok()).unwrap();
        assert_eq!(single.num_classes(), 1);
    }

    #[test]
    fn class_order_follows_file() {
        let v = Verbalizer::from_json_str(r#"{"z": ["bad"], "a": ["good"]}"#, &tok()).unwrap();
        assert_eq!(v.classes(), ["z", "a"]);
    }

    /// Raw logits carrying the given values on the label words and nothing
    /// elsewhere. The values need not form a distribution; log-softmax shifts
    /// all of them by the same constant, returned alongside.
    fn label_word_logits(values: [f64; 4]) -> (Vec<f64>, f64) {
        let mut row = vec![f64::NEG_INFINITY; 12];
        row[5..9].copy_from_slice(&values);
        let shift = values.iter().map(|x| x.exp()).sum::<f64>().ln();
        (row, shift)
    }

    #[test]
    fn mean_log_prob_projection() {
        let (row, c) = label_word_logits([-2.0, -1.0, -1.5, -0.5]);
        let s = project(&[row], &fig3(), Aggregation::MeanLogProb).unwrap();
        // negative: -2.0; positive: (-1.0 - 1.5 - 0.5) / 3 = -1.0; both minus c
        assert!((s.scores[0] - (-2.0 - c)).abs() < 1e-12);
        assert!((s.scores[1] - (-1.0 - c)).abs() < 1e-12);
        assert_eq!(s.predicted, 1);

        let row = row_with_log_probs([-2.5, -1.5, -2.0, -1.0]);
        let s = project(&[row], &fig3(), Aggregation::MeanLogProb).unwrap();
        assert!((s.scores[0] - -2.5).abs() < 1e-12);
        assert!((s.scores[1] - -1.5).abs() < 1e-12);
    }

    #[test]
    fn max_and_first() {
        let (row, c) = label_word_logits([-2.0, -1.0, -1.5, -0.5]);
        let max = project(std::slice::from_ref(&row), &fig3(), Aggregation::Max).unwrap();
        assert!((max.scores[1] - (-0.5 - c)).abs() < 1e-12);
        let first = project(&[row], &fig3(), Aggregation::First).unwrap();
        assert!((first.scores[1] - (-1.0 - c)).abs() < 1e-12);
    }

    #[test]
    fn uniform_ties_to_first_class() {
        let s = project(&[vec![0.3; 12]], &fig3(), Aggregation::MeanLogProb).unwrap();
        assert_eq!(s.scores[0], s.scores[1]);
        assert_eq!(s.predicted, 0);
    }

    #[test]
    fn two_positions_double() {
        let row = row_with_log_probs([-2.5, -1.5, -2.0, -1.0]);
        let one = project(
            std::slice::from_ref(&row),
            &fig3(),
            Aggregation::MeanLogProb,
        )
        .unwrap();
        let two = project(&[row.clone(), row], &fig3(), Aggregation::MeanLogProb).unwrap();
        for (a, b) in one.scores.iter().zip(&two.scores) {
            assert_eq!(2.0 * a, *b);
        }
        assert_eq!(one.predicted, two.predicted);
    }

    #[test]
    fn subword_label_word_averages() {
        let v = Verbalizer::from_json_str(r#"{"x": ["wonder"], "y": ["bad"]}"#, &tok()).unwrap();
        // "wonder" -> won ##der (ids 9, 10)
        assert_eq!(v.label_word_ids(0), &[vec![9, 10]]);
        let mut row = vec![0.0; 12];
        row[9] = 1.0;
        row[10] = 3.0;
        let s = project(std::slice::from_ref(&row), &v, Aggregation::MeanLogProb).unwrap();
        let lp = log_softmax(&row);
        assert!((s.scores[0] - (lp[9] + lp[10]) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_errors() {
        assert!(matches!(
            project(&[vec![0.0; 3]], &fig3(), Aggregation::MeanLogProb),
            Err(VerbalizerError::DimensionMismatch(_))
        ));
        assert!(matches!(
            project(&[], &fig3(), Aggregation::MeanLogProb),
            Err(VerbalizerError::DimensionMismatch(_))
        ));
    }

    fn dummy_input() -> TokenizedInput {
        TokenizedInput {
            input_ids: vec![2],
            attention_mask: vec![1],
            loss_ids: vec![1],
            shortenable_ids: vec![0],
            soft_slot_ids: vec![-1],
            mask_positions: vec![0],
        }
    }

    #[test]
    fn great_prior_breaks_tie_toward_negative() {
        let v = fig3();
        let raw = row_with_log_probs([-2.0, -2.0, -2.0, -2.0]);
        let uncal = project(std::slice::from_ref(&raw), &v, Aggregation::MeanLogProb).unwrap();
        assert_eq!(uncal.scores[0], uncal.scores[1]);

        let prior_row = row_with_log_probs([-3.0, -3.0, -3.0, -2.0]);
        let prior = calibrate(
            |_| Ok::<_, VerbalizerError>(vec![prior_row]),
            &v,
            &dummy_input(),
        )
        .unwrap();
        let cal = project_calibrated(&[raw], &v, Aggregation::MeanLogProb, Some(&prior)).unwrap();
        // negative: -2 - (-3) = 1; positive: mean(1, 1, 0) = 2/3
        assert!((cal.scores[0] - 1.0).abs() < 1e-12);
        assert!((cal.scores[1] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(cal.predicted, 0);
    }

    #[test]
    fn calibration_propagates_scorer_error() {
        let r = calibrate(
            |_| Err(VerbalizerError::DimensionMismatch("boom".into())),
            &fig3(),
            &dummy_input(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn per_position_verbalizers_need_same_classes() {
        let a = fig3();
        let b =
            Verbalizer::from_json_str(r#"{"negative": ["bad"], "positive": ["great"]}"#, &tok())
                .unwrap();
        let c = Verbalizer::from_json_str(r#"{"neg": ["bad"], "pos": ["great"]}"#, &tok()).unwrap();
        let row = row_with_log_probs([-2.5, -1.5, -2.0, -1.0]);
        let s = project_positions(
            &[row.clone(), row.clone()],
            &[&a, &b],
            Aggregation::MeanLogProb,
            None,
        )
        .unwrap();
        assert!((s.scores[1] - (-1.5 + -1.0)).abs() < 1e-12);
        assert!(matches!(
            project_positions(
                &[row.clone(), row],
                &[&a, &c],
                Aggregation::MeanLogProb,
                None
            ),
            Err(VerbalizerError::ClassListMismatch)
        ));
    }

    #[test]
    fn normalized_sums_to_one() {
        let s = ClassScores::from_scores(vec![-3.0, -1.0, -2.5]);
        let total: f64 = s.normalized().iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
}
