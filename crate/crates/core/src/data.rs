//! JSONL datasets and few-shot sampling.
//!
//! Sampling uses SplitMix64 so the selection can be reproduced bit-exactly
//! outside Rust:
//!
//! 1. A root generator is seeded with the user seed.
//! 2. Each class, in class order, takes the next root output as its own seed.
//! 3. The class's labeled examples (in dataset order) are shuffled with
//!    Fisher–Yates: for `i` from `n-1` down to `1`, swap `i` with
//!    `next_u64() % (i + 1)`.
//! 4. The first `k` shuffled examples are kept.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::wrapping::InputExample;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read dataset: {0}")]
    Io(#[from] io::Error),
    #[error("line {line_no}: {message}")]
    MalformedLine { line_no: usize, message: String },
    #[error("duplicate guid {0:?}")]
    DuplicateGuid(String),
    #[error("class {class:?} has {have} labeled examples, {need} requested")]
    InsufficientExamples {
        class: String,
        have: usize,
        need: usize,
    },
    #[error("k_per_class must be positive")]
    ZeroK,
    #[error("samples overlap on guid {0:?}")]
    Overlap(String),
}

/// SplitMix64 (Steele, Lea & Flood), the usual seeding generator for the
/// xoshiro family.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = (self.next_u64() % (i as u64 + 1)) as usize;
            items.swap(i, j);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    examples: Vec<InputExample>,
    label_set: Vec<String>,
}

impl Dataset {
    pub fn new(examples: Vec<InputExample>) -> Result<Self, DataError> {
        let mut seen = HashSet::with_capacity(examples.len());
        let mut label_set: Vec<String> = Vec::new();
        for ex in &examples {
            if !seen.insert(ex.guid.as_str()) {
                return Err(DataError::DuplicateGuid(ex.guid.clone()));
            }
            if let Some(label) = &ex.label {
                if !label_set.contains(label) {
                    label_set.push(label.clone());
                }
            }
        }
        Ok(Dataset {
            examples,
            label_set,
        })
    }

    pub fn examples(&self) -> &[InputExample] {
        &self.examples
    }

    /// Observed labels in first-appearance order.
    pub fn label_set(&self) -> &[String] {
        &self.label_set
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for ex in &self.examples {
            serde_json::to_writer(&mut out, ex)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct RawRecord {
    guid: String,
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    #[serde(default)]
    text_a: Option<String>,
    #[serde(default)]
    text_b: Option<String>,
}

/// Reads one JSON object per line; blank lines are skipped. Legacy
/// `text_a`/`text_b` fields are folded into `meta`.
pub fn parse_jsonl<R: BufRead>(reader: R) -> Result<Dataset, DataError> {
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| DataError::MalformedLine {
            line_no: i + 1,
            message,
        };
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if raw.guid.is_empty() {
            return Err(malformed("empty guid".into()));
        }
        let mut meta = raw.meta;
        for (key, value) in [("text_a", raw.text_a), ("text_b", raw.text_b)] {
            if let Some(value) = value {
                if meta.insert(key.to_string(), value).is_some() {
                    return Err(malformed(format!("{key} given both inline and in meta")));
                }
            }
        }
        examples.push(InputExample {
            guid: raw.guid,
            label: raw.label,
            meta,
        });
    }
    Dataset::new(examples)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    parse_jsonl(BufReader::new(File::open(path)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleConfig {
    pub k_per_class: usize,
    pub seed: u64,
    /// Take every example of an undersized class (with a warning) instead
    /// of failing.
    pub allow_fewer: bool,
}

impl SampleConfig {
    pub fn new(k_per_class: usize, seed: u64) -> Self {
        SampleConfig {
            k_per_class,
            seed,
            allow_fewer: false,
        }
    }
}

/// Draws `k_per_class` labeled examples per class. Unlabeled examples are
/// never sampled. Output is grouped by class order, then sampled order.
pub fn fewshot_sample(d: &Dataset, cfg: &SampleConfig) -> Result<Dataset, DataError> {
    if cfg.k_per_class == 0 {
        return Err(DataError::ZeroK);
    }
    let mut root = SplitMix64::new(cfg.seed);
    let class_seeds: Vec<u64> = d.label_set.iter().map(|_| root.next_u64()).collect();

    let picks: Vec<Vec<usize>> = d
        .label_set
        .par_iter()
        .zip(class_seeds)
        .map(|(class, seed)| {
            let mut members: Vec<usize> = d
                .examples
                .iter()
                .enumerate()
                .filter(|(_, ex)| ex.label.as_deref() == Some(class.as_str()))
                .map(|(i, _)| i)
                .collect();
            if members.len() < cfg.k_per_class {
                if !cfg.allow_fewer {
                    return Err(DataError::InsufficientExamples {
                        class: class.clone(),
                        have: members.len(),
                        need: cfg.k_per_class,
                    });
                }
                warn!(
                    "class {class:?} has only {} examples, wanted {}",
                    members.len(),
                    cfg.k_per_class
                );
            }
            SplitMix64::new(seed).shuffle(&mut members);
            members.truncate(cfg.k_per_class);
            Ok(members)
        })
        .collect::<Result<_, _>>()?;

    let examples = picks
        .into_iter()
        .flatten()
        .map(|i| d.examples[i].clone())
        .collect();
    Dataset::new(examples)
}

/// Fails if any guid appears in both datasets, e.g. a train and a dev sample.
pub fn check_disjoint(a: &Dataset, b: &Dataset) -> Result<(), DataError> {
    let guids: HashSet<&str> = a.examples.iter().map(|e| e.guid.as_str()).collect();
    match b.examples.iter().find(|e| guids.contains(e.guid.as_str())) {
        Some(e) => Err(DataError::Overlap(e.guid.clone())),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // Reference outputs of SplitMix64 seeded with 0 (as used to seed
        // xoshiro256** in its reference implementation).
        let mut r = SplitMix64::new(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(r.next_u64(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut v: Vec<u32> = (0..50).collect();
        SplitMix64::new(42).shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }

    fn lines(text: &str) -> Result<Dataset, DataError> {
        parse_jsonl(text.as_bytes())
    }

    #[test]
    fn loads_lines_in_order() {
        let d = lines(
            r#"{"guid": "1", "label": "a", "meta": {"text": "x"}}
{"guid": "2", "label": "b", "meta": {"text": "y"}}

{"guid": "3", "meta": {"text": "z"}}
"#,
        )
        .unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.label_set(), ["a", "b"]);
        assert_eq!(d.examples()[2].label, None);
    }

    #[test]
    fn legacy_text_fields() {
        let d = lines(r#"{"guid": "1", "text_a": "hello", "text_b": "there"}"#).unwrap();
        assert_eq!(d.examples()[0].meta["text_a"], "hello");
        assert_eq!(d.examples()[0].meta["text_b"], "there");
    }

    #[test]
    fn load_errors() {
        assert!(matches!(
            lines("{\"guid\": \"1\"}\n{\"guid\": \"1\"}\n"),
            Err(DataError::DuplicateGuid(g)) if g == "1"
        ));
        assert!(matches!(
            lines("{\"guid\": \"1\"}\nnot json\n"),
            Err(DataError::MalformedLine { line_no: 2, .. })
        ));
        assert!(matches!(
            lines("{\"label\": \"a\"}\n"),
            Err(DataError::MalformedLine { line_no: 1, .. })
        ));
        assert!(matches!(
            lines("{\"guid\": \"\"}\n"),
            Err(DataError::MalformedLine { line_no: 1, .. })
        ));
    }

    fn toy(per_class: usize) -> Dataset {
        let examples = (0..per_class * 2)
            .map(|i| {
                InputExample::new(format!("g{i}"))
                    .with_label(if i % 2 == 0 { "even" } else { "odd" })
                    .with_meta("text", i.to_string())
            })
            .chain([InputExample::new("unlabeled")])
            .collect();
        Dataset::new(examples).unwrap()
    }

    #[test]
    fn balanced_and_deterministic() {
        let d = toy(5);
        let cfg = SampleConfig::new(2, 7);
        let a = fewshot_sample(&d, &cfg).unwrap();
        assert_eq!(a.len(), 4);
        let labels: Vec<_> = a
            .examples()
            .iter()
            .map(|e| e.label.clone().unwrap())
            .collect();
        assert_eq!(labels, ["even", "even", "odd", "odd"]);
        assert_eq!(a, fewshot_sample(&d, &cfg).unwrap());
        assert_ne!(a, fewshot_sample(&d, &SampleConfig::new(2, 8)).unwrap());
    }

    #[test]
    fn whole_class_when_k_matches() {
        let d = toy(5);
        let s = fewshot_sample(&d, &SampleConfig::new(5, 3)).unwrap();
        assert_eq!(s.len(), 10);
        assert!(s.examples().iter().all(|e| e.guid != "unlabeled"));
    }

    #[test]
    fn insufficient_examples() {
        let d = toy(3);
        assert!(matches!(
            fewshot_sample(&d, &SampleConfig::new(4, 1)),
            Err(DataError::InsufficientExamples {
                have: 3,
                need: 4,
                ..
            })
        ));
        let lenient = SampleConfig {
            allow_fewer: true,
            ..SampleConfig::new(4, 1)
        };
        assert_eq!(fewshot_sample(&d, &lenient).unwrap().len(), 6);
        assert!(matches!(
            fewshot_sample(&d, &SampleConfig::new(0, 1)),
            Err(DataError::ZeroK)
        ));
    }

    #[test]
    fn disjointness() {
        let d = toy(5);
        let a = fewshot_sample(&d, &SampleConfig::new(2, 1)).unwrap();
        assert!(check_disjoint(&a, &a).is_err());
        let rest = Dataset::new(
            d.examples()
                .iter()
                .filter(|e| !a.examples().contains(e))
                .cloned()
                .collect(),
        )
        .unwrap();
        assert!(check_disjoint(&a, &rest).is_ok());
    }

    #[test]
    fn writes_same_format() {
        let d = lines(r#"{"guid":"1","label":"a","meta":{"text":"x"}}"#).unwrap();
        let mut buf = Vec::new();
        d.write_jsonl(&mut buf).unwrap();
        assert_eq!(lines(std::str::from_utf8(&buf).unwrap()).unwrap(), d);
    }
}
