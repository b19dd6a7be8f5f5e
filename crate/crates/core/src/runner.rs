//! Configuration-driven pipeline: wrap, encode, score, project, ensemble and
//! evaluate.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{fewshot_sample, load_jsonl, Dataset, SampleConfig};
use crate::soft_plan::{build_soft_plan, SoftEmbeddingPlan};
use crate::template::{load_template_file, validate_template, Diagnostic, TemplateAst};
use crate::tokenization::{
    build_tokenizer, encode_wrapped, EncodeOptions, PlmKind, TokenizedInput, Tokenizer,
    TokenizerKind, Vocab, MASK,
};
use crate::verbalizer::{
    calibrate, load_verbalizer, project_calibrated, Aggregation, CalibrationPrior, ClassScores,
    Verbalizer, VerbalizerError,
};
use crate::wrapping::{content_free_example, wrap_example, InputExample, CONTENT_FREE_GUID};

/// Env var capping the worker thread count.
pub const THREADS_ENV: &str = "PROMPT_PIPE_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelInterface {
    /// Precomputed logits, one JSON line per (guid, template).
    LogitsFile(PathBuf),
    /// Context-independent scores from a token → score JSON map.
    ToyScorer(PathBuf),
}

fn default_max_len() -> usize {
    128
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub templates: Vec<PathBuf>,
    pub dataset: PathBuf,
    pub vocab: PathBuf,
    #[serde(default)]
    pub tokenizer: TokenizerKind,
    #[serde(default)]
    pub plm: PlmKind,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_true")]
    pub add_special_tokens: bool,
    pub verbalizer: PathBuf,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub calibrate: bool,
    #[serde(default)]
    pub seed: u64,
    /// Few-shot sample this many examples per class before running.
    #[serde(default)]
    pub fewshot_k: Option<usize>,
    pub model: ModelInterface,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub threads: Option<usize>,
}

impl PipelineConfig {
    /// Reads a JSON config; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| PipelineError::setup(e, path))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| PipelineError::setup(e, path))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_relative_to(base);
        Ok(cfg)
    }

    pub fn resolve_relative_to(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.templates.iter_mut().for_each(fix);
        fix(&mut self.dataset);
        fix(&mut self.vocab);
        fix(&mut self.verbalizer);
        match &mut self.model {
            ModelInterface::LogitsFile(p) | ModelInterface::ToyScorer(p) => fix(p),
        }
        if let Some(p) = &mut self.output {
            fix(p);
        }
    }

    fn validate(&self) -> Result<(), PipelineError> {
        if self.templates.is_empty() {
            return Err(PipelineError::setup_msg(
                "at least one template file is required",
            ));
        }
        let mut paths: Vec<&Path> = self.templates.iter().map(PathBuf::as_path).collect();
        paths.extend([
            self.dataset.as_path(),
            self.vocab.as_path(),
            self.verbalizer.as_path(),
        ]);
        match &self.model {
            ModelInterface::LogitsFile(p) | ModelInterface::ToyScorer(p) => paths.push(p),
        }
        if let Some(missing) = paths.iter().find(|p| !p.exists()) {
            return Err(PipelineError::setup_msg(format!(
                "{} does not exist",
                missing.display()
            )));
        }
        Ok(())
    }

    pub fn encode_options(&self) -> EncodeOptions {
        EncodeOptions::new(self.max_len)
            .with_special_tokens(self.add_special_tokens)
            .with_plm(self.plm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Setup,
    Wrap,
    Encode,
    Score,
    Project,
    Ensemble,
    Evaluate,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Setup => "setup",
            Stage::Wrap => "wrap",
            Stage::Encode => "encode",
            Stage::Score => "score",
            Stage::Project => "project",
            Stage::Ensemble => "ensemble",
            Stage::Evaluate => "evaluate",
            Stage::Output => "output",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
#[error("{stage} failed{}: {message}", guid.as_ref().map(|g| format!(" for example {g:?}")).unwrap_or_default())]
pub struct PipelineError {
    pub stage: Stage,
    pub guid: Option<String>,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: Stage, guid: Option<&str>, err: impl fmt::Display) -> Self {
        PipelineError {
            stage,
            guid: guid.map(str::to_string),
            message: err.to_string(),
        }
    }

    fn setup(err: impl fmt::Display, path: &Path) -> Self {
        Self::new(Stage::Setup, None, format!("{}: {err}", path.display()))
    }

    fn setup_msg(msg: impl fmt::Display) -> Self {
        Self::new(Stage::Setup, None, msg)
    }
}

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("no logits for guid {guid:?} (template {template})")]
    MissingGuid { guid: String, template: usize },
    #[error(transparent)]
    Verbalizer(#[from] VerbalizerError),
    #[error("{0}")]
    Invalid(String),
}

/// Stand-in for a PLM: returns one vocabulary-sized logits row per mask
/// position of an encoded input.
pub trait MaskScorer: Send + Sync {
    fn mask_logits(
        &self,
        guid: &str,
        template: usize,
        input: &TokenizedInput,
    ) -> Result<Vec<Vec<f64>>, ScoreError>;
}

/// Context-independent scorer: every mask position gets the same row.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyScorer {
    row: Vec<f64>,
}

impl ToyScorer {
    /// Tokens absent from `scores` get 0.0.
    pub fn new(scores: &BTreeMap<String, f64>, vocab: &Vocab) -> Result<Self, ScoreError> {
        let mut row = vec![0.0; vocab.len()];
        for (token, &score) in scores {
            let id = vocab.id(token).ok_or_else(|| {
                ScoreError::Invalid(format!("token {token:?} is not in the vocab"))
            })?;
            row[id as usize] = score;
        }
        Ok(ToyScorer { row })
    }

    pub fn load(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Self, ScoreError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| ScoreError::Invalid(format!("{}: {e}", path.display())))?;
        let scores: BTreeMap<String, f64> = serde_json::from_str(&text)
            .map_err(|e| ScoreError::Invalid(format!("{}: {e}", path.display())))?;
        Self::new(&scores, vocab)
    }

    pub fn row(&self) -> &[f64] {
        &self.row
    }
}

impl MaskScorer for ToyScorer {
    fn mask_logits(
        &self,
        _guid: &str,
        _template: usize,
        input: &TokenizedInput,
    ) -> Result<Vec<Vec<f64>>, ScoreError> {
        Ok(vec![self.row.clone(); input.mask_positions.len()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsRecord {
    pub guid: String,
    #[serde(default)]
    pub template: usize,
    pub mask_logits: Vec<Vec<f64>>,
}

/// Logits precomputed by an external model, keyed by (guid, template).
#[derive(Debug, Clone, Default)]
pub struct LogitsFileScorer {
    records: HashMap<(String, usize), Vec<Vec<f64>>>,
}

impl LogitsFileScorer {
    pub fn parse<R: BufRead>(reader: R) -> Result<Self, ScoreError> {
        let mut records = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| ScoreError::Invalid(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: LogitsRecord = serde_json::from_str(&line)
                .map_err(|e| ScoreError::Invalid(format!("logits line {}: {e}", i + 1)))?;
            if records
                .insert((rec.guid.clone(), rec.template), rec.mask_logits)
                .is_some()
            {
                return Err(ScoreError::Invalid(format!(
                    "logits line {}: guid {:?} repeated",
                    i + 1,
                    rec.guid
                )));
            }
        }
        Ok(LogitsFileScorer { records })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScoreError> {
        let path = path.as_ref();
        let file = File::open(path)
            .map_err(|e| ScoreError::Invalid(format!("{}: {e}", path.display())))?;
        Self::parse(BufReader::new(file))
    }

    pub fn records(&self) -> impl Iterator<Item = (&str, usize, &[Vec<f64>])> {
        self.records
            .iter()
            .map(|((g, t), rows)| (g.as_str(), *t, rows.as_slice()))
    }
}

impl MaskScorer for LogitsFileScorer {
    fn mask_logits(
        &self,
        guid: &str,
        template: usize,
        _input: &TokenizedInput,
    ) -> Result<Vec<Vec<f64>>, ScoreError> {
        self.records
            .get(&(guid.to_string(), template))
            .cloned()
            .ok_or_else(|| ScoreError::MissingGuid {
                guid: guid.to_string(),
                template,
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnsembleError {
    #[error("nothing to ensemble")]
    Empty,
    #[error("score sets have different class counts")]
    ClassListMismatch,
}

/// Per-class mean over templates, argmax with lowest-index tie-break.
pub fn ensemble_scores(per_template: &[ClassScores]) -> Result<ClassScores, EnsembleError> {
    let first = per_template.first().ok_or(EnsembleError::Empty)?;
    if per_template.len() == 1 {
        return Ok(first.clone());
    }
    let n = first.scores.len();
    if per_template.iter().any(|s| s.scores.len() != n) {
        return Err(EnsembleError::ClassListMismatch);
    }
    let k = per_template.len() as f64;
    let means = (0..n)
        .map(|c| per_template.iter().map(|s| s.scores[c]).sum::<f64>() / k)
        .collect();
    Ok(ClassScores::from_scores(means))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("no gold labels")]
    EmptyGold,
    #[error("prediction and gold lists are not aligned at index {index}")]
    GuidMismatch { index: usize },
}

/// Fraction of `(guid, class)` predictions matching the gold list, which
/// must be aligned by guid.
pub fn evaluate_accuracy(
    preds: &[(String, String)],
    golds: &[(String, String)],
) -> Result<f64, EvalError> {
    if golds.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    if preds.len() != golds.len() {
        return Err(EvalError::GuidMismatch {
            index: preds.len().min(golds.len()),
        });
    }
    let mut correct = 0usize;
    for (index, (p, g)) in preds.iter().zip(golds).enumerate() {
        if p.0 != g.0 {
            return Err(EvalError::GuidMismatch { index });
        }
        correct += (p.1 == g.1) as usize;
    }
    Ok(correct as f64 / golds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExampleResult {
    pub guid: String,
    pub wrapped_text: String,
    pub predicted_class: String,
    pub class_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    #[serde(skip)]
    pub results: Vec<ExampleResult>,
    pub examples: usize,
    pub labeled: usize,
    pub accuracy: Option<f64>,
}

impl RunReport {
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for r in &self.results {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }
}

pub struct PreparedTemplate {
    pub ast: TemplateAst,
    pub plan: SoftEmbeddingPlan,
    pub prior: Option<CalibrationPrior>,
}

/// All immutable pipeline state; examples are scored independently.
pub struct Pipeline {
    templates: Vec<PreparedTemplate>,
    tokenizer: Tokenizer,
    verbalizer: Verbalizer,
    aggregation: Aggregation,
    encode: EncodeOptions,
    scorer: Box<dyn MaskScorer>,
}

impl Pipeline {
    pub fn new(
        templates: Vec<TemplateAst>,
        tokenizer: Tokenizer,
        verbalizer: Verbalizer,
        scorer: Box<dyn MaskScorer>,
        aggregation: Aggregation,
        encode: EncodeOptions,
        calibrated: bool,
    ) -> Result<Self, PipelineError> {
        if templates.is_empty() {
            return Err(PipelineError::setup_msg("no templates"));
        }
        let mut prepared = Vec::with_capacity(templates.len());
        for (idx, ast) in templates.into_iter().enumerate() {
            if ast.mask_count() == 0 {
                return Err(PipelineError::setup_msg(format!(
                    "template {idx}: {}",
                    Diagnostic::NoMaskNode
                )));
            }
            let plan = build_soft_plan(&ast, &tokenizer)
                .map_err(|e| PipelineError::new(Stage::Setup, None, e))?;
            prepared.push(PreparedTemplate {
                ast,
                plan,
                prior: None,
            });
        }
        let mut pipeline = Pipeline {
            templates: prepared,
            tokenizer,
            verbalizer,
            aggregation,
            encode,
            scorer,
        };
        if calibrated {
            for idx in 0..pipeline.templates.len() {
                let prior = pipeline.content_free_prior(idx)?;
                pipeline.templates[idx].prior = Some(prior);
            }
        }
        Ok(pipeline)
    }

    fn content_free_prior(&self, idx: usize) -> Result<CalibrationPrior, PipelineError> {
        let t = &self.templates[idx];
        let example = content_free_example(&t.ast);
        let guid = Some(CONTENT_FREE_GUID);
        let wrapped = wrap_example(&t.ast, &t.plan, &example)
            .map_err(|e| PipelineError::new(Stage::Wrap, guid, e))?;
        let input = encode_wrapped(&wrapped, &self.tokenizer, &self.encode)
            .map_err(|e| PipelineError::new(Stage::Encode, guid, e))?;
        calibrate(
            |inp| self.scorer.mask_logits(CONTENT_FREE_GUID, idx, inp),
            &self.verbalizer,
            &input,
        )
        .map_err(|e| PipelineError::new(Stage::Score, guid, e))
    }

    pub fn templates(&self) -> &[PreparedTemplate] {
        &self.templates
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn verbalizer(&self) -> &Verbalizer {
        &self.verbalizer
    }

    /// Wrap → encode → score → project for one template.
    pub fn score_with_template(
        &self,
        idx: usize,
        example: &InputExample,
    ) -> Result<(String, ClassScores), PipelineError> {
        let guid = Some(example.guid.as_str());
        let t = &self.templates[idx];
        let wrapped = wrap_example(&t.ast, &t.plan, example)
            .map_err(|e| PipelineError::new(Stage::Wrap, guid, e))?;
        let input = encode_wrapped(&wrapped, &self.tokenizer, &self.encode)
            .map_err(|e| PipelineError::new(Stage::Encode, guid, e))?;
        let logits = self
            .scorer
            .mask_logits(&example.guid, idx, &input)
            .map_err(|e| PipelineError::new(Stage::Score, guid, e))?;
        if logits.len() != input.mask_positions.len() {
            return Err(PipelineError::new(
                Stage::Score,
                guid,
                format!(
                    "{} logits rows for {} mask positions",
                    logits.len(),
                    input.mask_positions.len()
                ),
            ));
        }
        let scores = project_calibrated(
            &logits,
            &self.verbalizer,
            self.aggregation,
            t.prior.as_ref(),
        )
        .map_err(|e| PipelineError::new(Stage::Project, guid, e))?;
        Ok((wrapped.render(MASK), scores))
    }

    pub fn score_example(&self, example: &InputExample) -> Result<ExampleResult, PipelineError> {
        let mut per_template = Vec::with_capacity(self.templates.len());
        let mut wrapped_text = String::new();
        for idx in 0..self.templates.len() {
            let (text, scores) = self.score_with_template(idx, example)?;
            if idx == 0 {
                wrapped_text = text;
            }
            per_template.push(scores);
        }
        let scores = ensemble_scores(&per_template)
            .map_err(|e| PipelineError::new(Stage::Ensemble, Some(&example.guid), e))?;
        Ok(ExampleResult {
            guid: example.guid.clone(),
            wrapped_text,
            predicted_class: self.verbalizer.classes()[scores.predicted].clone(),
            class_scores: scores.scores,
        })
    }

    /// Scores every example, in parallel, keeping dataset order. The first
    /// failing example in dataset order is reported.
    pub fn run(&self, dataset: &Dataset) -> Result<RunReport, PipelineError> {
        let outcomes: Vec<Result<ExampleResult, PipelineError>> = dataset
            .examples()
            .par_iter()
            .map(|ex| self.score_example(ex))
            .collect();
        let results = outcomes.into_iter().collect::<Result<Vec<_>, _>>()?;

        let (preds, golds): (Vec<_>, Vec<_>) = results
            .iter()
            .zip(dataset.examples())
            .filter_map(|(r, ex)| {
                ex.label.as_ref().map(|gold| {
                    (
                        (r.guid.clone(), r.predicted_class.clone()),
                        (ex.guid.clone(), gold.clone()),
                    )
                })
            })
            .unzip();
        let accuracy = if golds.is_empty() {
            None
        } else {
            Some(
                evaluate_accuracy(&preds, &golds)
                    .map_err(|e| PipelineError::new(Stage::Evaluate, None, e))?,
            )
        };
        Ok(RunReport {
            examples: results.len(),
            labeled: golds.len(),
            accuracy,
            results,
        })
    }
}

/// Thread count from the config, else from `PROMPT_PIPE_THREADS`, else
/// rayon's default (0).
pub fn resolve_threads(cfg_threads: Option<usize>) -> usize {
    cfg_threads
        .or_else(|| std::env::var(THREADS_ENV).ok()?.trim().parse().ok())
        .unwrap_or(0)
}

pub fn load_tokenizer(path: &Path, kind: TokenizerKind) -> Result<Tokenizer, PipelineError> {
    let vocab = Vocab::load(path).map_err(|e| PipelineError::setup(e, path))?;
    build_tokenizer(kind, vocab).map_err(|e| PipelineError::setup(e, path))
}

/// Builds the pipeline described by `cfg` and loads (and optionally
/// samples) its dataset.
pub fn prepare(cfg: &PipelineConfig) -> Result<(Pipeline, Dataset), PipelineError> {
    cfg.validate()?;
    let tokenizer = load_tokenizer(&cfg.vocab, cfg.tokenizer)?;
    let mut templates = Vec::new();
    for path in &cfg.templates {
        let asts = load_template_file(path).map_err(|e| PipelineError::setup(e, path))?;
        if asts.is_empty() {
            return Err(PipelineError::setup("no templates in file", path));
        }
        templates.extend(asts);
    }
    let verbalizer = load_verbalizer(&cfg.verbalizer, &tokenizer)
        .map_err(|e| PipelineError::setup(e, &cfg.verbalizer))?;
    let mut dataset =
        load_jsonl(&cfg.dataset).map_err(|e| PipelineError::setup(e, &cfg.dataset))?;
    if let Some(k) = cfg.fewshot_k {
        dataset = fewshot_sample(&dataset, &SampleConfig::new(k, cfg.seed))
            .map_err(|e| PipelineError::setup(e, &cfg.dataset))?;
    }

    let known: BTreeSet<String> = dataset
        .examples()
        .iter()
        .flat_map(|e| e.meta.keys().cloned())
        .collect();
    for (i, ast) in templates.iter().enumerate() {
        for diag in validate_template(ast, &known) {
            if !dataset.is_empty() {
                warn!("template {i}: {diag}");
            }
        }
    }

    let scorer: Box<dyn MaskScorer> = match &cfg.model {
        ModelInterface::ToyScorer(path) => Box::new(
            ToyScorer::load(path, tokenizer.vocab()).map_err(|e| PipelineError::setup(e, path))?,
        ),
        ModelInterface::LogitsFile(path) => {
            Box::new(LogitsFileScorer::load(path).map_err(|e| PipelineError::setup(e, path))?)
        }
    };
    let pipeline = Pipeline::new(
        templates,
        tokenizer,
        verbalizer,
        scorer,
        cfg.aggregation,
        cfg.encode_options(),
        cfg.calibrate,
    )?;
    Ok((pipeline, dataset))
}

/// Runs the whole pipeline and writes the results file if configured.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(resolve_threads(cfg.threads))
        .build()
        .map_err(PipelineError::setup_msg)?;
    let report = pool.install(|| {
        let (pipeline, dataset) = prepare(cfg)?;
        pipeline.run(&dataset)
    })?;
    if let Some(path) = &cfg.output {
        let file = File::create(path).map_err(|e| PipelineError::new(Stage::Output, None, e))?;
        report
            .write_jsonl(BufWriter::new(file))
            .map_err(|e| PipelineError::new(Stage::Output, None, e))?;
    }
    Ok(report)
}
