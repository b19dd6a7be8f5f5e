use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::json;

use prompt_pipe::data::{fewshot_sample, load_jsonl, SampleConfig};
use prompt_pipe::runner::{
    load_tokenizer, run_pipeline, LogitsFileScorer, ModelInterface, PipelineConfig,
};
use prompt_pipe::soft_plan::{build_soft_plan, PlanVariant};
use prompt_pipe::template::{
    load_template_file, validate_classification_template, validate_template, TemplateAst,
};
use prompt_pipe::tokenization::{
    encode_wrapped, EncodeOptions, PlmKind, Tokenizer, TokenizerKind, MASK,
};
use prompt_pipe::verbalizer::{load_verbalizer, project, Aggregation};
use prompt_pipe::wrapping::wrap_example;

/// Parses a value by its serde (snake_case) name.
fn serde_name<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Parser)]
#[command(
    name = "prompt-pipe",
    version,
    about = "Prompt-learning template and scoring pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a template file and print each template's nodes as JSON
    Parse {
        template_file: PathBuf,
        /// Comma-separated meta keys to validate against
        #[arg(long, value_delimiter = ',')]
        meta_keys: Option<Vec<String>>,
        /// Also require a mask node in every template
        #[arg(long, requires = "meta_keys")]
        classification: bool,
    },
    /// Wrap every example with every template
    Wrap {
        #[command(flatten)]
        tok: TokArgs,
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Wrap and encode every example
    Tokenize {
        #[command(flatten)]
        tok: TokArgs,
        #[command(flatten)]
        enc: EncArgs,
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Export the soft-embedding plan of each template
    Plan {
        #[command(flatten)]
        tok: TokArgs,
        #[arg(long)]
        templates: PathBuf,
        #[arg(long, value_parser = serde_name::<PlanVariant>, default_value = "input_embeddings")]
        variant: PlanVariant,
        #[arg(long)]
        freeze_plm: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Few-shot sample k examples per class
    Sample {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Take whole undersized classes instead of failing
        #[arg(long)]
        allow_fewer: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Project a logits file onto verbalizer classes
    Score {
        #[command(flatten)]
        tok: TokArgs,
        #[arg(long)]
        logits_file: PathBuf,
        #[arg(long)]
        verbalizer: PathBuf,
        #[arg(long, value_parser = serde_name::<Aggregation>, default_value = "mean_log_prob")]
        aggregation: Aggregation,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the full pipeline from a config file and/or flags
    Run(RunArgs),
}

#[derive(Args)]
struct TokArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, value_parser = serde_name::<TokenizerKind>, default_value = "wordpiece")]
    tokenizer: TokenizerKind,
}

#[derive(Args)]
struct EncArgs {
    #[arg(long, default_value_t = 128)]
    max_len: usize,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    add_special_tokens: bool,
    #[arg(long, value_parser = serde_name::<PlmKind>, default_value = "mlm")]
    plm: PlmKind,
}

#[derive(Args)]
struct RunArgs {
    /// JSON config; flags below override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    templates: Option<Vec<PathBuf>>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, value_parser = serde_name::<TokenizerKind>)]
    tokenizer: Option<TokenizerKind>,
    #[arg(long, value_parser = serde_name::<PlmKind>)]
    plm: Option<PlmKind>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    add_special_tokens: Option<bool>,
    #[arg(long)]
    verbalizer: Option<PathBuf>,
    #[arg(long, value_parser = serde_name::<Aggregation>)]
    aggregation: Option<Aggregation>,
    #[arg(long)]
    calibrate: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    fewshot_k: Option<usize>,
    #[arg(long, conflicts_with = "toy_scorer")]
    logits_file: Option<PathBuf>,
    #[arg(long)]
    toy_scorer: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

impl RunArgs {
    fn into_config(self) -> Result<PipelineConfig> {
        let model = match (self.logits_file, self.toy_scorer) {
            (Some(p), _) => Some(ModelInterface::LogitsFile(p)),
            (_, Some(p)) => Some(ModelInterface::ToyScorer(p)),
            _ => None,
        };
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => {
                let (Some(templates), Some(dataset), Some(vocab), Some(verbalizer), Some(model)) = (
                    self.templates.clone(),
                    self.dataset.clone(),
                    self.vocab.clone(),
                    self.verbalizer.clone(),
                    model.clone(),
                ) else {
                    bail!("without --config, --templates, --dataset, --vocab, --verbalizer and a model flag are required");
                };
                let mut cfg: PipelineConfig = serde_json::from_value(json!({
                    "templates": templates,
                    "dataset": dataset,
                    "vocab": vocab,
                    "verbalizer": verbalizer,
                    "model": model,
                }))?;
                cfg.threads = None;
                cfg
            }
        };
        if let Some(v) = self.templates {
            cfg.templates = v;
        }
        if let Some(v) = self.dataset {
            cfg.dataset = v;
        }
        if let Some(v) = self.vocab {
            cfg.vocab = v;
        }
        if let Some(v) = self.tokenizer {
            cfg.tokenizer = v;
        }
        if let Some(v) = self.plm {
            cfg.plm = v;
        }
        if let Some(v) = self.max_len {
            cfg.max_len = v;
        }
        if let Some(v) = self.add_special_tokens {
            cfg.add_special_tokens = v;
        }
        if let Some(v) = self.verbalizer {
            cfg.verbalizer = v;
        }
        if let Some(v) = self.aggregation {
            cfg.aggregation = v;
        }
        if let Some(v) = self.calibrate {
            cfg.calibrate = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if self.fewshot_k.is_some() {
            cfg.fewshot_k = self.fewshot_k;
        }
        if let Some(m) = model {
            cfg.model = m;
        }
        if self.output.is_some() {
            cfg.output = self.output;
        }
        if self.threads.is_some() {
            cfg.threads = self.threads;
        }
        Ok(cfg)
    }
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_line(out: &mut dyn Write, value: &serde_json::Value) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

fn templates(path: &Path) -> Result<Vec<TemplateAst>> {
    load_template_file(path).with_context(|| format!("loading {}", path.display()))
}

fn tokenizer(args: &TokArgs) -> Result<Tokenizer> {
    Ok(load_tokenizer(&args.vocab, args.tokenizer)?)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Parse {
            template_file,
            meta_keys,
            classification,
        } => {
            let check = if classification {
                validate_classification_template
            } else {
                validate_template
            };
            let mut out = open_output(None)?;
            for (i, ast) in templates(&template_file)?.iter().enumerate() {
                let mut value = json!({ "template": i, "nodes": ast.nodes() });
                if let Some(keys) = &meta_keys {
                    let keys: BTreeSet<String> = keys.iter().cloned().collect();
                    let diags: Vec<String> =
                        check(ast, &keys).iter().map(|d| d.to_string()).collect();
                    value["diagnostics"] = json!(diags);
                }
                write_line(&mut out, &value)?;
            }
            out.flush()?;
        }
        Command::Wrap {
            tok,
            templates: tpath,
            dataset,
            output,
        } => {
            let tokenizer = tokenizer(&tok)?;
            let asts = templates(&tpath)?;
            let data = load_jsonl(&dataset)?;
            let mut out = open_output(output.as_deref())?;
            for (t, ast) in asts.iter().enumerate() {
                let plan = build_soft_plan(ast, &tokenizer)?;
                for ex in data.examples() {
                    let seq = wrap_example(ast, &plan, ex)?;
                    write_line(
                        &mut out,
                        &json!({
                            "guid": ex.guid,
                            "template": t,
                            "wrapped_text": seq.render(MASK),
                            "segments": seq.segments,
                        }),
                    )?;
                }
            }
            out.flush()?;
        }
        Command::Tokenize {
            tok,
            enc,
            templates: tpath,
            dataset,
            output,
        } => {
            let tokenizer = tokenizer(&tok)?;
            let opts = EncodeOptions::new(enc.max_len)
                .with_special_tokens(enc.add_special_tokens)
                .with_plm(enc.plm);
            let asts = templates(&tpath)?;
            let data = load_jsonl(&dataset)?;
            let mut out = open_output(output.as_deref())?;
            for (t, ast) in asts.iter().enumerate() {
                let plan = build_soft_plan(ast, &tokenizer)?;
                for ex in data.examples() {
                    let seq = wrap_example(ast, &plan, ex)?;
                    let input = encode_wrapped(&seq, &tokenizer, &opts)
                        .with_context(|| format!("encoding {:?}", ex.guid))?;
                    let mut value = serde_json::to_value(&input)?;
                    value["guid"] = json!(ex.guid);
                    value["template"] = json!(t);
                    write_line(&mut out, &value)?;
                }
            }
            out.flush()?;
        }
        Command::Plan {
            tok,
            templates: tpath,
            variant,
            freeze_plm,
            output,
        } => {
            let tokenizer = tokenizer(&tok)?;
            let mut out = open_output(output.as_deref())?;
            for (t, ast) in templates(&tpath)?.iter().enumerate() {
                let plan = build_soft_plan(ast, &tokenizer)?
                    .with_variant(variant)
                    .with_freeze_plm(freeze_plm);
                let mut value = serde_json::to_value(&plan)?;
                value["template"] = json!(t);
                write_line(&mut out, &value)?;
            }
            out.flush()?;
        }
        Command::Sample {
            dataset,
            k,
            seed,
            allow_fewer,
            output,
        } => {
            let data = load_jsonl(&dataset)?;
            let cfg = SampleConfig {
                allow_fewer,
                ..SampleConfig::new(k, seed)
            };
            let sample = fewshot_sample(&data, &cfg)?;
            let mut out = open_output(output.as_deref())?;
            sample.write_jsonl(&mut out)?;
            out.flush()?;
        }
        Command::Score {
            tok,
            logits_file,
            verbalizer,
            aggregation,
            output,
        } => {
            let tokenizer = tokenizer(&tok)?;
            let verbalizer = load_verbalizer(&verbalizer, &tokenizer)?;
            let scorer = LogitsFileScorer::load(&logits_file)?;
            let mut records: Vec<_> = scorer.records().collect();
            records.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
            let mut out = open_output(output.as_deref())?;
            for (guid, template, rows) in records {
                let scores = project(rows, &verbalizer, aggregation)
                    .with_context(|| format!("projecting {guid:?}"))?;
                write_line(
                    &mut out,
                    &json!({
                        "guid": guid,
                        "template": template,
                        "predicted_class": verbalizer.classes()[scores.predicted],
                        "class_scores": scores.scores,
                    }),
                )?;
            }
            out.flush()?;
        }
        Command::Run(args) => {
            let cfg = args.into_config()?;
            let report = run_pipeline(&cfg)?;
            if cfg.output.is_none() {
                report.write_jsonl(io::stdout().lock())?;
            }
            eprintln!("{}", serde_json::to_string(&report)?);
        }
    }
    Ok(())
}
