//! Prompt-learning data pipeline: a template language for cloze-style
//! prompts, example wrapping, template-preserving tokenization, soft prompt
//! planning and verbalizer scoring of mask-position logits.
//!
//! ```
//! use prompt_pipe::template::parse_template;
//!
//! let ast = parse_template(r#"{"meta": "text"} It is {"mask"}"#).unwrap();
//! assert_eq!(ast.mask_count(), 1);
//! ```

pub mod data;
pub mod runner;
pub mod soft_plan;
pub mod template;
pub mod tokenization;
pub mod verbalizer;
pub mod wrapping;

pub use data::{fewshot_sample, load_jsonl, Dataset, SampleConfig};
pub use runner::{ensemble_scores, evaluate_accuracy, run_pipeline, Pipeline, PipelineConfig};
pub use soft_plan::{build_soft_plan, SoftEmbeddingPlan};
pub use template::{
    parse_template, serialize_template, validate_template, TemplateAst, TemplateNode,
};
pub use tokenization::{
    build_tokenizer, encode_wrapped, truncate, EncodeOptions, TokenizedInput, Tokenizer,
};
pub use verbalizer::{calibrate, load_verbalizer, project, Aggregation, ClassScores, Verbalizer};
pub use wrapping::{apply_post_processing, wrap_example, InputExample, WrappedSequence};
