//! Wrapping raw examples with a template.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::soft_plan::SoftEmbeddingPlan;
use crate::template::{NodeKind, PostProcessing, TemplateAst};

/// One raw dataset record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputExample {
    pub guid: String,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl InputExample {
    pub fn new(guid: impl Into<String>) -> Self {
        InputExample {
            guid: guid.into(),
            label: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }
}

/// Guid given to the empty-meta example used for calibration.
pub const CONTENT_FREE_GUID: &str = "__content_free__";

/// The example with every meta key the template references set to "".
pub fn content_free_example(ast: &TemplateAst) -> InputExample {
    ast.meta_keys()
        .into_iter()
        .fold(InputExample::new(CONTENT_FREE_GUID), |ex, key| {
            ex.with_meta(key, "")
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Template,
    Example,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Segment {
    pub text: String,
    pub is_mask: bool,
    pub soft_slot: Option<u32>,
    pub shortenable: bool,
    pub loss: bool,
    pub origin: Origin,
}

impl Segment {
    fn template_text(text: &str) -> Self {
        Segment {
            text: text.to_string(),
            is_mask: false,
            soft_slot: None,
            shortenable: false,
            loss: false,
            origin: Origin::Template,
        }
    }

    fn mask() -> Self {
        Segment {
            is_mask: true,
            loss: true,
            ..Self::template_text("")
        }
    }

    fn soft(slot: u32) -> Self {
        Segment {
            soft_slot: Some(slot),
            ..Self::template_text("")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WrappedSequence {
    pub segments: Vec<Segment>,
    pub example_guid: String,
    pub label: Option<String>,
}

impl WrappedSequence {
    pub fn mask_count(&self) -> usize {
        self.segments.iter().filter(|s| s.is_mask).count()
    }

    /// Human-readable form, with masks spelled `mask_token` and soft slots
    /// spelled `<soft>`.
    pub fn render(&self, mask_token: &str) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            if seg.is_mask {
                out.push_str(mask_token);
            } else if seg.soft_slot.is_some() {
                out.push_str("<soft>");
            } else {
                out.push_str(&seg.text);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WrapError {
    #[error("example {guid:?} has no meta key {key:?}")]
    MissingMetaKey { guid: String, key: String },
    #[error("soft plan does not match the template ({plan_nodes} plan nodes, {template_nodes} template nodes)")]
    PlanMismatch {
        plan_nodes: usize,
        template_nodes: usize,
    },
}

pub fn apply_post_processing(pp: PostProcessing, text: &str) -> String {
    match pp {
        PostProcessing::StripTrailingPunctuation => text
            .trim_end_matches(|c: char| c.is_ascii_punctuation())
            .to_string(),
        PostProcessing::Lowercase => text.to_lowercase(),
        PostProcessing::PrependSpace if text.is_empty() => String::new(),
        PostProcessing::PrependSpace => format!(" {text}"),
    }
}

/// Resolves a template against one example. Soft slot indices come from
/// `plan`, which must have been built from the same template.
pub fn wrap_example(
    ast: &TemplateAst,
    plan: &SoftEmbeddingPlan,
    example: &InputExample,
) -> Result<WrappedSequence, WrapError> {
    let nodes = ast.nodes();
    if plan.node_count() != nodes.len() {
        return Err(WrapError::PlanMismatch {
            plan_nodes: plan.node_count(),
            template_nodes: nodes.len(),
        });
    }
    let mut segments = Vec::with_capacity(nodes.len());
    for (idx, node) in nodes.iter().enumerate() {
        match node.kind {
            NodeKind::Text => segments.push(Segment::template_text(
                node.text.as_deref().unwrap_or_default(),
            )),
            NodeKind::Mask => segments.push(Segment::mask()),
            NodeKind::Soft => {
                segments.extend(plan.node_slots(idx).iter().map(|&s| Segment::soft(s)))
            }
            NodeKind::Meta => {
                let key = node.meta_key.as_deref().unwrap_or_default();
                let value = example
                    .meta
                    .get(key)
                    .ok_or_else(|| WrapError::MissingMetaKey {
                        guid: example.guid.clone(),
                        key: key.to_string(),
                    })?;
                let text = match node.post_processing {
                    Some(pp) => apply_post_processing(pp, value),
                    None => value.clone(),
                };
                segments.push(Segment {
                    text,
                    shortenable: node.shortenable,
                    origin: Origin::Example,
                    ..Segment::template_text("")
                });
            }
        }
    }
    Ok(WrappedSequence {
        segments,
        example_guid: example.guid.clone(),
        label: example.label.clone(),
    })
}
