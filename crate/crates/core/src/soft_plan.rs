//! Slot table for soft tokens, for consumption by an external trainer.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::template::{NodeKind, TemplateAst};
use crate::tokenization::Tokenizer;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub slot_id: u32,
    pub share_group: Option<u32>,
    pub init_token_ids: Option<Vec<u32>>,
    pub trainable: bool,
    pub post_processing_note: Option<String>,
}

/// How the soft slots are meant to be injected by the consumer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PlanVariant {
    /// Slots replace input embeddings at their positions.
    #[default]
    InputEmbeddings,
    /// Slots become per-layer key/value prefixes.
    LayerPrefix,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SoftEmbeddingPlan {
    pub slots: Vec<SlotSpec>,
    pub variant: PlanVariant,
    /// Whether the consumer should keep the PLM weights frozen.
    pub freeze_plm: bool,
    #[serde(skip)]
    node_slots: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("soft_id {soft_id} is used with conflicting initialization")]
    ConflictingSoftIdInitialization { soft_id: u32 },
}

impl SoftEmbeddingPlan {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Slot ids assigned to template node `idx`, empty for non-soft nodes.
    pub fn node_slots(&self, idx: usize) -> &[u32] {
        self.node_slots.get(idx).map_or(&[], Vec::as_slice)
    }

    pub(crate) fn node_count(&self) -> usize {
        self.node_slots.len()
    }

    pub fn with_variant(mut self, variant: PlanVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_freeze_plm(mut self, freeze: bool) -> Self {
        self.freeze_plm = freeze;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

struct Group<'a> {
    text: Option<&'a str>,
    duplicate: u32,
}

/// Allocates slots in node order. Nodes sharing a soft_id share one slot
/// range; each initialization token gets its own slot.
pub fn build_soft_plan(ast: &TemplateAst, tok: &Tokenizer) -> Result<SoftEmbeddingPlan, PlanError> {
    let nodes = ast.nodes();

    let mut groups: HashMap<u32, Group> = HashMap::new();
    for node in nodes.iter().filter(|n| n.kind == NodeKind::Soft) {
        let Some(id) = node.soft_id else { continue };
        let group = groups.entry(id).or_insert(Group {
            text: None,
            duplicate: node.duplicate,
        });
        if group.duplicate != node.duplicate {
            return Err(PlanError::ConflictingSoftIdInitialization { soft_id: id });
        }
        if let Some(text) = node.text.as_deref() {
            match group.text {
                Some(prev) if prev != text => {
                    return Err(PlanError::ConflictingSoftIdInitialization { soft_id: id })
                }
                _ => group.text = Some(text),
            }
        }
    }

    let mut slots: Vec<SlotSpec> = Vec::new();
    let mut allocated: HashMap<u32, Vec<u32>> = HashMap::new();
    let mut node_slots = Vec::with_capacity(nodes.len());
    for node in nodes {
        if node.kind != NodeKind::Soft {
            node_slots.push(Vec::new());
            continue;
        }
        if let Some(ids) = node.soft_id.and_then(|g| allocated.get(&g)) {
            node_slots.push(ids.clone());
            continue;
        }
        let (text, duplicate) = match node.soft_id {
            Some(g) => (groups[&g].text, groups[&g].duplicate),
            None => (node.text.as_deref(), node.duplicate),
        };
        let init: Vec<Option<u32>> = match text {
            Some(t) => tok.tokenize(t).into_iter().map(Some).collect(),
            None => vec![None],
        };
        let note = node.post_processing.map(|pp| pp.name().to_string());
        let mut ids = Vec::with_capacity(init.len() * duplicate as usize);
        for _ in 0..duplicate {
            for init_id in &init {
                let slot_id = slots.len() as u32;
                slots.push(SlotSpec {
                    slot_id,
                    share_group: node.soft_id,
                    init_token_ids: init_id.map(|id| vec![id]),
                    trainable: true,
                    post_processing_note: note.clone(),
                });
                ids.push(slot_id);
            }
        }
        if let Some(g) = node.soft_id {
            allocated.insert(g, ids.clone());
        }
        node_slots.push(ids);
    }

    Ok(SoftEmbeddingPlan {
        slots,
        variant: PlanVariant::default(),
        freeze_plm: false,
        node_slots,
    })
}
