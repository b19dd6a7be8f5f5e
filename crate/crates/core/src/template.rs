//! Template language: a sequence of literal text and brace-delimited control
//! nodes such as `{"mask"}`, `{"meta": "title"}` or `{"soft": "It was"}`.
//!
//! Brace nodes hold a small attribute map. Keys are double-quoted, values are
//! JSON scalars (`None`, `True` and `False` are accepted as well), and a key
//! without a value is a flag (`{"mask"}`, `{"soft"}`).
//!
//! ```text
//! a {"mask"} news: {"meta": "title"} {"meta": "description"}
//! ```

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Text,
    Mask,
    Soft,
    Meta,
}

/// Named text transforms applied to meta values during wrapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostProcessing {
    StripTrailingPunctuation,
    Lowercase,
    PrependSpace,
}

impl PostProcessing {
    pub fn name(self) -> &'static str {
        match self {
            PostProcessing::StripTrailingPunctuation => "strip_trailing_punctuation",
            PostProcessing::Lowercase => "lowercase",
            PostProcessing::PrependSpace => "prepend_space",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "strip_trailing_punctuation" => Some(PostProcessing::StripTrailingPunctuation),
            "lowercase" => Some(PostProcessing::Lowercase),
            "prepend_space" => Some(PostProcessing::PrependSpace),
            _ => None,
        }
    }

    /// Recognizes the small set of Python lambdas that have a named
    /// equivalent, e.g. `lambda s: s.rstrip(string.punctuation)`.
    fn from_lambda(expr: &str) -> Option<Self> {
        let rest = expr.trim().strip_prefix("lambda")?;
        let (param, body) = rest.split_once(':')?;
        let param = param.trim();
        if param.is_empty() || !param.chars().all(|c| c.is_alphanumeric() || c == '_') {
            return None;
        }
        let body: String = body.chars().filter(|c| !c.is_whitespace()).collect();
        if body == format!("{param}.rstrip(string.punctuation)") {
            Some(PostProcessing::StripTrailingPunctuation)
        } else if body == format!("{param}.lower()") {
            Some(PostProcessing::Lowercase)
        } else {
            None
        }
    }
}

/// One node of a parsed template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateNode {
    pub kind: NodeKind,
    /// Literal text for `Text`, the initialization phrase for `Soft`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub meta_key: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub soft_id: Option<u32>,
    pub duplicate: u32,
    pub shortenable: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub post_processing: Option<PostProcessing>,
}

impl TemplateNode {
    fn base(kind: NodeKind) -> Self {
        TemplateNode {
            kind,
            text: None,
            meta_key: None,
            soft_id: None,
            duplicate: 1,
            shortenable: false,
            post_processing: None,
        }
    }

    pub fn text(text: impl Into<String>) -> Self {
        TemplateNode {
            text: Some(text.into()),
            ..Self::base(NodeKind::Text)
        }
    }

    pub fn mask() -> Self {
        Self::base(NodeKind::Mask)
    }

    pub fn meta(key: impl Into<String>) -> Self {
        TemplateNode {
            meta_key: Some(key.into()),
            shortenable: true,
            ..Self::base(NodeKind::Meta)
        }
    }

    /// An anonymous soft node without initialization text.
    pub fn soft() -> Self {
        Self::base(NodeKind::Soft)
    }

    pub fn soft_init(text: impl Into<String>) -> Self {
        TemplateNode {
            text: Some(text.into()),
            ..Self::base(NodeKind::Soft)
        }
    }

    pub fn with_soft_id(mut self, id: u32) -> Self {
        self.soft_id = Some(id);
        self
    }

    pub fn with_duplicate(mut self, n: u32) -> Self {
        self.duplicate = n;
        self
    }

    pub fn with_shortenable(mut self, shortenable: bool) -> Self {
        self.shortenable = shortenable;
        self
    }

    pub fn with_post_processing(mut self, pp: PostProcessing) -> Self {
        self.post_processing = Some(pp);
        self
    }

    fn check(&self) -> Result<(), TemplateError> {
        let conflict = |detail: &str| {
            Err(TemplateError::ConflictingAttributes {
                detail: detail.to_string(),
                offset: None,
            })
        };
        if self.duplicate == 0 {
            return conflict("duplicate must be at least 1");
        }
        match self.kind {
            NodeKind::Text => {
                let Some(text) = &self.text else {
                    return conflict("text node without text");
                };
                if text.is_empty() || text.contains(['{', '}']) {
                    return conflict("text node must be non-empty and brace-free");
                }
                if self.meta_key.is_some()
                    || self.soft_id.is_some()
                    || self.duplicate != 1
                    || self.shortenable
                    || self.post_processing.is_some()
                {
                    return conflict("text node carries control attributes");
                }
            }
            NodeKind::Mask => {
                if self.text.is_some()
                    || self.meta_key.is_some()
                    || self.soft_id.is_some()
                    || self.duplicate != 1
                    || self.shortenable
                    || self.post_processing.is_some()
                {
                    return conflict("mask node carries extra attributes");
                }
            }
            NodeKind::Meta => {
                if self.meta_key.as_deref().is_none_or(str::is_empty) {
                    return conflict("meta node without a key");
                }
                if self.text.is_some() || self.soft_id.is_some() || self.duplicate != 1 {
                    return conflict("meta node carries soft attributes");
                }
            }
            NodeKind::Soft => {
                if self.meta_key.is_some() || self.shortenable {
                    return conflict("soft node cannot be meta or shortenable");
                }
                if self.text.as_deref().is_some_and(|t| t.trim().is_empty()) {
                    return conflict("soft initialization text is blank");
                }
            }
        }
        Ok(())
    }
}

/// A validated template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TemplateAst {
    nodes: Vec<TemplateNode>,
    source: String,
}

impl TemplateAst {
    /// Builds an AST from hand-assembled nodes. Adjacent text nodes are
    /// merged so the result matches what the parser would produce.
    pub fn from_nodes(nodes: Vec<TemplateNode>) -> Result<Self, TemplateError> {
        let mut merged: Vec<TemplateNode> = Vec::with_capacity(nodes.len());
        for node in nodes {
            node.check()?;
            match (merged.last_mut(), node.kind) {
                (Some(prev), NodeKind::Text) if prev.kind == NodeKind::Text => {
                    prev.text
                        .as_mut()
                        .unwrap()
                        .push_str(node.text.as_deref().unwrap());
                }
                _ => merged.push(node),
            }
        }
        let mut ast = TemplateAst {
            nodes: merged,
            source: String::new(),
        };
        ast.check_invariants()?;
        ast.source = serialize_template(&ast);
        Ok(ast)
    }

    pub fn nodes(&self) -> &[TemplateNode] {
        &self.nodes
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn mask_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Mask)
            .count()
    }

    /// Meta keys referenced by the template, in first-use order.
    pub fn meta_keys(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.nodes
            .iter()
            .filter_map(|n| n.meta_key.as_deref())
            .filter(|k| seen.insert(*k))
            .collect()
    }

    fn check_invariants(&self) -> Result<(), TemplateError> {
        if self.nodes.is_empty() {
            return Err(TemplateError::EmptyTemplate);
        }
        if let Some(id) = soft_id_conflict(&self.nodes) {
            return Err(TemplateError::ConflictingSoftIdInitialization { soft_id: id });
        }
        Ok(())
    }
}

impl fmt::Display for TemplateAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_template(self))
    }
}

/// Returns the first soft_id whose occurrences disagree on initialization
/// text or on `duplicate`.
fn soft_id_conflict(nodes: &[TemplateNode]) -> Option<u32> {
    let mut texts: HashMap<u32, &str> = HashMap::new();
    let mut dups: HashMap<u32, u32> = HashMap::new();
    for node in nodes.iter().filter(|n| n.kind == NodeKind::Soft) {
        let Some(id) = node.soft_id else { continue };
        if let Some(text) = node.text.as_deref() {
            if texts.insert(id, text).is_some_and(|prev| prev != text) {
                return Some(id);
            }
        }
        if dups
            .insert(id, node.duplicate)
            .is_some_and(|d| d != node.duplicate)
        {
            return Some(id);
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TemplateError {
    #[error("unbalanced brace at byte {offset}")]
    UnbalancedBrace { offset: usize },
    #[error("unknown attribute key {key:?} at byte {offset}")]
    UnknownAttributeKey { key: String, offset: usize },
    #[error("conflicting attributes: {detail}")]
    ConflictingAttributes {
        detail: String,
        offset: Option<usize>,
    },
    #[error("invalid value for {key:?} at byte {offset}: expected {expected}")]
    InvalidValueType {
        key: String,
        expected: &'static str,
        offset: usize,
    },
    #[error("soft_id {soft_id} is used with conflicting initialization")]
    ConflictingSoftIdInitialization { soft_id: u32 },
    #[error("node at byte {offset} has no mask, meta or soft attribute")]
    MissingNodeKind { offset: usize },
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("template is empty")]
    EmptyTemplate,
}

#[derive(Debug, Clone, PartialEq)]
enum Value {
    Flag,
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    Expr(String),
}

const KEYS: [&str; 7] = [
    "mask",
    "soft",
    "soft_id",
    "duplicate",
    "meta",
    "shortenable",
    "post_processing",
];

struct Entry {
    key: String,
    value: Value,
    offset: usize,
}

struct NodeParser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> NodeParser<'a> {
    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.bump();
        }
    }

    fn syntax(&self, message: impl Into<String>) -> TemplateError {
        TemplateError::Syntax {
            offset: self.pos,
            message: message.into(),
        }
    }

    /// Parses the body of a node; `self.pos` is just past the opening brace.
    /// On success `self.pos` is just past the closing brace.
    fn parse_node(&mut self, open: usize) -> Result<Vec<Entry>, TemplateError> {
        let eof = TemplateError::UnbalancedBrace { offset: open };
        let mut entries = Vec::new();
        self.skip_ws();
        if self.peek() == Some('}') {
            return Err(TemplateError::MissingNodeKind { offset: open });
        }
        loop {
            self.skip_ws();
            let offset = self.pos;
            match self.peek() {
                None => return Err(eof),
                Some('"') => {}
                Some(_) => return Err(self.syntax("expected a double-quoted key")),
            }
            let key = self.parse_string().ok_or_else(|| eof.clone())??;
            self.skip_ws();
            let value = match self.peek() {
                None => return Err(eof),
                Some(':') => {
                    self.bump();
                    self.skip_ws();
                    self.parse_value()?
                }
                Some(_) => Value::Flag,
            };
            entries.push(Entry { key, value, offset });
            self.skip_ws();
            match self.bump() {
                None => return Err(eof),
                Some(',') => continue,
                Some('}') => return Ok(entries),
                Some(c) => {
                    self.pos -= c.len_utf8();
                    return Err(self.syntax(format!("unexpected {c:?}")));
                }
            }
        }
    }

    /// Returns `None` when input ends inside the string.
    fn parse_string(&mut self) -> Option<Result<String, TemplateError>> {
        let start = self.pos;
        self.bump();
        let mut escaped = false;
        loop {
            let c = self.bump()?;
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => break,
                _ => {}
            }
        }
        let raw = &self.src[start..self.pos];
        Some(
            serde_json::from_str::<String>(raw).map_err(|e| TemplateError::Syntax {
                offset: start,
                message: format!("bad string literal: {e}"),
            }),
        )
    }

    fn parse_value(&mut self) -> Result<Value, TemplateError> {
        let start = self.pos;
        if self.peek() == Some('"') {
            return self
                .parse_string()
                .ok_or(TemplateError::UnbalancedBrace { offset: start })?
                .map(Value::Str);
        }
        let raw = self.scan_expression(start)?;
        let value = match raw.as_str() {
            "null" | "None" => Value::Null,
            "true" | "True" => Value::Bool(true),
            "false" | "False" => Value::Bool(false),
            _ => {
                if let Ok(i) = raw.parse::<i64>() {
                    Value::Int(i)
                } else if let Ok(f) = raw.parse::<f64>() {
                    Value::Float(f)
                } else if raw.is_empty() {
                    return Err(self.syntax("missing value"));
                } else {
                    Value::Expr(raw)
                }
            }
        };
        Ok(value)
    }

    /// Reads an unquoted value up to the next top-level `,` or `}`,
    /// honoring nested brackets and quoted strings.
    fn scan_expression(&mut self, start: usize) -> Result<String, TemplateError> {
        let mut depth = 0usize;
        let mut quote: Option<char> = None;
        let mut escaped = false;
        while let Some(c) = self.peek() {
            if let Some(q) = quote {
                if escaped {
                    escaped = false;
                } else if c == '\\' {
                    escaped = true;
                } else if c == q {
                    quote = None;
                }
            } else {
                match c {
                    '"' | '\'' => quote = Some(c),
                    '(' | '[' | '{' => depth += 1,
                    ')' | ']' | '}' if depth > 0 => depth -= 1,
                    ',' | '}' if depth == 0 => break,
                    _ => {}
                }
            }
            self.bump();
        }
        if self.peek().is_none() {
            return Err(TemplateError::UnbalancedBrace { offset: start });
        }
        Ok(self.src[start..self.pos].trim_end().to_string())
    }
}

fn build_node(entries: Vec<Entry>, open: usize) -> Result<TemplateNode, TemplateError> {
    let mut attrs: HashMap<&str, (Value, usize)> = HashMap::new();
    for entry in &entries {
        let Some(&key) = KEYS.iter().find(|k| **k == entry.key) else {
            return Err(TemplateError::UnknownAttributeKey {
                key: entry.key.clone(),
                offset: entry.offset,
            });
        };
        if attrs
            .insert(key, (entry.value.clone(), entry.offset))
            .is_some()
        {
            return Err(TemplateError::ConflictingAttributes {
                detail: format!("key {key:?} given twice"),
                offset: Some(entry.offset),
            });
        }
    }
    let has = |k: &str| attrs.contains_key(k);
    let conflict = |detail: &str| TemplateError::ConflictingAttributes {
        detail: detail.to_string(),
        offset: Some(open),
    };
    let invalid = |key: &str, expected: &'static str| TemplateError::InvalidValueType {
        key: key.to_string(),
        expected,
        offset: attrs[key].1,
    };

    let shortenable = match attrs.get("shortenable") {
        None => None,
        Some((Value::Bool(b), _)) => Some(*b),
        Some(_) => return Err(invalid("shortenable", "a boolean")),
    };
    let post_processing = match attrs.get("post_processing") {
        None | Some((Value::Null, _)) => None,
        Some((Value::Str(name), _)) => Some(
            PostProcessing::from_name(name)
                .ok_or_else(|| invalid("post_processing", "a known post-processing name"))?,
        ),
        Some((Value::Expr(expr), _)) => Some(
            PostProcessing::from_lambda(expr)
                .ok_or_else(|| invalid("post_processing", "a known post-processing name"))?,
        ),
        Some(_) => return Err(invalid("post_processing", "a known post-processing name")),
    };

    if has("mask") {
        if has("meta") || has("soft") || has("soft_id") {
            return Err(conflict("mask cannot be combined with meta or soft"));
        }
        if has("duplicate") {
            return Err(conflict("duplicate applies to soft nodes only"));
        }
        if post_processing.is_some() {
            return Err(conflict("mask nodes take no post-processing"));
        }
        if !matches!(attrs["mask"].0, Value::Flag | Value::Null) {
            return Err(invalid("mask", "no value"));
        }
        if shortenable == Some(true) {
            return Err(conflict("mask nodes are never shortenable"));
        }
        return Ok(TemplateNode::mask());
    }

    if has("meta") {
        if has("soft") || has("soft_id") {
            return Err(conflict("meta cannot be combined with soft"));
        }
        if has("duplicate") {
            return Err(conflict("duplicate applies to soft nodes only"));
        }
        let key = match &attrs["meta"].0 {
            Value::Str(s) if !s.is_empty() => s.clone(),
            _ => return Err(invalid("meta", "a non-empty string")),
        };
        let mut node = TemplateNode::meta(key).with_shortenable(shortenable.unwrap_or(true));
        node.post_processing = post_processing;
        return Ok(node);
    }

    if has("soft") || has("soft_id") {
        let text = match attrs.get("soft") {
            None | Some((Value::Flag | Value::Null, _)) => None,
            Some((Value::Str(s), _)) if s.trim().is_empty() => None,
            Some((Value::Str(s), _)) => Some(s.clone()),
            Some(_) => return Err(invalid("soft", "a string or no value")),
        };
        let soft_id = match attrs.get("soft_id") {
            None | Some((Value::Null, _)) => None,
            Some((Value::Int(i), _)) if *i >= 1 && *i <= u32::MAX as i64 => Some(*i as u32),
            Some(_) => return Err(invalid("soft_id", "a positive integer")),
        };
        let duplicate = match attrs.get("duplicate") {
            None => 1,
            Some((Value::Int(i), _)) if *i >= 1 && *i <= u32::MAX as i64 => *i as u32,
            Some(_) => return Err(invalid("duplicate", "a positive integer")),
        };
        if shortenable == Some(true) {
            return Err(conflict("soft nodes are never shortenable"));
        }
        return Ok(TemplateNode {
            text,
            soft_id,
            duplicate,
            post_processing,
            ..TemplateNode::soft()
        });
    }

    Err(TemplateError::MissingNodeKind { offset: open })
}

/// Parses one template.
pub fn parse_template(source: &str) -> Result<TemplateAst, TemplateError> {
    let mut nodes = Vec::new();
    let mut text_start = 0;
    let mut parser = NodeParser {
        src: source,
        pos: 0,
    };
    while let Some(c) = parser.peek() {
        match c {
            '{' => {
                let open = parser.pos;
                if open > text_start {
                    nodes.push(TemplateNode::text(&source[text_start..open]));
                }
                parser.bump();
                let entries = parser.parse_node(open)?;
                nodes.push(build_node(entries, open)?);
                text_start = parser.pos;
            }
            '}' => return Err(TemplateError::UnbalancedBrace { offset: parser.pos }),
            _ => {
                parser.bump();
            }
        }
    }
    if source.len() > text_start {
        nodes.push(TemplateNode::text(&source[text_start..]));
    }
    let ast = TemplateAst {
        nodes,
        source: source.to_string(),
    };
    ast.check_invariants()?;
    Ok(ast)
}

fn quote(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

/// Canonical text form of a template; reparses to the same nodes.
pub fn serialize_template(ast: &TemplateAst) -> String {
    let mut out = String::new();
    for node in &ast.nodes {
        let mut attrs: Vec<String> = Vec::new();
        match node.kind {
            NodeKind::Text => {
                out.push_str(node.text.as_deref().unwrap_or_default());
                continue;
            }
            NodeKind::Mask => attrs.push("\"mask\"".into()),
            NodeKind::Meta => {
                attrs.push(format!(
                    "\"meta\": {}",
                    quote(node.meta_key.as_deref().unwrap_or_default())
                ));
                if !node.shortenable {
                    attrs.push("\"shortenable\": false".into());
                }
            }
            NodeKind::Soft => {
                match (&node.text, node.soft_id, node.duplicate) {
                    (Some(text), _, _) => attrs.push(format!("\"soft\": {}", quote(text))),
                    (None, None, 1) => attrs.push("\"soft\"".into()),
                    (None, None, _) => attrs.push("\"soft\": null".into()),
                    (None, Some(_), _) => {}
                }
                if let Some(id) = node.soft_id {
                    attrs.push(format!("\"soft_id\": {id}"));
                }
                if node.duplicate != 1 {
                    attrs.push(format!("\"duplicate\": {}", node.duplicate));
                }
            }
        }
        if let Some(pp) = node.post_processing {
            attrs.push(format!("\"post_processing\": {}", quote(pp.name())));
        }
        out.push('{');
        out.push_str(&attrs.join(", "));
        out.push('}');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Diagnostic {
    UnknownMetaKey(String),
    NoMaskNode,
    SoftIdConflict(u32),
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::UnknownMetaKey(k) => {
                write!(f, "meta key {k:?} is not provided by the data")
            }
            Diagnostic::NoMaskNode => f.write_str("template has no mask node"),
            Diagnostic::SoftIdConflict(id) => {
                write!(f, "soft_id {id} has conflicting initialization")
            }
        }
    }
}

/// Checks a template against the meta keys a dataset provides. An empty
/// result means the template is usable.
pub fn validate_template(ast: &TemplateAst, known_meta_keys: &BTreeSet<String>) -> Vec<Diagnostic> {
    let mut diags: Vec<Diagnostic> = ast
        .meta_keys()
        .into_iter()
        .filter(|k| !known_meta_keys.contains(*k))
        .map(|k| Diagnostic::UnknownMetaKey(k.to_string()))
        .collect();
    if let Some(id) = soft_id_conflict(&ast.nodes) {
        diags.push(Diagnostic::SoftIdConflict(id));
    }
    diags
}

/// [`validate_template`] plus the requirement that a classification
/// template has somewhere to put the prediction.
pub fn validate_classification_template(
    ast: &TemplateAst,
    known_meta_keys: &BTreeSet<String>,
) -> Vec<Diagnostic> {
    let mut diags = validate_template(ast, known_meta_keys);
    if ast.mask_count() == 0 {
        diags.push(Diagnostic::NoMaskNode);
    }
    diags
}

#[derive(Debug, Error)]
pub enum TemplateFileError {
    #[error("cannot read template file: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: TemplateError },
}

/// Parses a template file: one template per line, `#` comments and blank
/// lines skipped.
pub fn parse_template_lines(content: &str) -> Result<Vec<TemplateAst>, TemplateFileError> {
    content
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            parse_template(l.strip_suffix('\r').unwrap_or(l)).map_err(|source| {
                TemplateFileError::Parse {
                    line: i + 1,
                    source,
                }
            })
        })
        .collect()
}

pub fn load_template_file(path: impl AsRef<Path>) -> Result<Vec<TemplateAst>, TemplateFileError> {
    parse_template_lines(&fs::read_to_string(path)?)
}
