//! Task instances and output classification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[serde(alias = "incontext")]
    InContext,
    #[serde(alias = "arith")]
    Arithmetic,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::InContext => "incontext",
            TaskKind::Arithmetic => "arith",
        }
    }

    pub fn other(self) -> TaskKind {
        match self {
            TaskKind::InContext => TaskKind::Arithmetic,
            TaskKind::Arithmetic => TaskKind::InContext,
        }
    }
}

/// Whether an example was built to probe memorization (the memorized and
/// rule-derived answers disagree) or is an ordinary rule-following instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    MemProbe,
    CleanGen,
}

/// Outcome of one model answer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BehaviorLabel {
    Gen,
    Mem,
    Other,
}

impl BehaviorLabel {
    /// Label encoding used by every statistic: Gen = 1, Mem = 0.
    pub fn as_target(self) -> Option<f64> {
        match self {
            BehaviorLabel::Gen => Some(1.0),
            BehaviorLabel::Mem => Some(0.0),
            BehaviorLabel::Other => None,
        }
    }

    pub fn opposite(self) -> Option<BehaviorLabel> {
        match self {
            BehaviorLabel::Gen => Some(BehaviorLabel::Mem),
            BehaviorLabel::Mem => Some(BehaviorLabel::Gen),
            BehaviorLabel::Other => None,
        }
    }
}

/// How a rephrased example was derived from its original.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Rephrase {
    /// Operands 1 and 2 swapped.
    OperandSwap,
    /// Context statements reordered; `order[i]` is the original index of
    /// the statement now at position `i`.
    StatementPermutation { order: Vec<usize> },
    /// No distinct rephrasing exists (single statement, or equal operands).
    Degenerate,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InContextMeta {
    /// Context statements in presentation order, e.g. `"Rose is eagle."`.
    pub statements: Vec<String>,
    pub query_name: String,
    /// Answer derived from the context by the shared-role rule.
    pub implied_color: Option<String>,
    /// Color bound to the query name during training.
    pub trained_color: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rephrase: Option<Rephrase>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArithMeta {
    pub operands: [u32; 4],
    /// Index of the memorization pattern sitting in operands 3 and 4.
    pub pattern: Option<usize>,
    pub mem_token: Option<String>,
    pub sum: u64,
    /// Operands 1 and 2 come from the test-only reserve.
    #[serde(default)]
    pub heldout: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rephrase: Option<Rephrase>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum Meta {
    InContext(InContextMeta),
    Arithmetic(ArithMeta),
}

/// One task instance. Serializes to the JSON Lines dataset schema
/// (`input`, `target`, `kind`, `source_tag`, `pair_id`, `meta`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    #[serde(rename = "input")]
    pub input_text: String,
    #[serde(rename = "target")]
    pub target_text: String,
    pub kind: TaskKind,
    pub source_tag: SourceTag,
    pub pair_id: Option<u64>,
    pub meta: Option<Meta>,
}

impl Example {
    pub fn rephrase(&self) -> Option<&Rephrase> {
        match &self.meta {
            Some(Meta::InContext(m)) => m.rephrase.as_ref(),
            Some(Meta::Arithmetic(m)) => m.rephrase.as_ref(),
            None => None,
        }
    }

    /// The rule-derived (generalization) answer and, when one exists, the
    /// memorized answer.
    pub fn answers(&self) -> Result<(String, Option<String>)> {
        match (&self.kind, &self.meta) {
            (TaskKind::InContext, Some(Meta::InContext(m))) => {
                let gen = m
                    .implied_color
                    .clone()
                    .ok_or_else(|| Error::Meta("in-context example lacks implied_color".into()))?;
                Ok((gen, m.trained_color.clone()))
            }
            (TaskKind::Arithmetic, Some(Meta::Arithmetic(m))) => {
                Ok((m.sum.to_string(), m.mem_token.clone()))
            }
            (kind, Some(_)) => Err(Error::Meta(format!("meta does not match task kind {kind:?}"))),
            (_, None) => Err(Error::Meta("example has no meta".into())),
        }
    }
}

/// Collapses whitespace runs to single spaces and trims the ends.
pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Marker that introduces the final answer after an arithmetic scratchpad.
pub const ANSWER_MARKER: &str = "answer:";

/// The part of an output that is compared against the answers: the text after
/// the last `answer:` marker if one is present, otherwise the whole output.
pub fn answer_span(output: &str) -> String {
    let norm = normalize_whitespace(output);
    match norm.rfind(ANSWER_MARKER) {
        Some(i) => norm[i + ANSWER_MARKER.len()..].trim().to_string(),
        None => norm,
    }
}

/// Labels a model output as generalization, memorization, or neither.
///
/// The rule-derived answer wins when both answers coincide (training-mode
/// in-context stories), so the function is total and single-valued.
pub fn classify_output(ex: &Example, model_output: &str) -> Result<BehaviorLabel> {
    let (gen, mem) = ex.answers()?;
    let span = answer_span(model_output);
    if span == normalize_whitespace(&gen) {
        return Ok(BehaviorLabel::Gen);
    }
    if let Some(mem) = mem {
        if span == normalize_whitespace(&mem) {
            return Ok(BehaviorLabel::Mem);
        }
    }
    Ok(BehaviorLabel::Other)
}
