use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::tree_template::{SlotRef, UnrollError};
use super::{QuestionTemplate, SlotAssignment, SlotValue, Topic};
use crate::expr::{format_value, EvalError, ExprTree, Node};
use crate::graph::{extract_quantities, tokenize, TokenizeError};

/// `{name}`, `{name|paren}` or `{len:name}`. Other brace groups such as
/// `s_{t-1}` are literal text.
static PLACEHOLDER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{(len:)?([A-Za-z_][A-Za-z0-9_]*)(\|paren)?\}").unwrap());

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Placeholder {
    pub span: Range<usize>,
    pub slot: String,
    pub length: bool,
    pub paren: bool,
}

pub fn placeholders(text: &str) -> Vec<Placeholder> {
    PLACEHOLDER
        .captures_iter(text)
        .map(|c| Placeholder {
            span: c.get(0).unwrap().range(),
            slot: c[2].to_string(),
            length: c.get(1).is_some(),
            paren: c.get(3).is_some(),
        })
        .collect()
}

/// Substitutes slot values into `pattern`, returning the text and the byte
/// span of every rendered scalar.
pub fn render_text(
    pattern: &str,
    values: &SlotAssignment,
) -> Result<(String, Vec<(Range<usize>, SlotRef)>), InstanceError> {
    let mut out = String::new();
    let mut spans = Vec::new();
    let mut last = 0;
    for p in placeholders(pattern) {
        out.push_str(&pattern[last..p.span.start]);
        last = p.span.end;
        let value = values
            .get(&p.slot)
            .ok_or_else(|| InstanceError::MissingSlot(p.slot.clone()))?;
        match (value, p.length) {
            (SlotValue::Seq(v), true) => out.push_str(&v.len().to_string()),
            (SlotValue::Scalar(_), true) => {
                return Err(InstanceError::MissingSlot(format!("len:{}", p.slot)))
            }
            (SlotValue::Scalar(v), false) => {
                let s = format_value(*v);
                spans.push((out.len()..out.len() + s.len(), SlotRef::scalar(&p.slot)));
                out.push_str(&s);
            }
            (SlotValue::Seq(vs), false) => {
                out.push(if p.paren { '(' } else { '[' });
                for (i, v) in vs.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    let s = format_value(*v);
                    spans.push((out.len()..out.len() + s.len(), SlotRef::element(&p.slot, i)));
                    out.push_str(&s);
                }
                out.push(if p.paren { ')' } else { ']' });
            }
        }
    }
    out.push_str(&pattern[last..]);
    Ok((out, spans))
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum InstanceError {
    #[error("slot `{0}` has no value")]
    MissingSlot(String),
    #[error("paraphrase index {0} out of range")]
    NoParaphrase(usize),
    #[error(transparent)]
    Unroll(#[from] UnrollError),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error("slot `{0}` does not surface as a quantity in the text")]
    Unaligned(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("gold value is not finite")]
    NonFinite,
}

/// A concrete question with its gold program.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionInstance {
    pub id: String,
    pub template_id: String,
    pub paraphrase_index: usize,
    pub topic: Topic,
    pub text: String,
    pub slot_values: SlotAssignment,
    /// Every number in the text, in order.
    pub quantities: Vec<f64>,
    /// The slot each quantity was rendered from (`name` or `name[i]`);
    /// `None` for numbers that are part of the paraphrase itself.
    pub quantity_slots: Vec<Option<String>>,
    pub gold_tree: ExprTree,
    pub gold_value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<f64>>,
}

impl QuestionInstance {
    pub fn quantity_slot(&self, i: usize) -> Option<SlotRef> {
        self.quantity_slots
            .get(i)?
            .as_deref()
            .and_then(SlotRef::parse_key)
    }

    /// Learner-facing name of quantity `i`, `q<i>` when it has no slot.
    pub fn quantity_name(&self, i: usize) -> String {
        self.quantity_slot(i)
            .map(|r| r.display_name())
            .unwrap_or_else(|| format!("q{i}"))
    }

    /// Lengths of the sequence slots, used to pin resampling.
    pub fn sequence_lengths(&self) -> BTreeMap<String, usize> {
        self.slot_values
            .iter()
            .filter_map(|(k, v)| match v {
                SlotValue::Seq(xs) => Some((k.clone(), xs.len())),
                SlotValue::Scalar(_) => None,
            })
            .collect()
    }

    /// Bindings for the gold tree when the slots take `values` instead;
    /// paraphrase literals keep their value.
    pub fn rebind(&self, values: &SlotAssignment) -> Vec<f64> {
        (0..self.quantities.len())
            .map(|i| {
                self.quantity_slot(i)
                    .and_then(|r| r.lookup(values))
                    .unwrap_or(self.quantities[i])
            })
            .collect()
    }
}

/// Renders paraphrase `paraphrase_index` with `values` and aligns the gold
/// tree with the quantities read back from the text.
pub fn instantiate(
    template: &QuestionTemplate,
    paraphrase_index: usize,
    values: &SlotAssignment,
    id: String,
) -> Result<QuestionInstance, InstanceError> {
    let pattern = template
        .paraphrases
        .get(paraphrase_index)
        .ok_or(InstanceError::NoParaphrase(paraphrase_index))?;
    let (text, spans) = render_text(pattern, values)?;
    let tokens = tokenize(&text)?;
    let quantities = extract_quantities(&tokens);
    let mut quantity_slots = Vec::with_capacity(quantities.len());
    let mut first: BTreeMap<SlotRef, usize> = BTreeMap::new();
    for (qi, q) in quantities.iter().enumerate() {
        let start = tokens[q.position].start;
        let slot = spans
            .iter()
            .find(|(r, _)| r.contains(&start))
            .map(|(_, s)| s.clone());
        if let Some(s) = &slot {
            first.entry(s.clone()).or_insert(qi);
        }
        quantity_slots.push(slot.map(|s| s.to_string()));
    }
    let root = template
        .tree
        .expand(values, &mut |r: &SlotRef| -> Result<Node, InstanceError> {
            first
                .get(r)
                .map(|&i| Node::quantity(i))
                .ok_or_else(|| InstanceError::Unaligned(r.to_string()))
        })?;
    let gold_tree = ExprTree::new(root).expect("template expansion preserves arity");
    let bindings: Vec<f64> = quantities.iter().map(|q| q.value).collect();
    let gold_value = gold_tree.evaluate(&bindings)?;
    if !gold_value.is_finite() {
        return Err(InstanceError::NonFinite);
    }
    Ok(QuestionInstance {
        id,
        template_id: template.id.clone(),
        paraphrase_index,
        topic: template.topic,
        text,
        slot_values: values.clone(),
        quantities: bindings,
        quantity_slots,
        gold_tree,
        gold_value,
        options: None,
    })
}
