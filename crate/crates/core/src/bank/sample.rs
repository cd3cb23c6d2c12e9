use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tree_template::{unroll, TemplateNode};
use super::{QuestionTemplate, Slot, SlotAssignment, SlotKind, SlotValue};
use crate::expr::{format_value, ExprTree};

const MAX_DRAWS: usize = 1000;

/// Comparison operator of a [`Validity`] predicate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cmp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

/// A predicate over slot values: `lhs OP rhs` with both sides tree templates,
/// or the literals `true` / `false`.
#[derive(Clone, Debug, PartialEq)]
pub enum Validity {
    Const(bool),
    Compare(TemplateNode, Cmp, TemplateNode),
}

impl FromStr for Validity {
    type Err = String;

    fn from_str(s: &str) -> Result<Validity, String> {
        match s.trim() {
            "true" => return Ok(Validity::Const(true)),
            "false" => return Ok(Validity::Const(false)),
            _ => {}
        }
        for (tok, cmp) in [
            (" <= ", Cmp::Le),
            (" >= ", Cmp::Ge),
            (" == ", Cmp::Eq),
            (" != ", Cmp::Ne),
            (" < ", Cmp::Lt),
            (" > ", Cmp::Gt),
        ] {
            if let Some((l, r)) = s.split_once(tok) {
                let l = TemplateNode::parse(l.trim()).map_err(|e| e.to_string())?;
                let r = TemplateNode::parse(r.trim()).map_err(|e| e.to_string())?;
                return Ok(Validity::Compare(l, cmp, r));
            }
        }
        Err(format!("expected `lhs OP rhs`, got `{s}`"))
    }
}

impl Validity {
    pub fn slot_names(&self) -> BTreeSet<String> {
        match self {
            Validity::Const(_) => BTreeSet::new(),
            Validity::Compare(l, _, r) => {
                let mut s = l.slot_names();
                s.extend(r.slot_names());
                s
            }
        }
    }

    pub fn holds(&self, values: &SlotAssignment) -> bool {
        match self {
            Validity::Const(b) => *b,
            Validity::Compare(l, cmp, r) => {
                let side =
                    |t: &TemplateNode| unroll(t, values).ok().and_then(|t| t.evaluate(&[]).ok());
                let (Some(a), Some(b)) = (side(l), side(r)) else {
                    return false;
                };
                match cmp {
                    Cmp::Lt => a < b,
                    Cmp::Le => a <= b,
                    Cmp::Gt => a > b,
                    Cmp::Ge => a >= b,
                    Cmp::Eq => a == b,
                    Cmp::Ne => a != b,
                }
            }
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SampleError {
    #[error("template `{template}`: no valid assignment in {draws} draws")]
    ExhaustedRetries { template: String, draws: usize },
}

/// Deterministic generator for one (seed, template, paraphrase) stream.
pub fn stream_rng(seed: u64, template_id: &str, paraphrase_index: usize) -> ChaCha8Rng {
    // FNV-1a over the stream key
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let key = seed
        .to_le_bytes()
        .into_iter()
        .chain(template_id.bytes())
        .chain([0xff])
        .chain((paraphrase_index as u64).to_le_bytes());
    for b in key {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Rounds through the text renderer so the value equals what a reader sees.
fn snap(v: f64) -> f64 {
    format_value(v).parse().unwrap()
}

fn draw_scalar(slot: &Slot, rng: &mut impl Rng) -> f64 {
    let step = slot.step();
    let steps = ((slot.max - slot.min) / step + 1e-9).floor() as u64;
    let k = rng.random_range(0..=steps);
    snap(slot.min + k as f64 * step)
}

fn draw(slot: &Slot, len: Option<usize>, rng: &mut impl Rng) -> SlotValue {
    if slot.kind.is_sequence() {
        let (lo, hi) = slot.len_range();
        let n = len.unwrap_or_else(|| rng.random_range(lo..=hi));
        SlotValue::Seq((0..n).map(|_| draw_scalar(slot, rng)).collect())
    } else {
        SlotValue::Scalar(draw_scalar(slot, rng))
    }
}

/// Whether the assignment satisfies every predicate and yields a finite gold value.
pub fn is_valid(template: &QuestionTemplate, values: &SlotAssignment) -> bool {
    template.validity.iter().all(|v| v.holds(values))
        && unroll(&template.tree, values)
            .ok()
            .and_then(|t: ExprTree| t.evaluate(&[]).ok())
            .is_some_and(f64::is_finite)
}

/// Draws a valid assignment by rejection sampling.
pub fn sample_values(
    template: &QuestionTemplate,
    rng: &mut impl Rng,
) -> Result<SlotAssignment, SampleError> {
    sample_values_pinned(template, rng, &BTreeMap::new())
}

/// As [`sample_values`], with the lengths of the named sequence slots fixed.
pub fn sample_values_pinned(
    template: &QuestionTemplate,
    rng: &mut impl Rng,
    lengths: &BTreeMap<String, usize>,
) -> Result<SlotAssignment, SampleError> {
    for _ in 0..MAX_DRAWS {
        let values: SlotAssignment = template
            .slots
            .iter()
            .map(|s| (s.name.clone(), draw(s, lengths.get(&s.name).copied(), rng)))
            .collect();
        if is_valid(template, &values) {
            return Ok(values);
        }
    }
    Err(SampleError::ExhaustedRetries {
        template: template.id.clone(),
        draws: MAX_DRAWS,
    })
}

/// Checks each value against its slot's kind and range.
pub fn in_range(template: &QuestionTemplate, values: &SlotAssignment) -> bool {
    template.slots.iter().all(|s| {
        let ok = |v: f64| {
            v >= s.min - 1e-9 && v <= s.max + 1e-9 && (s.kind != SlotKind::Int || v.fract() == 0.0)
        };
        match values.get(&s.name) {
            Some(SlotValue::Scalar(v)) => !s.kind.is_sequence() && ok(*v),
            Some(SlotValue::Seq(vs)) => {
                let (lo, hi) = s.len_range();
                s.kind.is_sequence()
                    && vs.len() >= lo
                    && vs.len() <= hi
                    && vs.iter().all(|&v| ok(v))
            }
            None => false,
        }
    })
}
