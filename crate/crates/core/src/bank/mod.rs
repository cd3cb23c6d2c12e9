//! Question templates, value sampling and dataset augmentation.

mod augment;
mod render;
mod sample;
mod tree_template;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use augment::{augment, read_dataset, write_dataset, Dataset, DatasetError, DatasetHeader};
pub use render::{
    instantiate, placeholders, render_text, InstanceError, Placeholder, QuestionInstance,
};
pub use sample::{
    in_range, is_valid, sample_values, sample_values_pinned, stream_rng, Cmp, SampleError, Validity,
};
pub use tree_template::{unroll, SlotRef, TemplateNode, TemplateParseError, UnrollError};

/// The shipped bank.
pub const DEFAULT_BANK_JSON: &str = include_str!("../../data/default_bank.json");

/// The twelve course topics, in course order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Topic {
    Basics,
    Perceptrons,
    Features,
    LogisticRegression,
    Regression,
    NeuralNetworksI,
    NeuralNetworksII,
    ConvolutionalNeuralNetworks,
    RecurrentNeuralNetworks,
    StateMachines,
    ReinforcementLearning,
    DecisionTrees,
}

impl Topic {
    pub const ALL: [Topic; 12] = [
        Topic::Basics,
        Topic::Perceptrons,
        Topic::Features,
        Topic::LogisticRegression,
        Topic::Regression,
        Topic::NeuralNetworksI,
        Topic::NeuralNetworksII,
        Topic::ConvolutionalNeuralNetworks,
        Topic::RecurrentNeuralNetworks,
        Topic::StateMachines,
        Topic::ReinforcementLearning,
        Topic::DecisionTrees,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Topic::Basics => "Basics",
            Topic::Perceptrons => "Perceptrons",
            Topic::Features => "Features",
            Topic::LogisticRegression => "Logistic regression",
            Topic::Regression => "Regression",
            Topic::NeuralNetworksI => "Neural networks I",
            Topic::NeuralNetworksII => "Neural networks II",
            Topic::ConvolutionalNeuralNetworks => "Convolutional neural networks",
            Topic::RecurrentNeuralNetworks => "Recurrent neural networks",
            Topic::StateMachines => "State machines and MDPs",
            Topic::ReinforcementLearning => "Reinforcement learning",
            Topic::DecisionTrees => "Decision trees",
        }
    }

    pub fn index(self) -> usize {
        Topic::ALL.iter().position(|&t| t == self).unwrap()
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("unknown topic `{0}`")]
pub struct UnknownTopic(pub String);

impl FromStr for Topic {
    type Err = UnknownTopic;

    /// Accepts the display name in any letter case.
    fn from_str(s: &str) -> Result<Topic, UnknownTopic> {
        Topic::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| UnknownTopic(s.to_string()))
    }
}

impl Serialize for Topic {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Topic {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Topic, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A sampled slot value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SlotValue {
    Scalar(f64),
    Seq(Vec<f64>),
}

pub type SlotAssignment = BTreeMap<String, SlotValue>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotKind {
    Scalar,
    Int,
    Vector,
    List,
}

impl SlotKind {
    pub fn is_sequence(self) -> bool {
        matches!(self, SlotKind::Vector | SlotKind::List)
    }
}

/// A named hole in the question text. Values are `min + k * step`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Slot {
    pub name: String,
    pub kind: SlotKind,
    pub min: f64,
    pub max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_len: Option<usize>,
}

impl Slot {
    pub fn step(&self) -> f64 {
        self.step.unwrap_or(match self.kind {
            SlotKind::Scalar => 0.01,
            _ => 1.0,
        })
    }

    pub fn len_range(&self) -> (usize, usize) {
        let lo = self.min_len.unwrap_or(1);
        (lo, self.max_len.unwrap_or(lo))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTemplate {
    id: String,
    topic: String,
    paraphrases: Vec<String>,
    slots: Vec<Slot>,
    tree: String,
    #[serde(default)]
    validity: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBank {
    format: u32,
    version: String,
    templates: Vec<RawTemplate>,
}

#[derive(Clone, Debug)]
pub struct QuestionTemplate {
    pub id: String,
    pub topic: Topic,
    pub paraphrases: Vec<String>,
    pub slots: Vec<Slot>,
    pub tree_source: String,
    pub tree: TemplateNode,
    pub validity: Vec<Validity>,
}

impl QuestionTemplate {
    pub fn slot(&self, name: &str) -> Option<&Slot> {
        self.slots.iter().find(|s| s.name == name)
    }

    fn from_raw(raw: RawTemplate) -> Result<QuestionTemplate, String> {
        let topic: Topic = raw
            .topic
            .parse()
            .map_err(|e: UnknownTopic| format!("topic: {e}"))?;
        if raw.id.trim().is_empty() {
            return Err("id: empty".into());
        }
        if raw.paraphrases.len() < 5 {
            return Err(format!(
                "paraphrases: need at least 5, found {}",
                raw.paraphrases.len()
            ));
        }
        let mut names = BTreeSet::new();
        for s in &raw.slots {
            if !names.insert(s.name.clone()) {
                return Err(format!("slots: duplicate slot `{}`", s.name));
            }
            if !(s.min <= s.max) || s.step() <= 0.0 {
                return Err(format!("slots.{}: bad range", s.name));
            }
            if s.kind == SlotKind::Int && (s.min.fract() != 0.0 || s.step().fract() != 0.0) {
                return Err(format!(
                    "slots.{}: int slot needs integer min and step",
                    s.name
                ));
            }
            let (lo, hi) = s.len_range();
            if s.kind.is_sequence() && lo > hi {
                return Err(format!("slots.{}: min_len exceeds max_len", s.name));
            }
        }
        let tree = TemplateNode::parse(&raw.tree).map_err(|e| format!("tree: {e}"))?;
        for n in tree.slot_names() {
            if !names.contains(&n) {
                return Err(format!("tree: undeclared slot `{n}`"));
            }
        }
        for n in tree.list_names() {
            if !raw
                .slots
                .iter()
                .any(|s| s.name == n && s.kind.is_sequence())
            {
                return Err(format!("tree: fold over non-sequence slot `{n}`"));
            }
        }
        for (i, text) in raw.paraphrases.iter().enumerate() {
            let used: BTreeSet<String> = placeholders(text).into_iter().map(|p| p.slot).collect();
            for n in &used {
                if !names.contains(n) {
                    return Err(format!("paraphrases[{i}]: undeclared slot `{n}`"));
                }
            }
            for n in tree.slot_names() {
                if !used.contains(&n) {
                    return Err(format!(
                        "paraphrases[{i}]: tree slot `{n}` never appears in the text"
                    ));
                }
            }
        }
        let validity = raw
            .validity
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let p: Validity = v.parse().map_err(|e| format!("validity[{i}]: {e}"))?;
                for n in p.slot_names() {
                    if !names.contains(&n) {
                        return Err(format!("validity[{i}]: undeclared slot `{n}`"));
                    }
                }
                Ok(p)
            })
            .collect::<Result<Vec<_>, String>>()?;
        Ok(QuestionTemplate {
            id: raw.id,
            topic,
            paraphrases: raw.paraphrases,
            slots: raw.slots,
            tree_source: raw.tree,
            tree,
            validity,
        })
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("schema error{}: {field}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
pub struct SchemaError {
    pub line: Option<usize>,
    pub field: String,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct TemplateBank {
    pub version: String,
    pub templates: Vec<QuestionTemplate>,
}

impl TemplateBank {
    /// Parses and validates a bank. With `require_complete`, every topic must
    /// have at least two templates.
    pub fn from_json_str(text: &str, require_complete: bool) -> Result<TemplateBank, SchemaError> {
        if text.trim().is_empty() {
            return Err(SchemaError {
                line: None,
                field: "<root>".into(),
                message: "empty bank file".into(),
            });
        }
        let raw: RawBank = serde_json::from_str(text).map_err(|e| SchemaError {
            line: Some(e.line()),
            field: "<json>".into(),
            message: e.to_string(),
        })?;
        if raw.format != 1 {
            return Err(SchemaError {
                line: line_of(text, "\"format\""),
                field: "format".into(),
                message: format!("unsupported format {}", raw.format),
            });
        }
        let mut ids = BTreeSet::new();
        let mut templates = Vec::new();
        for (i, t) in raw.templates.into_iter().enumerate() {
            let id = t.id.clone();
            let line = line_of(text, &format!("\"{id}\""));
            if !ids.insert(id.clone()) {
                return Err(SchemaError {
                    line,
                    field: format!("templates[{i}].id"),
                    message: format!("duplicate id `{id}`"),
                });
            }
            let template = QuestionTemplate::from_raw(t).map_err(|m| {
                let (field, message) = m.split_once(": ").unwrap_or(("", &m));
                SchemaError {
                    line,
                    field: format!("templates[{i}] ({id}).{field}"),
                    message: message.to_string(),
                }
            })?;
            templates.push(template);
        }
        let bank = TemplateBank {
            version: raw.version,
            templates,
        };
        if require_complete {
            let thin: Vec<&str> = Topic::ALL
                .iter()
                .filter(|t| bank.templates.iter().filter(|x| x.topic == **t).count() < 2)
                .map(|t| t.name())
                .collect();
            if !thin.is_empty() {
                return Err(SchemaError {
                    line: None,
                    field: "templates".into(),
                    message: format!("topics with fewer than 2 templates: {}", thin.join(", ")),
                });
            }
        }
        Ok(bank)
    }

    pub fn default_bank() -> TemplateBank {
        TemplateBank::from_json_str(DEFAULT_BANK_JSON, true).expect("shipped bank is valid")
    }

    pub fn template(&self, id: &str) -> Option<&QuestionTemplate> {
        self.templates.iter().find(|t| t.id == id)
    }

    pub fn topics(&self) -> BTreeSet<Topic> {
        self.templates.iter().map(|t| t.topic).collect()
    }
}

fn line_of(text: &str, needle: &str) -> Option<usize> {
    text.find(needle)
        .map(|at| text[..at].matches('\n').count() + 1)
}

/// Reads and validates a complete bank file.
pub fn load_bank(path: &Path) -> Result<TemplateBank, SchemaError> {
    let text = std::fs::read_to_string(path).map_err(|e| SchemaError {
        line: None,
        field: "<file>".into(),
        message: format!("{}: {e}", path.display()),
    })?;
    TemplateBank::from_json_str(&text, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_bank_shape() {
        let bank = TemplateBank::default_bank();
        assert_eq!(bank.templates.len(), 28);
        assert_eq!(bank.topics().len(), 12);
        for t in &bank.templates {
            assert!(t.paraphrases.len() >= 5, "{}", t.id);
        }
    }

    #[test]
    fn empty_file_is_schema_error() {
        let e = TemplateBank::from_json_str("", true).unwrap_err();
        assert_eq!(e.field, "<root>");
        let e = TemplateBank::from_json_str("{\n \"format\": 1,\n \"version\": 3\n}", true)
            .unwrap_err();
        assert_eq!(e.line, Some(3));
    }

    #[test]
    fn missing_topic_is_named() {
        let raw: serde_json::Value = serde_json::from_str(DEFAULT_BANK_JSON).unwrap();
        let mut raw = raw;
        let ts = raw["templates"].as_array_mut().unwrap();
        ts.retain(|t| t["topic"] != "Decision trees");
        let e = TemplateBank::from_json_str(&raw.to_string(), true).unwrap_err();
        assert!(e.message.contains("Decision trees"), "{e}");
        assert!(!e.message.contains("Basics"));
    }

    #[test]
    fn template_diagnostics() {
        let one = |tweak: &dyn Fn(&mut serde_json::Value)| {
            let mut raw: serde_json::Value = serde_json::from_str(DEFAULT_BANK_JSON).unwrap();
            tweak(&mut raw["templates"][0]);
            TemplateBank::from_json_str(&serde_json::to_string_pretty(&raw).unwrap(), true)
                .unwrap_err()
        };
        let e = one(&|t| t["paraphrases"][0] = "What is {nope}?".into());
        assert!(e.message.contains("nope"), "{e}");
        assert!(e.line.is_some());
        let e = one(&|t| t["tree"] = "(log $v $v)".into());
        assert!(e.field.ends_with("tree"), "{e}");
        let e = one(&|t| t["topic"] = "Quantum".into());
        assert!(e.field.ends_with("topic"), "{e}");
        let e = one(&|t| t["paraphrases"].as_array_mut().unwrap().truncate(4));
        assert!(e.message.contains("at least 5"), "{e}");
    }

    #[test]
    fn topic_names_round_trip() {
        for t in Topic::ALL {
            assert_eq!(t.name().parse::<Topic>().unwrap(), t);
        }
        assert!("Quantum".parse::<Topic>().is_err());
        assert_eq!("perceptrons".parse::<Topic>().unwrap(), Topic::Perceptrons);
    }
}
