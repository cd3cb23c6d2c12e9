//! Gold trees written over slot names.
//!
//! ```text
//! t := (op t ...) | $name | $name[i] | c:<real> | %acc | %x
//!    | (fold list INIT STEP)     acc = INIT, then acc = STEP for each x in list
//!    | (fold1 list FIRST STEP)   acc = FIRST with x = list[0], then STEP for the rest
//! ```

use std::collections::BTreeSet;
use std::fmt;

use super::{SlotAssignment, SlotValue};
use crate::expr::{ExprTree, Node, Operator};

/// A reference to one scalar inside a slot assignment.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotRef {
    pub name: String,
    pub index: Option<usize>,
}

impl SlotRef {
    pub fn scalar(name: &str) -> SlotRef {
        SlotRef {
            name: name.to_string(),
            index: None,
        }
    }

    pub fn element(name: &str, index: usize) -> SlotRef {
        SlotRef {
            name: name.to_string(),
            index: Some(index),
        }
    }

    /// Name shown to learners: `OA`, or `x_2` for the second element of `x`.
    pub fn display_name(&self) -> String {
        match self.index {
            None => self.name.clone(),
            Some(i) => format!("{}_{}", self.name, i + 1),
        }
    }

    /// Parses the `name` / `name[i]` key form.
    pub fn parse_key(key: &str) -> Option<SlotRef> {
        match key.split_once('[') {
            None => Some(SlotRef::scalar(key)),
            Some((name, rest)) => {
                let i = rest.strip_suffix(']')?.parse().ok()?;
                Some(SlotRef::element(name, i))
            }
        }
    }

    pub fn lookup(&self, values: &SlotAssignment) -> Option<f64> {
        match (values.get(&self.name)?, self.index) {
            (SlotValue::Scalar(v), None) => Some(*v),
            (SlotValue::Seq(vs), Some(i)) => vs.get(i).copied(),
            _ => None,
        }
    }
}

impl fmt::Display for SlotRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            None => write!(f, "{}", self.name),
            Some(i) => write!(f, "{}[{}]", self.name, i),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TemplateNode {
    Op(Operator, Vec<TemplateNode>),
    Slot(String),
    Element(String, usize),
    Const(f64),
    Acc,
    X,
    Fold {
        list: String,
        init: Box<TemplateNode>,
        step: Box<TemplateNode>,
    },
    Fold1 {
        list: String,
        first: Box<TemplateNode>,
        step: Box<TemplateNode>,
    },
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum UnrollError {
    #[error("list slot `{0}` has no bound length")]
    UnboundListLength(String),
    #[error("slot `{0}` is not bound")]
    UnboundSlot(String),
    #[error("`{0}` used outside a fold")]
    FreeVariable(&'static str),
    #[error("fold1 over empty list `{0}`")]
    EmptyFold1(String),
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("tree template error at byte {pos}: {message}")]
pub struct TemplateParseError {
    pub pos: usize,
    pub message: String,
}

impl TemplateNode {
    pub fn parse(text: &str) -> Result<TemplateNode, TemplateParseError> {
        let mut p = Parser { src: text, pos: 0 };
        let node = p.node()?;
        p.skip_ws();
        if p.pos != text.len() {
            return Err(p.error("trailing input"));
        }
        Ok(node)
    }

    /// Every slot name the template mentions.
    pub fn slot_names(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_slots(&mut out);
        out
    }

    fn collect_slots(&self, out: &mut BTreeSet<String>) {
        match self {
            TemplateNode::Op(_, cs) => cs.iter().for_each(|c| c.collect_slots(out)),
            TemplateNode::Slot(n) | TemplateNode::Element(n, _) => {
                out.insert(n.clone());
            }
            TemplateNode::Fold { list, init, step } => {
                out.insert(list.clone());
                init.collect_slots(out);
                step.collect_slots(out);
            }
            TemplateNode::Fold1 { list, first, step } => {
                out.insert(list.clone());
                first.collect_slots(out);
                step.collect_slots(out);
            }
            TemplateNode::Const(_) | TemplateNode::Acc | TemplateNode::X => {}
        }
    }

    /// Names used as fold lists.
    pub fn list_names(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_lists(&mut out);
        out
    }

    fn collect_lists(&self, out: &mut BTreeSet<String>) {
        match self {
            TemplateNode::Op(_, cs) => cs.iter().for_each(|c| c.collect_lists(out)),
            TemplateNode::Fold { list, init, step } => {
                out.insert(list.clone());
                init.collect_lists(out);
                step.collect_lists(out);
            }
            TemplateNode::Fold1 { list, first, step } => {
                out.insert(list.clone());
                first.collect_lists(out);
                step.collect_lists(out);
            }
            _ => {}
        }
    }

    /// Expands folds against concrete list lengths, mapping each slot
    /// reference to a leaf through `leaf`.
    pub fn expand<E>(
        &self,
        values: &SlotAssignment,
        leaf: &mut dyn FnMut(&SlotRef) -> Result<Node, E>,
    ) -> Result<Node, E>
    where
        E: From<UnrollError>,
    {
        self.expand_in(values, None, None, leaf)
    }

    fn expand_in<E>(
        &self,
        values: &SlotAssignment,
        acc: Option<&Node>,
        x: Option<&SlotRef>,
        leaf: &mut dyn FnMut(&SlotRef) -> Result<Node, E>,
    ) -> Result<Node, E>
    where
        E: From<UnrollError>,
    {
        let list_len = |name: &str| -> Result<usize, UnrollError> {
            match values.get(name) {
                Some(SlotValue::Seq(v)) => Ok(v.len()),
                _ => Err(UnrollError::UnboundListLength(name.to_string())),
            }
        };
        Ok(match self {
            TemplateNode::Op(op, cs) => {
                let children = cs
                    .iter()
                    .map(|c| c.expand_in(values, acc, x, leaf))
                    .collect::<Result<Vec<_>, E>>()?;
                Node::op(*op, children)
            }
            TemplateNode::Slot(n) => leaf(&SlotRef::scalar(n))?,
            TemplateNode::Element(n, i) => leaf(&SlotRef::element(n, *i))?,
            TemplateNode::Const(c) => Node::constant(*c),
            TemplateNode::Acc => acc.cloned().ok_or(UnrollError::FreeVariable("%acc"))?,
            TemplateNode::X => leaf(x.ok_or(UnrollError::FreeVariable("%x"))?)?,
            TemplateNode::Fold { list, init, step } => {
                let n = list_len(list)?;
                let mut cur = init.expand_in(values, acc, x, leaf)?;
                for i in 0..n {
                    let xi = SlotRef::element(list, i);
                    cur = step.expand_in(values, Some(&cur), Some(&xi), leaf)?;
                }
                cur
            }
            TemplateNode::Fold1 { list, first, step } => {
                let n = list_len(list)?;
                if n == 0 {
                    return Err(UnrollError::EmptyFold1(list.clone()).into());
                }
                let x0 = SlotRef::element(list, 0);
                let mut cur = first.expand_in(values, acc, Some(&x0), leaf)?;
                for i in 1..n {
                    let xi = SlotRef::element(list, i);
                    cur = step.expand_in(values, Some(&cur), Some(&xi), leaf)?;
                }
                cur
            }
        })
    }
}

/// Expands a template into a closed tree whose leaves are the slot values.
pub fn unroll(template: &TemplateNode, values: &SlotAssignment) -> Result<ExprTree, UnrollError> {
    let root = template.expand(values, &mut |r: &SlotRef| {
        r.lookup(values)
            .map(Node::constant)
            .ok_or_else(|| UnrollError::UnboundSlot(r.to_string()))
    })?;
    Ok(ExprTree::new(root).expect("template expansion preserves arity"))
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: &str) -> TemplateParseError {
        TemplateParseError {
            pos: self.pos,
            message: message.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.src[self.pos..].chars().next() {
            if !c.is_whitespace() {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    fn atom(&mut self) -> String {
        let start = self.pos;
        while let Some(c) = self.src[self.pos..].chars().next() {
            if c.is_whitespace() || c == '(' || c == ')' {
                break;
            }
            self.pos += c.len_utf8();
        }
        self.src[start..self.pos].to_string()
    }

    fn node(&mut self) -> Result<TemplateNode, TemplateParseError> {
        self.skip_ws();
        match self.src[self.pos..].chars().next() {
            None => Err(self.error("unexpected end of input")),
            Some(')') => Err(self.error("unexpected `)`")),
            Some('(') => {
                self.pos += 1;
                self.skip_ws();
                let head = self.atom();
                if head == "fold" || head == "fold1" {
                    self.skip_ws();
                    let list = self.atom();
                    let list = list.strip_prefix('$').unwrap_or(&list).to_string();
                    if !is_ident(&list) {
                        return Err(self.error("fold needs a list slot name"));
                    }
                    let a = Box::new(self.node()?);
                    let b = Box::new(self.node()?);
                    self.close()?;
                    return Ok(if head == "fold" {
                        TemplateNode::Fold {
                            list,
                            init: a,
                            step: b,
                        }
                    } else {
                        TemplateNode::Fold1 {
                            list,
                            first: a,
                            step: b,
                        }
                    });
                }
                let op = Operator::from_name(&head)
                    .ok_or_else(|| self.error(&format!("unknown operator `{head}`")))?;
                let mut children = Vec::new();
                loop {
                    self.skip_ws();
                    match self.src[self.pos..].chars().next() {
                        None => return Err(self.error("unclosed `(`")),
                        Some(')') => {
                            self.pos += 1;
                            break;
                        }
                        Some(_) => children.push(self.node()?),
                    }
                }
                if children.len() != op.arity() {
                    return Err(self.error(&format!(
                        "`{op}` takes {} operands, got {}",
                        op.arity(),
                        children.len()
                    )));
                }
                Ok(TemplateNode::Op(op, children))
            }
            Some(_) => {
                let atom = self.atom();
                leaf(&atom).ok_or_else(|| self.error(&format!("unexpected atom `{atom}`")))
            }
        }
    }

    fn close(&mut self) -> Result<(), TemplateParseError> {
        self.skip_ws();
        if self.src[self.pos..].starts_with(')') {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error("expected `)`"))
        }
    }
}

fn is_ident(s: &str) -> bool {
    let mut cs = s.chars();
    matches!(cs.next(), Some(c) if c.is_alphabetic() || c == '_')
        && cs.all(|c| c.is_alphanumeric() || c == '_')
}

fn leaf(atom: &str) -> Option<TemplateNode> {
    match atom {
        "%acc" => return Some(TemplateNode::Acc),
        "%x" => return Some(TemplateNode::X),
        _ => {}
    }
    if let Some(c) = atom.strip_prefix("c:") {
        return c.parse().ok().map(TemplateNode::Const);
    }
    let name = atom.strip_prefix('$')?;
    match name.split_once('[') {
        None => is_ident(name).then(|| TemplateNode::Slot(name.to_string())),
        Some((n, rest)) => {
            let i = rest.strip_suffix(']')?.parse().ok()?;
            is_ident(n).then(|| TemplateNode::Element(n.to_string(), i))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::format_value;

    fn assign(pairs: &[(&str, SlotValue)]) -> SlotAssignment {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    const RNN: &str = "(fold x $s0 (add (mul $w %acc) %x))";

    #[test]
    fn rnn_unroll_matches_table_value() {
        let t = TemplateNode::parse(RNN).unwrap();
        let v = assign(&[
            ("s0", SlotValue::Scalar(1.5)),
            ("w", SlotValue::Scalar(1.5)),
            ("x", SlotValue::Seq(vec![1.0, 0.0, 2.0])),
        ]);
        let tree = unroll(&t, &v).unwrap();
        assert_eq!(format_value(tree.evaluate(&[]).unwrap()), "9.31");
        assert_eq!(tree.depth(), 1 + 2 * 3);
    }

    #[test]
    fn empty_list_leaves_initial_state() {
        let t = TemplateNode::parse(RNN).unwrap();
        let v = assign(&[
            ("s0", SlotValue::Scalar(1.5)),
            ("w", SlotValue::Scalar(1.5)),
            ("x", SlotValue::Seq(vec![])),
        ]);
        let tree = unroll(&t, &v).unwrap();
        assert_eq!(tree.node_count(), 1);
        assert_eq!(tree.serialize(), "c:1.5");
    }

    #[test]
    fn max_chain() {
        let t = TemplateNode::parse("(mul $g (fold x $s0 (max %acc %x)))").unwrap();
        let v = assign(&[
            ("s0", SlotValue::Scalar(2.0)),
            ("g", SlotValue::Scalar(4.0)),
            ("x", SlotValue::Seq(vec![7.0, 14.0, 13.0, 10.0])),
        ]);
        let tree = unroll(&t, &v).unwrap();
        assert_eq!(tree.evaluate(&[]).unwrap(), 56.0);
        assert_eq!(tree.depth(), 2 + 4);
    }

    #[test]
    fn unbound_list() {
        let t = TemplateNode::parse(RNN).unwrap();
        let v = assign(&[
            ("s0", SlotValue::Scalar(1.0)),
            ("w", SlotValue::Scalar(1.0)),
        ]);
        assert_eq!(
            unroll(&t, &v),
            Err(UnrollError::UnboundListLength("x".into()))
        );
    }

    #[test]
    fn fold1_and_elements() {
        let t = TemplateNode::parse("(pow (fold1 v (pow %x c:2) (add %acc (pow %x c:2))) c:0.5)")
            .unwrap();
        let v = assign(&[("v", SlotValue::Seq(vec![10.0, 10.0, 1.0]))]);
        assert_eq!(
            format_value(unroll(&t, &v).unwrap().evaluate(&[]).unwrap()),
            "14.18"
        );
        let t = TemplateNode::parse("(add (mul $a[0] $b[0]) (mul $a[1] $b[1]))").unwrap();
        assert_eq!(
            t.slot_names().into_iter().collect::<Vec<_>>(),
            vec!["a", "b"]
        );
        let v = assign(&[
            ("a", SlotValue::Seq(vec![4.0, 1.0])),
            ("b", SlotValue::Seq(vec![2.0, -4.0])),
        ]);
        assert_eq!(unroll(&t, &v).unwrap().evaluate(&[]).unwrap(), 4.0);
    }

    #[test]
    fn parse_errors() {
        for bad in [
            "(log $a $b)",
            "(fold $x c:0)",
            "$",
            "(add $a",
            "%y",
            "(foo $a)",
        ] {
            assert!(TemplateNode::parse(bad).is_err(), "{bad}");
        }
        let t = TemplateNode::parse("%acc").unwrap();
        assert_eq!(
            unroll(&t, &SlotAssignment::new()),
            Err(UnrollError::FreeVariable("%acc"))
        );
    }

    #[test]
    fn slot_ref_keys() {
        assert_eq!(SlotRef::parse_key("x[2]"), Some(SlotRef::element("x", 2)));
        assert_eq!(SlotRef::element("x", 2).to_string(), "x[2]");
        assert_eq!(SlotRef::element("x", 2).display_name(), "x_3");
        assert_eq!(SlotRef::parse_key("OA").unwrap().display_name(), "OA");
    }
}
