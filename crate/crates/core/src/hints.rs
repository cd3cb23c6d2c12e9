//! Graded hints: for every operator node of a solution tree, the
//! sub-expression with slot names, with the question's values, and with
//! freshly drawn example values.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bank::{sample_values_pinned, QuestionInstance, TemplateBank};
use crate::expr::{format_value, render_infix, wrapped_under, ExprTree, InfixStyle, Leaf, Node};

const EXAMPLE_DRAWS: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HintStep {
    /// 1-based position in the sequence.
    pub index: usize,
    /// Child indices from the root to the hinted node.
    pub path: Vec<usize>,
    pub expression_hint: String,
    pub value_hint: String,
    pub example_hint: String,
    pub value: f64,
    pub example_value: f64,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum HintError {
    #[error("the solution is a single value; there is nothing to hint")]
    NoHints,
    #[error("all hints have been given; reveal the solution")]
    ExhaustedHints,
    #[error("hinted sub-expression cannot be evaluated: {0}")]
    Undefined(String),
}

fn leaf_text(names: &[String], l: &Leaf) -> String {
    match l {
        Leaf::Quantity(i) => names.get(*i).cloned().unwrap_or_else(|| format!("q{i}")),
        Leaf::Constant(c) => format_value(*c),
    }
}

fn value_text(bindings: &[f64], l: &Leaf) -> String {
    match l {
        Leaf::Quantity(i) => bindings
            .get(*i)
            .map(|v| format_value(*v))
            .unwrap_or_else(|| format!("q{i}")),
        Leaf::Constant(c) => format_value(*c),
    }
}

/// Builds one step per operator node, children before parents, so the first
/// step is the left-most non-leaf and the last is the whole solution.
///
/// `names` label the quantities in expression hints; `bindings` and
/// `example` supply the values for the other two renderings.
pub fn hints_for_tree(
    tree: &ExprTree,
    names: &[String],
    bindings: &[f64],
    example: &[f64],
) -> Result<Vec<HintStep>, HintError> {
    let order = tree.nonleaf_postorder();
    if order.is_empty() {
        return Err(HintError::NoHints);
    }
    let mut steps = Vec::with_capacity(order.len());
    for (k, r) in order.iter().enumerate() {
        let node = r.node;
        let sub = ExprTree::new(node.clone()).expect("subtree of a valid tree");
        let value = sub
            .evaluate(bindings)
            .map_err(|e| HintError::Undefined(e.to_string()))?;
        let example_value = sub
            .evaluate(example)
            .map_err(|e| HintError::Undefined(e.to_string()))?;
        let mut expression = render_infix(node, InfixStyle::Spaced, &|l| leaf_text(names, l));
        let parent = (!r.path.is_empty())
            .then(|| tree.root().at(&r.path[..r.path.len() - 1]))
            .flatten();
        if parent.is_some_and(|p: &Node| wrapped_under(p, node)) {
            expression = format!("({expression})");
        }
        let values = render_infix(node, InfixStyle::Spaced, &|l| value_text(bindings, l));
        let examples = render_infix(node, InfixStyle::Spaced, &|l| value_text(example, l));
        steps.push(HintStep {
            index: k + 1,
            path: r.path.clone(),
            expression_hint: expression,
            value_hint: format!("{values} = {}", format_value(value)),
            example_hint: format!("{examples} = {}", format_value(example_value)),
            value,
            example_value,
        });
    }
    Ok(steps)
}

/// Hints for a bank instance's gold tree with the given example slot values.
/// Slots missing from `example` keep the question's value.
pub fn hints_with_examples(
    instance: &QuestionInstance,
    example: &crate::bank::SlotAssignment,
) -> Result<Vec<HintStep>, HintError> {
    let names: Vec<String> = (0..instance.quantities.len())
        .map(|i| instance.quantity_name(i))
        .collect();
    hints_for_tree(
        &instance.gold_tree,
        &names,
        &instance.quantities,
        &instance.rebind(example),
    )
}

/// Hints for a bank instance, drawing example values from its template under
/// the template's validity predicates. Sequence lengths are kept so the
/// example shares the tree's shape.
pub fn hint_sequence(
    instance: &QuestionInstance,
    bank: &TemplateBank,
    rng: &mut impl Rng,
) -> Result<Vec<HintStep>, HintError> {
    if instance.gold_tree.root().is_leaf() {
        return Err(HintError::NoHints);
    }
    let Some(template) = bank.template(&instance.template_id) else {
        let names: Vec<String> = (0..instance.quantities.len())
            .map(|i| instance.quantity_name(i))
            .collect();
        let example = example_bindings(&instance.gold_tree, &instance.quantities, rng);
        return hints_for_tree(&instance.gold_tree, &names, &instance.quantities, &example);
    };
    let lengths = instance.sequence_lengths();
    let mut last = None;
    for _ in 0..EXAMPLE_DRAWS {
        let Ok(values) = sample_values_pinned(template, rng, &lengths) else {
            break;
        };
        match hints_with_examples(instance, &values) {
            Ok(steps) => return Ok(steps),
            Err(e) => last = Some(e),
        }
    }
    match last {
        Some(e) => Err(e),
        None => hints_with_examples(instance, &instance.slot_values),
    }
}

/// Example values for a tree with no template: small integers for every
/// quantity, redrawn until every sub-expression is defined. Falls back to
/// the question's own values.
pub fn example_bindings(tree: &ExprTree, quantities: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    let subtrees: Vec<ExprTree> = tree
        .nonleaf_postorder()
        .iter()
        .map(|r| ExprTree::new(r.node.clone()).expect("subtree of a valid tree"))
        .collect();
    for _ in 0..EXAMPLE_DRAWS {
        let draw: Vec<f64> = quantities
            .iter()
            .map(|_| rng.random_range(1..=9) as f64)
            .collect();
        if subtrees
            .iter()
            .all(|t| t.evaluate(&draw).is_ok_and(f64::is_finite))
        {
            return draw;
        }
    }
    quantities.to_vec()
}

/// Hints for a predicted tree on free-form text, with quantities named `q<i>`.
pub fn hints_for_prediction(
    tree: &ExprTree,
    quantities: &[f64],
    rng: &mut impl Rng,
) -> Result<Vec<HintStep>, HintError> {
    let names: Vec<String> = (0..quantities.len()).map(|i| format!("q{i}")).collect();
    let example = example_bindings(tree, quantities, rng);
    hints_for_tree(tree, &names, quantities, &example)
}

/// The step after `cursor` and the advanced cursor.
pub fn next_hint(sequence: &[HintStep], cursor: usize) -> Result<(&HintStep, usize), HintError> {
    sequence
        .get(cursor)
        .map(|s| (s, cursor + 1))
        .ok_or(HintError::ExhaustedHints)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::{instantiate, stream_rng, SlotAssignment, SlotValue};
    use crate::expr::parse_tree;

    fn scalars(pairs: &[(&str, f64)]) -> SlotAssignment {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), SlotValue::Scalar(*v)))
            .collect()
    }

    fn table5() -> QuestionInstance {
        let bank = TemplateBank::default_bank();
        let v = scalars(&[
            ("x1", 2.0),
            ("w1", 1.0),
            ("OA", 0.5),
            ("wOA", 2.0),
            ("wAC", 1.0),
            ("OC", 1.0),
            ("wOC", 3.0),
        ]);
        instantiate(bank.template("nn1_chain").unwrap(), 0, &v, "t5".into()).unwrap()
    }

    #[test]
    fn table5_hints() {
        let inst = table5();
        let ex = scalars(&[
            ("OA", 8.0),
            ("wOA", 9.0),
            ("wAC", 3.0),
            ("OC", 2.0),
            ("wOC", 4.0),
        ]);
        let steps = hints_with_examples(&inst, &ex).unwrap();
        let strip = |s: &str| s.replace(' ', "");
        let col = |f: fn(&HintStep) -> &String| {
            steps
                .iter()
                .take(3)
                .map(|s| strip(f(s)))
                .collect::<Vec<_>>()
        };
        assert_eq!(
            col(|s| &s.expression_hint),
            ["(OA*wOA)", "(OA*wOA)*wAC", "OC*wOC"]
        );
        assert_eq!(col(|s| &s.value_hint), ["0.5*2=1", "(0.5*2)*1=1", "1*3=3"]);
        assert_eq!(col(|s| &s.example_hint), ["8*9=72", "(8*9)*3=216", "2*4=8"]);
        assert_eq!(steps.len(), 4);
        assert_eq!(steps[3].value, inst.gold_value);
    }

    #[test]
    fn count_and_consistency() {
        let bank = TemplateBank::default_bank();
        for t in &bank.templates {
            let mut rng = stream_rng(5, &t.id, 0);
            let values = crate::bank::sample_values(t, &mut rng).unwrap();
            let inst = instantiate(t, 0, &values, "x".into()).unwrap();
            let steps = hint_sequence(&inst, &bank, &mut rng).unwrap();
            let t = &inst.gold_tree;
            assert_eq!(
                steps.len(),
                t.node_count() - t.leaf_count(),
                "{}",
                inst.template_id
            );
            assert_eq!(steps.last().unwrap().value, inst.gold_value);
            assert!(steps.last().unwrap().path.is_empty());
            for s in &steps {
                let sub = t.subtree(&s.path).unwrap();
                assert_eq!(sub.evaluate(&inst.quantities).unwrap(), s.value);
                assert!(s
                    .value_hint
                    .ends_with(&format!("= {}", format_value(s.value))));
            }
        }
    }

    #[test]
    fn hints_never_run_ahead() {
        let tree = parse_tree("(add (mul (mul q0 q1) q2) (mul q3 q4))").unwrap();
        let steps = hints_for_tree(&tree, &[], &[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0; 5]).unwrap();
        for (k, s) in steps.iter().enumerate() {
            for later in &steps[k + 1..] {
                assert!(
                    !later.path.starts_with(&s.path),
                    "step {} contains a later node",
                    s.index
                );
            }
        }
    }

    #[test]
    fn single_leaf_has_no_hints() {
        let tree = parse_tree("q0").unwrap();
        assert_eq!(
            hints_for_tree(&tree, &[], &[1.0], &[1.0]),
            Err(HintError::NoHints)
        );
    }

    #[test]
    fn cursor_advances_then_exhausts() {
        let inst = table5();
        let steps = hints_with_examples(&inst, &inst.slot_values).unwrap();
        let (first, c) = next_hint(&steps, 0).unwrap();
        assert_eq!(first.expression_hint, "(OA * wOA)");
        let (a, c2) = next_hint(&steps, 2).unwrap();
        let (b, _) = next_hint(&steps, c2).unwrap();
        assert_ne!(a.path, b.path);
        assert_eq!(c, 1);
        assert_eq!(
            next_hint(&steps, steps.len()),
            Err(HintError::ExhaustedHints)
        );
    }

    #[test]
    fn free_form_prediction_hints() {
        let tree = parse_tree("(div q0 (sub q1 q2))").unwrap();
        let mut rng = stream_rng(0, "free", 0);
        let steps = hints_for_prediction(&tree, &[6.0, 5.0, 2.0], &mut rng).unwrap();
        assert_eq!(steps[0].expression_hint, "(q1 - q2)");
        assert_eq!(steps[1].value_hint, "6 / (5 - 2) = 2");
        assert!(steps[1].example_value.is_finite());
    }
}
