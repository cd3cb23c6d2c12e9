//! Multiple-choice support: distractors from tree perturbations, ranking of
//! answer options from sampled predictions, and ORQ/MCQ grading.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bank::QuestionInstance;
use crate::expr::{format_value, ExprTree, Node, Operator};
use crate::nn::{SolveError, Solver};

/// Relative tolerance for a numeric answer to count as correct.
pub const VALUE_TOLERANCE: f64 = 0.005;

pub const MUL_CONSTANTS: [f64; 4] = [-1.0, 0.5, 2.0, 10.0];
pub const ADD_CONSTANTS: [f64; 3] = [-1.0, 1.0, 0.1];

/// Draws of the leaf perturbation per distractor set.
const LEAF_DRAWS: usize = 48;

/// `|value - target| <= 0.005 * max(1, |target|)`.
pub fn within_tolerance(value: f64, target: f64) -> bool {
    value.is_finite() && (value - target).abs() <= VALUE_TOLERANCE * target.abs().max(1.0)
}

/// Every tree reachable by one rotation at one node. A rotation re-associates
/// a binary operator with a binary-operator child:
/// `(f (g a b) c)` becomes `(g a (f b c))` and `(f a (g b c))` becomes
/// `(g (f a b) c)`. Trees under 5 nodes yield nothing.
pub fn perturb_rotate(tree: &ExprTree) -> Vec<ExprTree> {
    if tree.node_count() < 5 {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut seen = HashSet::from([tree.serialize()]);
    let mut push = |t: ExprTree, out: &mut Vec<ExprTree>| {
        if seen.insert(t.serialize()) {
            out.push(t);
        }
    };
    let mut paths = Vec::new();
    collect_op_paths(tree.root(), &mut Vec::new(), &mut paths);
    for path in paths {
        let Some(Node::Op { op: f, children }) = tree.root().at(&path) else {
            continue;
        };
        if children.len() != 2 {
            continue;
        }
        if let Node::Op {
            op: g,
            children: gc,
        } = &children[0]
        {
            if gc.len() == 2 {
                let rotated = Node::op(
                    *g,
                    vec![
                        gc[0].clone(),
                        Node::op(*f, vec![gc[1].clone(), children[1].clone()]),
                    ],
                );
                push(
                    tree.replace(&path, rotated).expect("rotation keeps arity"),
                    &mut out,
                );
            }
        }
        if let Node::Op {
            op: g,
            children: gc,
        } = &children[1]
        {
            if gc.len() == 2 {
                let rotated = Node::op(
                    *g,
                    vec![
                        Node::op(*f, vec![children[0].clone(), gc[0].clone()]),
                        gc[1].clone(),
                    ],
                );
                push(
                    tree.replace(&path, rotated).expect("rotation keeps arity"),
                    &mut out,
                );
            }
        }
    }
    out
}

fn collect_op_paths(node: &Node, path: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if let Node::Op { children, .. } = node {
        out.push(path.clone());
        for (i, c) in children.iter().enumerate() {
            path.push(i);
            collect_op_paths(c, path, out);
            path.pop();
        }
    }
}

/// A leaf adjustment: the leaf is multiplied by or added to a constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LeafAdjust {
    Mul(f64),
    Add(f64),
}

/// Replaces leaf number `leaf` (left to right) with `adjust` applied to it.
pub fn adjust_leaf(tree: &ExprTree, leaf: usize, adjust: LeafAdjust) -> Option<ExprTree> {
    let paths = tree.leaf_paths();
    let path = paths.get(leaf)?;
    let old = tree.root().at(path)?.clone();
    let new = match adjust {
        LeafAdjust::Mul(c) => Node::op(Operator::Mul, vec![old, Node::constant(c)]),
        LeafAdjust::Add(c) => Node::op(Operator::Add, vec![old, Node::constant(c)]),
    };
    tree.replace(path, new).ok()
}

/// One uniformly chosen leaf, multiplied by a constant from
/// [`MUL_CONSTANTS`] or shifted by one from [`ADD_CONSTANTS`].
pub fn perturb_leaf(tree: &ExprTree, rng: &mut impl Rng) -> ExprTree {
    let leaf = rng.random_range(0..tree.leaf_count());
    let adjust = if rng.random_bool(0.5) {
        LeafAdjust::Mul(MUL_CONSTANTS[rng.random_range(0..MUL_CONSTANTS.len())])
    } else {
        LeafAdjust::Add(ADD_CONSTANTS[rng.random_range(0..ADD_CONSTANTS.len())])
    };
    adjust_leaf(tree, leaf, adjust).expect("leaf index in range")
}

/// Shuffled answer options with the gold value at `answer_index`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Options {
    pub options: Vec<f64>,
    pub answer_index: usize,
}

/// Builds `n_options` options for a tree under `bindings`: the gold value and
/// the perturbation values nearest to it, distinct at display precision,
/// topped up with `gold ± k * max(0.1, 0.1 |gold|)` when perturbations run
/// short.
pub fn distractors(
    tree: &ExprTree,
    bindings: &[f64],
    n_options: usize,
    rng: &mut impl Rng,
) -> Result<Options, GradeError> {
    if n_options < 2 {
        return Err(GradeError::TooFewOptions(n_options));
    }
    let gold = tree
        .evaluate(bindings)
        .map_err(|e| GradeError::Undefined(e.to_string()))?;
    let mut candidates: Vec<ExprTree> = perturb_rotate(tree);
    candidates.extend((0..LEAF_DRAWS).map(|_| perturb_leaf(tree, rng)));

    let mut shown = HashSet::from([format_value(gold)]);
    let mut values: Vec<f64> = Vec::new();
    for t in &candidates {
        let Ok(v) = t.evaluate(bindings) else {
            continue;
        };
        if v.is_finite() && shown.insert(format_value(v)) {
            values.push(v);
        }
    }
    values.sort_by(|a, b| (a - gold).abs().total_cmp(&(b - gold).abs()));
    values.truncate(n_options - 1);

    let step = (0.1 * gold.abs()).max(0.1);
    let mut k = 1.0;
    while values.len() < n_options - 1 {
        for v in [gold + k * step, gold - k * step] {
            if values.len() < n_options - 1 && shown.insert(format_value(v)) {
                values.push(v);
            }
        }
        k += 1.0;
    }

    let mut options = values;
    options.push(gold);
    options.shuffle(rng);
    let answer_index = options
        .iter()
        .position(|&v| v == gold)
        .expect("gold is among the options");
    Ok(Options {
        options,
        answer_index,
    })
}

/// A question with shuffled answer options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McqItem {
    pub question: QuestionInstance,
    pub options: Vec<f64>,
    pub answer_index: usize,
}

impl McqItem {
    pub fn n(&self) -> usize {
        self.options.len()
    }
}

pub fn make_distractors(
    instance: &QuestionInstance,
    n_options: usize,
    rng: &mut impl Rng,
) -> Result<McqItem, GradeError> {
    let o = distractors(&instance.gold_tree, &instance.quantities, n_options, rng)?;
    let mut question = instance.clone();
    question.options = Some(o.options.clone());
    Ok(McqItem {
        question,
        options: o.options,
        answer_index: o.answer_index,
    })
}

/// Index of the option a predicted value selects: the nearest option within
/// tolerance of that option's own magnitude.
pub fn match_option(value: f64, options: &[f64]) -> Option<usize> {
    options
        .iter()
        .enumerate()
        .filter(|(_, &o)| within_tolerance(value, o))
        .min_by(|(i, a), (j, b)| {
            (value - **a)
                .abs()
                .total_cmp(&(value - **b).abs())
                .then(i.cmp(j))
        })
        .map(|(i, _)| i)
}

/// Orders options by how often sampled values select them (ties to the lower
/// index), then appends the unselected options in index order.
pub fn rank_by_frequency(values: &[Option<f64>], options: &[f64]) -> Vec<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for v in values.iter().flatten() {
        if let Some(i) = match_option(*v, options) {
            *counts.entry(i).or_default() += 1;
        }
    }
    let mut ranked: Vec<(usize, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut order: Vec<usize> = ranked.into_iter().map(|(i, _)| i).collect();
    let rest: Vec<usize> = (0..options.len()).filter(|i| !order.contains(i)).collect();
    order.extend(rest);
    order
}

/// Orders options by the first position at which a ranked prediction list
/// selects them, then the unselected options in index order.
pub fn rank_by_order(values: &[Option<f64>], options: &[f64]) -> Vec<usize> {
    let mut order = Vec::new();
    for v in values.iter().flatten() {
        if let Some(i) = match_option(*v, options) {
            if !order.contains(&i) {
                order.push(i);
            }
        }
    }
    let rest: Vec<usize> = (0..options.len()).filter(|i| !order.contains(i)).collect();
    order.extend(rest);
    order
}

/// Ranks `item`'s options by how often `k` dropout samples of the solver
/// select them.
pub fn rank_options(
    solver: &Solver,
    item: &McqItem,
    k: usize,
    seed: u64,
) -> Result<Vec<usize>, SolveError> {
    let samples = solver.sample(&item.question.text, k.max(1), seed)?;
    let values: Vec<Option<f64>> = samples.iter().map(|p| p.value).collect();
    Ok(rank_by_frequency(&values, &item.options))
}

/// 1-based attempt at which `answer_index` is chosen.
pub fn attempt_of(attempts: &[usize], answer_index: usize) -> Option<usize> {
    attempts
        .iter()
        .position(|&i| i == answer_index)
        .map(|p| p + 1)
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GradeError {
    #[error("a multiple-choice item needs at least 2 options, got {0}")]
    TooFewOptions(usize),
    #[error("attempt numbers start at 1")]
    ZeroAttempt,
    #[error("gold tree cannot be evaluated: {0}")]
    Undefined(String),
}

/// `(n - t) / (n - 1)` for success at attempt `t` of `n` options; 0 past `n`.
pub fn grade_mcq(n: usize, t: usize) -> Result<f64, GradeError> {
    if n < 2 {
        return Err(GradeError::TooFewOptions(n));
    }
    if t == 0 {
        return Err(GradeError::ZeroAttempt);
    }
    if t > n {
        return Ok(0.0);
    }
    Ok((n - t) as f64 / (n - 1) as f64)
}

/// 1 when `predicted` is within tolerance of `gold`, else 0.
pub fn grade_orq(predicted: Option<f64>, gold: f64) -> f64 {
    match predicted {
        Some(p) if within_tolerance(p, gold) => 1.0,
        _ => 0.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum GradeKind {
    Orq,
    Mcq,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradeRecord {
    pub question_id: String,
    pub kind: GradeKind,
    /// Attempt at which the answer was right; `None` if never.
    pub attempt: Option<usize>,
    /// Option count for MCQ.
    pub n: Option<usize>,
    pub score: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::stream_rng;
    use crate::expr::parse_tree;
    use proptest::prelude::*;

    fn t(s: &str) -> ExprTree {
        parse_tree(s).unwrap()
    }

    fn leaf_multiset(t: &ExprTree) -> Vec<String> {
        let mut v: Vec<String> = t.leaves().iter().map(|l| format!("{l:?}")).collect();
        v.sort();
        v
    }

    #[test]
    fn rotation_examples() {
        let r = perturb_rotate(&t("(add (add q0 q1) q2)"));
        assert!(r.contains(&t("(add q0 (add q1 q2))")));
        assert!(perturb_rotate(&t("(add q0 q1)")).is_empty());
        let src = t("(mul (sub q0 q1) q2)");
        let r = perturb_rotate(&src);
        assert_eq!(r, vec![t("(sub q0 (mul q1 q2))")]);
        for x in &r {
            assert_eq!(leaf_multiset(x), leaf_multiset(&src));
            assert_ne!(
                x.evaluate(&[5.0, 2.0, 3.0]).unwrap(),
                src.evaluate(&[5.0, 2.0, 3.0]).unwrap()
            );
        }
    }

    #[test]
    fn leaf_adjustment() {
        assert_eq!(
            adjust_leaf(&t("q0"), 0, LeafAdjust::Mul(2.0)).unwrap(),
            t("(mul q0 c:2)")
        );
        let q = t("(add q0 (mul q1 (sub q2 q0)))");
        let a = perturb_leaf(&q, &mut stream_rng(3, "leaf", 0));
        let b = perturb_leaf(&q, &mut stream_rng(3, "leaf", 0));
        assert_eq!(a, b);
        let mut rng = stream_rng(4, "leaf", 0);
        let changed = (0..100)
            .filter(|_| {
                perturb_leaf(&q, &mut rng)
                    .evaluate(&[2.0, 0.3, 8.0])
                    .unwrap()
                    != 3.8
            })
            .count();
        assert!(changed > 50, "{changed}");
    }

    #[test]
    fn distractor_sets() {
        let q = t("(add q0 (mul q1 (sub q2 q0)))");
        let b = [2.0, 0.3, 8.0];
        let o = distractors(&q, &b, 4, &mut stream_rng(1, "d", 0)).unwrap();
        assert_eq!(o.options.len(), 4);
        assert!((o.options[o.answer_index] - 3.8).abs() < 1e-12);
        let shown: HashSet<_> = o.options.iter().map(|v| format_value(*v)).collect();
        assert_eq!(shown.len(), 4);
        assert_eq!(
            o,
            distractors(&q, &b, 4, &mut stream_rng(1, "d", 0)).unwrap()
        );

        let leaf = distractors(&t("q0"), &[5.0], 2, &mut stream_rng(1, "d", 0)).unwrap();
        assert_eq!(leaf.options.len(), 2);
        assert!(leaf.options.contains(&5.0));
        assert_eq!(
            distractors(&t("q0"), &[5.0], 1, &mut stream_rng(1, "d", 0)),
            Err(GradeError::TooFewOptions(1))
        );
    }

    #[test]
    fn fallback_fill() {
        let o = distractors(&t("c:0"), &[], 5, &mut stream_rng(2, "d", 0)).unwrap();
        let mut v = o.options.clone();
        v.sort_by(f64::total_cmp);
        let shown: Vec<_> = v.iter().map(|x| format_value(*x)).collect();
        assert_eq!(shown.len(), 5);
        assert!(shown.contains(&"0".to_string()));
    }

    #[test]
    fn ranking() {
        let opts = [2.75, 0.95, 1.75, 2.63];
        let samples: Vec<Option<f64>> = [1.75, 1.75, 1.75, 0.95, 0.95, 2.63, 2.751, 9.0]
            .iter()
            .map(|v| Some(*v))
            .chain([None])
            .collect();
        let order = rank_by_frequency(&samples, &opts);
        assert_eq!(order, vec![2, 1, 0, 3]);
        let tied: Vec<Option<f64>> = vec![Some(1.75), Some(0.95), Some(2.63)];
        assert_eq!(rank_by_frequency(&tied, &opts), vec![1, 2, 3, 0]);
        assert_eq!(attempt_of(&rank_by_frequency(&tied, &opts), 0), Some(4));
        assert_eq!(
            rank_by_frequency(&[None, Some(100.0)], &opts),
            vec![0, 1, 2, 3]
        );
        assert_eq!(
            rank_by_order(&[Some(2.63), Some(1.75), Some(2.63)], &opts),
            vec![3, 2, 0, 1]
        );
    }

    #[test]
    fn grading() {
        assert_eq!(grade_mcq(4, 1).unwrap(), 1.0);
        assert_eq!(grade_mcq(4, 4).unwrap(), 0.0);
        assert_eq!(grade_mcq(4, 2).unwrap(), 2.0 / 3.0);
        assert_eq!(grade_mcq(4, 5).unwrap(), 0.0);
        assert_eq!(grade_mcq(1, 1), Err(GradeError::TooFewOptions(1)));
        assert_eq!(grade_mcq(3, 0), Err(GradeError::ZeroAttempt));
        assert_eq!(grade_orq(Some(3.8), 3.8), 1.0);
        assert_eq!(grade_orq(Some(3.818), 3.8), 1.0);
        assert_eq!(grade_orq(Some(3.83), 3.8), 0.0);
        assert_eq!(grade_orq(Some(100.4), 100.0), 1.0);
        assert_eq!(grade_orq(None, 1.0), 0.0);
    }

    fn arb_tree() -> impl Strategy<Value = ExprTree> {
        let leaf = prop_oneof![
            (0usize..4).prop_map(Node::quantity),
            (-3i32..4).prop_map(|c| Node::constant(c as f64))
        ];
        leaf.prop_recursive(4, 24, 2, |inner| {
            (
                prop::sample::select(vec![
                    Operator::Add,
                    Operator::Sub,
                    Operator::Mul,
                    Operator::Max,
                ]),
                inner.clone(),
                inner,
            )
                .prop_map(|(op, a, b)| Node::op(op, vec![a, b]))
        })
        .prop_map(|n| ExprTree::new(n).unwrap())
    }

    proptest! {
        #[test]
        fn rotations_are_valid_and_keep_leaves(tree in arb_tree()) {
            for r in perturb_rotate(&tree) {
                prop_assert!(ExprTree::new(r.root().clone()).is_ok());
                prop_assert_eq!(leaf_multiset(&r), leaf_multiset(&tree));
                prop_assert_eq!(r.node_count(), tree.node_count());
                prop_assert_ne!(r.serialize(), tree.serialize());
            }
        }

        #[test]
        fn options_sound(tree in arb_tree(), seed in 0u64..1000, n in 2usize..7) {
            let b = [1.5, -2.0, 3.0, 0.5];
            let o = distractors(&tree, &b, n, &mut stream_rng(seed, "p", 0)).unwrap();
            let gold = tree.evaluate(&b).unwrap();
            prop_assert_eq!(o.options.len(), n);
            let golds = o.options.iter().filter(|v| format_value(**v) == format_value(gold)).count();
            prop_assert_eq!(golds, 1);
        }

        #[test]
        fn ranking_is_permutation(vals in prop::collection::vec(prop::option::of(-5.0f64..5.0), 0..40), n in 2usize..6) {
            let opts: Vec<f64> = (0..n).map(|i| i as f64 - 2.0).collect();
            let mut r = rank_by_frequency(&vals, &opts);
            r.sort();
            prop_assert_eq!(r, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn grade_monotone(n in 2usize..12) {
            let scores: Vec<f64> = (1..=n).map(|t| grade_mcq(n, t).unwrap()).collect();
            prop_assert_eq!(scores[0], 1.0);
            prop_assert_eq!(scores[n - 1], 0.0);
            prop_assert!(scores.windows(2).all(|w| w[0] > w[1]));
        }
    }
}
