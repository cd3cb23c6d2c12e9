//! Expression trees: the symbolic answer programs shared by every other module.
//!
//! Trees are written as prefix s-expressions:
//!
//! ```text
//! expr := (op expr ...) | q<i> | c:<real>
//! op   := add | sub | mul | div | max | log | exp | pow
//! ```
//!
//! `q<i>` refers to the i-th quantity of the bound question (0-based, in
//! question order) and `c:<real>` is a literal constant.

mod parse;
mod render;

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use parse::parse_tree;
pub(crate) use render::wrapped_under;
pub use render::{format_value, render_infix, InfixStyle};

/// The operator vocabulary. `Log` is the natural logarithm; base changes are
/// written as `div` of two `log` nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operator {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Log,
    Exp,
    Pow,
}

impl Operator {
    pub const ALL: [Operator; 8] = [
        Operator::Add,
        Operator::Sub,
        Operator::Mul,
        Operator::Div,
        Operator::Max,
        Operator::Log,
        Operator::Exp,
        Operator::Pow,
    ];

    pub fn arity(self) -> usize {
        match self {
            Operator::Log | Operator::Exp => 1,
            _ => 2,
        }
    }

    pub fn is_commutative(self) -> bool {
        matches!(self, Operator::Add | Operator::Mul | Operator::Max)
    }

    pub fn name(self) -> &'static str {
        match self {
            Operator::Add => "add",
            Operator::Sub => "sub",
            Operator::Mul => "mul",
            Operator::Div => "div",
            Operator::Max => "max",
            Operator::Log => "log",
            Operator::Exp => "exp",
            Operator::Pow => "pow",
        }
    }

    pub fn from_name(name: &str) -> Option<Operator> {
        Operator::ALL.into_iter().find(|op| op.name() == name)
    }

    /// Position in [`Operator::ALL`]; doubles as the decoder's output id.
    pub fn index(self) -> usize {
        Operator::ALL.iter().position(|&o| o == self).unwrap()
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A leaf of an expression tree.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Leaf {
    Quantity(usize),
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Op { op: Operator, children: Vec<Node> },
    Leaf(Leaf),
}

impl Node {
    pub fn op(op: Operator, children: Vec<Node>) -> Node {
        Node::Op { op, children }
    }

    pub fn quantity(index: usize) -> Node {
        Node::Leaf(Leaf::Quantity(index))
    }

    pub fn constant(value: f64) -> Node {
        Node::Leaf(Leaf::Constant(value))
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Node::Leaf(_))
    }

    pub fn children(&self) -> &[Node] {
        match self {
            Node::Op { children, .. } => children,
            Node::Leaf(_) => &[],
        }
    }

    pub fn count(&self) -> usize {
        1 + self.children().iter().map(Node::count).sum::<usize>()
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            Node::Leaf(_) => 1,
            Node::Op { children, .. } => children.iter().map(Node::leaf_count).sum(),
        }
    }

    pub fn depth(&self) -> usize {
        1 + self.children().iter().map(Node::depth).max().unwrap_or(0)
    }

    /// Follows `path` (child indices from this node).
    pub fn at(&self, path: &[usize]) -> Option<&Node> {
        let mut node = self;
        for &i in path {
            node = node.children().get(i)?;
        }
        Some(node)
    }

    fn at_mut(&mut self, path: &[usize]) -> Option<&mut Node> {
        let mut node = self;
        for &i in path {
            node = match node {
                Node::Op { children, .. } => children.get_mut(i)?,
                Node::Leaf(_) => return None,
            };
        }
        Some(node)
    }

    pub fn max_quantity_index(&self) -> Option<usize> {
        match self {
            Node::Leaf(Leaf::Quantity(i)) => Some(*i),
            Node::Leaf(Leaf::Constant(_)) => None,
            Node::Op { children, .. } => children.iter().filter_map(Node::max_quantity_index).max(),
        }
    }

    /// Pre-order sequence of nodes.
    pub fn preorder(&self) -> Vec<&Node> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(n) = stack.pop() {
            out.push(n);
            stack.extend(n.children().iter().rev());
        }
        out
    }

    fn write_sexpr(&self, out: &mut String) {
        match self {
            Node::Leaf(Leaf::Quantity(i)) => {
                out.push('q');
                out.push_str(&i.to_string());
            }
            Node::Leaf(Leaf::Constant(c)) => {
                out.push_str("c:");
                out.push_str(&c.to_string());
            }
            Node::Op { op, children } => {
                out.push('(');
                out.push_str(op.name());
                for child in children {
                    out.push(' ');
                    child.write_sexpr(out);
                }
                out.push(')');
            }
        }
    }

    pub fn to_sexpr(&self) -> String {
        let mut s = String::new();
        self.write_sexpr(&mut s);
        s
    }

    fn evaluate(&self, bindings: &[f64]) -> Result<f64, EvalError> {
        match self {
            Node::Leaf(Leaf::Constant(c)) => Ok(*c),
            Node::Leaf(Leaf::Quantity(i)) => {
                bindings.get(*i).copied().ok_or(EvalError::UnboundQuantity {
                    index: *i,
                    available: bindings.len(),
                })
            }
            Node::Op { op, children } => {
                let a = children[0].evaluate(bindings)?;
                let b = match children.get(1) {
                    Some(c) => c.evaluate(bindings)?,
                    None => 0.0,
                };
                let v = match op {
                    Operator::Add => a + b,
                    Operator::Sub => a - b,
                    Operator::Mul => a * b,
                    Operator::Div => {
                        if b == 0.0 {
                            return Err(EvalError::Domain(DomainError::DivisionByZero));
                        }
                        a / b
                    }
                    Operator::Max => a.max(b),
                    Operator::Log => {
                        if a <= 0.0 {
                            return Err(EvalError::Domain(DomainError::LogOfNonPositive(a)));
                        }
                        libm::log(a)
                    }
                    Operator::Exp => libm::exp(a),
                    Operator::Pow => {
                        if a < 0.0 && b.fract() != 0.0 {
                            return Err(EvalError::Domain(
                                DomainError::FractionalPowerOfNegative {
                                    base: a,
                                    exponent: b,
                                },
                            ));
                        }
                        if a == 0.0 && b < 0.0 {
                            return Err(EvalError::Domain(DomainError::DivisionByZero));
                        }
                        libm::pow(a, b)
                    }
                };
                if !v.is_finite() {
                    return Err(EvalError::Domain(DomainError::NonFinite));
                }
                Ok(v)
            }
        }
    }

    fn canonicalize(&self) -> Node {
        match self {
            Node::Leaf(l) => Node::Leaf(*l),
            Node::Op { op, children } => {
                let mut children: Vec<Node> = children.iter().map(Node::canonicalize).collect();
                if op.is_commutative() {
                    // leaves sort ahead of operator subtrees, then by serialized text
                    let mut keyed: Vec<((bool, String), Node)> = children
                        .into_iter()
                        .map(|c| ((!c.is_leaf(), c.to_sexpr()), c))
                        .collect();
                    keyed.sort_by(|a, b| a.0.cmp(&b.0));
                    children = keyed.into_iter().map(|(_, c)| c).collect();
                }
                Node::Op { op: *op, children }
            }
        }
    }

    fn validate(&self) -> Result<(), TreeError> {
        match self {
            Node::Leaf(_) => Ok(()),
            Node::Op { op, children } => {
                if children.len() != op.arity() {
                    return Err(TreeError::Arity {
                        op: *op,
                        expected: op.arity(),
                        found: children.len(),
                    });
                }
                children.iter().try_for_each(Node::validate)
            }
        }
    }
}

/// A node together with its location (child indices from the root).
#[derive(Clone, Debug)]
pub struct NodeRef<'a> {
    pub path: Vec<usize>,
    pub node: &'a Node,
}

/// A rooted, arity-checked expression tree.
#[derive(Clone, Debug, PartialEq)]
pub struct ExprTree {
    root: Node,
    node_count: usize,
}

impl ExprTree {
    pub fn new(root: Node) -> Result<ExprTree, TreeError> {
        root.validate()?;
        let node_count = root.count();
        Ok(ExprTree { root, node_count })
    }

    pub fn leaf(leaf: Leaf) -> ExprTree {
        ExprTree {
            root: Node::Leaf(leaf),
            node_count: 1,
        }
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn into_root(self) -> Node {
        self.root
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn leaf_count(&self) -> usize {
        self.root.leaf_count()
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    pub fn serialize(&self) -> String {
        self.root.to_sexpr()
    }

    /// Checks that every quantity reference resolves against `quantity_count`.
    pub fn check_quantities(&self, quantity_count: usize) -> Result<(), TreeError> {
        match self.root.max_quantity_index() {
            Some(i) if i >= quantity_count => Err(TreeError::QuantityOutOfRange {
                index: i,
                count: quantity_count,
            }),
            _ => Ok(()),
        }
    }

    pub fn evaluate(&self, bindings: &[f64]) -> Result<f64, EvalError> {
        self.root.evaluate(bindings)
    }

    /// Sorts the children of commutative operators bottom-up: leaves first,
    /// then by serialized form. Idempotent.
    pub fn canonicalize(&self) -> ExprTree {
        ExprTree {
            root: self.root.canonicalize(),
            node_count: self.node_count,
        }
    }

    pub fn subtree(&self, path: &[usize]) -> Option<ExprTree> {
        self.root.at(path).map(|n| ExprTree {
            root: n.clone(),
            node_count: n.count(),
        })
    }

    /// Replaces the node at `path` and returns the new tree.
    pub fn replace(&self, path: &[usize], with: Node) -> Result<ExprTree, TreeError> {
        let mut root = self.root.clone();
        let slot = root.at_mut(path).ok_or(TreeError::BadPath)?;
        *slot = with;
        ExprTree::new(root)
    }

    /// Paths of all leaves, left to right.
    pub fn leaf_paths(&self) -> Vec<Vec<usize>> {
        fn walk(node: &Node, path: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            match node {
                Node::Leaf(_) => out.push(path.clone()),
                Node::Op { children, .. } => {
                    for (i, c) in children.iter().enumerate() {
                        path.push(i);
                        walk(c, path, out);
                        path.pop();
                    }
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.root, &mut Vec::new(), &mut out);
        out
    }

    pub fn leaves(&self) -> Vec<Leaf> {
        self.leaf_paths()
            .iter()
            .map(|p| match self.root.at(p) {
                Some(Node::Leaf(l)) => *l,
                _ => unreachable!("leaf path points at a leaf"),
            })
            .collect()
    }

    /// Operator nodes in in-order: left subtree, node, right subtree. A unary
    /// node is visited after its only child.
    pub fn nonleaf_inorder(&self) -> Vec<NodeRef<'_>> {
        fn walk<'a>(node: &'a Node, path: &mut Vec<usize>, out: &mut Vec<NodeRef<'a>>) {
            if let Node::Op { children, .. } = node {
                path.push(0);
                walk(&children[0], path, out);
                path.pop();
                out.push(NodeRef {
                    path: path.clone(),
                    node,
                });
                for (i, c) in children.iter().enumerate().skip(1) {
                    path.push(i);
                    walk(c, path, out);
                    path.pop();
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.root, &mut Vec::new(), &mut out);
        out
    }

    /// Operator nodes in post-order (children left to right, then the node).
    /// The first element is the left-most non-leaf and the last is the root.
    pub fn nonleaf_postorder(&self) -> Vec<NodeRef<'_>> {
        fn walk<'a>(node: &'a Node, path: &mut Vec<usize>, out: &mut Vec<NodeRef<'a>>) {
            if let Node::Op { children, .. } = node {
                for (i, c) in children.iter().enumerate() {
                    path.push(i);
                    walk(c, path, out);
                    path.pop();
                }
                out.push(NodeRef {
                    path: path.clone(),
                    node,
                });
            }
        }
        let mut out = Vec::new();
        walk(&self.root, &mut Vec::new(), &mut out);
        out
    }
}

impl fmt::Display for ExprTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize())
    }
}

impl std::str::FromStr for ExprTree {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_tree(s)
    }
}

impl Serialize for ExprTree {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.serialize())
    }
}

impl<'de> Deserialize<'de> for ExprTree {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        parse_tree(&text).map_err(serde::de::Error::custom)
    }
}

/// True iff both trees are structurally equal after canonicalization.
pub fn trees_equal(a: &ExprTree, b: &ExprTree) -> bool {
    a.canonicalize() == b.canonicalize()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("operator `{op}` takes {expected} argument(s), found {found}")]
    Arity {
        op: Operator,
        expected: usize,
        found: usize,
    },
    #[error("quantity q{index} is out of range for {count} quantities")]
    QuantityOutOfRange { index: usize, count: usize },
    #[error("path does not address a node")]
    BadPath,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("syntax error at byte {pos}: {message}")]
    Syntax { pos: usize, message: String },
    #[error(transparent)]
    Arity(#[from] TreeError),
    #[error("quantity index must be non-negative, got `{0}`")]
    Index(String),
}

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum DomainError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("log of non-positive value {0}")]
    LogOfNonPositive(f64),
    #[error("fractional power {exponent} of negative base {base}")]
    FractionalPowerOfNegative { base: f64, exponent: f64 },
    #[error("result is not finite")]
    NonFinite,
}

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("quantity q{index} is unbound ({available} bindings)")]
    UnboundQuantity { index: usize, available: usize },
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> ExprTree {
        parse_tree(s).unwrap()
    }

    #[test]
    fn parses_q_update_figure() {
        let tree = t("(add c:9 (mul c:0.1 (sub c:4 c:5)))");
        assert_eq!(tree.node_count(), 7);
        assert!((tree.evaluate(&[]).unwrap() - 8.9).abs() < 1e-12);
    }

    #[test]
    fn single_leaf() {
        let tree = t("q0");
        assert_eq!(tree.node_count(), 1);
        assert!(tree.nonleaf_inorder().is_empty());
    }

    #[test]
    fn log_is_unary() {
        assert!(matches!(
            parse_tree("(log q0 q1)"),
            Err(ParseError::Arity(_))
        ));
    }

    #[test]
    fn magnitude_of_10_10_1() {
        let tree = t("(pow (add (add (pow q0 c:2) (pow q1 c:2)) (pow q2 c:2)) c:0.5)");
        let v = tree.evaluate(&[10.0, 10.0, 1.0]).unwrap();
        assert_eq!(format_value(v), "14.18");
    }

    #[test]
    fn q_learning_update() {
        let tree = t("(add q0 (mul q1 (sub q2 q0)))");
        let v = tree.evaluate(&[2.0, 0.3, 8.0]).unwrap();
        assert!((v - 3.8).abs() < 1e-12);
    }

    #[test]
    fn division_by_zero_is_domain_error() {
        let err = t("(div q0 c:0)").evaluate(&[1.0]).unwrap_err();
        assert_eq!(err, EvalError::Domain(DomainError::DivisionByZero));
    }

    #[test]
    fn other_domain_errors() {
        assert!(matches!(
            t("(log q0)").evaluate(&[0.0]),
            Err(EvalError::Domain(DomainError::LogOfNonPositive(_)))
        ));
        assert!(matches!(
            t("(pow q0 c:0.5)").evaluate(&[-4.0]),
            Err(EvalError::Domain(
                DomainError::FractionalPowerOfNegative { .. }
            ))
        ));
        assert_eq!(t("(pow q0 c:2)").evaluate(&[-4.0]).unwrap(), 16.0);
        assert!(matches!(
            t("q3").evaluate(&[1.0]),
            Err(EvalError::UnboundQuantity { index: 3, .. })
        ));
    }

    #[test]
    fn entropy_of_left_region() {
        // Independent hand computation of -p log2 p - (1-p) log2 (1-p), p = 5/16.
        let p: f64 = 5.0 / 16.0;
        let expected = -p * p.log2() - (1.0 - p) * (1.0 - p).log2();
        // a = q2 (positives), b = q0 (total), c = q1 (right).
        let tree = t("(add (mul (sub c:0 (div q2 (sub q0 q1))) (div (log (div q2 (sub q0 q1))) (log c:2))) \
                      (mul (sub c:0 (div (sub (sub q0 q1) q2) (sub q0 q1))) (div (log (div (sub (sub q0 q1) q2) (sub q0 q1))) (log c:2))))");
        let v = tree.evaluate(&[46.0, 30.0, 5.0]).unwrap();
        assert!((v - expected).abs() < 1e-12);
        assert!((expected - 0.896_038).abs() < 1e-6);
        assert_eq!(format_value(v), "0.9");
    }

    #[test]
    fn canonicalize_examples() {
        assert_eq!(t("(add q1 q0)").canonicalize().serialize(), "(add q0 q1)");
        assert_eq!(t("(sub q1 q0)").canonicalize().serialize(), "(sub q1 q0)");
        assert_eq!(
            t("(mul (add q2 q1) q0)").canonicalize().serialize(),
            "(mul q0 (add q1 q2))"
        );
    }

    #[test]
    fn equality_examples() {
        assert!(trees_equal(&t("(add q0 q1)"), &t("(add q1 q0)")));
        assert!(!trees_equal(&t("(sub q0 q1)"), &t("(sub q1 q0)")));
        let fig = t("(add c:9 (mul c:0.1 (sub c:4 c:5)))");
        let rewritten = t("(add (mul (sub c:4 c:5) c:0.1) c:9)");
        assert!(trees_equal(&fig, &rewritten));
    }

    #[test]
    fn inorder_of_hint_network() {
        // (OA*wOA)*wAC + OC*wOC with OA=q2, wOA=q3, wAC=q4, OC=q5, wOC=q6
        let tree = t("(add (mul (mul q2 q3) q4) (mul q5 q6))");
        let order: Vec<String> = tree
            .nonleaf_inorder()
            .iter()
            .map(|r| r.node.to_sexpr())
            .collect();
        assert_eq!(
            order,
            vec![
                "(mul q2 q3)",
                "(mul (mul q2 q3) q4)",
                "(add (mul (mul q2 q3) q4) (mul q5 q6))",
                "(mul q5 q6)"
            ]
        );
        let post: Vec<String> = tree
            .nonleaf_postorder()
            .iter()
            .map(|r| r.node.to_sexpr())
            .collect();
        assert_eq!(
            post[..3],
            ["(mul q2 q3)", "(mul (mul q2 q3) q4)", "(mul q5 q6)"]
        );
        assert_eq!(post[3], tree.serialize());
    }

    #[test]
    fn unary_inorder_visits_child_first() {
        let tree = t("(exp q0)");
        let order = tree.nonleaf_inorder();
        assert_eq!(order.len(), 1);
        assert!(order[0].path.is_empty());
        let nested = t("(add (log (mul q0 q1)) q2)");
        let names: Vec<String> = nested
            .nonleaf_inorder()
            .iter()
            .map(|r| r.node.to_sexpr())
            .collect();
        assert_eq!(
            names,
            vec![
                "(mul q0 q1)",
                "(log (mul q0 q1))",
                "(add (log (mul q0 q1)) q2)"
            ]
        );
    }

    #[test]
    fn quantity_range_check() {
        let tree = t("(add q0 q4)");
        assert!(tree.check_quantities(5).is_ok());
        assert_eq!(
            tree.check_quantities(4),
            Err(TreeError::QuantityOutOfRange { index: 4, count: 4 })
        );
    }
}
