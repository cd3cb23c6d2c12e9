use super::{Leaf, Node, Operator};

/// Formats a value the way answers are displayed: rounded to two decimals,
/// trailing zeros dropped, integers bare.
pub fn format_value(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    let s = format!("{:.2}", v);
    let s = if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    };
    if s == "-0" {
        "0".to_string()
    } else {
        s
    }
}

fn precedence(op: Operator) -> u8 {
    match op {
        Operator::Add | Operator::Sub => 1,
        Operator::Mul | Operator::Div => 2,
        Operator::Pow => 3,
        Operator::Max | Operator::Log | Operator::Exp => 4,
    }
}

fn is_infix(op: Operator) -> bool {
    precedence(op) < 4
}

fn symbol(op: Operator) -> &'static str {
    match op {
        Operator::Add => "+",
        Operator::Sub => "-",
        Operator::Mul => "*",
        Operator::Div => "/",
        Operator::Pow => "^",
        Operator::Max => "max",
        Operator::Log => "log",
        Operator::Exp => "exp",
    }
}

/// Infix rendering options.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InfixStyle {
    /// `a * b`
    #[default]
    Spaced,
    /// `a*b`
    Compact,
}

/// Whether `child` is wrapped in parentheses when rendered under `parent`.
///
/// Operator children of an infix operator are parenthesized unless they bind
/// strictly tighter than the parent, so `(a * b) * c` keeps its grouping while
/// `a * b + c * d` does not gain redundant parentheses.
pub(crate) fn wrapped_under(parent: &Node, child: &Node) -> bool {
    let Node::Op { op: parent_op, .. } = parent else {
        return false;
    };
    if !is_infix(*parent_op) {
        return false;
    }
    match child {
        Node::Op { op, .. } => is_infix(*op) && precedence(*op) <= precedence(*parent_op),
        Node::Leaf(_) => false,
    }
}

/// Renders `node` as infix text, formatting leaves with `leaf`.
pub fn render_infix(node: &Node, style: InfixStyle, leaf: &dyn Fn(&Leaf) -> String) -> String {
    match node {
        Node::Leaf(l) => leaf(l),
        Node::Op { op, children } => {
            let parts: Vec<String> = children
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let text = render_infix(c, style, leaf);
                    let negative_leaf =
                        matches!(c, Node::Leaf(_)) && text.starts_with('-') && i > 0;
                    if wrapped_under(node, c) || (is_infix(*op) && negative_leaf) {
                        format!("({text})")
                    } else {
                        text
                    }
                })
                .collect();
            if is_infix(*op) {
                let sep = match style {
                    InfixStyle::Spaced => format!(" {} ", symbol(*op)),
                    InfixStyle::Compact => symbol(*op).to_string(),
                };
                parts.join(&sep)
            } else {
                format!("{}({})", symbol(*op), parts.join(", "))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_tree;

    fn q_names(l: &Leaf) -> String {
        match l {
            Leaf::Quantity(i) => format!("q{i}"),
            Leaf::Constant(c) => format_value(*c),
        }
    }

    #[test]
    fn value_formatting() {
        assert_eq!(format_value(14.177446878757825), "14.18");
        assert_eq!(format_value(4.0), "4");
        assert_eq!(format_value(0.5), "0.5");
        assert_eq!(format_value(-0.0001), "0");
        assert_eq!(format_value(-1.0), "-1");
        assert_eq!(format_value(0.896), "0.9");
        assert_eq!(format_value(13409.64), "13409.64");
    }

    #[test]
    fn grouping_mirrors_structure() {
        let tree = parse_tree("(add (mul (mul q2 q3) q4) (mul q5 q6))").unwrap();
        let s = render_infix(tree.root(), InfixStyle::Spaced, &q_names);
        assert_eq!(s, "(q2 * q3) * q4 + q5 * q6");
        let tree = parse_tree("(sub q0 (sub q1 q2))").unwrap();
        assert_eq!(
            render_infix(tree.root(), InfixStyle::Compact, &q_names),
            "q0-(q1-q2)"
        );
        let tree = parse_tree("(pow (add (pow q0 c:2) (pow q1 c:2)) c:0.5)").unwrap();
        assert_eq!(
            render_infix(tree.root(), InfixStyle::Compact, &q_names),
            "(q0^2+q1^2)^0.5"
        );
        let tree = parse_tree("(max c:0 (log (add q0 c:-1)))").unwrap();
        assert_eq!(
            render_infix(tree.root(), InfixStyle::Spaced, &q_names),
            "max(0, log(q0 + (-1)))"
        );
    }
}
