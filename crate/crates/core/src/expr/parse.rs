use super::{ExprTree, Node, Operator, ParseError, TreeError};

/// Parses a prefix s-expression into an arity-checked tree.
pub fn parse_tree(text: &str) -> Result<ExprTree, ParseError> {
    let mut parser = Parser { src: text, pos: 0 };
    parser.skip_ws();
    if parser.pos >= text.len() {
        return Err(parser.error("empty expression"));
    }
    let root = parser.node()?;
    parser.skip_ws();
    if parser.pos != text.len() {
        return Err(parser.error("trailing input after expression"));
    }
    Ok(ExprTree::new(root)?)
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: &str) -> ParseError {
        ParseError::Syntax {
            pos: self.pos,
            message: message.to_string(),
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if !c.is_whitespace() {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    fn atom(&mut self) -> &str {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_whitespace() || c == '(' || c == ')' {
                break;
            }
            self.pos += c.len_utf8();
        }
        &self.src[start..self.pos]
    }

    fn node(&mut self) -> Result<Node, ParseError> {
        self.skip_ws();
        match self.peek() {
            None => Err(self.error("unexpected end of input")),
            Some(')') => Err(self.error("unexpected `)`")),
            Some('(') => {
                self.pos += 1;
                self.skip_ws();
                let start = self.pos;
                let name = self.atom().to_string();
                let op = Operator::from_name(&name).ok_or_else(|| ParseError::Syntax {
                    pos: start,
                    message: format!("unknown operator `{name}`"),
                })?;
                let mut children = Vec::new();
                loop {
                    self.skip_ws();
                    match self.peek() {
                        None => return Err(self.error("unclosed `(`")),
                        Some(')') => {
                            self.pos += 1;
                            break;
                        }
                        Some(_) => children.push(self.node()?),
                    }
                }
                if children.len() != op.arity() {
                    return Err(TreeError::Arity {
                        op,
                        expected: op.arity(),
                        found: children.len(),
                    }
                    .into());
                }
                Ok(Node::Op { op, children })
            }
            Some(_) => {
                let start = self.pos;
                let atom = self.atom().to_string();
                leaf(&atom).map_err(|e| match e {
                    LeafError::Index => ParseError::Index(atom.clone()),
                    LeafError::Syntax(message) => ParseError::Syntax {
                        pos: start,
                        message,
                    },
                })
            }
        }
    }
}

enum LeafError {
    Index,
    Syntax(String),
}

fn leaf(atom: &str) -> Result<Node, LeafError> {
    if let Some(rest) = atom.strip_prefix("c:") {
        return rest
            .parse::<f64>()
            .map(Node::constant)
            .map_err(|_| LeafError::Syntax(format!("bad constant `{atom}`")));
    }
    if let Some(rest) = atom.strip_prefix('q') {
        if rest.starts_with('-') && rest[1..].chars().all(|c| c.is_ascii_digit()) && rest.len() > 1
        {
            return Err(LeafError::Index);
        }
        if !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit()) {
            return rest
                .parse::<usize>()
                .map(Node::quantity)
                .map_err(|_| LeafError::Syntax(format!("bad quantity `{atom}`")));
        }
    }
    Err(LeafError::Syntax(format!("unexpected atom `{atom}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn syntax_errors() {
        for bad in [
            "",
            "(",
            "(add q0",
            "(add q0 q1))",
            "(foo q0)",
            "x",
            "c:abc",
            "q",
            ")",
        ] {
            assert!(
                matches!(parse_tree(bad), Err(ParseError::Syntax { .. })),
                "expected syntax error for {bad:?}"
            );
        }
    }

    #[test]
    fn negative_index() {
        assert_eq!(parse_tree("q-1"), Err(ParseError::Index("q-1".into())));
        assert!(matches!(
            parse_tree("(add q0 q-2)"),
            Err(ParseError::Index(_))
        ));
    }

    #[test]
    fn negative_and_fractional_constants() {
        let tree = parse_tree("(mul c:-1.5 c:0.25)").unwrap();
        assert_eq!(tree.evaluate(&[]).unwrap(), -0.375);
        assert_eq!(tree.serialize(), "(mul c:-1.5 c:0.25)");
    }

    #[test]
    fn whitespace_is_flexible() {
        let tree = parse_tree("  ( add\n q0\t( exp q1 ) ) ").unwrap();
        assert_eq!(tree.serialize(), "(add q0 (exp q1))");
    }
}
