//! Question lexing, quantity extraction and the word/quantity graph.

use std::fmt::Write as _;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Default half-width of the quantity/word association window.
pub const DEFAULT_WINDOW: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TokenKind {
    Word,
    Number,
    Symbol,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    /// Index of the token in the sequence.
    pub position: usize,
    pub kind: TokenKind,
    /// Parsed value for `Number` tokens.
    pub value: Option<f64>,
    /// Byte span in the source text.
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantity {
    pub value: f64,
    /// Token position the quantity was read from.
    pub position: usize,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum TokenizeError {
    #[error("cannot tokenize empty text")]
    Empty,
}

static NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[-−]?[0-9]+(?:\.[0-9]+)?").unwrap());
static IDENT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[\p{L}_][\p{L}\p{N}_']*(?:\{[^{}\s]*\})?").unwrap());

fn ident_kind(text: &str) -> TokenKind {
    if text.len() >= 2 && text.chars().all(|c| c.is_ascii_alphabetic()) {
        TokenKind::Word
    } else {
        TokenKind::Symbol
    }
}

/// A leading `-` at byte `at` is a sign only when it cannot be a binary minus:
/// not after a number or a closing bracket, and not glued to a variable name.
fn sign_allowed(prev: Option<&Token>, at: usize) -> bool {
    match prev {
        None => true,
        Some(t) => match t.kind {
            TokenKind::Number => false,
            TokenKind::Word => true,
            TokenKind::Symbol => {
                let c = t.text.chars().next().unwrap_or(' ');
                let ident = c.is_alphabetic() || c == '_';
                !(t.text == ")" || t.text == "]" || (ident && t.end == at))
            }
        },
    }
}

/// Splits `text` into words, numbers and single-character symbols.
///
/// Identifiers may carry subscripts and primes (`s_0`, `s_{t-1}`, `θ₀`, `wOA`)
/// and stay a single token.
pub fn tokenize(text: &str) -> Result<Vec<Token>, TokenizeError> {
    if text.trim().is_empty() {
        return Err(TokenizeError::Empty);
    }
    let mut tokens: Vec<Token> = Vec::new();
    let mut pos = 0;
    while pos < text.len() {
        let rest = &text[pos..];
        let c = rest.chars().next().unwrap();
        if c.is_whitespace() {
            pos += c.len_utf8();
            continue;
        }
        let signed = c == '-' || c == '−';
        let number = NUMBER
            .find(rest)
            .filter(|_| !signed || sign_allowed(tokens.last(), pos));
        let (len, kind, value) = if let Some(m) = number {
            let v: f64 = m.as_str().replace('−', "-").parse().unwrap();
            (m.end(), TokenKind::Number, Some(v))
        } else if let Some(m) = IDENT.find(rest) {
            (m.end(), ident_kind(m.as_str()), None)
        } else {
            (c.len_utf8(), TokenKind::Symbol, None)
        };
        tokens.push(Token {
            text: rest[..len].to_string(),
            position: tokens.len(),
            kind,
            value,
            start: pos,
            end: pos + len,
        });
        pos += len;
    }
    Ok(tokens)
}

/// One entry per `Number` token, in question order.
pub fn extract_quantities(tokens: &[Token]) -> Vec<Quantity> {
    tokens
        .iter()
        .filter_map(|t| {
            t.value.map(|value| Quantity {
                value,
                position: t.position,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EdgeKind {
    /// Quantity node to a nearby non-number token. Undirected.
    Qw,
    /// Larger quantity to smaller quantity.
    QqGt,
    /// Token to the following token.
    Seq,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub kind: EdgeKind,
    pub src: usize,
    pub dst: usize,
}

/// Word nodes are `0..tokens.len()`; quantity `i` is node `tokens.len() + i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionGraph {
    pub tokens: Vec<Token>,
    pub quantities: Vec<Quantity>,
    pub edges: Vec<Edge>,
    pub window: usize,
}

impl QuestionGraph {
    pub fn word_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn node_count(&self) -> usize {
        self.tokens.len() + self.quantities.len()
    }

    pub fn quantity_node(&self, i: usize) -> usize {
        self.tokens.len() + i
    }

    pub fn edges_of(&self, kind: EdgeKind) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.kind == kind)
    }

    /// Graphviz rendering for inspection.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph question {\n  rankdir=LR;\n");
        for t in &self.tokens {
            let label = t.text.replace('\\', "\\\\").replace('"', "\\\"");
            let _ = writeln!(out, "  w{} [label=\"{}\", shape=box];", t.position, label);
        }
        for (i, q) in self.quantities.iter().enumerate() {
            let _ = writeln!(
                out,
                "  q{} [label=\"q{} = {}\", shape=ellipse];",
                i, i, q.value
            );
        }
        let name = |n: usize| {
            if n < self.tokens.len() {
                format!("w{n}")
            } else {
                format!("q{}", n - self.tokens.len())
            }
        };
        for e in &self.edges {
            let style = match e.kind {
                EdgeKind::Qw => "dir=none, color=blue",
                EdgeKind::QqGt => "color=red",
                EdgeKind::Seq => "color=gray",
            };
            let _ = writeln!(out, "  {} -> {} [{}];", name(e.src), name(e.dst), style);
        }
        out.push_str("}\n");
        out
    }
}

/// Builds the typed graph. Edges are emitted in a fixed order: QW by quantity
/// then token, QQ_GT by (source, target), SEQ by position.
pub fn build_graph(tokens: &[Token], quantities: &[Quantity], window: usize) -> QuestionGraph {
    assert!(window >= 1, "window must be at least 1");
    let n = tokens.len();
    let mut edges = Vec::new();
    for (qi, q) in quantities.iter().enumerate() {
        let lo = q.position.saturating_sub(window);
        let hi = (q.position + window).min(n.saturating_sub(1));
        for t in &tokens[lo..=hi] {
            if t.position != q.position && t.kind != TokenKind::Number {
                edges.push(Edge {
                    kind: EdgeKind::Qw,
                    src: n + qi,
                    dst: t.position,
                });
            }
        }
    }
    for (i, a) in quantities.iter().enumerate() {
        for (j, b) in quantities.iter().enumerate() {
            if a.value > b.value {
                edges.push(Edge {
                    kind: EdgeKind::QqGt,
                    src: n + i,
                    dst: n + j,
                });
            }
        }
    }
    for i in 1..n {
        edges.push(Edge {
            kind: EdgeKind::Seq,
            src: i - 1,
            dst: i,
        });
    }
    QuestionGraph {
        tokens: tokens.to_vec(),
        quantities: quantities.to_vec(),
        edges,
        window,
    }
}

/// Tokenize, extract and build in one step.
pub fn graph_of(text: &str, window: usize) -> Result<QuestionGraph, TokenizeError> {
    let tokens = tokenize(text)?;
    let quantities = extract_quantities(&tokens);
    Ok(build_graph(&tokens, &quantities, window))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn values(text: &str) -> Vec<f64> {
        extract_quantities(&tokenize(text).unwrap())
            .iter()
            .map(|q| q.value)
            .collect()
    }

    #[test]
    fn magnitude_numbers() {
        let toks = tokenize("Compute the magnitude of [10, 10, 1].").unwrap();
        let nums: Vec<_> = toks
            .iter()
            .filter(|t| t.kind == TokenKind::Number)
            .map(|t| t.value.unwrap())
            .collect();
        assert_eq!(nums, vec![10.0, 10.0, 1.0]);
        assert_eq!(toks.last().unwrap().text, ".");
        for w in toks.windows(2) {
            assert!(w[0].position < w[1].position);
        }
    }

    #[test]
    fn empty_text_rejected() {
        assert_eq!(tokenize(""), Err(TokenizeError::Empty));
        assert_eq!(tokenize("   "), Err(TokenizeError::Empty));
    }

    #[test]
    fn theta_is_symbol() {
        let toks = tokenize("θ = (4, 1)").unwrap();
        assert_eq!(toks[0].text, "θ");
        assert_eq!(toks[0].kind, TokenKind::Symbol);
        assert_eq!(values("θ = (4, 1)"), vec![4.0, 1.0]);
    }

    #[test]
    fn rnn_quantities() {
        assert_eq!(
            values("s₀ = 1.5, w = 1.5, x = [1, 0, 2]"),
            vec![1.5, 1.5, 1.0, 0.0, 2.0]
        );
        assert_eq!(
            values(
                "Let s_0 = 1.5, w = 1.5, and x = [1, 0, 2]. Compute s_3 if s_t = w*s_{t-1} + x_t."
            ),
            vec![1.5, 1.5, 1.0, 0.0, 2.0]
        );
    }

    #[test]
    fn signs() {
        assert_eq!(values("−0.31"), vec![-0.31]);
        assert_eq!(values("p = (2, -4)"), vec![2.0, -4.0]);
        assert_eq!(values("5 - 3"), vec![5.0, 3.0]);
        assert_eq!(values("(4) -1"), vec![4.0, 1.0]);
        assert_eq!(values("x-1"), vec![1.0]);
        assert_eq!(values("θ is -1 and x -2"), vec![-1.0, -2.0]);
        assert_eq!(values("no numbers here"), Vec::<f64>::new());
    }

    #[test]
    fn word_kinds() {
        let toks = tokenize("g(s_t) = 4s_t on a 2D plane").unwrap();
        let kinds: Vec<_> = toks.iter().map(|t| (t.text.as_str(), t.kind)).collect();
        assert!(kinds.contains(&("s_t", TokenKind::Symbol)));
        assert!(kinds.contains(&("4", TokenKind::Number)));
        assert!(kinds.contains(&("plane", TokenKind::Word)));
        assert!(kinds.contains(&("a", TokenKind::Symbol)));
        assert_eq!(values("g(s_t) = 4s_t on a 2D plane"), vec![4.0, 2.0]);
    }

    #[test]
    fn gt_edges_skip_ties() {
        let g = graph_of("[10, 10, 1]", 3).unwrap();
        let n = g.word_count();
        let gt: Vec<_> = g
            .edges_of(EdgeKind::QqGt)
            .map(|e| (e.src - n, e.dst - n))
            .collect();
        assert_eq!(gt, vec![(0, 2), (1, 2)]);
        let single = graph_of("take 3 apples", 3).unwrap();
        assert_eq!(single.edges_of(EdgeKind::QqGt).count(), 0);
    }

    #[test]
    fn window_covers_sentence() {
        let g = graph_of("we need 7 more apples", 3).unwrap();
        assert_eq!(g.quantities[0].position, 2);
        let qw: Vec<_> = g.edges_of(EdgeKind::Qw).map(|e| e.dst).collect();
        assert_eq!(qw, vec![0, 1, 3, 4]);
        assert_eq!(g.edges_of(EdgeKind::Seq).count(), 4);
    }

    #[test]
    fn dot_dump() {
        let dot = graph_of("x = 3", 1).unwrap().to_dot();
        assert!(dot.starts_with("digraph"));
        assert!(dot.contains("q0 [label=\"q0 = 3\""));
    }

    proptest! {
        #[test]
        fn gt_edge_count_law(vals in proptest::collection::vec(-20i32..20, 0..8)) {
            let text = vals.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" and ");
            let text = format!("values {text}");
            let g = graph_of(&text, DEFAULT_WINDOW).unwrap();
            let got: Vec<f64> = g.quantities.iter().map(|q| q.value).collect();
            let want: Vec<f64> = vals.iter().map(|&v| v as f64).collect();
            prop_assert_eq!(&got, &want);
            let pairs = vals.iter().flat_map(|a| vals.iter().map(move |b| (a, b))).filter(|(a, b)| a > b).count();
            prop_assert_eq!(g.edges_of(EdgeKind::QqGt).count(), pairs);
            prop_assert_eq!(graph_of(&text, DEFAULT_WINDOW).unwrap(), g);
        }
    }
}
