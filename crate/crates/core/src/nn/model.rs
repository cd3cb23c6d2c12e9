use std::collections::{BTreeSet, HashMap};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{uniform, xavier, ParamStore};
use super::tape::{Float, Tape, Var};
use crate::expr::{ExprTree, Leaf, Node, Operator};
use crate::graph::{
    build_graph, extract_quantities, tokenize, EdgeKind, TokenKind, TokenizeError, DEFAULT_WINDOW,
};

pub const OPERATORS: [Operator; 8] = [
    Operator::Add,
    Operator::Sub,
    Operator::Mul,
    Operator::Div,
    Operator::Max,
    Operator::Log,
    Operator::Exp,
    Operator::Pow,
];

const ORDINALS: usize = 64;
const UNK: usize = 0;
const NUM: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    /// Width of attention projections and feed-forward layers.
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub attention_heads: usize,
    pub gnn_layers: usize,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_tree_nodes: usize,
    pub beam_width: usize,
    pub sample_count: usize,
    pub seed: u64,
    /// `false` feeds encoder states straight to the decoder.
    pub use_gnn: bool,
    pub graph_window: usize,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            embedding_dim: 100,
            hidden_dim: 512,
            encoder_layers: 3,
            attention_heads: 8,
            gnn_layers: 2,
            dropout_rate: 0.1,
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 25,
            max_tree_nodes: 64,
            beam_width: 4,
            sample_count: 100,
            seed: 0,
            use_gnn: true,
            graph_window: DEFAULT_WINDOW,
        }
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
#[error("invalid model config: {0}")]
pub struct ConfigError(pub String);

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("embedding_dim", self.embedding_dim),
            ("hidden_dim", self.hidden_dim),
            ("encoder_layers", self.encoder_layers),
            ("attention_heads", self.attention_heads),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("max_tree_nodes", self.max_tree_nodes),
            ("beam_width", self.beam_width),
            ("sample_count", self.sample_count),
            ("graph_window", self.graph_window),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ConfigError(format!("{name} must be positive")));
            }
        }
        if self.hidden_dim % self.attention_heads != 0 {
            return Err(ConfigError(format!(
                "hidden_dim {} is not divisible by attention_heads {}",
                self.hidden_dim, self.attention_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ConfigError("dropout_rate must be in [0, 1)".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ConfigError("learning_rate must be positive".into()));
        }
        Ok(())
    }

    /// Stable hex digest of the configuration.
    pub fn digest(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// Input tokens and the output constant set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    /// `<unk>` and `<num>` first, then words in sorted order.
    pub tokens: Vec<String>,
    pub constants: Vec<f64>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(
        words: impl IntoIterator<Item = String>,
        constants: impl IntoIterator<Item = f64>,
    ) -> Vocab {
        let words: BTreeSet<String> = words.into_iter().collect();
        let mut tokens = vec!["<unk>".to_string(), "<num>".to_string()];
        tokens.extend(words.into_iter().filter(|w| w != "<unk>" && w != "<num>"));
        let mut constants: Vec<f64> = constants.into_iter().collect();
        constants.sort_by(f64::total_cmp);
        constants.dedup();
        if constants.is_empty() {
            constants.push(1.0);
        }
        Vocab::from_parts(tokens, constants)
    }

    pub fn from_parts(tokens: Vec<String>, constants: Vec<f64>) -> Vocab {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            tokens,
            constants,
            index,
        }
    }

    /// Words of `texts` and constants of `trees`.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        trees: impl IntoIterator<Item = &'a ExprTree>,
    ) -> Vocab {
        let mut words = Vec::new();
        for text in texts {
            if let Ok(tokens) = tokenize(text) {
                words.extend(
                    tokens
                        .into_iter()
                        .filter(|t| t.kind != TokenKind::Number)
                        .map(|t| t.text),
                );
            }
        }
        let mut constants = Vec::new();
        for t in trees {
            for l in t.leaves() {
                if let Leaf::Constant(c) = l {
                    constants.push(c);
                }
            }
        }
        Vocab::new(words, constants)
    }

    pub fn token_id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn constant_id(&self, c: f64) -> Option<usize> {
        self.constants.iter().position(|&k| k == c)
    }

    /// Operators, then constants; copy targets follow.
    pub fn fixed_outputs(&self) -> usize {
        OPERATORS.len() + self.constants.len()
    }

    fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }
}

/// A decoder output: operator, constant, or copy of quantity `i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutToken {
    Op(Operator),
    Const(usize),
    Copy(usize),
}

impl OutToken {
    pub fn id(self, vocab: &Vocab) -> usize {
        match self {
            OutToken::Op(op) => op.index(),
            OutToken::Const(k) => OPERATORS.len() + k,
            OutToken::Copy(i) => vocab.fixed_outputs() + i,
        }
    }

    pub fn from_id(id: usize, vocab: &Vocab) -> OutToken {
        if id < OPERATORS.len() {
            OutToken::Op(OPERATORS[id])
        } else if id < vocab.fixed_outputs() {
            OutToken::Const(id - OPERATORS.len())
        } else {
            OutToken::Copy(id - vocab.fixed_outputs())
        }
    }

    pub fn arity(self) -> usize {
        match self {
            OutToken::Op(op) => op.arity(),
            _ => 0,
        }
    }
}

/// Pre-order output tokens of a tree. `None` if it uses a constant outside
/// the vocabulary.
pub fn tree_tokens(tree: &ExprTree, vocab: &Vocab) -> Option<Vec<usize>> {
    let mut out = Vec::with_capacity(tree.node_count());
    for n in tree.root().preorder() {
        let t = match n {
            Node::Op { op, .. } => OutToken::Op(*op),
            Node::Leaf(Leaf::Constant(c)) => OutToken::Const(vocab.constant_id(*c)?),
            Node::Leaf(Leaf::Quantity(i)) => OutToken::Copy(*i),
        };
        out.push(t.id(vocab));
    }
    Some(out)
}

/// Rebuilds a tree from complete pre-order output tokens.
pub fn tokens_tree(tokens: &[usize], vocab: &Vocab) -> Option<ExprTree> {
    fn build(tokens: &[usize], at: &mut usize, vocab: &Vocab) -> Option<Node> {
        let id = *tokens.get(*at)?;
        *at += 1;
        Some(match OutToken::from_id(id, vocab) {
            OutToken::Op(op) => {
                let children = (0..op.arity())
                    .map(|_| build(tokens, at, vocab))
                    .collect::<Option<Vec<_>>>()?;
                Node::op(op, children)
            }
            OutToken::Const(k) => Node::constant(*vocab.constants.get(k)?),
            OutToken::Copy(i) => Node::quantity(i),
        })
    }
    let mut at = 0;
    let root = build(tokens, &mut at, vocab)?;
    (at == tokens.len())
        .then(|| ExprTree::new(root).ok())
        .flatten()
}

/// Parameter-independent features of one question.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub quantities: Vec<f64>,
    token_ids: Vec<usize>,
    ordinals: Vec<usize>,
    q_positions: Vec<usize>,
    /// Row-normalized adjacency: QW, QQ_GT, QQ_GT transposed, SEQ.
    adjacency: [Array2<f64>; 4],
}

impl Prepared {
    pub fn new(text: &str, vocab: &Vocab, window: usize) -> Result<Prepared, TokenizeError> {
        let tokens = tokenize(text)?;
        let quantities = extract_quantities(&tokens);
        let graph = build_graph(&tokens, &quantities, window);
        let n = graph.node_count();
        let mut adj: [Array2<f64>; 4] = std::array::from_fn(|_| Array2::zeros((n, n)));
        for e in &graph.edges {
            match e.kind {
                EdgeKind::Qw => {
                    adj[0][[e.src, e.dst]] = 1.0;
                    adj[0][[e.dst, e.src]] = 1.0;
                }
                EdgeKind::QqGt => {
                    adj[1][[e.src, e.dst]] = 1.0;
                    adj[2][[e.dst, e.src]] = 1.0;
                }
                EdgeKind::Seq => adj[3][[e.dst, e.src]] = 1.0,
            }
        }
        for a in &mut adj {
            for mut row in a.rows_mut() {
                let d = row.sum();
                if d > 0.0 {
                    row /= d;
                }
            }
        }
        let mut ordinals = vec![0; tokens.len()];
        for (i, q) in quantities.iter().enumerate() {
            ordinals[q.position] = 1 + i.min(ORDINALS - 2);
        }
        Ok(Prepared {
            quantities: quantities.iter().map(|q| q.value).collect(),
            token_ids: tokens
                .iter()
                .map(|t| {
                    if t.kind == TokenKind::Number {
                        NUM
                    } else {
                        vocab.token_id(&t.text)
                    }
                })
                .collect(),
            ordinals,
            q_positions: quantities.iter().map(|q| q.position).collect(),
            adjacency: adj,
        })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn quantity_count(&self) -> usize {
        self.q_positions.len()
    }
}

fn positional<T: Float>(n: usize, d: usize) -> Array2<T> {
    Array2::from_shape_fn((n, d), |(pos, i)| {
        let k = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * k / d as f64);
        T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[derive(Clone, Debug)]
struct EncIds {
    ln1_g: usize,
    ln1_b: usize,
    wqkv: usize,
    bqkv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct GnnIds {
    w: usize,
    b: usize,
    ln_g: usize,
    ln_b: usize,
}

#[derive(Clone, Debug)]
struct Ids {
    tok_emb: usize,
    ord_emb: usize,
    enc: Vec<EncIds>,
    enc_ln_g: usize,
    enc_ln_b: usize,
    gnn: Vec<GnnIds>,
    readout_w: usize,
    readout_b: usize,
    op_emb: usize,
    const_emb: usize,
    att_w: usize,
    u_w: usize,
    u_b: usize,
    out_w: usize,
    out_b: usize,
    copy_w: usize,
    leaf_w: usize,
    leaf_b: usize,
    left_w: usize,
    left_b: usize,
    right_w: usize,
    right_b: usize,
    merge_w: usize,
    merge_b: usize,
}

/// Names and shapes of every parameter tensor, in storage order.
pub fn layout(config: &ModelConfig, vocab: &Vocab) -> Vec<(String, [usize; 2])> {
    let d = config.embedding_dim;
    let h = config.hidden_dim;
    let mut out: Vec<(String, [usize; 2])> = vec![
        ("tok_emb".into(), [vocab.tokens.len(), d]),
        ("ord_emb".into(), [ORDINALS, d]),
    ];
    for l in 0..config.encoder_layers {
        for (name, shape) in [
            ("ln1_g", [1, d]),
            ("ln1_b", [1, d]),
            ("wqkv", [d, 3 * h]),
            ("bqkv", [1, 3 * h]),
            ("wo", [h, d]),
            ("bo", [1, d]),
            ("ln2_g", [1, d]),
            ("ln2_b", [1, d]),
            ("w1", [d, h]),
            ("b1", [1, h]),
            ("w2", [h, d]),
            ("b2", [1, d]),
        ] {
            out.push((format!("enc.{l}.{name}"), shape));
        }
    }
    out.push(("enc.ln_g".into(), [1, d]));
    out.push(("enc.ln_b".into(), [1, d]));
    for l in 0..config.gnn_layers {
        out.push((format!("gnn.{l}.w"), [5 * d, d]));
        out.push((format!("gnn.{l}.b"), [1, d]));
        out.push((format!("gnn.{l}.ln_g"), [1, d]));
        out.push((format!("gnn.{l}.ln_b"), [1, d]));
    }
    let fixed = vocab.fixed_outputs();
    for (name, shape) in [
        ("readout.w", [2 * d, d]),
        ("readout.b", [1, d]),
        ("dec.op_emb", [OPERATORS.len(), d]),
        ("dec.const_emb", [vocab.constants.len(), d]),
        ("dec.att_w", [d, d]),
        ("dec.u_w", [2 * d, d]),
        ("dec.u_b", [1, d]),
        ("dec.out_w", [d, fixed]),
        ("dec.out_b", [1, fixed]),
        ("dec.copy_w", [d, d]),
        ("dec.leaf_w", [d, d]),
        ("dec.leaf_b", [1, d]),
        ("dec.left_w", [3 * d, 2 * d]),
        ("dec.left_b", [1, 2 * d]),
        ("dec.right_w", [4 * d, 2 * d]),
        ("dec.right_b", [1, 2 * d]),
        ("dec.merge_w", [3 * d, 2 * d]),
        ("dec.merge_b", [1, 2 * d]),
    ] {
        out.push((name.into(), shape));
    }
    out
}

/// Encoder → graph network → tree decoder.
#[derive(Clone, Debug)]
pub struct Model<T: Float> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore<T>,
    ids: Ids,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LayoutError {
    #[error("missing parameter `{0}`")]
    Missing(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: [usize; 2],
        found: [usize; 2],
    },
}

impl<T: Float> Model<T> {
    /// Fresh parameters: Xavier weights, zero biases, unit norm gains.
    pub fn new(config: ModelConfig, vocab: Vocab, rng: &mut impl Rng) -> Model<T> {
        let mut store = ParamStore::new();
        let d = config.embedding_dim;
        for (name, [r, c]) in layout(&config, &vocab) {
            let leaf = name.rsplit('.').next().unwrap_or(&name);
            let value = if leaf.ends_with("_g") {
                Array2::ones((r, c))
            } else if leaf.starts_with('b') || leaf.ends_with("_b") {
                Array2::zeros((r, c))
            } else if leaf.ends_with("emb") {
                uniform(r, c, (3.0 / d as f64).sqrt(), rng)
            } else {
                xavier(r, c, rng)
            };
            store.insert(&name, value);
        }
        Model::from_store(config, vocab, store).expect("layout matches itself")
    }

    pub fn from_store(
        config: ModelConfig,
        mut vocab: Vocab,
        store: ParamStore<T>,
    ) -> Result<Model<T>, LayoutError> {
        vocab.reindex();
        for (name, expected) in layout(&config, &vocab) {
            let id = store
                .id(&name)
                .ok_or_else(|| LayoutError::Missing(name.clone()))?;
            let s = store.value(id).shape();
            let found = [s[0], s[1]];
            if found != expected {
                return Err(LayoutError::Shape {
                    name,
                    expected,
                    found,
                });
            }
        }
        let id = |n: &str| store.id(n).unwrap();
        let ids = Ids {
            tok_emb: id("tok_emb"),
            ord_emb: id("ord_emb"),
            enc: (0..config.encoder_layers)
                .map(|l| {
                    let e = |n: &str| id(&format!("enc.{l}.{n}"));
                    EncIds {
                        ln1_g: e("ln1_g"),
                        ln1_b: e("ln1_b"),
                        wqkv: e("wqkv"),
                        bqkv: e("bqkv"),
                        wo: e("wo"),
                        bo: e("bo"),
                        ln2_g: e("ln2_g"),
                        ln2_b: e("ln2_b"),
                        w1: e("w1"),
                        b1: e("b1"),
                        w2: e("w2"),
                        b2: e("b2"),
                    }
                })
                .collect(),
            enc_ln_g: id("enc.ln_g"),
            enc_ln_b: id("enc.ln_b"),
            gnn: (0..config.gnn_layers)
                .map(|l| GnnIds {
                    w: id(&format!("gnn.{l}.w")),
                    b: id(&format!("gnn.{l}.b")),
                    ln_g: id(&format!("gnn.{l}.ln_g")),
                    ln_b: id(&format!("gnn.{l}.ln_b")),
                })
                .collect(),
            readout_w: id("readout.w"),
            readout_b: id("readout.b"),
            op_emb: id("dec.op_emb"),
            const_emb: id("dec.const_emb"),
            att_w: id("dec.att_w"),
            u_w: id("dec.u_w"),
            u_b: id("dec.u_b"),
            out_w: id("dec.out_w"),
            out_b: id("dec.out_b"),
            copy_w: id("dec.copy_w"),
            leaf_w: id("dec.leaf_w"),
            leaf_b: id("dec.leaf_b"),
            left_w: id("dec.left_w"),
            left_b: id("dec.left_b"),
            right_w: id("dec.right_w"),
            right_b: id("dec.right_b"),
            merge_w: id("dec.merge_w"),
            merge_b: id("dec.merge_b"),
        };
        Ok(Model {
            config,
            vocab,
            store,
            ids,
        })
    }

    pub fn prepare(&self, text: &str) -> Result<Prepared, TokenizeError> {
        Prepared::new(text, &self.vocab, self.config.graph_window)
    }

    /// Self-attention encoder over the question tokens: `[n, d]`.
    pub fn encode(&self, t: &mut Tape<'_, T>, q: &Prepared) -> Var {
        let d = self.config.embedding_dim;
        let h = self.config.hidden_dim;
        let heads = self.config.attention_heads;
        let hs = h / heads;
        let p = &self.ids;
        let tok = t.param(p.tok_emb);
        let ord = t.param(p.ord_emb);
        let e = t.rows(tok, &q.token_ids);
        let o = t.rows(ord, &q.ordinals);
        let pe = t.input(positional(q.len(), d));
        let x = t.add(e, o);
        let mut x = t.add(x, pe);
        let inv = T::of(1.0 / (hs as f64).sqrt());
        for l in &p.enc {
            let (g, b) = (t.param(l.ln1_g), t.param(l.ln1_b));
            let n = t.layer_norm(x, g, b);
            let (w, b) = (t.param(l.wqkv), t.param(l.bqkv));
            let qkv = t.affine(n, w, b);
            let mut outs = Vec::with_capacity(heads);
            for k in 0..heads {
                let qh = t.slice_cols(qkv, k * hs, (k + 1) * hs);
                let kh = t.slice_cols(qkv, h + k * hs, h + (k + 1) * hs);
                let vh = t.slice_cols(qkv, 2 * h + k * hs, 2 * h + (k + 1) * hs);
                let s = t.matmul_t(qh, kh);
                let s = t.scale(s, inv);
                let a = t.softmax_rows(s);
                outs.push(t.matmul(a, vh));
            }
            let cat = t.concat_cols(&outs);
            let (w, b) = (t.param(l.wo), t.param(l.bo));
            let y = t.affine(cat, w, b);
            x = t.add(x, y);
            let (g, b) = (t.param(l.ln2_g), t.param(l.ln2_b));
            let n = t.layer_norm(x, g, b);
            let (w, b) = (t.param(l.w1), t.param(l.b1));
            let f = t.affine(n, w, b);
            let f = t.relu(f);
            let (w, b) = (t.param(l.w2), t.param(l.b2));
            let y = t.affine(f, w, b);
            x = t.add(x, y);
        }
        let (g, b) = (t.param(p.enc_ln_g), t.param(p.enc_ln_b));
        t.layer_norm(x, g, b)
    }

    /// Graph message passing over word and quantity nodes. `dropout` supplies
    /// the generator when dropout is active.
    pub fn memory(
        &self,
        t: &mut Tape<'_, T>,
        q: &Prepared,
        enc: Var,
        dropout: Option<&mut dyn rand::RngCore>,
    ) -> Memory {
        let n = q.len();
        let quantity_rows = t.rows(enc, &q.q_positions);
        let mut x = if q.quantity_count() > 0 {
            t.concat_rows(&[enc, quantity_rows])
        } else {
            enc
        };
        let p = &self.ids;
        if self.config.use_gnn {
            let adj: Vec<Var> = q.adjacency.iter().map(|a| t.input(a.mapv(T::of))).collect();
            let rate = self.config.dropout_rate;
            let mut dropout = dropout;
            for l in &p.gnn {
                let mut parts = vec![x];
                for a in &adj {
                    parts.push(t.matmul(*a, x));
                }
                let m = t.concat_cols(&parts);
                let (w, b) = (t.param(l.w), t.param(l.b));
                let z = t.affine(m, w, b);
                let mut z = t.relu(z);
                if let Some(rng) = dropout.as_deref_mut() {
                    if rate > 0.0 {
                        let keep = 1.0 - rate;
                        let shape = t.value(z).raw_dim();
                        let mask = Array2::from_shape_simple_fn(shape, || {
                            if rng.random::<f64>() < keep {
                                T::of(1.0 / keep)
                            } else {
                                T::zero()
                            }
                        });
                        z = t.mul_const(z, mask);
                    }
                }
                let r = t.add(x, z);
                let (g, b) = (t.param(l.ln_g), t.param(l.ln_b));
                x = t.layer_norm(r, g, b);
            }
        }
        let quantities = (q.quantity_count() > 0).then(|| {
            let idx: Vec<usize> = (n..n + q.quantity_count()).collect();
            t.rows(x, &idx)
        });
        let mx = t.mean_rows(x);
        let me = t.mean_rows(enc);
        let cat = t.concat_cols(&[mx, me]);
        let (w, b) = (t.param(p.readout_w), t.param(p.readout_b));
        let g = t.affine(cat, w, b);
        let root = t.tanh(g);
        Memory {
            nodes: x,
            quantities,
            root,
        }
    }

    fn gated(&self, t: &mut Tape<'_, T>, parts: &[Var], w: usize, b: usize) -> Var {
        let d = self.config.embedding_dim;
        let x = t.concat_cols(parts);
        let (w, b) = (t.param(w), t.param(b));
        let y = t.affine(x, w, b);
        let a = t.slice_cols(y, 0, d);
        let a = t.tanh(a);
        let g = t.slice_cols(y, d, 2 * d);
        let g = t.sigmoid(g);
        t.mul(a, g)
    }

    /// Context and output logits (`[1, fixed + quantities]`) for the current goal.
    pub fn scores(&self, t: &mut Tape<'_, T>, mem: &Memory, goal: Var) -> (Var, Var) {
        let p = &self.ids;
        let d = self.config.embedding_dim;
        let w = t.param(p.att_w);
        let k = t.matmul(goal, w);
        let s = t.matmul_t(k, mem.nodes);
        let s = t.scale(s, T::of(1.0 / (d as f64).sqrt()));
        let a = t.softmax_rows(s);
        let ctx = t.matmul(a, mem.nodes);
        let qc = t.concat_cols(&[goal, ctx]);
        let (w, b) = (t.param(p.u_w), t.param(p.u_b));
        let u = t.affine(qc, w, b);
        let u = t.tanh(u);
        let (w, b) = (t.param(p.out_w), t.param(p.out_b));
        let fixed = t.affine(u, w, b);
        let logits = match mem.quantities {
            Some(qs) => {
                let w = t.param(p.copy_w);
                let k = t.matmul(u, w);
                let copy = t.matmul_t(k, qs);
                t.concat_cols(&[fixed, copy])
            }
            None => fixed,
        };
        (ctx, logits)
    }

    /// Advances `state` by emitting `token` at the current goal.
    pub fn apply(
        &self,
        t: &mut Tape<'_, T>,
        mem: &Memory,
        state: &mut DecodeState,
        ctx: Var,
        token: usize,
    ) {
        let p = &self.ids;
        let goal = state.goal.expect("decoding is not finished");
        state.tokens.push(token);
        let tok = OutToken::from_id(token, &self.vocab);
        state.open = state.open - 1 + tok.arity();
        let mut emb = match tok {
            OutToken::Op(op) => {
                let table = t.param(p.op_emb);
                let e = t.rows(table, &[op.index()]);
                state.goal = Some(self.gated(t, &[goal, ctx, e], p.left_w, p.left_b));
                state.stack.push(Frame {
                    op,
                    emb: e,
                    goal,
                    ctx,
                    children: Vec::new(),
                });
                return;
            }
            OutToken::Const(k) => {
                let table = t.param(p.const_emb);
                t.rows(table, &[k])
            }
            OutToken::Copy(i) => {
                let qs = mem.quantities.expect("copy needs quantities");
                let row = t.rows(qs, &[i]);
                let (w, b) = (t.param(p.leaf_w), t.param(p.leaf_b));
                let y = t.affine(row, w, b);
                t.tanh(y)
            }
        };
        loop {
            let Some(top) = state.stack.last_mut() else {
                state.goal = None;
                state.root_emb = Some(emb);
                return;
            };
            top.children.push(emb);
            if top.children.len() == top.op.arity() {
                let f = state.stack.pop().unwrap();
                let right = if f.children.len() == 2 {
                    f.children[1]
                } else {
                    t.input(Array2::zeros((1, self.config.embedding_dim)))
                };
                emb = self.gated(t, &[f.emb, f.children[0], right], p.merge_w, p.merge_b);
            } else {
                let (g, c, e, l) = (top.goal, top.ctx, top.emb, top.children[0]);
                state.goal = Some(self.gated(t, &[g, c, e, l], p.right_w, p.right_b));
                return;
            }
        }
    }

    /// Output ids allowed at the current goal: operators only while the
    /// node budget can still close every open goal.
    pub fn allowed(&self, state: &DecodeState, quantity_count: usize) -> Vec<bool> {
        let fixed = self.vocab.fixed_outputs();
        let mut mask = vec![true; fixed + quantity_count];
        let used = state.tokens.len() + state.open;
        for (i, op) in OPERATORS.iter().enumerate() {
            mask[i] = used + op.arity() <= self.config.max_tree_nodes;
        }
        mask
    }

    /// Teacher-forced negative log-likelihood of the gold token sequence.
    pub fn nll(
        &self,
        t: &mut Tape<'_, T>,
        q: &Prepared,
        gold: &[usize],
        dropout: Option<&mut dyn rand::RngCore>,
    ) -> Var {
        let enc = self.encode(t, q);
        let mem = self.memory(t, q, enc, dropout);
        let mut state = DecodeState::new(&mem);
        let mut picks = Vec::with_capacity(gold.len());
        for &tok in gold {
            let goal = state.goal.expect("gold sequence is a complete tree");
            let (ctx, logits) = self.scores(t, &mem, goal);
            let lp = t.log_softmax_rows(logits);
            picks.push(t.pick(lp, 0, tok));
            self.apply(t, &mem, &mut state, ctx, tok);
        }
        let total = t.sum_scalars(&picks);
        t.scale(total, T::of(-1.0))
    }
}

/// Graph-network output consumed by the decoder.
#[derive(Clone, Copy, Debug)]
pub struct Memory {
    /// All node states, `[N, d]`.
    pub nodes: Var,
    /// Quantity node states, `[Q, d]`.
    pub quantities: Option<Var>,
    /// Graph-level vector that seeds the root goal.
    pub root: Var,
}

#[derive(Clone, Debug)]
pub struct Frame {
    op: Operator,
    emb: Var,
    goal: Var,
    ctx: Var,
    children: Vec<Var>,
}

/// Goal stack of a partially decoded tree.
#[derive(Clone, Debug)]
pub struct DecodeState {
    pub goal: Option<Var>,
    pub tokens: Vec<usize>,
    /// Goals that still need at least one node, the current one included.
    pub open: usize,
    pub score: f64,
    stack: Vec<Frame>,
    root_emb: Option<Var>,
}

impl DecodeState {
    pub fn new(mem: &Memory) -> DecodeState {
        DecodeState {
            goal: Some(mem.root),
            tokens: Vec::new(),
            open: 1,
            score: 0.0,
            stack: Vec::new(),
            root_emb: None,
        }
    }

    pub fn is_done(&self) -> bool {
        self.goal.is_none()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_tree;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn token_round_trip() {
        let tree = parse_tree("(add q0 (mul c:0.5 (log q2)))").unwrap();
        let vocab = Vocab::build(["x"], [&tree]);
        assert_eq!(vocab.constants, vec![0.5]);
        let toks = tree_tokens(&tree, &vocab).unwrap();
        assert_eq!(toks.len(), 6);
        assert_eq!(tokens_tree(&toks, &vocab).unwrap(), tree);
        assert!(tokens_tree(&toks[..5], &vocab).is_none());
        assert!(tree_tokens(&parse_tree("c:3").unwrap(), &vocab).is_none());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            hidden_dim: 10,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_ne!(ModelConfig::default().digest(), bad.digest());
        let toml_like: ModelConfig = serde_json::from_str(r#"{"hidden_dim": 128}"#).unwrap();
        assert_eq!(toml_like.embedding_dim, 100);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"hidden": 1}"#).is_err());
    }

    #[test]
    fn prepared_features() {
        let vocab = Vocab::build(["Compute the magnitude of"], []);
        let p = Prepared::new("Compute the magnitude of [10, 10, 1].", &vocab, 3).unwrap();
        assert_eq!(p.quantities, vec![10.0, 10.0, 1.0]);
        assert_eq!(p.quantity_count(), 3);
        for a in &p.adjacency {
            for row in a.rows() {
                let s = row.sum();
                assert!(s == 0.0 || (s - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(p.token_ids[0], vocab.token_id("Compute"));
        assert_eq!(p.token_ids[p.q_positions[0]], NUM);
    }

    #[test]
    fn budget_mask() {
        let vocab = Vocab::new(["a".to_string()], [1.0]);
        let config = ModelConfig {
            embedding_dim: 4,
            hidden_dim: 4,
            attention_heads: 2,
            encoder_layers: 1,
            max_tree_nodes: 3,
            ..ModelConfig::default()
        };
        let m: Model<f32> = Model::new(config, vocab, &mut ChaCha8Rng::seed_from_u64(0));
        let mut t = Tape::new(&m.store);
        let v = t.input(Array2::zeros((1, 4)));
        let mem = Memory {
            nodes: v,
            quantities: None,
            root: v,
        };
        let mut s = DecodeState::new(&mem);
        let mask = m.allowed(&s, 1);
        assert!(mask[Operator::Add.index()] && mask[Operator::Log.index()]);
        s.tokens.push(0);
        s.open = 2;
        let mask = m.allowed(&s, 1);
        assert!(!mask[Operator::Log.index()] && mask[OPERATORS.len()] && mask[OPERATORS.len() + 1]);
    }
}
