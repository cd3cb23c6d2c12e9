use std::collections::HashSet;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{tokens_tree, DecodeState, Memory, Model, Prepared};
use super::tape::{log_softmax_rows, Float, Tape};
use crate::expr::ExprTree;
use crate::graph::TokenizeError;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SolveError {
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error("decoding exceeded {0} tree nodes")]
    DecodeOverflow(usize),
}

/// A decoded tree with its value on the question's quantities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverPrediction {
    pub tree: ExprTree,
    /// `None` when evaluation fails; `error` then says why.
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Sum of log-probabilities of the decoding decisions.
    pub score: f64,
}

impl SolverPrediction {
    fn new(tree: ExprTree, quantities: &[f64], score: f64) -> SolverPrediction {
        let (value, error) = match tree.evaluate(quantities) {
            Ok(v) => (Some(v), None),
            Err(e) => (None, Some(e.to_string())),
        };
        SolverPrediction {
            tree,
            value,
            error,
            score,
        }
    }
}

/// Masked log-probabilities of the next output at `state`'s goal.
fn step_logprobs<T: Float>(
    model: &Model<T>,
    t: &mut Tape<'_, T>,
    mem: &Memory,
    state: &DecodeState,
    q: &Prepared,
) -> (super::tape::Var, Vec<f64>) {
    let (ctx, logits) = model.scores(t, mem, state.goal.expect("unfinished state"));
    let allowed = model.allowed(state, q.quantity_count());
    let mut masked: Array2<f64> = t.value(logits).mapv(|x| x.to_f64().unwrap());
    for (x, ok) in masked.iter_mut().zip(&allowed) {
        if !ok {
            *x = f64::NEG_INFINITY;
        }
    }
    let lp = log_softmax_rows(&masked.view());
    (ctx, lp.row(0).to_vec())
}

/// Highest entry; ties go to the lowest id.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn finish<T: Float>(
    model: &Model<T>,
    state: &DecodeState,
    q: &Prepared,
) -> Result<SolverPrediction, SolveError> {
    let tree = tokens_tree(&state.tokens, &model.vocab)
        .ok_or(SolveError::DecodeOverflow(model.config.max_tree_nodes))?;
    Ok(SolverPrediction::new(tree, &q.quantities, state.score))
}

fn greedy_from<T: Float>(
    model: &Model<T>,
    t: &mut Tape<'_, T>,
    mem: &Memory,
    q: &Prepared,
) -> Result<SolverPrediction, SolveError> {
    let mut state = DecodeState::new(mem);
    while !state.is_done() {
        if state.tokens.len() >= model.config.max_tree_nodes {
            return Err(SolveError::DecodeOverflow(model.config.max_tree_nodes));
        }
        let (ctx, lp) = step_logprobs(model, t, mem, &state, q);
        let tok = argmax(&lp);
        state.score += lp[tok];
        model.apply(t, mem, &mut state, ctx, tok);
    }
    finish(model, &state, q)
}

/// Argmax decoding with dropout off.
pub fn greedy<T: Float>(model: &Model<T>, q: &Prepared) -> Result<SolverPrediction, SolveError> {
    let mut t = Tape::new(&model.store);
    let enc = model.encode(&mut t, q);
    let mem = model.memory(&mut t, q, enc, None);
    greedy_from(model, &mut t, &mem, q)
}

/// `k` greedy decodes, each under fresh dropout masks in the graph layers.
/// The encoder runs once.
pub fn sample<T: Float>(
    model: &Model<T>,
    q: &Prepared,
    k: usize,
    seed: u64,
) -> Result<Vec<SolverPrediction>, SolveError> {
    let enc_value = {
        let mut t = Tape::new(&model.store);
        let enc = model.encode(&mut t, q);
        t.value(enc).clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut t = Tape::new(&model.store);
        let enc = t.input(enc_value.clone());
        let mem = model.memory(&mut t, q, enc, Some(&mut rng));
        out.push(greedy_from(model, &mut t, &mem, q)?);
    }
    Ok(out)
}

/// Beam search. Returns at most `width` finished trees, best first, with
/// canonical duplicates removed.
pub fn beam<T: Float>(
    model: &Model<T>,
    q: &Prepared,
    width: usize,
) -> Result<Vec<SolverPrediction>, SolveError> {
    let width = width.max(1);
    let mut t = Tape::new(&model.store);
    let enc = model.encode(&mut t, q);
    let mem = model.memory(&mut t, q, enc, None);
    let mut pool = vec![DecodeState::new(&mem)];
    while pool.iter().any(|s| !s.is_done()) {
        let mut next: Vec<DecodeState> = Vec::new();
        for state in pool {
            if state.is_done() {
                next.push(state);
                continue;
            }
            if state.tokens.len() >= model.config.max_tree_nodes {
                return Err(SolveError::DecodeOverflow(model.config.max_tree_nodes));
            }
            let (ctx, lp) = step_logprobs(model, &mut t, &mem, &state, q);
            let mut order: Vec<usize> = (0..lp.len()).filter(|&i| lp[i].is_finite()).collect();
            order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            for &tok in order.iter().take(width) {
                let mut s = state.clone();
                s.score += lp[tok];
                model.apply(&mut t, &mem, &mut s, ctx, tok);
                next.push(s);
            }
        }
        next.sort_by(|a, b| b.score.total_cmp(&a.score));
        next.truncate(width);
        pool = next;
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for s in &pool {
        let p = finish(model, s, q)?;
        if seen.insert(p.tree.canonicalize().serialize()) {
            out.push(p);
        }
    }
    Ok(out)
}

/// A trained model ready to answer free-form questions.
#[derive(Clone, Debug)]
pub struct Solver {
    pub model: Model<f32>,
}

impl Solver {
    pub fn new(model: Model<f32>) -> Solver {
        Solver { model }
    }

    pub fn prepare(&self, text: &str) -> Result<Prepared, SolveError> {
        Ok(self.model.prepare(text)?)
    }

    pub fn predict(&self, text: &str) -> Result<SolverPrediction, SolveError> {
        greedy(&self.model, &self.prepare(text)?)
    }

    pub fn sample(
        &self,
        text: &str,
        k: usize,
        seed: u64,
    ) -> Result<Vec<SolverPrediction>, SolveError> {
        sample(&self.model, &self.prepare(text)?, k, seed)
    }

    pub fn beam(&self, text: &str, width: usize) -> Result<Vec<SolverPrediction>, SolveError> {
        beam(&self.model, &self.prepare(text)?, width)
    }
}
