//! Neuro-symbolic solver for machine-learning course questions.
//!
//! The crate generates questions from templates, solves them by decoding
//! expression trees with a text-encoder / graph-network / tree-decoder model,
//! builds multiple-choice distractors by perturbing trees, produces graded
//! hints, and evaluates the whole pipeline.

pub mod bank;
pub mod eval;
pub mod expr;
pub mod graph;
pub mod hints;
pub mod mcq;
pub mod nn;
