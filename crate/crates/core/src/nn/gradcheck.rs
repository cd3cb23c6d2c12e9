//! Central finite-difference check of the tape's gradients on a small model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig, Vocab};
use super::tape::{BackwardFault, Tape};
use super::train::{examples, Example};
use crate::bank::{instantiate, sample_values, stream_rng, TemplateBank};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
const CHECKED: usize = 128;
const MAX_DIM: usize = 8;
const TEMPLATES: [&str; 3] = ["basics_magnitude", "nn1_chain", "rl_q_update"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub param: String,
    pub index: [usize; 2],
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub tolerance: f64,
    pub max_error: f64,
    pub failures: Vec<Mismatch>,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GradCheckError {
    #[error("gradient check needs embedding_dim and hidden_dim of at most {MAX_DIM}")]
    TooLarge,
    #[error("{} of {} gradients differ from finite differences (first: {})", .0.failures.len(), .0.checked, .0.failures[0].param)]
    GradientMismatch(GradCheckReport),
}

fn total_loss(
    model: &Model<f64>,
    data: &[Example],
    fault: Option<BackwardFault>,
    grads: Option<&mut [ndarray::Array2<f64>]>,
) -> f64 {
    let mut t = match fault {
        Some(f) => Tape::with_fault(&model.store, f),
        None => Tape::new(&model.store),
    };
    let parts: Vec<_> = data
        .iter()
        .map(|ex| model.nll(&mut t, &ex.prepared, &ex.gold, None))
        .collect();
    let loss = t.sum_scalars(&parts);
    if let Some(g) = grads {
        t.backward(loss, g);
    }
    t.scalar(loss)
}

/// Compares analytic and numeric gradients for randomly chosen parameters
/// of a freshly initialised double-precision model on a few bank questions.
/// `fault` swaps in a broken backward rule.
pub fn gradient_check(
    config: &ModelConfig,
    tolerance: f64,
    fault: Option<BackwardFault>,
) -> Result<GradCheckReport, GradCheckError> {
    if config.embedding_dim > MAX_DIM || config.hidden_dim > MAX_DIM {
        return Err(GradCheckError::TooLarge);
    }
    let bank = TemplateBank::default_bank();
    let instances: Vec<_> = TEMPLATES
        .iter()
        .filter_map(|id| bank.template(id))
        .map(|t| {
            let mut rng = stream_rng(config.seed, &t.id, 0);
            let values = sample_values(t, &mut rng).expect("bank template samples");
            instantiate(t, 0, &values, t.id.clone()).expect("bank template instantiates")
        })
        .collect();
    let vocab = Vocab::build(
        instances.iter().map(|i| i.text.as_str()),
        instances.iter().map(|i| &i.gold_tree),
    );
    let data = examples(&instances, &vocab, config).expect("bank questions fit the model");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model: Model<f64> = Model::new(config.clone(), vocab, &mut rng);
    let mut grads = model.store.zeros_like();
    total_loss(&model, &data, fault, Some(&mut grads));

    let mut report = GradCheckReport {
        checked: 0,
        tolerance,
        max_error: 0.0,
        failures: Vec::new(),
    };
    for _ in 0..CHECKED {
        let id = rng.random_range(0..model.store.len());
        let (r, c) = model.store.value(id).dim();
        let index = [rng.random_range(0..r), rng.random_range(0..c)];
        let original = model.store.value(id)[index];
        model.store.value_mut(id)[index] = original + STEP;
        let up = total_loss(&model, &data, None, None);
        model.store.value_mut(id)[index] = original - STEP;
        let down = total_loss(&model, &data, None, None);
        model.store.value_mut(id)[index] = original;
        let numeric = (up - down) / (2.0 * STEP);
        let analytic = grads[id][index];
        let error = (analytic - numeric).abs() / analytic.abs().max(1.0);
        report.checked += 1;
        report.max_error = report.max_error.max(error);
        if error > tolerance || !error.is_finite() {
            report.failures.push(Mismatch {
                param: model.store.name(id).to_string(),
                index,
                analytic,
                numeric,
                error,
            });
        }
    }
    if report.failures.is_empty() {
        Ok(report)
    } else {
        Err(GradCheckError::GradientMismatch(report))
    }
}

/// A configuration small enough for [`gradient_check`].
pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        embedding_dim: 8,
        hidden_dim: 8,
        encoder_layers: 1,
        attention_heads: 2,
        gnn_layers: 1,
        seed,
        ..ModelConfig::default()
    }
}
