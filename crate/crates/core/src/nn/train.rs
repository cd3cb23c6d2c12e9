use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decode::greedy;
use super::model::{tree_tokens, ConfigError, Model, ModelConfig, Prepared, Vocab};
use super::params::Adam;
use super::tape::Tape;
use crate::bank::QuestionInstance;
use crate::mcq::within_tolerance;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("training set is empty")]
    Empty,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("question {id}: gold tree has {nodes} nodes, more than max_tree_nodes = {max}")]
    Capacity {
        id: String,
        nodes: usize,
        max: usize,
    },
    #[error("question {id}: gold tree does not match the quantities read from its text")]
    Unaligned { id: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch} (question {id}, last finite epoch loss {last:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        id: String,
        last: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-question negative log-likelihood.
    pub loss: f64,
    /// Value accuracy on the held-out questions, if any were given.
    pub held_out_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,held_out_accuracy\n");
        for e in &self.epochs {
            let acc = e
                .held_out_accuracy
                .map(|a| format!("{a:.4}"))
                .unwrap_or_default();
            out.push_str(&format!("{},{:.6},{}\n", e.epoch, e.loss, acc));
        }
        out
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

pub(crate) struct Example {
    pub id: String,
    pub prepared: Prepared,
    pub gold: Vec<usize>,
}

pub(crate) fn examples(
    instances: &[QuestionInstance],
    vocab: &Vocab,
    config: &ModelConfig,
) -> Result<Vec<Example>, TrainError> {
    instances
        .iter()
        .map(|inst| {
            let nodes = inst.gold_tree.node_count();
            if nodes > config.max_tree_nodes {
                return Err(TrainError::Capacity {
                    id: inst.id.clone(),
                    nodes,
                    max: config.max_tree_nodes,
                });
            }
            let unaligned = || TrainError::Unaligned {
                id: inst.id.clone(),
            };
            let prepared =
                Prepared::new(&inst.text, vocab, config.graph_window).map_err(|_| unaligned())?;
            if inst
                .gold_tree
                .check_quantities(prepared.quantity_count())
                .is_err()
            {
                return Err(unaligned());
            }
            let gold = tree_tokens(&inst.gold_tree, vocab).ok_or_else(unaligned)?;
            Ok(Example {
                id: inst.id.clone(),
                prepared,
                gold,
            })
        })
        .collect()
}

/// Fraction of `instances` whose greedy prediction matches the gold value.
pub fn value_accuracy(model: &Model<f32>, instances: &[QuestionInstance]) -> f64 {
    if instances.is_empty() {
        return 0.0;
    }
    let hits = instances
        .iter()
        .filter(|inst| {
            model
                .prepare(&inst.text)
                .ok()
                .and_then(|q| greedy(model, &q).ok())
                .and_then(|p| p.value)
                .is_some_and(|v| within_tolerance(v, inst.gold_value))
        })
        .count();
    hits as f64 / instances.len() as f64
}

/// Trains a fresh model on `train_set` with teacher forcing. `on_epoch` sees
/// each epoch's log row as soon as it is complete.
pub fn train(
    train_set: &[QuestionInstance],
    held_out: &[QuestionInstance],
    config: &ModelConfig,
    on_epoch: &mut dyn FnMut(&EpochLog, f64),
) -> Result<(Model<f32>, TrainLog), TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Empty);
    }
    let vocab = Vocab::build(
        train_set.iter().map(|i| i.text.as_str()),
        train_set.iter().map(|i| &i.gold_tree),
    );
    let data = examples(train_set, &vocab, config)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let mut model: Model<f32> = Model::new(config.clone(), vocab, &mut init_rng);
    let mut adam = Adam::new(&model.store, config.learning_rate);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grads = model.store.zeros_like();
            for &i in batch {
                let ex = &data[i];
                let mut t = Tape::new(&model.store);
                let loss = model.nll(&mut t, &ex.prepared, &ex.gold, Some(&mut dropout_rng));
                let value = t.scalar(loss) as f64;
                if !value.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        batch: b,
                        id: ex.id.clone(),
                        last: log.epochs.last().map(|e| e.loss),
                    });
                }
                total += value;
                t.backward(loss, &mut grads);
            }
            adam.update(&mut model.store, &grads, 1.0 / batch.len() as f64);
        }
        let held_out_accuracy = (!held_out.is_empty()).then(|| value_accuracy(&model, held_out));
        let row = EpochLog {
            epoch,
            loss: total / data.len() as f64,
            held_out_accuracy,
        };
        on_epoch(&row, started.elapsed().as_secs_f64());
        log.epochs.push(row);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::{augment, TemplateBank};

    fn toy_config() -> ModelConfig {
        ModelConfig {
            embedding_dim: 32,
            hidden_dim: 32,
            encoder_layers: 1,
            attention_heads: 4,
            gnn_layers: 1,
            learning_rate: 3e-3,
            batch_size: 8,
            epochs: 5,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let r = train(&[], &[], &toy_config(), &mut |_, _| {});
        assert!(matches!(r, Err(TrainError::Empty)));
    }

    #[test]
    fn oversized_gold_tree_is_rejected() {
        let bank = TemplateBank::default_bank();
        let data = augment(&bank, 1, 0).unwrap();
        let config = ModelConfig {
            max_tree_nodes: 2,
            ..toy_config()
        };
        let r = train(&data.instances, &[], &config, &mut |_, _| {});
        assert!(matches!(r, Err(TrainError::Capacity { max: 2, .. })));
    }

    #[test]
    fn single_template_is_learned() {
        let bank = TemplateBank::default_bank();
        let mut only = bank.clone();
        only.templates.retain(|t| t.id == "basics_magnitude");
        let data = augment(&only, 100, 7).unwrap();
        let (held, train_set): (Vec<_>, Vec<_>) = data
            .instances
            .iter()
            .cloned()
            .enumerate()
            .partition(|(i, _)| i % 5 == 0);
        let held: Vec<_> = held.into_iter().map(|p| p.1).collect();
        let train_set: Vec<_> = train_set.into_iter().map(|p| p.1).collect();
        let (train_set, held) = (&train_set[..], &held[..]);
        let mut rows = Vec::new();
        let (model, log) = train(train_set, held, &toy_config(), &mut |r, _| {
            rows.push(r.clone())
        })
        .unwrap();
        assert_eq!(rows.len(), 5);
        let losses = log.losses();
        assert!(losses[4] < 0.5 * losses[0], "{losses:?}");
        assert_eq!(log.epochs[4].held_out_accuracy, Some(1.0));
        assert_eq!(value_accuracy(&model, held), 1.0);
        assert!(log.to_csv().starts_with("epoch,loss,held_out_accuracy\n1,"));
    }
}
