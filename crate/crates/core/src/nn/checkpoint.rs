//! Binary checkpoint: magic, version, a JSON header, then raw little-endian
//! `f32` tensor data in header order.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::decode::greedy;
use super::model::{LayoutError, Model, ModelConfig, Vocab};
use super::params::ParamStore;

const MAGIC: &[u8; 8] = b"MLQCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmokeTest {
    pub question: String,
    pub tree: String,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub epochs: usize,
    pub loss_curve: Vec<f64>,
    #[serde(default)]
    pub held_out_accuracy: Vec<Option<f64>>,
    pub dataset_seed: Option<u64>,
    #[serde(default)]
    pub smoke_test: Option<SmokeTest>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tokens: Vec<String>,
    constants: Vec<f64>,
    metadata: Metadata,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("smoke test mismatch: saved {expected}, decoded {found}")]
    SmokeTest { expected: String, found: String },
}

/// Records a greedy prediction on `question` so loading can verify it.
pub fn with_smoke_test(model: &Model<f32>, mut metadata: Metadata, question: &str) -> Metadata {
    metadata.smoke_test = model
        .prepare(question)
        .ok()
        .and_then(|q| greedy(model, &q).ok())
        .map(|p| SmokeTest {
            question: question.to_string(),
            tree: p.tree.serialize(),
            score: p.score,
        });
    metadata
}

pub fn to_bytes(model: &Model<f32>, metadata: &Metadata) -> Vec<u8> {
    let header = Header {
        config: model.config.clone(),
        tokens: model.vocab.tokens.clone(),
        constants: model.vocab.constants.clone(),
        metadata: metadata.clone(),
        tensors: model
            .store
            .iter()
            .map(|(name, v)| TensorEntry {
                name: name.to_string(),
                shape: [v.nrows(), v.ncols()],
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + 4 * model.store.scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, v) in model.store.iter() {
        for x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Parses a checkpoint and re-runs its smoke test.
pub fn from_bytes(bytes: &[u8]) -> Result<(Model<f32>, Metadata), CheckpointError> {
    let bad = |m: &str| CheckpointError::Format(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let json = bytes
        .get(20..20 + len)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| CheckpointError::Format(e.to_string()))?;
    let mut data = &bytes[20 + len..];
    let mut store = ParamStore::new();
    for t in &header.tensors {
        let n = t.shape[0] * t.shape[1];
        if data.len() < 4 * n {
            return Err(bad("truncated tensor data"));
        }
        let values: Vec<f32> = data[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        data = &data[4 * n..];
        store.insert(
            &t.name,
            Array2::from_shape_vec((t.shape[0], t.shape[1]), values).unwrap(),
        );
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes"));
    }
    let vocab = Vocab::from_parts(header.tokens, header.constants);
    let model = Model::from_store(header.config, vocab, store)?;
    if let Some(smoke) = &header.metadata.smoke_test {
        let found = model
            .prepare(&smoke.question)
            .ok()
            .and_then(|q| greedy(&model, &q).ok())
            .map(|p| (p.tree.serialize(), p.score));
        let ok = found.as_ref().is_some_and(|(tree, score)| {
            *tree == smoke.tree && (score - smoke.score).abs() <= 1e-6
        });
        if !ok {
            return Err(CheckpointError::SmokeTest {
                expected: smoke.tree.clone(),
                found: found.map(|f| f.0).unwrap_or_else(|| "nothing".into()),
            });
        }
    }
    Ok((model, header.metadata))
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model<f32>,
    metadata: &Metadata,
) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, to_bytes(model, metadata))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, Metadata), CheckpointError> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model<f32> {
        let config = ModelConfig {
            embedding_dim: 6,
            hidden_dim: 4,
            encoder_layers: 1,
            attention_heads: 2,
            ..ModelConfig::default()
        };
        let vocab = Vocab::new(["what", "is"].map(String::from), [2.0]);
        Model::new(config, vocab, &mut ChaCha8Rng::seed_from_u64(1))
    }

    #[test]
    fn round_trip_reproduces_smoke_test() {
        let m = model();
        let meta = with_smoke_test(
            &m,
            Metadata {
                epochs: 2,
                loss_curve: vec![3.0, 2.5],
                dataset_seed: Some(7),
                ..Metadata::default()
            },
            "what is 3 plus 4",
        );
        assert!(meta.smoke_test.is_some());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &m, &meta).unwrap();
        let (back, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(back.vocab, m.vocab);
        for ((a, x), (b, y)) in back.store.iter().zip(m.store.iter()) {
            assert_eq!((a, x), (b, y));
        }
    }

    #[test]
    fn tampered_weights_fail_the_smoke_test() {
        let mut m = model();
        let meta = with_smoke_test(&m, Metadata::default(), "what is 3 plus 4");
        let bytes = to_bytes(&m, &meta);
        assert!(from_bytes(&bytes).is_ok());
        let id = m.store.id("dec.out_b").unwrap();
        m.store.value_mut(id).fill(0.0);
        m.store.value_mut(id)[[0, 3]] = 50.0;
        let mut tampered = to_bytes(&m, &meta);
        assert!(matches!(
            from_bytes(&tampered),
            Err(CheckpointError::SmokeTest { .. })
        ));
        tampered[0] = b'X';
        assert!(matches!(
            from_bytes(&tampered),
            Err(CheckpointError::Format(_))
        ));
    }
}
