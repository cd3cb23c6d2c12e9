use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{instantiate, QuestionInstance};
use super::sample::{sample_values, stream_rng, SampleError};
use super::{QuestionTemplate, TemplateBank};

const MAX_REJECTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: u32,
    pub bank_version: String,
    pub per_question: usize,
    pub seed: u64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub instances: Vec<QuestionInstance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// JSON lines: the header, then one instance per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).unwrap();
        out.push('\n');
        for inst in &self.instances {
            out.push_str(&serde_json::to_string(inst).unwrap());
            out.push('\n');
        }
        out
    }
}

struct Stream<'a> {
    template: &'a QuestionTemplate,
    paraphrase: usize,
    rng: ChaCha8Rng,
    drawn: usize,
}

impl Stream<'_> {
    /// Next instance whose text is not in `seen`.
    fn next_unique(&mut self, seen: &HashSet<String>) -> Result<QuestionInstance, SampleError> {
        for _ in 0..MAX_REJECTS {
            let values = sample_values(self.template, &mut self.rng)?;
            let id = format!(
                "{}-p{}-{:03}",
                self.template.id, self.paraphrase, self.drawn
            );
            let Ok(inst) = instantiate(self.template, self.paraphrase, &values, id) else {
                continue;
            };
            if !seen.contains(&inst.text) {
                self.drawn += 1;
                return Ok(inst);
            }
        }
        Err(SampleError::ExhaustedRetries {
            template: self.template.id.clone(),
            draws: MAX_REJECTS,
        })
    }

    fn fill(&mut self, n: usize) -> Result<Vec<QuestionInstance>, SampleError> {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let inst = self.next_unique(&seen)?;
            seen.insert(inst.text.clone());
            out.push(inst);
        }
        Ok(out)
    }
}

/// Expands every paraphrase of every template with `per_question` value sets.
///
/// Each (template, paraphrase) pair draws from its own generator, so the
/// result does not depend on scheduling. Texts are unique across the dataset.
pub fn augment(
    bank: &TemplateBank,
    per_question: usize,
    seed: u64,
) -> Result<Dataset, SampleError> {
    let mut streams: Vec<Stream> = bank
        .templates
        .iter()
        .flat_map(|t| {
            (0..t.paraphrases.len()).map(move |p| Stream {
                template: t,
                paraphrase: p,
                rng: stream_rng(seed, &t.id, p),
                drawn: 0,
            })
        })
        .collect();

    #[cfg(feature = "parallel")]
    let batches: Vec<Result<Vec<QuestionInstance>, SampleError>> = {
        use rayon::prelude::*;
        streams
            .par_iter_mut()
            .map(|s| s.fill(per_question))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let batches: Vec<Result<Vec<QuestionInstance>, SampleError>> =
        streams.iter_mut().map(|s| s.fill(per_question)).collect();

    let mut seen = HashSet::new();
    let mut instances = Vec::with_capacity(streams.len() * per_question);
    for (stream, batch) in streams.iter_mut().zip(batches) {
        for inst in batch? {
            let inst = if seen.contains(&inst.text) {
                stream.next_unique(&seen)?
            } else {
                inst
            };
            seen.insert(inst.text.clone());
            instances.push(inst);
        }
    }
    Ok(Dataset {
        header: DatasetHeader {
            format: 1,
            bank_version: bank.version.clone(),
            per_question,
            seed,
            count: instances.len(),
        },
        instances,
    })
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported dataset format {0}")]
    Format(u32),
    #[error("header declares {declared} instances, file has {found}")]
    Count { declared: usize, found: usize },
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<(), DatasetError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(dataset.to_jsonl().as_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = f
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()));
    let parse_err = |line: usize, e: serde_json::Error| DatasetError::Parse {
        line: line + 1,
        message: e.to_string(),
    };
    let (n, first) = lines.next().ok_or(DatasetError::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    let header: DatasetHeader = serde_json::from_str(&first?).map_err(|e| parse_err(n, e))?;
    if header.format != 1 {
        return Err(DatasetError::Format(header.format));
    }
    let mut instances = Vec::new();
    for (n, line) in lines {
        instances.push(serde_json::from_str(&line?).map_err(|e| parse_err(n, e))?);
    }
    if instances.len() != header.count {
        return Err(DatasetError::Count {
            declared: header.count,
            found: instances.len(),
        });
    }
    Ok(Dataset { header, instances })
}
