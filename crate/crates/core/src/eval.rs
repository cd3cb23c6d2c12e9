//! Train/test splitting, accuracy metrics, topic recovery and the
//! experiment runner with its reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;
use std::time::Instant;

use rand::seq::SliceRandom;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::bank::{
    augment, placeholders, stream_rng, QuestionInstance, SampleError, TemplateBank, Topic,
};
use crate::expr::{trees_equal, ExprTree};
use crate::mcq::{attempt_of, grade_mcq, make_distractors, rank_options, within_tolerance};
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint, with_smoke_test};
use crate::nn::{train, Metadata, Model, ModelConfig, Solver, TrainError};

pub const TRAIN_RATIO: f64 = 0.8;
pub const TOPIC_SIMILARITY: f64 = 0.9;
pub const SCALING_COUNTS: [usize; 6] = [100, 50, 25, 13, 6, 3];

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("need at least 5 instances to split, got {0}")]
    TooSmall(usize),
    #[error("{predictions} predictions for {golds} gold answers")]
    LengthMismatch { predictions: usize, golds: usize },
    #[error("report has no rows")]
    EmptyReport,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("cached cell {path}: {message}")]
    Cache { path: PathBuf, message: String },
}

/// Stratified split: every template keeps `train_ratio` of its instances in
/// train (at least one on each side when it has two or more), and the test
/// side totals `round((1 - train_ratio) · N)`. Both sides keep dataset order.
pub fn split(
    instances: &[QuestionInstance],
    train_ratio: f64,
    seed: u64,
) -> Result<(Vec<QuestionInstance>, Vec<QuestionInstance>), EvalError> {
    let n = instances.len();
    if n < 5 {
        return Err(EvalError::TooSmall(n));
    }
    let test_share = 1.0 - train_ratio;
    let target = (test_share * n as f64).round() as usize;
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, inst) in instances.iter().enumerate() {
        groups.entry(&inst.template_id).or_default().push(i);
    }
    let mut quota: Vec<(&str, usize, f64)> = groups
        .iter()
        .map(|(id, members)| {
            let exact = test_share * members.len() as f64;
            (*id, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = quota.iter().map(|q| q.1).sum();
    let mut by_remainder: Vec<usize> = (0..quota.len()).collect();
    by_remainder.sort_by(|&a, &b| quota[b].2.total_cmp(&quota[a].2).then(a.cmp(&b)));
    for &g in by_remainder.iter().take(target.saturating_sub(assigned)) {
        quota[g].1 += 1;
    }
    for g in 0..quota.len() {
        let size = groups[quota[g].0].len();
        if size >= 2 && quota[g].1 == 0 {
            quota[g].1 = 1;
            if let Some(d) = (0..quota.len())
                .filter(|&d| quota[d].1 > 1)
                .max_by_key(|&d| quota[d].1)
            {
                quota[d].1 -= 1;
            }
        }
        if size >= 2 && quota[g].1 >= size {
            quota[g].1 = size - 1;
        }
    }
    let mut in_test = vec![false; n];
    for (id, count, _) in &quota {
        let mut members = groups[id].clone();
        members.shuffle(&mut stream_rng(seed, id, usize::MAX));
        for &i in members.iter().take(*count) {
            in_test[i] = true;
        }
    }
    let (test, train): (Vec<_>, Vec<_>) = instances
        .iter()
        .cloned()
        .zip(in_test)
        .partition(|(_, t)| *t);
    Ok((
        train.into_iter().map(|p| p.0).collect(),
        test.into_iter().map(|p| p.0).collect(),
    ))
}

fn check_lengths(predictions: usize, golds: usize) -> Result<(), EvalError> {
    if predictions != golds {
        return Err(EvalError::LengthMismatch { predictions, golds });
    }
    Ok(())
}

fn fraction(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// Fraction of predicted trees equal to the gold tree up to commutative
/// reordering. `None` marks a failed prediction.
pub fn expression_accuracy(
    predictions: &[Option<ExprTree>],
    golds: &[ExprTree],
) -> Result<f64, EvalError> {
    check_lengths(predictions.len(), golds.len())?;
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| p.as_ref().is_some_and(|p| trees_equal(p, g)))
        .count();
    Ok(fraction(hits, golds.len()))
}

/// Fraction of predicted values within tolerance of the gold value.
pub fn value_accuracy(predictions: &[Option<f64>], golds: &[f64]) -> Result<f64, EvalError> {
    check_lengths(predictions.len(), golds.len())?;
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| p.is_some_and(|p| within_tolerance(p, **g)))
        .count();
    Ok(fraction(hits, golds.len()))
}

static NUMBERS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[-−]?[0-9]+(?:\.[0-9]+)?").unwrap());

fn normalize(text: &str) -> String {
    let stripped: String = text
        .chars()
        .filter(|c| !matches!(c, '[' | ']' | '(' | ')' | ','))
        .collect();
    stripped
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Question text with numbers and vector brackets removed.
pub fn strip_question(text: &str) -> String {
    normalize(&NUMBERS.replace_all(text, " "))
}

/// Paraphrase pattern with its placeholders and literal numbers removed.
pub fn strip_pattern(pattern: &str) -> String {
    let mut out = String::new();
    let mut last = 0;
    for p in placeholders(pattern) {
        out.push_str(&pattern[last..p.span.start]);
        out.push(' ');
        last = p.span.end;
    }
    out.push_str(&pattern[last..]);
    strip_question(&out)
}

/// Matches question text back to the bank's paraphrases.
#[derive(Clone, Debug)]
pub struct TopicMatcher {
    patterns: Vec<(String, Topic)>,
    exact: HashMap<String, Topic>,
}

impl TopicMatcher {
    pub fn new(bank: &TemplateBank) -> TopicMatcher {
        let mut patterns = Vec::new();
        let mut exact = HashMap::new();
        for t in &bank.templates {
            for p in &t.paraphrases {
                let s = strip_pattern(p);
                exact.entry(s.clone()).or_insert(t.topic);
                patterns.push((s, t.topic));
            }
        }
        TopicMatcher { patterns, exact }
    }

    /// Topic of the most similar paraphrase, if similar enough.
    pub fn recover(&self, text: &str) -> Option<Topic> {
        let s = strip_question(text);
        if let Some(t) = self.exact.get(&s) {
            return Some(*t);
        }
        let mut best: Option<(f64, Topic)> = None;
        for (p, topic) in &self.patterns {
            let sim = strsim::normalized_levenshtein(&s, p);
            if best.is_none_or(|(b, _)| sim > b) {
                best = Some((sim, *topic));
            }
        }
        best.filter(|(sim, _)| *sim >= TOPIC_SIMILARITY)
            .map(|(_, t)| t)
    }
}

/// Topic of `text` by template matching; `None` when nothing is close.
pub fn recover_topic(text: &str, bank: &TemplateBank) -> Option<Topic> {
    TopicMatcher::new(bank).recover(text)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicRow {
    pub topic: Topic,
    pub count: usize,
    pub expression_accuracy: f64,
    pub value_accuracy: f64,
    pub mcq_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overall {
    pub expression_accuracy: f64,
    pub value_accuracy: f64,
    pub mcq_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<TopicRow>,
    pub overall: Overall,
    pub config_digest: String,
    pub seed: u64,
    /// Test questions whose topic could not be recovered.
    pub unknown_topic: usize,
    pub wall_clock_seconds: f64,
}

/// Per-question outcome before aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub topic: Option<Topic>,
    pub expression_correct: bool,
    pub value_correct: bool,
    pub mcq_score: Option<f64>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl EvalReport {
    /// One row per topic present in `outcomes`; the overall row is the
    /// unweighted mean of the topic rows.
    pub fn from_outcomes(
        outcomes: &[Outcome],
        config_digest: String,
        seed: u64,
        wall_clock_seconds: f64,
    ) -> EvalReport {
        let mut by_topic: BTreeMap<usize, Vec<&Outcome>> = BTreeMap::new();
        let mut unknown = 0;
        for o in outcomes {
            match o.topic {
                Some(t) => by_topic.entry(t.index()).or_default().push(o),
                None => unknown += 1,
            }
        }
        let rows: Vec<TopicRow> = by_topic
            .into_iter()
            .map(|(t, os)| {
                let n = os.len();
                let mcq: Vec<f64> = os.iter().filter_map(|o| o.mcq_score).collect();
                TopicRow {
                    topic: Topic::ALL[t],
                    count: n,
                    expression_accuracy: fraction(
                        os.iter().filter(|o| o.expression_correct).count(),
                        n,
                    ),
                    value_accuracy: fraction(os.iter().filter(|o| o.value_correct).count(), n),
                    mcq_accuracy: (!mcq.is_empty()).then(|| mean(mcq.iter().copied())),
                }
            })
            .collect();
        EvalReport {
            overall: overall_of(&rows),
            rows,
            config_digest,
            seed,
            unknown_topic: unknown,
            wall_clock_seconds,
        }
    }

    /// Row-wise mean of reports with the same topics.
    pub fn average(reports: &[EvalReport]) -> EvalReport {
        let first = &reports[0];
        let k = reports.len() as f64;
        let rows: Vec<TopicRow> = first
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| TopicRow {
                topic: r.topic,
                count: r.count,
                expression_accuracy: reports
                    .iter()
                    .map(|x| x.rows[i].expression_accuracy)
                    .sum::<f64>()
                    / k,
                value_accuracy: reports
                    .iter()
                    .map(|x| x.rows[i].value_accuracy)
                    .sum::<f64>()
                    / k,
                mcq_accuracy: r.mcq_accuracy.map(|_| {
                    reports
                        .iter()
                        .map(|x| x.rows[i].mcq_accuracy.unwrap_or(0.0))
                        .sum::<f64>()
                        / k
                }),
            })
            .collect();
        EvalReport {
            overall: overall_of(&rows),
            rows,
            config_digest: first.config_digest.clone(),
            seed: first.seed,
            unknown_topic: reports.iter().map(|r| r.unknown_topic).sum(),
            wall_clock_seconds: reports.iter().map(|r| r.wall_clock_seconds).sum(),
        }
    }

    pub fn to_table(&self, title: &str) -> ReportTable {
        let mcq = self.overall.mcq_accuracy.is_some();
        let mut columns = vec![
            "expression_accuracy".to_string(),
            "value_accuracy".to_string(),
        ];
        if mcq {
            columns.push("mcq_accuracy".into());
        }
        let row = |e: f64, v: f64, m: Option<f64>| {
            let mut out = vec![e, v];
            if mcq {
                out.push(m.unwrap_or(0.0));
            }
            out
        };
        let mut rows: Vec<(String, Vec<f64>)> = self
            .rows
            .iter()
            .map(|r| {
                (
                    r.topic.name().to_string(),
                    row(r.expression_accuracy, r.value_accuracy, r.mcq_accuracy),
                )
            })
            .collect();
        rows.push((
            "Overall".into(),
            row(
                self.overall.expression_accuracy,
                self.overall.value_accuracy,
                self.overall.mcq_accuracy,
            ),
        ));
        ReportTable {
            title: title.to_string(),
            columns,
            rows,
            config_digest: self.config_digest.clone(),
            seed: self.seed,
        }
    }
}

fn overall_of(rows: &[TopicRow]) -> Overall {
    let mcq = rows.iter().all(|r| r.mcq_accuracy.is_some()) && !rows.is_empty();
    Overall {
        expression_accuracy: mean(rows.iter().map(|r| r.expression_accuracy)),
        value_accuracy: mean(rows.iter().map(|r| r.value_accuracy)),
        mcq_accuracy: mcq.then(|| mean(rows.iter().map(|r| r.mcq_accuracy.unwrap()))),
    }
}

/// Options for evaluating one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Grade multiple-choice items as well.
    pub mcq: bool,
    pub mcq_options: usize,
    pub mcq_samples: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> EvalOptions {
        EvalOptions {
            mcq: false,
            mcq_options: 4,
            mcq_samples: 100,
            seed: 0,
        }
    }
}

/// Greedy open-response grading, plus multiple-choice grading by ranked
/// dropout samples when enabled.
pub fn evaluate(
    solver: &Solver,
    test: &[QuestionInstance],
    bank: &TemplateBank,
    options: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let started = Instant::now();
    let matcher = TopicMatcher::new(bank);
    let mut outcomes = Vec::with_capacity(test.len());
    for (i, inst) in test.iter().enumerate() {
        let prediction = solver.predict(&inst.text).ok();
        let tree = prediction.as_ref().map(|p| p.tree.clone());
        let value = prediction.as_ref().and_then(|p| p.value);
        let mcq_score = if options.mcq {
            let mut rng = stream_rng(options.seed, &inst.id, 1);
            let item = make_distractors(inst, options.mcq_options, &mut rng)
                .expect("at least two options");
            let attempts = rank_options(
                solver,
                &item,
                options.mcq_samples,
                options.seed.wrapping_add(i as u64),
            )
            .unwrap_or_else(|_| (0..item.n()).collect());
            let t = attempt_of(&attempts, item.answer_index).expect("ranking is a permutation");
            Some(grade_mcq(item.n(), t).expect("valid attempt"))
        } else {
            None
        };
        outcomes.push(Outcome {
            topic: matcher.recover(&inst.text),
            expression_correct: tree.is_some_and(|t| trees_equal(&t, &inst.gold_tree)),
            value_correct: value.is_some_and(|v| within_tolerance(v, inst.gold_value)),
            mcq_score,
        });
    }
    Ok(EvalReport::from_outcomes(
        &outcomes,
        solver.model.config.digest(),
        options.seed,
        started.elapsed().as_secs_f64(),
    ))
}

/// A titled grid of numbers: one row per topic plus an overall row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
    pub config_digest: String,
    pub seed: u64,
}

impl ReportTable {
    pub fn to_text(&self) -> String {
        let label_w = self
            .rows
            .iter()
            .map(|r| r.0.len())
            .chain([5])
            .max()
            .unwrap();
        let widths: Vec<usize> = self.columns.iter().map(|c| c.len().max(6)).collect();
        let mut out = format!(
            "{}\nconfig {} seed {}\n\n",
            self.title, self.config_digest, self.seed
        );
        let _ = write!(out, "{:<label_w$}", "topic");
        for (c, w) in self.columns.iter().zip(&widths) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
        for (label, values) in &self.rows {
            let _ = write!(out, "{label:<label_w$}");
            for (v, w) in values.iter().zip(&widths) {
                let _ = write!(out, "  {:>w$}", format!("{v:.4}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("topic");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (label, values) in &self.rows {
            out.push_str(&csv_field(label));
            for v in values {
                let _ = write!(out, ",{v:.4}");
            }
            out.push('\n');
        }
        out
    }

    /// Rows parsed back from [`ReportTable::to_csv`] output.
    pub fn parse_csv(text: &str) -> Option<Vec<(String, Vec<f64>)>> {
        text.lines()
            .skip(1)
            .map(|line| {
                let (label, rest) = if let Some(stripped) = line.strip_prefix('"') {
                    let end = stripped.find('"')?;
                    (
                        stripped[..end].to_string(),
                        stripped[end + 1..].strip_prefix(',')?,
                    )
                } else {
                    let (l, r) = line.split_once(',')?;
                    (l.to_string(), r)
                };
                let values = rest
                    .split(',')
                    .map(|v| v.parse().ok())
                    .collect::<Option<Vec<f64>>>()?;
                Some((label, values))
            })
            .collect()
    }

    /// The same table with every number rounded to the printed precision.
    pub fn rounded(&self) -> ReportTable {
        let mut t = self.clone();
        for (_, values) in &mut t.rows {
            for v in values {
                *v = format!("{v:.4}").parse().unwrap();
            }
        }
        t
    }
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes `<stem>.txt` and `<stem>.csv`.
pub fn emit_report(table: &ReportTable, stem: &Path) -> Result<(PathBuf, PathBuf), EvalError> {
    if table.rows.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    if let Some(dir) = stem.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let txt = stem.with_extension("txt");
    let csv = stem.with_extension("csv");
    std::fs::write(&txt, table.to_text())?;
    std::fs::write(&csv, table.to_csv())?;
    Ok((txt, csv))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Main,
    Scaling,
    Ablation,
    Mcq,
}

impl std::str::FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<ExperimentKind, String> {
        match s.to_ascii_lowercase().as_str() {
            "main" => Ok(ExperimentKind::Main),
            "scaling" => Ok(ExperimentKind::Scaling),
            "ablation" => Ok(ExperimentKind::Ablation),
            "mcq" => Ok(ExperimentKind::Mcq),
            _ => Err(format!("unknown experiment kind `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOptions {
    pub kind: ExperimentKind,
    pub config: ModelConfig,
    /// Augmentations per paraphrase for MAIN, ABLATION and MCQ.
    pub per_question: usize,
    pub scaling_counts: Vec<usize>,
    pub retrains: usize,
    /// Dataset and split seed; model seeds come from `config.seed`.
    pub seed: u64,
    pub eval: EvalOptions,
    /// Finished cells are stored here and reused.
    pub cache_dir: Option<PathBuf>,
}

impl ExperimentOptions {
    pub fn new(kind: ExperimentKind, config: ModelConfig) -> ExperimentOptions {
        ExperimentOptions {
            kind,
            config,
            per_question: 100,
            scaling_counts: SCALING_COUNTS.to_vec(),
            retrains: match kind {
                ExperimentKind::Scaling => 4,
                ExperimentKind::Ablation => 2,
                _ => 1,
            },
            seed: 0,
            eval: EvalOptions {
                mcq: kind == ExperimentKind::Mcq,
                ..EvalOptions::default()
            },
            cache_dir: None,
        }
    }
}

/// One train/evaluate unit of an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub per_question: usize,
    pub use_gnn: bool,
    pub retrain: usize,
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let variant = if self.use_gnn { "full" } else { "no-GNN" };
        write!(
            f,
            "K={} {variant} retrain {}",
            self.per_question, self.retrain
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub table: ReportTable,
    /// Averaged report per column group, in table order.
    pub reports: Vec<(String, EvalReport)>,
}

fn fnv(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Dataset seed of a cell: value sets are redrawn for every augmentation count.
pub fn dataset_seed(seed: u64, per_question: usize) -> u64 {
    seed.wrapping_add(per_question as u64)
}

/// Trains (or loads from the cache) and evaluates one cell.
pub fn run_cell(
    bank: &TemplateBank,
    opts: &ExperimentOptions,
    cell: Cell,
    log: &mut dyn FnMut(&str),
) -> Result<EvalReport, EvalError> {
    let data = augment(
        bank,
        cell.per_question,
        dataset_seed(opts.seed, cell.per_question),
    )?;
    let (train_set, test) = split(&data.instances, TRAIN_RATIO, opts.seed)?;
    let config = ModelConfig {
        use_gnn: cell.use_gnn,
        seed: opts.config.seed.wrapping_add(cell.retrain as u64),
        ..opts.config.clone()
    };
    let key = fnv(format!(
        "{}|{}|{}",
        config.digest(),
        fnv(data.to_jsonl().as_bytes()),
        opts.seed
    )
    .as_bytes());
    let eval_key = fnv(format!("{key}|{}", serde_json::to_string(&opts.eval).unwrap()).as_bytes());
    let paths = opts.cache_dir.as_ref().map(|d| {
        (
            d.join(format!("model-{key}.ckpt")),
            d.join(format!("report-{eval_key}.json")),
        )
    });
    if let Some((_, report_path)) = &paths {
        if let Ok(text) = std::fs::read_to_string(report_path) {
            let report = serde_json::from_str(&text).map_err(|e| EvalError::Cache {
                path: report_path.clone(),
                message: e.to_string(),
            })?;
            log(&format!("cell {cell}: cached report"));
            return Ok(report);
        }
    }
    let model: Model<f32> = match &paths {
        Some((ckpt, _)) if ckpt.exists() => {
            log(&format!("cell {cell}: cached model"));
            load_checkpoint(ckpt)
                .map_err(|e| EvalError::Cache {
                    path: ckpt.clone(),
                    message: e.to_string(),
                })?
                .0
        }
        _ => {
            log(&format!(
                "cell {cell}: training on {} questions",
                train_set.len()
            ));
            let (model, train_log) = train(&train_set, &test, &config, &mut |row, secs| {
                log(&format!(
                    "  epoch {} loss {:.4} held-out {:.4} ({secs:.0}s)",
                    row.epoch,
                    row.loss,
                    row.held_out_accuracy.unwrap_or(0.0)
                ))
            })?;
            if let Some((ckpt, _)) = &paths {
                let meta = Metadata {
                    epochs: config.epochs,
                    loss_curve: train_log.losses(),
                    held_out_accuracy: train_log
                        .epochs
                        .iter()
                        .map(|e| e.held_out_accuracy)
                        .collect(),
                    dataset_seed: Some(data.header.seed),
                    smoke_test: None,
                };
                let meta = with_smoke_test(&model, meta, &test[0].text);
                save_checkpoint(ckpt, &model, &meta).map_err(|e| EvalError::Cache {
                    path: ckpt.clone(),
                    message: e.to_string(),
                })?;
            }
            model
        }
    };
    let eval = EvalOptions {
        seed: opts.seed,
        ..opts.eval.clone()
    };
    let report = evaluate(&Solver::new(model), &test, bank, &eval)?;
    log(&format!(
        "cell {cell}: expression {:.4} value {:.4}{}",
        report.overall.expression_accuracy,
        report.overall.value_accuracy,
        report
            .overall
            .mcq_accuracy
            .map(|m| format!(" mcq {m:.4}"))
            .unwrap_or_default()
    ));
    if let Some((_, report_path)) = &paths {
        std::fs::create_dir_all(report_path.parent().unwrap())?;
        std::fs::write(report_path, serde_json::to_string_pretty(&report).unwrap())?;
    }
    Ok(report)
}

fn averaged(
    bank: &TemplateBank,
    opts: &ExperimentOptions,
    per_question: usize,
    use_gnn: bool,
    log: &mut dyn FnMut(&str),
) -> Result<EvalReport, EvalError> {
    let reports = (0..opts.retrains.max(1))
        .map(|retrain| {
            run_cell(
                bank,
                opts,
                Cell {
                    per_question,
                    use_gnn,
                    retrain,
                },
                log,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalReport::average(&reports))
}

fn column_table(
    title: &str,
    opts: &ExperimentOptions,
    columns: &[(String, EvalReport)],
) -> ReportTable {
    let first = &columns[0].1;
    let mut rows: Vec<(String, Vec<f64>)> = first
        .rows
        .iter()
        .map(|r| (r.topic.name().to_string(), Vec::new()))
        .collect();
    rows.push(("Overall".into(), Vec::new()));
    let mut names = Vec::new();
    for (name, report) in columns {
        names.push(format!("{name} expression"));
        names.push(format!("{name} value"));
        for (i, r) in report.rows.iter().enumerate() {
            rows[i].1.push(r.expression_accuracy);
            rows[i].1.push(r.value_accuracy);
        }
        let last = rows.len() - 1;
        rows[last].1.push(report.overall.expression_accuracy);
        rows[last].1.push(report.overall.value_accuracy);
    }
    ReportTable {
        title: title.to_string(),
        columns: names,
        rows,
        config_digest: opts.config.digest(),
        seed: opts.seed,
    }
}

/// Runs one of the four experiments.
pub fn run_experiment(
    bank: &TemplateBank,
    opts: &ExperimentOptions,
    log: &mut dyn FnMut(&str),
) -> Result<ExperimentResult, EvalError> {
    match opts.kind {
        ExperimentKind::Main | ExperimentKind::Mcq => {
            let report = averaged(bank, opts, opts.per_question, opts.config.use_gnn, log)?;
            let title = if opts.kind == ExperimentKind::Main {
                format!("Main results (per_question={})", opts.per_question)
            } else {
                format!(
                    "Open-response and multiple-choice results (per_question={})",
                    opts.per_question
                )
            };
            Ok(ExperimentResult {
                table: report.to_table(&title),
                reports: vec![("main".into(), report)],
            })
        }
        ExperimentKind::Scaling => {
            let mut columns = Vec::new();
            for &k in &opts.scaling_counts {
                columns.push((
                    format!("K={k}"),
                    averaged(bank, opts, k, opts.config.use_gnn, log)?,
                ));
            }
            let table = column_table("Accuracy by augmentations per question", opts, &columns);
            Ok(ExperimentResult {
                table,
                reports: columns,
            })
        }
        ExperimentKind::Ablation => {
            let full = averaged(bank, opts, opts.per_question, true, log)?;
            let reduced = averaged(bank, opts, opts.per_question, false, log)?;
            let columns = vec![("full".to_string(), full), ("no-GNN".to_string(), reduced)];
            let table = column_table(
                &format!("GNN ablation (per_question={})", opts.per_question),
                opts,
                &columns,
            );
            Ok(ExperimentResult {
                table,
                reports: columns,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::augment;
    use crate::expr::parse_tree;

    fn data(k: usize) -> Vec<QuestionInstance> {
        augment(&TemplateBank::default_bank(), k, 3)
            .unwrap()
            .instances
    }

    #[test]
    fn split_is_stratified_disjoint_and_seeded() {
        let all = data(4);
        let (train, test) = split(&all, TRAIN_RATIO, 1).unwrap();
        assert_eq!(train.len() + test.len(), all.len());
        assert_eq!(test.len(), (0.2 * all.len() as f64).round() as usize);
        let ids: std::collections::HashSet<_> = train.iter().map(|i| &i.id).collect();
        assert!(test.iter().all(|i| !ids.contains(&i.id)));
        let bank = TemplateBank::default_bank();
        for t in &bank.templates {
            assert!(train.iter().any(|i| i.template_id == t.id));
            assert!(test.iter().any(|i| i.template_id == t.id));
        }
        assert_eq!(split(&all, TRAIN_RATIO, 1).unwrap().1, test);
        assert_ne!(split(&all, TRAIN_RATIO, 2).unwrap().1, test);
    }

    #[test]
    fn split_sizes() {
        let all = data(1);
        let (train, test) = split(&all[..5], TRAIN_RATIO, 0).unwrap();
        assert_eq!((train.len(), test.len()), (4, 1));
        assert!(matches!(
            split(&all[..4], TRAIN_RATIO, 0),
            Err(EvalError::TooSmall(4))
        ));
    }

    #[test]
    fn accuracy_metrics() {
        let gold = vec![
            parse_tree("(add (add q0 q1) q2)").unwrap(),
            parse_tree("(mul q0 q1)").unwrap(),
        ];
        let rotated = parse_tree("(add q0 (add q1 q2))").unwrap();
        let swapped = parse_tree("(mul q1 q0)").unwrap();
        assert_eq!(
            expression_accuracy(&[Some(gold[0].clone()), Some(gold[1].clone())], &gold).unwrap(),
            1.0
        );
        assert_eq!(
            expression_accuracy(&[Some(rotated.clone()), Some(swapped)], &gold).unwrap(),
            0.5
        );
        let b = [1.0, 2.0, 3.0];
        let golds = [gold[0].evaluate(&b).unwrap(), gold[1].evaluate(&b).unwrap()];
        let preds = [rotated.evaluate(&b).ok(), Some(2.0)];
        assert_eq!(value_accuracy(&preds, &golds).unwrap(), 1.0);
        assert_eq!(value_accuracy(&[None, None], &golds).unwrap(), 0.0);
        assert!(matches!(
            value_accuracy(&[None], &golds),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn every_bank_instance_recovers_its_topic() {
        let bank = TemplateBank::default_bank();
        let m = TopicMatcher::new(&bank);
        for inst in data(3) {
            assert_eq!(m.recover(&inst.text), Some(inst.topic), "{}", inst.text);
        }
        assert_eq!(m.recover("What is the weather today?"), None);
    }

    #[test]
    fn reworded_question_recovers_by_similarity() {
        let bank = TemplateBank::default_bank();
        let inst = &data(1)[0];
        let edited = inst.text.replacen("the", "teh", 1);
        assert_ne!(strip_question(&edited), strip_question(&inst.text));
        assert_eq!(recover_topic(&edited, &bank), Some(inst.topic));
    }

    fn outcome(topic: Topic, e: bool, v: bool) -> Outcome {
        Outcome {
            topic: Some(topic),
            expression_correct: e,
            value_correct: v,
            mcq_score: None,
        }
    }

    #[test]
    fn overall_is_the_unweighted_topic_mean() {
        let outcomes = vec![
            outcome(Topic::Basics, true, true),
            outcome(Topic::Basics, false, true),
            outcome(Topic::Basics, false, false),
            outcome(Topic::DecisionTrees, true, true),
        ];
        let r = EvalReport::from_outcomes(&outcomes, "d".into(), 0, 0.0);
        assert_eq!(r.rows.len(), 2);
        assert!((r.overall.value_accuracy - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
        let mean_rows = r.rows.iter().map(|x| x.expression_accuracy).sum::<f64>() / 2.0;
        assert!((r.overall.expression_accuracy - mean_rows).abs() < 1e-9);
    }

    #[test]
    fn report_files_round_trip() {
        let outcomes: Vec<Outcome> = Topic::ALL
            .iter()
            .enumerate()
            .map(|(i, &t)| outcome(t, i % 3 == 0, i % 2 == 0))
            .collect();
        let table = EvalReport::from_outcomes(&outcomes, "abc".into(), 7, 1.5).to_table("Main");
        let dir = tempfile::tempdir().unwrap();
        let (txt, csv) = emit_report(&table, &dir.path().join("main")).unwrap();
        let text = std::fs::read_to_string(txt).unwrap();
        assert_eq!(text.lines().skip(4).count(), 13);
        assert!(!text.contains("1.5"));
        let rows = ReportTable::parse_csv(&std::fs::read_to_string(csv).unwrap()).unwrap();
        assert_eq!(rows.len(), 13);
        assert_eq!(rows, table.rounded().rows);
        let empty = ReportTable {
            rows: vec![],
            ..table
        };
        assert!(matches!(
            emit_report(&empty, &dir.path().join("e")),
            Err(EvalError::EmptyReport)
        ));
    }
}
