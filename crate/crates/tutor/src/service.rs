//! Shared service state: sessions behind per-session locks, an append-only
//! event log, and the solver.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use mlq_core::bank::{TemplateBank, Topic};
use mlq_core::expr::format_value;
use mlq_core::mcq::within_tolerance;
use mlq_core::nn::Solver;
use serde::{Deserialize, Serialize};

use crate::error::TutorError;
use crate::session::{Answer, HintView, QuestionView, Session, Solution, Summary, Verdict};

pub const LOG_FILE: &str = "events.jsonl";
pub const MAX_SAMPLES: usize = 1000;

/// One logged request. Replaying a log in order rebuilds every session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Create {
        session: String,
        topic: Option<Topic>,
        seed: u64,
    },
    Question {
        session: String,
    },
    Answer {
        session: String,
        answer: Answer,
    },
    Hint {
        session: String,
    },
    Reveal {
        session: String,
    },
}

impl Event {
    fn session(&self) -> &str {
        match self {
            Event::Create { session, .. }
            | Event::Question { session }
            | Event::Answer { session, .. }
            | Event::Hint { session }
            | Event::Reveal { session } => session,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Reply {
    Created(Summary),
    Question(QuestionView),
    Verdict(Verdict),
    Hint(HintView),
    Solution(Solution),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub value: Option<f64>,
    pub label: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub value: Option<f64>,
    pub value_text: Option<String>,
    pub tree: String,
    /// Probability of the greedy decode.
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub samples: usize,
    /// Sampled values grouped at display precision, most frequent first.
    pub histogram: Vec<HistogramBin>,
    /// Share of samples agreeing with the greedy value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agreement: Option<f64>,
}

pub struct Tutor {
    pub bank: TemplateBank,
    pub solver: Option<Solver>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    log: Option<Mutex<File>>,
}

impl Tutor {
    /// A service without persistence.
    pub fn new(bank: TemplateBank, solver: Option<Solver>) -> Tutor {
        Tutor {
            bank,
            solver,
            sessions: RwLock::new(HashMap::new()),
            log: None,
        }
    }

    /// A service persisting to `dir/events.jsonl`, first replaying whatever
    /// the file already holds.
    pub fn with_log(
        bank: TemplateBank,
        solver: Option<Solver>,
        dir: &Path,
    ) -> Result<Tutor, TutorError> {
        let mut tutor = Tutor::new(bank, solver);
        std::fs::create_dir_all(dir)
            .map_err(|e| TutorError::Log(format!("{}: {e}", dir.display())))?;
        let path: PathBuf = dir.join(LOG_FILE);
        if path.exists() {
            let file = File::open(&path).map_err(|e| TutorError::Log(e.to_string()))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| TutorError::Log(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let event: Event = serde_json::from_str(&line)
                    .map_err(|e| TutorError::Log(format!("{}:{}: {e}", path.display(), i + 1)))?;
                let _ = tutor.apply(&event);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| TutorError::Log(format!("{}: {e}", path.display())))?;
        tutor.log = Some(Mutex::new(file));
        Ok(tutor)
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().unwrap().len()
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, TutorError> {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| TutorError::UnknownSession(id.to_string()))
    }

    fn append(&self, event: &Event) -> Result<(), TutorError> {
        if let Some(log) = &self.log {
            let line = serde_json::to_string(event).expect("events serialize");
            let mut file = log.lock().unwrap();
            writeln!(file, "{line}").map_err(|e| TutorError::Log(e.to_string()))?;
            file.flush().map_err(|e| TutorError::Log(e.to_string()))?;
        }
        Ok(())
    }

    fn apply_to(&self, session: &mut Session, event: &Event) -> Result<Reply, TutorError> {
        match event {
            Event::Create { .. } => unreachable!("handled by apply"),
            Event::Question { .. } => session.next_question(&self.bank).map(Reply::Question),
            Event::Answer { answer, .. } => session.answer(*answer).map(Reply::Verdict),
            Event::Hint { .. } => session.hint().map(Reply::Hint),
            Event::Reveal { .. } => session.reveal().map(Reply::Solution),
        }
    }

    fn apply(&self, event: &Event) -> Result<Reply, TutorError> {
        if let Event::Create {
            session,
            topic,
            seed,
        } = event
        {
            let s = Session::new(session.clone(), *topic, *seed, &self.bank)?;
            let summary = s.summary();
            self.sessions
                .write()
                .unwrap()
                .insert(session.clone(), Arc::new(Mutex::new(s)));
            return Ok(Reply::Created(summary));
        }
        let handle = self.session(event.session())?;
        let mut s = handle.lock().unwrap();
        self.apply_to(&mut s, event)
    }

    /// Applies and logs a request. The log append happens under the session
    /// lock, so each session's records are in the order they were applied.
    pub fn handle(&self, event: Event) -> Result<Reply, TutorError> {
        if let Event::Create {
            session,
            topic,
            seed,
        } = &event
        {
            let s = Session::new(session.clone(), *topic, *seed, &self.bank)?;
            let summary = s.summary();
            let handle = Arc::new(Mutex::new(s));
            let guard = handle.lock().unwrap();
            self.sessions
                .write()
                .unwrap()
                .insert(session.clone(), handle.clone());
            self.append(&event)?;
            drop(guard);
            return Ok(Reply::Created(summary));
        }
        let handle = self.session(event.session())?;
        let mut s = handle.lock().unwrap();
        let reply = self.apply_to(&mut s, &event);
        self.append(&event)?;
        reply
    }

    pub fn create_session(
        &self,
        topic: Option<Topic>,
        seed: Option<u64>,
    ) -> Result<Summary, TutorError> {
        let id = format!("{:032x}", rand::random::<u128>());
        let seed = seed.unwrap_or_else(rand::random);
        match self.handle(Event::Create {
            session: id,
            topic,
            seed,
        })? {
            Reply::Created(s) => Ok(s),
            _ => unreachable!(),
        }
    }

    pub fn summary(&self, id: &str) -> Result<Summary, TutorError> {
        Ok(self.session(id)?.lock().unwrap().summary())
    }

    pub fn current_question(&self, id: &str) -> Result<Option<QuestionView>, TutorError> {
        Ok(self.session(id)?.lock().unwrap().current_question())
    }

    /// Greedy answer with its probability, plus a histogram of `samples`
    /// dropout samples when asked for.
    pub fn solve(
        &self,
        question: &str,
        samples: usize,
        seed: u64,
    ) -> Result<SolveSummary, TutorError> {
        let solver = self.solver.as_ref().ok_or(TutorError::NoModel)?;
        if question.trim().is_empty() {
            return Err(TutorError::InvalidRequest("`question` is empty".into()));
        }
        if samples > MAX_SAMPLES {
            return Err(TutorError::InvalidRequest(format!(
                "`samples` is at most {MAX_SAMPLES}"
            )));
        }
        let best = solver.predict(question)?;
        let mut histogram = Vec::new();
        let mut agreement = None;
        if samples > 0 {
            let drawn = solver.sample(question, samples, seed)?;
            let mut bins: BTreeMap<String, (Option<f64>, usize)> = BTreeMap::new();
            for p in &drawn {
                let label = p
                    .value
                    .map(format_value)
                    .unwrap_or_else(|| "undefined".into());
                bins.entry(label).or_insert((p.value, 0)).1 += 1;
            }
            histogram = bins
                .into_iter()
                .map(|(label, (value, count))| HistogramBin {
                    value,
                    label,
                    count,
                })
                .collect();
            histogram.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.label.cmp(&b.label)));
            agreement = best.value.map(|v| {
                drawn
                    .iter()
                    .filter(|p| p.value.is_some_and(|x| within_tolerance(x, v)))
                    .count() as f64
                    / samples as f64
            });
        }
        Ok(SolveSummary {
            value: best.value,
            value_text: best.value.map(format_value),
            tree: best.tree.serialize(),
            confidence: best.score.exp(),
            error: best.error,
            samples,
            histogram,
            agreement,
        })
    }
}
