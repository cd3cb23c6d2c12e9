//! Learner sessions: question stream, grading and hint progression. No I/O.

use std::collections::HashSet;

use mlq_core::bank::{
    instantiate, sample_values, stream_rng, QuestionInstance, TemplateBank, Topic,
};
use mlq_core::expr::{format_value, render_infix, InfixStyle, Leaf};
use mlq_core::hints::{hint_sequence, next_hint, HintError, HintStep};
use mlq_core::mcq::{distractors, grade_mcq, grade_orq, GradeKind, GradeRecord, Options};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::TutorError;

/// Share of questions served as multiple choice.
pub const MCQ_SHARE: f64 = 0.58;
pub const MCQ_OPTIONS: usize = 4;
const MAX_DRAWS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Mode {
    Orq,
    Mcq,
}

/// What the learner sees of a question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionView {
    pub question_id: String,
    /// 1-based position in the session.
    pub number: usize,
    pub topic: Topic,
    pub text: String,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub option_labels: Option<Vec<String>>,
    pub hint_count: usize,
}

/// A learner's answer: a number for open questions, an option index for
/// multiple choice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Value(f64),
    Option(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub correct: bool,
    /// Attempts made on this question so far.
    pub attempts: usize,
    /// The question's grade, once fixed.
    pub record: Option<GradeRecord>,
    pub total_score: f64,
    pub graded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HintView {
    #[serde(flatten)]
    pub step: HintStep,
    pub remaining: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedValue {
    pub name: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub question_id: String,
    /// Prefix form of the solution tree.
    pub tree: String,
    /// Infix form with slot names.
    pub expression: String,
    pub quantities: Vec<NamedValue>,
    pub answer: f64,
    pub answer_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_index: Option<usize>,
    pub record: GradeRecord,
    pub total_score: f64,
    pub graded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub session_id: String,
    pub topic: Option<Topic>,
    pub seed: u64,
    pub questions_served: usize,
    pub score_log: Vec<GradeRecord>,
    pub total_score: f64,
}

#[derive(Clone, Debug)]
struct Current {
    instance: QuestionInstance,
    number: usize,
    mcq: Option<Options>,
    hints: Result<Vec<HintStep>, HintError>,
    hint_cursor: usize,
    /// Distinct options tried, or answers given.
    tried: Vec<usize>,
    attempts: usize,
    record: Option<GradeRecord>,
}

#[derive(Clone, Debug)]
pub struct Session {
    pub id: String,
    pub topic: Option<Topic>,
    pub seed: u64,
    draws: usize,
    served: HashSet<String>,
    current: Option<Current>,
    score_log: Vec<GradeRecord>,
}

impl Session {
    pub fn new(
        id: String,
        topic: Option<Topic>,
        seed: u64,
        bank: &TemplateBank,
    ) -> Result<Session, TutorError> {
        if let Some(t) = topic {
            if !bank.topics().contains(&t) {
                return Err(TutorError::UnknownTopic(t.name().to_string()));
            }
        }
        Ok(Session {
            id,
            topic,
            seed,
            draws: 0,
            served: HashSet::new(),
            current: None,
            score_log: Vec::new(),
        })
    }

    pub fn score_log(&self) -> &[GradeRecord] {
        &self.score_log
    }

    pub fn total_score(&self) -> f64 {
        self.score_log.iter().map(|r| r.score).sum()
    }

    pub fn summary(&self) -> Summary {
        Summary {
            session_id: self.id.clone(),
            topic: self.topic,
            seed: self.seed,
            questions_served: self.served.len(),
            score_log: self.score_log.clone(),
            total_score: self.total_score(),
        }
    }

    /// Draws a question not yet served in this session. An unanswered
    /// previous question is recorded with score 0.
    pub fn next_question(&mut self, bank: &TemplateBank) -> Result<QuestionView, TutorError> {
        let templates: Vec<_> = bank
            .templates
            .iter()
            .filter(|t| self.topic.is_none_or(|topic| t.topic == topic))
            .collect();
        if templates.is_empty() {
            return Err(TutorError::BankExhausted);
        }
        for _ in 0..MAX_DRAWS {
            let draw = self.draws;
            self.draws += 1;
            let mut rng = stream_rng(self.seed, "session", draw);
            let template = templates[rng.random_range(0..templates.len())];
            let paraphrase = rng.random_range(0..template.paraphrases.len());
            let Ok(values) = sample_values(template, &mut rng) else {
                continue;
            };
            let id = format!("{}-p{paraphrase}-d{draw}", template.id);
            let Ok(instance) = instantiate(template, paraphrase, &values, id) else {
                continue;
            };
            if self.served.contains(&instance.text) {
                continue;
            }
            let mcq = if rng.random_bool(MCQ_SHARE) {
                distractors(
                    &instance.gold_tree,
                    &instance.quantities,
                    MCQ_OPTIONS,
                    &mut rng,
                )
                .ok()
            } else {
                None
            };
            let hints = hint_sequence(&instance, bank, &mut rng);
            return Ok(self.present(instance, mcq, hints));
        }
        Err(TutorError::BankExhausted)
    }

    /// Makes `instance` the current question.
    pub fn present(
        &mut self,
        instance: QuestionInstance,
        mcq: Option<Options>,
        hints: Result<Vec<HintStep>, HintError>,
    ) -> QuestionView {
        self.close_unanswered();
        self.served.insert(instance.text.clone());
        let current = Current {
            number: self.served.len(),
            instance,
            mcq,
            hints,
            hint_cursor: 0,
            tried: Vec::new(),
            attempts: 0,
            record: None,
        };
        let view = current.view();
        self.current = Some(current);
        view
    }

    fn close_unanswered(&mut self) {
        if let Some(c) = &mut self.current {
            if c.record.is_none() {
                let r = c.zero_record();
                c.record = Some(r.clone());
                self.score_log.push(r);
            }
        }
    }

    pub fn current_question(&self) -> Option<QuestionView> {
        self.current.as_ref().map(Current::view)
    }

    pub fn answer(&mut self, answer: Answer) -> Result<Verdict, TutorError> {
        let c = self.current.as_mut().ok_or(TutorError::NoActiveQuestion)?;
        let correct = match (&c.mcq, answer) {
            (None, Answer::Value(v)) => {
                if !v.is_finite() {
                    return Err(TutorError::InvalidRequest(
                        "answer must be a finite number".into(),
                    ));
                }
                c.attempts += 1;
                let score = grade_orq(Some(v), c.instance.gold_value);
                if c.record.is_none() {
                    let r = GradeRecord {
                        question_id: c.instance.id.clone(),
                        kind: GradeKind::Orq,
                        attempt: (score == 1.0).then_some(1),
                        n: None,
                        score,
                    };
                    c.record = Some(r.clone());
                    self.score_log.push(r);
                }
                score == 1.0
            }
            (Some(o), Answer::Option(i)) => {
                let n = o.options.len();
                if i >= n {
                    return Err(TutorError::InvalidRequest(format!(
                        "option {i} out of range for {n} options"
                    )));
                }
                if !c.tried.contains(&i) {
                    c.tried.push(i);
                    c.attempts += 1;
                }
                let correct = i == o.answer_index;
                if correct && c.record.is_none() {
                    let r = GradeRecord {
                        question_id: c.instance.id.clone(),
                        kind: GradeKind::Mcq,
                        attempt: Some(c.attempts),
                        n: Some(n),
                        score: grade_mcq(n, c.attempts)
                            .expect("at least two options and one attempt"),
                    };
                    c.record = Some(r.clone());
                    self.score_log.push(r);
                }
                correct
            }
            (None, Answer::Option(_)) => {
                return Err(TutorError::InvalidRequest(
                    "open question expects `value`".into(),
                ))
            }
            (Some(_), Answer::Value(_)) => {
                return Err(TutorError::InvalidRequest(
                    "multiple-choice question expects `option`".into(),
                ))
            }
        };
        let (attempts, record) = (c.attempts, c.record.clone());
        Ok(Verdict {
            correct,
            attempts,
            record,
            total_score: self.total_score(),
            graded: self.score_log.len(),
        })
    }

    pub fn hint(&mut self) -> Result<HintView, TutorError> {
        let c = self.current.as_mut().ok_or(TutorError::NoActiveQuestion)?;
        let steps = c.hints.as_ref().map_err(|e| TutorError::Hint(e.clone()))?;
        let (step, cursor) = next_hint(steps, c.hint_cursor).map_err(TutorError::Hint)?;
        c.hint_cursor = cursor;
        Ok(HintView {
            step: step.clone(),
            remaining: steps.len() - cursor,
        })
    }

    pub fn reveal(&mut self) -> Result<Solution, TutorError> {
        self.close_unanswered();
        let c = self.current.as_ref().ok_or(TutorError::NoActiveQuestion)?;
        let inst = &c.instance;
        let names: Vec<String> = (0..inst.quantities.len())
            .map(|i| inst.quantity_name(i))
            .collect();
        let expression = render_infix(
            inst.gold_tree.root(),
            InfixStyle::Spaced,
            &|l: &Leaf| match l {
                Leaf::Quantity(i) => names[*i].clone(),
                Leaf::Constant(v) => format_value(*v),
            },
        );
        Ok(Solution {
            question_id: inst.id.clone(),
            tree: inst.gold_tree.serialize(),
            expression,
            quantities: names
                .iter()
                .zip(&inst.quantities)
                .map(|(n, v)| NamedValue {
                    name: n.clone(),
                    value: *v,
                })
                .collect(),
            answer: inst.gold_value,
            answer_text: format_value(inst.gold_value),
            answer_index: c.mcq.as_ref().map(|o| o.answer_index),
            record: c.record.clone().expect("closed above"),
            total_score: self.total_score(),
            graded: self.score_log.len(),
        })
    }
}

impl Current {
    fn view(&self) -> QuestionView {
        QuestionView {
            question_id: self.instance.id.clone(),
            number: self.number,
            topic: self.instance.topic,
            text: self.instance.text.clone(),
            mode: if self.mcq.is_some() {
                Mode::Mcq
            } else {
                Mode::Orq
            },
            options: self.mcq.as_ref().map(|o| o.options.clone()),
            option_labels: self
                .mcq
                .as_ref()
                .map(|o| o.options.iter().map(|v| format_value(*v)).collect()),
            hint_count: self.hints.as_ref().map_or(0, Vec::len),
        }
    }

    fn zero_record(&self) -> GradeRecord {
        GradeRecord {
            question_id: self.instance.id.clone(),
            kind: if self.mcq.is_some() {
                GradeKind::Mcq
            } else {
                GradeKind::Orq
            },
            attempt: None,
            n: self.mcq.as_ref().map(|o| o.options.len()),
            score: 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mlq_core::bank::{SlotAssignment, SlotValue};
    use mlq_core::eval::recover_topic;

    fn session(seed: u64, topic: Option<Topic>) -> (Session, TemplateBank) {
        let bank = TemplateBank::default_bank();
        (Session::new("s".into(), topic, seed, &bank).unwrap(), bank)
    }

    fn draw_until(s: &mut Session, bank: &TemplateBank, mode: Mode) -> QuestionView {
        loop {
            let q = s.next_question(bank).unwrap();
            if q.mode == mode {
                return q;
            }
        }
    }

    fn nn_question() -> QuestionInstance {
        let bank = TemplateBank::default_bank();
        let v: SlotAssignment = [
            ("x1", 2.0),
            ("w1", 1.0),
            ("OA", 0.5),
            ("wOA", 2.0),
            ("wAC", 1.0),
            ("OC", 1.0),
            ("wOC", 3.0),
        ]
        .iter()
        .map(|(k, v)| (k.to_string(), SlotValue::Scalar(*v)))
        .collect();
        instantiate(bank.template("nn1_chain").unwrap(), 0, &v, "nn".into()).unwrap()
    }

    #[test]
    fn topic_filter_holds() {
        let (mut s, bank) = session(1, Some(Topic::Perceptrons));
        for _ in 0..10 {
            let q = s.next_question(&bank).unwrap();
            assert_eq!(recover_topic(&q.text, &bank), Some(Topic::Perceptrons));
        }
    }

    #[test]
    fn questions_are_fresh_and_replayable() {
        let (mut a, bank) = session(9, None);
        let (mut b, _) = session(9, None);
        let qa: Vec<_> = (0..30).map(|_| a.next_question(&bank).unwrap()).collect();
        let qb: Vec<_> = (0..30).map(|_| b.next_question(&bank).unwrap()).collect();
        assert_eq!(qa, qb);
        let texts: HashSet<_> = qa.iter().map(|q| &q.text).collect();
        assert_eq!(texts.len(), 30);
        let topics: HashSet<_> = qa.iter().map(|q| q.topic).collect();
        assert!(topics.len() > 6);
    }

    #[test]
    fn mcq_share_over_100_draws() {
        let (mut s, bank) = session(0, None);
        let mut mcq = 0;
        for _ in 0..100 {
            let q = s.next_question(&bank).unwrap();
            if q.mode == Mode::Mcq {
                mcq += 1;
                let options = q.options.unwrap();
                assert_eq!(options.len(), MCQ_OPTIONS);
                let gold = s.reveal().unwrap().answer;
                assert_eq!(options.iter().filter(|&&o| o == gold).count(), 1);
            }
        }
        assert!((53..=63).contains(&mcq), "{mcq}");
    }

    #[test]
    fn orq_scores_first_attempt_only() {
        let (mut s, bank) = session(2, None);
        draw_until(&mut s, &bank, Mode::Orq);
        let gold = s.current.as_ref().unwrap().instance.gold_value;
        let v = s.answer(Answer::Value(gold)).unwrap();
        assert!(v.correct);
        assert_eq!(v.record.as_ref().unwrap().score, 1.0);
        let again = s.answer(Answer::Value(gold + 1000.0)).unwrap();
        assert!(!again.correct);
        assert_eq!(again.record, v.record);
        assert_eq!(s.score_log().len(), 1);

        draw_until(&mut s, &bank, Mode::Orq);
        let gold = s.current.as_ref().unwrap().instance.gold_value;
        assert!(!s.answer(Answer::Value(gold + 1000.0)).unwrap().correct);
        let late = s.answer(Answer::Value(gold)).unwrap();
        assert!(late.correct);
        assert_eq!(late.record.unwrap().score, 0.0);
        assert_eq!(s.total_score(), 1.0);
    }

    #[test]
    fn mcq_second_attempt_scores_two_thirds() {
        let (mut s, bank) = session(3, None);
        draw_until(&mut s, &bank, Mode::Mcq);
        let right = s
            .current
            .as_ref()
            .unwrap()
            .mcq
            .as_ref()
            .unwrap()
            .answer_index;
        let wrong = (right + 1) % MCQ_OPTIONS;
        assert!(!s.answer(Answer::Option(wrong)).unwrap().correct);
        assert_eq!(s.answer(Answer::Option(wrong)).unwrap().attempts, 1);
        let v = s.answer(Answer::Option(right)).unwrap();
        assert!(v.correct);
        let r = v.record.unwrap();
        assert_eq!((r.attempt, r.n), (Some(2), Some(4)));
        assert_eq!(r.score, 2.0 / 3.0);
        assert_eq!(
            s.answer(Answer::Option(right))
                .unwrap()
                .record
                .unwrap()
                .score,
            2.0 / 3.0
        );
        assert!(matches!(
            s.answer(Answer::Option(9)),
            Err(TutorError::InvalidRequest(_))
        ));
        assert!(matches!(
            s.answer(Answer::Value(1.0)),
            Err(TutorError::InvalidRequest(_))
        ));
    }

    #[test]
    fn hints_follow_the_solution_then_run_out() {
        let (mut s, _) = session(4, None);
        let inst = nn_question();
        let steps = hint_sequence(
            &inst,
            &TemplateBank::default_bank(),
            &mut stream_rng(4, "x", 0),
        );
        s.present(inst, None, steps);
        let strip = |x: &str| x.replace(' ', "");
        let got: Vec<_> = (0..3).map(|_| s.hint().unwrap()).collect();
        assert_eq!(
            got.iter()
                .map(|h| strip(&h.step.expression_hint))
                .collect::<Vec<_>>(),
            ["(OA*wOA)", "(OA*wOA)*wAC", "OC*wOC"]
        );
        assert_eq!(
            got.iter()
                .map(|h| strip(&h.step.value_hint))
                .collect::<Vec<_>>(),
            ["0.5*2=1", "(0.5*2)*1=1", "1*3=3"]
        );
        assert_eq!(
            got.iter().map(|h| h.step.index).collect::<Vec<_>>(),
            [1, 2, 3]
        );
        assert_eq!(s.hint().unwrap().remaining, 0);
        assert!(matches!(
            s.hint(),
            Err(TutorError::Hint(HintError::ExhaustedHints))
        ));
    }

    #[test]
    fn reveal_before_answering_scores_zero() {
        let (mut s, bank) = session(5, None);
        assert!(matches!(s.reveal(), Err(TutorError::NoActiveQuestion)));
        draw_until(&mut s, &bank, Mode::Orq);
        let gold = s.current.as_ref().unwrap().instance.gold_value;
        let before = s.score_log().len();
        let sol = s.reveal().unwrap();
        assert_eq!(sol.record.score, 0.0);
        assert_eq!(sol.record.attempt, None);
        assert_eq!(sol.answer, gold);
        assert_eq!(s.score_log().len(), before + 1);
        assert!(s.answer(Answer::Value(gold)).unwrap().correct);
        assert_eq!(s.reveal().unwrap().record, sol.record);
        assert_eq!(s.total_score(), 0.0);
        assert_eq!(s.score_log().len(), before + 1);
    }

    #[test]
    fn skipping_a_question_records_zero() {
        let (mut s, bank) = session(6, None);
        s.next_question(&bank).unwrap();
        s.next_question(&bank).unwrap();
        assert_eq!(s.score_log().len(), 1);
        assert_eq!(s.score_log()[0].score, 0.0);
    }

    #[test]
    fn unknown_topic_in_bank_is_refused() {
        let mut bank = TemplateBank::default_bank();
        bank.templates.retain(|t| t.topic != Topic::Features);
        assert!(matches!(
            Session::new("s".into(), Some(Topic::Features), 0, &bank),
            Err(TutorError::UnknownTopic(_))
        ));
    }
}
