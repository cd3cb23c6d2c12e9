use mlq_core::hints::HintError;
use mlq_core::nn::SolveError;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TutorError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("unknown topic `{0}`")]
    UnknownTopic(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("no active question; request one first")]
    NoActiveQuestion,
    #[error("no unseen question left for this session")]
    BankExhausted,
    #[error(transparent)]
    Hint(HintError),
    #[error("no checkpoint loaded")]
    NoModel,
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("session log: {0}")]
    Log(String),
}

/// The body of every error response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl TutorError {
    pub fn code(&self) -> &'static str {
        match self {
            TutorError::InvalidRequest(_) => "invalid_request",
            TutorError::UnknownTopic(_) => "unknown_topic",
            TutorError::UnknownSession(_) => "unknown_session",
            TutorError::NoActiveQuestion => "no_active_question",
            TutorError::BankExhausted => "bank_exhausted",
            TutorError::Hint(HintError::ExhaustedHints) => "exhausted_hints",
            TutorError::Hint(HintError::NoHints) => "no_hints",
            TutorError::Hint(HintError::Undefined(_)) => "hint_undefined",
            TutorError::NoModel => "no_model",
            TutorError::Solve(SolveError::DecodeOverflow(_)) => "decode_overflow",
            TutorError::Solve(SolveError::Tokenize(_)) => "invalid_question",
            TutorError::Log(_) => "log_failure",
        }
    }

    pub fn status(&self) -> u16 {
        match self {
            TutorError::InvalidRequest(_) | TutorError::UnknownTopic(_) => 400,
            TutorError::UnknownSession(_) => 404,
            TutorError::NoActiveQuestion | TutorError::BankExhausted | TutorError::Hint(_) => 409,
            TutorError::Solve(_) => 422,
            TutorError::NoModel => 503,
            TutorError::Log(_) => 500,
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            code: self.code().to_string(),
            message: self.to_string(),
        }
    }
}
