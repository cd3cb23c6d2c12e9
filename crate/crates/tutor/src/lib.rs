//! Tutoring service over the question bank and a trained solver.

pub mod error;
pub mod http;
pub mod service;
pub mod session;

pub use error::{ErrorBody, TutorError};
pub use http::router;
pub use service::{Event, Reply, SolveSummary, Tutor};
pub use session::{Answer, Mode, QuestionView, Session};
