//! The neural solver: a reverse-mode tape, the encoder / graph network /
//! tree decoder model, decoding strategies, training and checkpoints.

pub mod checkpoint;
pub mod decode;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod tape;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, Metadata};
pub use decode::{SolveError, Solver, SolverPrediction};
pub use gradcheck::{gradient_check, GradCheckError, GradCheckReport};
pub use model::{ConfigError, Model, ModelConfig, Vocab};
pub use params::{Adam, ParamStore};
pub use tape::{BackwardFault, Float, Tape, Var};
pub use train::{train, TrainError, TrainLog};
