//! Configuration, persistence, synthetic data and the round protocol that
//! the command-line tool is built from.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod engine;
pub mod records;
pub mod rounds;
pub mod synth;

pub use config::PipelineConfig;
pub use engine::{Engine, PretrainReport};
pub use records::FlowRecord;
pub use rounds::{EvalOutcome, RoundDataset, RoundMetrics, RoundSpec};
pub use synth::{FamilySpec, LengthComponent, SynthSpec};
