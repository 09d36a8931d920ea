//! Clinical-note error detection with reflective instruction search.
//!
//! The pipeline loads labelled notes ([`corpus`]), asks a chat model whether
//! each note contains a medical error ([`detector`]), scores the replies
//! ([`metrics`]) and searches for better detection instructions
//! ([`optimizer`]) using critiques built by [`feedback`]. Everything a run
//! does is appended to a [`record`].

pub mod backend;
pub mod corpus;
pub mod detector;
pub mod feedback;
pub mod metrics;
pub mod optimizer;
pub mod record;

pub use backend::{Backend, BackendError, ModelClient};
pub use corpus::{ClinicalNote, Dataset, Example, GroundTruth};
pub use detector::{evaluate_prompt, EvalResult, Verdict, P1_INSTRUCTION};
pub use optimizer::{optimize, OptimizerConfig, OptimizerError, PromptCandidate};
pub use record::{RunEvent, RunRecord};
