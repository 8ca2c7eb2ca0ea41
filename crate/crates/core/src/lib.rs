//! Context-ablation profiling for multiple-choice comprehension questions.
//!
//! Load a corpus, score it under truncated or removed contexts, and see how
//! much of the passage the answers actually depend on.

pub mod ablation;
pub mod cli;
pub mod corpus;
pub mod report;
pub mod scorer;
pub mod synth;
pub mod textproc;

pub use ablation::{evaluate, sweep_tau, EvalOptions, Evaluation};
pub use corpus::{load_corpus, Corpus, McqItem};
pub use scorer::{Condition, ContextMode, OptionDistribution, Scorer};
pub use textproc::{ExtractMode, ExtractSpec};
