//! Hybrid neural/symbolic solver for nested integer arithmetic.
//!
//! A learned sub-expression solver proposes `result_target` rewrites, a
//! deterministic combiner votes over them and substitutes the winner, and the
//! loop repeats until a bare integer remains.

pub mod combiner;
pub mod datagen;
pub mod eval;
pub mod experiment;
pub mod expr;
pub mod hybrid;
pub mod llm;
pub mod neural;
pub mod rng;
pub mod vocab;

pub use combiner::{CombineOutcome, CombinerVariant, HaltReason, SolverCandidate};
pub use datagen::{Example, GenConfig, Sampler, Split, SplitRatios, Task};
pub use eval::{EvalPlan, EvalRecord, Prediction};
pub use experiment::{Condition, RunConfig};
pub use expr::{Expr, ExprError, InnermostRef, Op};
pub use hybrid::{HybridOptions, HybridTrace, OracleErrorModel, OracleSolver, Outcome, SolverPort};
pub use neural::{Model, ModelConfig, NeuralSolver, PeMode};
pub use vocab::Vocab;
