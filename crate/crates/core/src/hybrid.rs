//! The iterative solve loop: ask the solver for candidates, let the combiner
//! rewrite the expression, repeat until only an integer is left.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::combiner::{combine, CombineOutcome, CombinerVariant, HaltReason, SolverCandidate};
use crate::expr::{self, is_integer_literal, ExprError};
use crate::vocab::Vocab;

/// Anything that maps an expression to candidate `result_target` strings.
pub trait SolverPort: Sync {
    /// Exactly `n` independently generated candidates.
    fn propose(&self, input: &str, n: usize, rng: &mut dyn RngCore) -> Vec<String>;

    /// Single deterministic best guess.
    fn greedy(&self, input: &str, rng: &mut dyn RngCore) -> String {
        self.propose(input, 1, rng).swap_remove(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HybridError {
    #[error("initial input is not a valid expression: {0}")]
    MalformedInitialInput(#[source] ExprError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    pub input_text: String,
    pub n_wellformed: usize,
    pub chosen: Option<SolverCandidate>,
    pub output_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Outcome {
    Solved { value: i64 },
    Halted { reason: HaltReason },
    IterationCapHit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HybridTrace {
    pub input_text: String,
    pub steps: Vec<TraceStep>,
    /// Number of combiner applications; equals `steps.len()` when traces are recorded.
    pub iterations: usize,
    /// Text at the end of the run: the bare integer when solved, the last
    /// input the combiner saw otherwise.
    pub final_text: String,
    pub outcome: Outcome,
}

impl HybridTrace {
    pub fn is_halted(&self) -> bool {
        matches!(self.outcome, Outcome::Halted { .. })
    }

    pub fn solved_value(&self) -> Option<i64> {
        match self.outcome {
            Outcome::Solved { value } => Some(value),
            _ => None,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HybridOptions {
    pub variant: CombinerVariant,
    pub n_outputs: usize,
    /// Defaults to the initial operation count plus two.
    pub max_iters: Option<usize>,
    pub record_trace: bool,
}

impl HybridOptions {
    pub fn new(variant: CombinerVariant, n_outputs: usize) -> Self {
        Self { variant, n_outputs, max_iters: None, record_trace: true }
    }

    pub fn without_trace(mut self) -> Self {
        self.record_trace = false;
        self
    }
}

pub fn run_hybrid(
    solver: &dyn SolverPort,
    opts: &HybridOptions,
    expr_text: &str,
    rng: &mut dyn RngCore,
) -> Result<HybridTrace, HybridError> {
    assert!(opts.n_outputs >= 1, "need at least one solver output per step");
    let initial = expr::parse_permissive(expr_text).map_err(HybridError::MalformedInitialInput)?;
    let max_iters = opts.max_iters.unwrap_or(initial.op_count() + 2);
    let mut trace = HybridTrace {
        input_text: expr_text.to_string(),
        steps: Vec::new(),
        iterations: 0,
        final_text: String::new(),
        outcome: Outcome::IterationCapHit,
    };
    let mut current = expr_text.to_string();
    loop {
        trace.final_text.clone_from(&current);
        if is_integer_literal(&current) {
            if let Ok(value) = current.parse::<i64>() {
                trace.outcome = Outcome::Solved { value };
                return Ok(trace);
            }
        }
        if trace.iterations >= max_iters {
            trace.outcome = Outcome::IterationCapHit;
            return Ok(trace);
        }
        let candidates = solver.propose(&current, opts.n_outputs, rng);
        let decision = combine(opts.variant, &current, &candidates);
        trace.iterations += 1;
        let next = match &decision.outcome {
            CombineOutcome::Next(text) => Some(text.clone()),
            CombineOutcome::Halted(_) => None,
        };
        if opts.record_trace {
            trace.steps.push(TraceStep {
                input_text: current.clone(),
                n_wellformed: decision.n_wellformed,
                chosen: decision.chosen,
                output_text: next.clone(),
            });
        }
        match (next, decision.outcome) {
            (Some(text), _) => current = text,
            (None, CombineOutcome::Halted(reason)) => {
                trace.outcome = Outcome::Halted { reason };
                return Ok(trace);
            }
            (None, CombineOutcome::Next(_)) => unreachable!(),
        }
    }
}

/// Candidate corruption probabilities for the synthetic solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleErrorModel {
    pub p_malformed: f64,
    pub p_wrong_result: f64,
    pub p_wrong_target: f64,
    pub result_noise_range: i64,
}

impl Default for OracleErrorModel {
    fn default() -> Self {
        Self { p_malformed: 0.0, p_wrong_result: 0.0, p_wrong_target: 0.0, result_noise_range: 3 }
    }
}

impl OracleErrorModel {
    pub fn exact() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("p_malformed", self.p_malformed),
            ("p_wrong_result", self.p_wrong_result),
            ("p_wrong_target", self.p_wrong_target),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        if self.result_noise_range < 1 {
            return Err("result_noise_range must be at least 1".into());
        }
        Ok(())
    }
}

/// Ground-truth candidates, independently corrupted per `model`.
pub fn oracle_solve(
    input_text: &str,
    n: usize,
    rng: &mut dyn RngCore,
    model: &OracleErrorModel,
) -> Result<Vec<String>, ExprError> {
    let inner = expr::parse_permissive(input_text)?.innermost()?;
    Ok((0..n).map(|_| corrupt(input_text, inner.result, &inner.subexpr_text, rng, model)).collect())
}

fn corrupt(input: &str, result: i64, target: &str, rng: &mut dyn RngCore, model: &OracleErrorModel) -> String {
    let mut result = result;
    if rng.random_bool(model.p_wrong_result) {
        let r = model.result_noise_range;
        let magnitude = rng.random_range(1..=r);
        result += if rng.random_bool(0.5) { magnitude } else { -magnitude };
    }
    let target = if rng.random_bool(model.p_wrong_target) {
        absent_subexpression(input, rng)
    } else {
        target.to_string()
    };
    let mut out = format!("{result}_{target}");
    if rng.random_bool(model.p_malformed) {
        if rng.random_bool(0.5) {
            out = out.replacen('_', "", 1);
        } else {
            let id = rng.random_range(0..Vocab::SOS);
            out.push(Vocab.char_of(id).expect("printable id"));
        }
    }
    out
}

fn absent_subexpression(input: &str, rng: &mut dyn RngCore) -> String {
    loop {
        let a = rng.random_range(0..100);
        let b = rng.random_range(0..100);
        let op = expr::Op::ALL[rng.random_range(0..3)].symbol();
        let candidate = format!("({a}{op}{b})");
        if !input.contains(&candidate) {
            return candidate;
        }
    }
}

/// Synthetic solver backed by the exact innermost computation.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleSolver {
    pub errors: OracleErrorModel,
}

impl OracleSolver {
    pub fn new(errors: OracleErrorModel) -> Self {
        Self { errors }
    }
}

impl SolverPort for OracleSolver {
    fn propose(&self, input: &str, n: usize, rng: &mut dyn RngCore) -> Vec<String> {
        // Inputs the oracle cannot read get unusable candidates, as a real solver would produce.
        oracle_solve(input, n, rng, &self.errors).unwrap_or_else(|_| vec![String::new(); n])
    }
}
