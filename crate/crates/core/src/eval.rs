//! Accuracy metrics, batched evaluation over nesting levels, and reports.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::combiner::select_default;
use crate::datagen::{DataError, Example, Sampler, Split, Task};
use crate::hybrid::{run_hybrid, HybridOptions, Outcome, SolverPort};
use crate::neural::{generate_batch_greedy, generate_multi, Model, NeuralError};
use crate::rng::{keyed, Stream, StreamRng};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("{0}")]
    Other(String),
}

/// What a system produced for one input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prediction {
    Output(String),
    Halted,
}

/// Matching positions over the longer of the two lengths.
pub fn char_accuracy(output: &str, target: &str) -> f64 {
    let (o, t) = (output.as_bytes(), target.as_bytes());
    let longest = o.len().max(t.len());
    if longest == 0 {
        return 1.0;
    }
    let matches = o.iter().zip(t).filter(|(a, b)| a == b).count();
    matches as f64 / longest as f64
}

pub fn seq_accuracy(output: &str, target: &str) -> f64 {
    if output == target {
        1.0
    } else {
        0.0
    }
}

impl Prediction {
    /// `(char accuracy, sequence accuracy)`; halted predictions score zero on both.
    pub fn score(&self, target: &str) -> (f64, f64) {
        match self {
            Prediction::Output(o) => (char_accuracy(o, target), seq_accuracy(o, target)),
            Prediction::Halted => (0.0, 0.0),
        }
    }

    pub fn is_halted(&self) -> bool {
        matches!(self, Prediction::Halted)
    }
}

/// Per-nesting summary in percent: mean and population standard deviation
/// across batches of the per-batch macro averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub condition: String,
    pub nesting: usize,
    pub char_acc_mean: f64,
    pub char_acc_std: f64,
    pub seq_acc_mean: f64,
    pub seq_acc_std: f64,
    pub halted_mean: f64,
    pub halted_std: f64,
    pub n_batches: usize,
    pub batch_size: usize,
}

/// One scored sequence, for the optional JSONL dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub condition: String,
    pub nesting: usize,
    pub batch: usize,
    pub input: String,
    pub target: String,
    pub prediction: Prediction,
    pub char_acc: f64,
    pub seq_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalPlan {
    pub nesting_list: Vec<usize>,
    pub n_batches: usize,
    pub batch_size: usize,
    pub split: Split,
}

impl Default for EvalPlan {
    fn default() -> Self {
        Self { nesting_list: (1..=10).collect(), n_batches: 10, batch_size: 100, split: Split::Test }
    }
}

/// Batch `b` at `nesting`: its inputs depend only on the seed, the task and
/// the coordinates, so every condition sees the same expressions.
pub fn eval_batch(
    sampler: &Sampler,
    task: Task,
    plan: &EvalPlan,
    seed: u64,
    nesting: usize,
    batch: usize,
) -> Result<Vec<Example>, DataError> {
    let mut rng = keyed(seed, Stream::Eval, &format!("inputs/n{nesting}"), batch as u64);
    (0..plan.batch_size).map(|_| sampler.sample_in_split(&mut rng, task, nesting, plan.split)).collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub struct EvalOutput {
    pub records: Vec<EvalRecord>,
    pub sequences: Vec<SequenceRecord>,
}

/// Runs `predict` on every batch in parallel. `predict` receives the batch
/// and a randomness stream private to that batch.
pub fn evaluate_with<P>(condition: &str, sampler: &Sampler, task: Task, plan: &EvalPlan, seed: u64, predict: P) -> Result<EvalOutput, EvalError>
where
    P: Fn(&[Example], &mut StreamRng) -> Result<Vec<Prediction>, EvalError> + Sync,
{
    let cells: Vec<(usize, usize)> =
        plan.nesting_list.iter().flat_map(|&n| (0..plan.n_batches).map(move |b| (n, b))).collect();
    let scored: Vec<Vec<SequenceRecord>> = cells
        .par_iter()
        .map(|&(nesting, b)| {
            let batch = eval_batch(sampler, task, plan, seed, nesting, b)?;
            let mut rng = keyed(seed, Stream::Sampling, &format!("{condition}/n{nesting}"), b as u64);
            let preds = predict(&batch, &mut rng)?;
            if preds.len() != batch.len() {
                return Err(EvalError::Other(format!("{} predictions for {} inputs", preds.len(), batch.len())));
            }
            Ok(batch
                .into_iter()
                .zip(preds)
                .map(|(ex, prediction)| {
                    let (char_acc, seq_acc) = prediction.score(&ex.target_text);
                    SequenceRecord {
                        condition: condition.to_string(),
                        nesting,
                        batch: b,
                        input: ex.input_text,
                        target: ex.target_text,
                        prediction,
                        char_acc,
                        seq_acc,
                    }
                })
                .collect())
        })
        .collect::<Result<_, EvalError>>()?;

    let mut records = Vec::with_capacity(plan.nesting_list.len());
    for &nesting in &plan.nesting_list {
        let batches: Vec<&Vec<SequenceRecord>> = scored.iter().filter(|s| s.first().is_some_and(|r| r.nesting == nesting)).collect();
        let per_batch = |f: &dyn Fn(&SequenceRecord) -> f64| -> Vec<f64> {
            batches.iter().map(|b| 100.0 * b.iter().map(f).sum::<f64>() / b.len() as f64).collect()
        };
        let (char_acc_mean, char_acc_std) = mean_std(&per_batch(&|r| r.char_acc));
        let (seq_acc_mean, seq_acc_std) = mean_std(&per_batch(&|r| r.seq_acc));
        let (halted_mean, halted_std) = mean_std(&per_batch(&|r| if r.prediction.is_halted() { 1.0 } else { 0.0 }));
        records.push(EvalRecord {
            condition: condition.to_string(),
            nesting,
            char_acc_mean,
            char_acc_std,
            seq_acc_mean,
            seq_acc_std,
            halted_mean,
            halted_std,
            n_batches: batches.len(),
            batch_size: plan.batch_size,
        });
    }
    Ok(EvalOutput { records, sequences: scored.into_iter().flatten().collect() })
}

/// How the solver's output for one input is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverMode {
    Greedy,
    /// `n` samples, reduced by the default combiner filter and vote.
    Multi { n: usize },
}

/// Sub-expression solving accuracy of a trained solver.
pub fn evaluate_solver(
    condition: &str,
    model: &Model<f32>,
    mode: SolverMode,
    sampler: &Sampler,
    plan: &EvalPlan,
    seed: u64,
) -> Result<EvalOutput, EvalError> {
    evaluate_with(condition, sampler, Task::SubExpr, plan, seed, |batch, rng| match mode {
        SolverMode::Greedy => {
            let inputs: Vec<&str> = batch.iter().map(|e| e.input_text.as_str()).collect();
            Ok(generate_batch_greedy(model, &inputs, rng)?.into_iter().map(Prediction::Output).collect())
        }
        SolverMode::Multi { n } => batch
            .iter()
            .map(|ex| {
                let candidates = generate_multi(model, &ex.input_text, n, rng)?;
                Ok(match select_default(&ex.input_text, &candidates) {
                    Some((raw, _)) => Prediction::Output(raw.to_string()),
                    None => Prediction::Halted,
                })
            })
            .collect(),
    })
}

/// Greedy end-to-end accuracy: the model maps an expression straight to its value.
pub fn evaluate_end_to_end(condition: &str, model: &Model<f32>, sampler: &Sampler, plan: &EvalPlan, seed: u64) -> Result<EvalOutput, EvalError> {
    evaluate_with(condition, sampler, Task::EndToEnd, plan, seed, |batch, rng| {
        let inputs: Vec<&str> = batch.iter().map(|e| e.input_text.as_str()).collect();
        Ok(generate_batch_greedy(model, &inputs, rng)?.into_iter().map(Prediction::Output).collect())
    })
}

/// Final-value accuracy of the iterative system. A run that hits the
/// iteration cap is not halted; it is scored on the text it stopped at.
pub fn evaluate_hybrid(
    condition: &str,
    solver: &dyn SolverPort,
    opts: &HybridOptions,
    sampler: &Sampler,
    plan: &EvalPlan,
    seed: u64,
) -> Result<EvalOutput, EvalError> {
    let opts = opts.without_trace();
    evaluate_with(condition, sampler, Task::EndToEnd, plan, seed, |batch, rng| {
        batch
            .iter()
            .map(|ex| {
                let trace = run_hybrid(solver, &opts, &ex.input_text, rng).map_err(|e| EvalError::Other(e.to_string()))?;
                Ok(match trace.outcome {
                    Outcome::Solved { value } => Prediction::Output(value.to_string()),
                    Outcome::Halted { .. } => Prediction::Halted,
                    Outcome::IterationCapHit => Prediction::Output(trace.final_text),
                })
            })
            .collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

/// One decimal, halves rounded away from zero.
pub fn fmt1(x: f64) -> String {
    let r = (x * 10.0).round() / 10.0;
    // Avoid printing "-0.0".
    format!("{:.1}", if r == 0.0 { 0.0 } else { r })
}

pub fn emit_report(records: &[EvalRecord], format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut out = String::from("condition,nesting,char_mean,char_std,seq_mean,seq_std,halted_mean,halted_std\n");
            for r in records {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    r.condition,
                    r.nesting,
                    fmt1(r.char_acc_mean),
                    fmt1(r.char_acc_std),
                    fmt1(r.seq_acc_mean),
                    fmt1(r.seq_acc_std),
                    fmt1(r.halted_mean),
                    fmt1(r.halted_std)
                );
            }
            out
        }
        ReportFormat::Markdown => markdown(records),
    }
}

/// Conditions as row groups, nesting levels as columns, `mean±std` cells.
fn markdown(records: &[EvalRecord]) -> String {
    let mut levels: Vec<usize> = records.iter().map(|r| r.nesting).collect();
    levels.sort_unstable();
    levels.dedup();
    let mut conditions: Vec<&str> = Vec::new();
    for r in records {
        if !conditions.contains(&r.condition.as_str()) {
            conditions.push(&r.condition);
        }
    }

    let mut out = String::from("| Condition | Metric |");
    for n in &levels {
        let _ = write!(out, " {n} |");
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---|".repeat(levels.len()));
    out.push('\n');
    type Pick = fn(&EvalRecord) -> (f64, f64);
    let metrics: [(&str, Pick); 3] = [
        ("Char. acc.", |r| (r.char_acc_mean, r.char_acc_std)),
        ("Seq. acc.", |r| (r.seq_acc_mean, r.seq_acc_std)),
        ("Halted", |r| (r.halted_mean, r.halted_std)),
    ];
    for cond in conditions {
        for (name, pick) in metrics {
            let _ = write!(out, "| {cond} | {name} |");
            for n in &levels {
                match records.iter().find(|r| r.condition == cond && r.nesting == *n) {
                    Some(r) => {
                        let (m, s) = pick(r);
                        let _ = write!(out, " {}±{} |", fmt1(m), fmt1(s));
                    }
                    None => out.push_str(" |"),
                }
            }
            out.push('\n');
        }
    }
    out
}

pub fn sequences_jsonl(sequences: &[SequenceRecord]) -> String {
    sequences.iter().map(|s| serde_json::to_string(s).expect("record serializes") + "\n").collect()
}
