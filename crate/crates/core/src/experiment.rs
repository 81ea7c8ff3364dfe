//! Run configuration and the end-to-end procedures behind the command line:
//! dataset dumps, training with logging and checkpoints, and evaluation
//! conditions writing CSV/Markdown reports.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::combiner::CombinerVariant;
use crate::datagen::{build_training_pool, fnv1a64, sample_expression, write_tsv, DataError, Example, GenConfig, Sampler, Split, SplitRatios, Task};
use crate::eval::{
    emit_report, evaluate_end_to_end, evaluate_hybrid, evaluate_solver, sequences_jsonl, EvalError, EvalOutput, EvalPlan,
    EvalRecord, ReportFormat, SolverMode,
};
use crate::hybrid::{HybridOptions, OracleErrorModel, OracleSolver};
use crate::llm::{evaluate_llm, EndpointConfig, LlmError};
use crate::neural::{
    generate_batch_greedy, load_checkpoint, save_checkpoint, training_step, AdamConfig, AdamState, Model, ModelConfig, NeuralError,
    NeuralSolver, Regime,
};
use crate::rng::{keyed, stream, Stream};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("no checkpoint configured for {0}")]
    MissingCheckpoint(&'static str),
    #[error("non-finite loss at step {step}: {source}")]
    NonFinite { step: usize, source: NeuralError },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ExperimentError {
    pub fn is_config(&self) -> bool {
        matches!(self, ExperimentError::Config(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub max_operand_digits: u32,
    pub max_result_digits: u32,
    pub max_retries: usize,
    pub ratios: SplitRatios,
    /// Nesting levels seen during training.
    pub train_nesting: Vec<usize>,
    /// Two-operation roots whose full solution path is reserved for training.
    pub pool_roots: usize,
    /// Chance that a training slot is drawn from the reserved pool.
    pub pool_fraction: f64,
    /// Rows written by `gen-data`.
    pub dump_rows: usize,
    pub dump_nesting: Vec<usize>,
    /// Restrict the dump to one split; by default rows keep their hashed split.
    pub dump_split: Option<Split>,
    pub dump_task: Task,
}

impl Default for DataSection {
    fn default() -> Self {
        let gen = GenConfig::default();
        Self {
            max_operand_digits: gen.max_operand_digits,
            max_result_digits: gen.max_result_digits,
            max_retries: gen.max_retries,
            ratios: SplitRatios::default(),
            train_nesting: vec![1, 2],
            pool_roots: 10_000,
            pool_fraction: 0.25,
            dump_rows: 1000,
            dump_nesting: vec![1, 2],
            dump_split: None,
            dump_task: Task::SubExpr,
        }
    }
}

impl DataSection {
    pub fn gen(&self) -> GenConfig {
        GenConfig {
            nesting: 1,
            max_operand_digits: self.max_operand_digits,
            max_result_digits: self.max_result_digits,
            max_retries: self.max_retries,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Root of every random stream in a run.
    pub seed: u64,
    /// Where the checkpoint goes; defaults to `model.ckpt` in the run directory.
    pub checkpoint_path: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub val_every: usize,
    pub val_batch_size: usize,
    pub regime: Regime,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 20_000,
            lr: 1e-4,
            batch_size: 128,
            seed: 0,
            checkpoint_path: None,
            checkpoint_every: 1000,
            log_every: 100,
            val_every: 1000,
            val_batch_size: 200,
            regime: Regime::Autoregressive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverEvalMode {
    #[default]
    Greedy,
    Multi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub nesting_list: Vec<usize>,
    pub n_batches: usize,
    pub batch_size: usize,
    /// One condition per entry for the sampling-based modes.
    pub n_outputs: Vec<usize>,
    pub combiner_variant: CombinerVariant,
    pub solver_mode: SolverEvalMode,
    /// Solver checkpoint; falls back to `train.checkpoint_path`.
    pub checkpoint: Option<PathBuf>,
    pub e2e_checkpoint: Option<PathBuf>,
    pub oracle: OracleErrorModel,
    pub llm_batch_size: usize,
    /// Also write every scored sequence as JSON lines.
    pub dump_sequences: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            nesting_list: (1..=10).collect(),
            n_batches: 10,
            batch_size: 100,
            n_outputs: vec![100],
            combiner_variant: CombinerVariant::Default,
            solver_mode: SolverEvalMode::Greedy,
            checkpoint: None,
            e2e_checkpoint: None,
            oracle: OracleErrorModel::exact(),
            llm_batch_size: 10,
            dump_sequences: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_root: PathBuf,
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub llm: EndpointConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_root: PathBuf::from("runs"),
            data: DataSection::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            llm: EndpointConfig::default(),
        }
    }
}

/// Sets `path` (dot-separated) in a JSON document. The value is parsed as
/// JSON when possible and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), ExperimentError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ExperimentError::Config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if key.is_empty() {
            return Err(ExperimentError::Config(format!("empty key in {path:?}")));
        }
        let obj = match node {
            Value::Object(map) => map,
            other => {
                *other = Value::Object(Default::default());
                other.as_object_mut().expect("just made an object")
            }
        };
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split always yields at least one key")
}

impl RunConfig {
    /// Parses a JSON document (empty means all defaults), applies overrides
    /// and validates the result.
    pub fn from_json_with_overrides(text: &str, overrides: &[String]) -> Result<Self, ExperimentError> {
        let mut doc: Value = if text.trim().is_empty() {
            Value::Object(Default::default())
        } else {
            serde_json::from_str(text).map_err(|e| ExperimentError::Config(format!("invalid JSON: {e}")))?
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json_with_overrides(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        self.model.validate().map_err(ExperimentError::Config)?;
        self.eval.oracle.validate().map_err(ExperimentError::Config)?;
        let d = &self.data;
        if d.train_nesting.is_empty() || d.train_nesting.iter().any(|&n| !(1..=2).contains(&n)) {
            return bad("data.train_nesting must be a non-empty subset of {1, 2}".into());
        }
        if d.dump_nesting.is_empty() || d.dump_nesting.contains(&0) {
            return bad("data.dump_nesting must be non-empty and positive".into());
        }
        if !(0.0..=1.0).contains(&d.pool_fraction) {
            return bad(format!("data.pool_fraction must be in [0, 1], got {}", d.pool_fraction));
        }
        if d.max_operand_digits == 0 || d.max_operand_digits > 9 || d.max_result_digits > 9 {
            return bad("digit limits must be between 1 and 9".into());
        }
        let t = &self.train;
        if t.batch_size == 0 || t.log_every == 0 || t.checkpoint_every == 0 || t.val_every == 0 {
            return bad("train.batch_size, log_every, checkpoint_every and val_every must be positive".into());
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad(format!("train.lr must be positive, got {}", t.lr));
        }
        let e = &self.eval;
        if e.nesting_list.is_empty() || e.nesting_list.iter().any(|&n| !(1..=10).contains(&n)) {
            return bad("eval.nesting_list must be a non-empty subset of 1..=10".into());
        }
        if e.n_batches == 0 || e.batch_size == 0 || e.llm_batch_size == 0 {
            return bad("eval batch counts and sizes must be positive".into());
        }
        if e.n_outputs.is_empty() || e.n_outputs.contains(&0) {
            return bad("eval.n_outputs must be a non-empty list of positive counts".into());
        }
        Ok(())
    }

    /// Short stable digest of the resolved configuration.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        format!("{:08x}", fnv1a64(text.as_bytes()) as u32)
    }

    pub fn sampler(&self, task: Task) -> Result<Sampler, DataError> {
        let mut rng = stream(self.train.seed, Stream::Data);
        let pool = build_training_pool(&mut rng, self.data.pool_roots, task, &self.data.gen())?;
        Ok(Sampler::new(self.data.gen(), self.data.ratios).with_pool(pool, self.data.pool_fraction))
    }

    fn eval_plan(&self, batch_size: usize) -> EvalPlan {
        EvalPlan { nesting_list: self.eval.nesting_list.clone(), n_batches: self.eval.n_batches, batch_size, split: Split::Test }
    }
}

/// Rows per (split, nesting) in a dataset dump.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct DumpCount {
    pub split: Split,
    pub nesting: usize,
    pub rows: usize,
}

/// Writes `data.dump_rows` examples as TSV and returns the non-empty counts.
pub fn generate_dataset(cfg: &RunConfig, out: &Path) -> Result<Vec<DumpCount>, ExperimentError> {
    let d = &cfg.data;
    let sampler = cfg.sampler(d.dump_task)?;
    let mut rng = keyed(cfg.train.seed, Stream::Data, "dump", 0);
    let mut rows: Vec<Example> = Vec::with_capacity(d.dump_rows);
    let mut counts = std::collections::BTreeMap::new();
    for _ in 0..d.dump_rows {
        let nesting = d.dump_nesting[rng.random_range(0..d.dump_nesting.len())];
        let ex = match d.dump_split {
            Some(split) => sampler.sample_in_split(&mut rng, d.dump_task, nesting, split)?,
            None => {
                let expr = sample_expression(&mut rng, &sampler.gen.with_nesting(nesting))?;
                Example::new(&expr, d.dump_task, sampler.split_of(&expr.render()))
            }
        };
        *counts.entry((ex.split, nesting)).or_insert(0) += 1;
        rows.push(ex);
    }
    let mut f = BufWriter::new(File::create(out)?);
    write_tsv(&mut f, &rows)?;
    f.flush()?;
    Ok(counts.into_iter().map(|((split, nesting), rows)| DumpCount { split, nesting, rows }).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub last_val_seq_acc: Option<f64>,
}

/// Progress events during training.
pub enum TrainEvent<'a> {
    Logged { step: usize, loss: f64 },
    Validated { step: usize, seq_acc: f64 },
    Checkpointed { step: usize, path: &'a Path },
}

fn validation_accuracy(model: &Model<f32>, val: &[Example], seed: u64) -> Result<f64, NeuralError> {
    let mut rng = keyed(seed, Stream::Eval, "validation-positions", 0);
    let inputs: Vec<&str> = val.iter().map(|e| e.input_text.as_str()).collect();
    let outputs = generate_batch_greedy(model, &inputs, &mut rng)?;
    let hits = outputs.iter().zip(val).filter(|(o, e)| **o == e.target_text).count();
    Ok(100.0 * hits as f64 / val.len().max(1) as f64)
}

/// Trains a solver (`Task::SubExpr`) or the end-to-end baseline
/// (`Task::EndToEnd`), writing `loss.csv`, `validation.csv` and the
/// checkpoint. Every random choice derives from `train.seed`.
pub fn train(
    cfg: &RunConfig,
    task: Task,
    run_dir: &Path,
    mut on_event: impl FnMut(TrainEvent<'_>),
) -> Result<TrainSummary, ExperimentError> {
    fs::create_dir_all(run_dir)?;
    let t = &cfg.train;
    let checkpoint = t.checkpoint_path.clone().unwrap_or_else(|| run_dir.join("model.ckpt"));
    if let Some(parent) = checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let sampler = cfg.sampler(task)?;
    let mut data_rng = keyed(t.seed, Stream::Data, "train-batches", 0);
    let mut pe_rng = stream(t.seed, Stream::LabelPe);
    let mut model: Model<f32> = Model::init(cfg.model.clone(), &mut stream(t.seed, Stream::ModelInit));
    let mut adam = AdamState::new(&cfg.model, AdamConfig { lr: t.lr, ..AdamConfig::default() });

    let mut val_rng = keyed(t.seed, Stream::Eval, "validation-set", 0);
    let val = sampler.sample_batch(&mut val_rng, task, &cfg.data.train_nesting, t.val_batch_size.max(1), Split::Val)?;

    let mut loss_log = BufWriter::new(File::create(run_dir.join("loss.csv"))?);
    writeln!(loss_log, "step,loss")?;
    let mut val_log = BufWriter::new(File::create(run_dir.join("validation.csv"))?);
    writeln!(val_log, "step,seq_acc")?;

    let mut window = (0.0, 0usize);
    let mut final_loss = None;
    let mut last_val = None;
    for step in 1..=t.steps {
        let batch = sampler.sample_batch(&mut data_rng, task, &cfg.data.train_nesting, t.batch_size, Split::Train)?;
        let report = training_step(&mut model, &mut adam, &batch, t.regime, &mut pe_rng).map_err(|e| match e {
            e @ NeuralError::NonFiniteLoss { .. } => ExperimentError::NonFinite { step, source: e },
            e => e.into(),
        })?;
        window.0 += report.loss;
        window.1 += 1;
        final_loss = Some(report.loss);
        if step % t.log_every == 0 || step == t.steps {
            let mean = window.0 / window.1 as f64;
            writeln!(loss_log, "{step},{mean:.6}")?;
            loss_log.flush()?;
            on_event(TrainEvent::Logged { step, loss: mean });
            window = (0.0, 0);
        }
        if step % t.val_every == 0 || step == t.steps {
            let acc = validation_accuracy(&model, &val, t.seed)?;
            writeln!(val_log, "{step},{acc:.2}")?;
            val_log.flush()?;
            last_val = Some(acc);
            on_event(TrainEvent::Validated { step, seq_acc: acc });
        }
        if step % t.checkpoint_every == 0 && step != t.steps {
            save_checkpoint(&model, &checkpoint)?;
            on_event(TrainEvent::Checkpointed { step, path: &checkpoint });
        }
    }
    save_checkpoint(&model, &checkpoint)?;
    on_event(TrainEvent::Checkpointed { step: t.steps, path: &checkpoint });
    Ok(TrainSummary { checkpoint, steps: t.steps, final_loss, last_val_seq_acc: last_val })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    Solver,
    Hybrid,
    HybridAlt,
    E2E,
    OracleHybrid,
    Llm,
}

impl std::str::FromStr for Condition {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "solver" => Condition::Solver,
            "hybrid" => Condition::Hybrid,
            "hybrid-alt" => Condition::HybridAlt,
            "e2e" => Condition::E2E,
            "oracle-hybrid" => Condition::OracleHybrid,
            "llm" => Condition::Llm,
            other => return Err(ExperimentError::Config(format!("unknown condition {other:?}"))),
        })
    }
}

fn load_model(path: Option<&PathBuf>, what: &'static str) -> Result<Model<f32>, ExperimentError> {
    let path = path.ok_or(ExperimentError::MissingCheckpoint(what))?;
    Ok(load_checkpoint(path)?)
}

/// Runs one condition; sampling conditions yield one block per `eval.n_outputs` entry.
pub fn evaluate_condition(cfg: &RunConfig, condition: Condition) -> Result<Vec<EvalOutput>, ExperimentError> {
    let e = &cfg.eval;
    let seed = cfg.train.seed;
    let plan = cfg.eval_plan(e.batch_size);
    let solver_ckpt = e.checkpoint.as_ref().or(cfg.train.checkpoint_path.as_ref());
    let mut out = Vec::new();
    match condition {
        Condition::Solver => {
            let model = load_model(solver_ckpt, "the solver")?;
            let sampler = cfg.sampler(Task::SubExpr)?;
            match e.solver_mode {
                SolverEvalMode::Greedy => out.push(evaluate_solver("solver", &model, SolverMode::Greedy, &sampler, &plan, seed)?),
                SolverEvalMode::Multi => {
                    for &n in &e.n_outputs {
                        out.push(evaluate_solver(&format!("solver-multi-N{n}"), &model, SolverMode::Multi { n }, &sampler, &plan, seed)?);
                    }
                }
            }
        }
        Condition::Hybrid | Condition::HybridAlt => {
            let solver = NeuralSolver::new(load_model(solver_ckpt, "the solver")?);
            let variant = if condition == Condition::HybridAlt { CombinerVariant::Alt } else { e.combiner_variant };
            let sampler = cfg.sampler(Task::SubExpr)?;
            let prefix = if variant == CombinerVariant::Alt { "hybrid-alt" } else { "hybrid" };
            for &n in &e.n_outputs {
                let opts = HybridOptions::new(variant, n);
                out.push(evaluate_hybrid(&format!("{prefix}-N{n}"), &solver, &opts, &sampler, &plan, seed)?);
            }
        }
        Condition::E2E => {
            let model = load_model(e.e2e_checkpoint.as_ref(), "the end-to-end baseline")?;
            out.push(evaluate_end_to_end("e2e", &model, &cfg.sampler(Task::EndToEnd)?, &plan, seed)?);
        }
        Condition::OracleHybrid => {
            let solver = OracleSolver::new(e.oracle);
            let sampler = cfg.sampler(Task::SubExpr)?;
            let prefix = if e.combiner_variant == CombinerVariant::Alt { "oracle-hybrid-alt" } else { "oracle-hybrid" };
            for &n in &e.n_outputs {
                let opts = HybridOptions::new(e.combiner_variant, n);
                out.push(evaluate_hybrid(&format!("{prefix}-N{n}"), &solver, &opts, &sampler, &plan, seed)?);
            }
        }
        Condition::Llm => {
            let endpoint = cfg.llm.clone().with_env()?;
            let plan = cfg.eval_plan(e.llm_batch_size);
            out.push(evaluate_llm(&endpoint, &cfg.sampler(Task::EndToEnd)?, &plan, seed)?);
        }
    }
    Ok(out)
}

/// Writes `report.csv`, `report.md` and optionally `sequences.jsonl`.
pub fn write_reports(run_dir: &Path, outputs: &[EvalOutput], dump_sequences: bool) -> Result<Vec<EvalRecord>, ExperimentError> {
    fs::create_dir_all(run_dir)?;
    let records: Vec<EvalRecord> = outputs.iter().flat_map(|o| o.records.iter().cloned()).collect();
    fs::write(run_dir.join("report.csv"), emit_report(&records, ReportFormat::Csv))?;
    fs::write(run_dir.join("report.md"), emit_report(&records, ReportFormat::Markdown))?;
    if dump_sequences {
        let mut f = BufWriter::new(File::create(run_dir.join("sequences.jsonl"))?);
        for o in outputs {
            f.write_all(sequences_jsonl(&o.sequences).as_bytes())?;
        }
        f.flush()?;
    }
    Ok(records)
}
