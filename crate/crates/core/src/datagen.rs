//! Random chain expressions, deterministic data splits and training examples.

use std::collections::HashSet;
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{Expr, Op};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DataError {
    #[error("no valid expression with {nesting} operations found after {retries} attempts")]
    ExhaustedRetries { nesting: usize, retries: usize },
    #[error("split ratios must sum to 100, got {0}")]
    InvalidRatios(u32),
    #[error("nesting level {0} is not allowed here")]
    InvalidNesting(usize),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub nesting: usize,
    pub max_operand_digits: u32,
    pub max_result_digits: u32,
    pub max_retries: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { nesting: 1, max_operand_digits: 2, max_result_digits: 2, max_retries: 10_000 }
    }
}

impl GenConfig {
    pub fn with_nesting(&self, nesting: usize) -> Self {
        Self { nesting, ..self.clone() }
    }

    fn operand_max(&self) -> i64 {
        10i64.pow(self.max_operand_digits) - 1
    }

    fn result_max(&self) -> i64 {
        10i64.pow(self.max_result_digits) - 1
    }
}

/// Samples a chain expression with exactly `cfg.nesting` operations whose
/// every intermediate value fits in `cfg.max_result_digits` digits.
///
/// Operators are uniform over `{+,-,*}`, operands uniform in
/// `[0, 10^max_operand_digits)`, and the nested child is placed left or right
/// with equal probability. An expression violating the result bound is
/// discarded as a whole and sampling restarts.
pub fn sample_expression<R: Rng + ?Sized>(rng: &mut R, cfg: &GenConfig) -> Result<Expr, DataError> {
    if cfg.nesting == 0 {
        return Err(DataError::InvalidNesting(0));
    }
    for _ in 0..cfg.max_retries {
        if let Some(e) = try_sample(rng, cfg) {
            return Ok(e);
        }
    }
    Err(DataError::ExhaustedRetries { nesting: cfg.nesting, retries: cfg.max_retries })
}

fn try_sample<R: Rng + ?Sized>(rng: &mut R, cfg: &GenConfig) -> Option<Expr> {
    let (operand_max, result_max) = (cfg.operand_max(), cfg.result_max());
    let a = rng.random_range(0..=operand_max);
    let b = rng.random_range(0..=operand_max);
    let op = Op::ALL[rng.random_range(0..3)];
    let mut value = op.checked_apply(a, b)?;
    if value.abs() > result_max {
        return None;
    }
    let mut expr = Expr::node(op, Expr::Leaf(a), Expr::Leaf(b));
    for _ in 1..cfg.nesting {
        let leaf = rng.random_range(0..=operand_max);
        let op = Op::ALL[rng.random_range(0..3)];
        if rng.random_bool(0.5) {
            value = op.checked_apply(value, leaf)?;
            expr = Expr::node(op, expr, Expr::Leaf(leaf));
        } else {
            value = op.checked_apply(leaf, value)?;
            expr = Expr::node(op, Expr::Leaf(leaf), expr);
        }
        // Rejecting here is the same as rejecting the finished expression:
        // the remaining draws cannot bring this intermediate back in range.
        if value.abs() > result_max {
            return None;
        }
    }
    Some(expr)
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Percentages for train/val/test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "[u32; 3]", into = "[u32; 3]")]
pub struct SplitRatios {
    train: u32,
    val: u32,
    test: u32,
}

impl SplitRatios {
    pub fn new(train: u32, val: u32, test: u32) -> Result<Self, DataError> {
        let total = train + val + test;
        if total != 100 {
            return Err(DataError::InvalidRatios(total));
        }
        Ok(Self { train, val, test })
    }

    pub fn train(&self) -> u32 {
        self.train
    }

    pub fn val(&self) -> u32 {
        self.val
    }

    pub fn test(&self) -> u32 {
        self.test
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 80, val: 10, test: 10 }
    }
}

impl TryFrom<[u32; 3]> for SplitRatios {
    type Error = DataError;

    fn try_from([train, val, test]: [u32; 3]) -> Result<Self, Self::Error> {
        Self::new(train, val, test)
    }
}

impl From<SplitRatios> for [u32; 3] {
    fn from(r: SplitRatios) -> Self {
        [r.train, r.val, r.test]
    }
}

/// Hash-based split of a canonical expression text; stable across runs and machines.
pub fn assign_split(canonical_text: &str, ratios: SplitRatios) -> Split {
    let bucket = (fnv1a64(canonical_text.as_bytes()) % 100) as u32;
    if bucket < ratios.train {
        Split::Train
    } else if bucket < ratios.train + ratios.val {
        Split::Val
    } else {
        Split::Test
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    /// Output `result_target` for the innermost operation.
    #[serde(rename = "subexpr")]
    SubExpr,
    /// Output the final value directly.
    #[serde(rename = "e2e")]
    EndToEnd,
}

macro_rules! text_enum {
    ($ty:ty { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = DataError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    other => Err(DataError::Invalid(format!("unknown {} {other:?}", stringify!($ty)))),
                }
            }
        }
    };
}

text_enum!(Split { Train => "train", Val => "val", Test => "test" });
text_enum!(Task { SubExpr => "subexpr", EndToEnd => "e2e" });

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub input_text: String,
    pub target_text: String,
    pub task: Task,
    pub split: Split,
}

impl Example {
    /// Builds the example for `expr`; `expr` must contain an operation.
    pub fn new(expr: &Expr, task: Task, split: Split) -> Example {
        let target_text = match task {
            Task::SubExpr => {
                let inner = expr.innermost().expect("example input must contain an operation");
                format!("{}_{}", inner.result, inner.subexpr_text)
            }
            Task::EndToEnd => expr.evaluate().to_string(),
        };
        Example { input_text: expr.render(), target_text, task, split }
    }

    pub fn to_tsv_line(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.input_text, self.target_text, self.task, self.split)
    }

    pub fn from_tsv_line(line: &str) -> Result<Example, DataError> {
        let fields: Vec<&str> = line.split('\t').collect();
        let [input, target, task, split] = fields[..] else {
            return Err(DataError::Invalid(format!("expected 4 tab-separated fields: {line:?}")));
        };
        Ok(Example {
            input_text: input.to_string(),
            target_text: target.to_string(),
            task: task.parse()?,
            split: split.parse()?,
        })
    }
}

pub fn write_tsv<W: Write>(mut out: W, examples: &[Example]) -> io::Result<()> {
    for ex in examples {
        writeln!(out, "{}", ex.to_tsv_line())?;
    }
    Ok(())
}

/// Expressions with two operations whose full solution path is forced into
/// the training split.
#[derive(Debug, Clone, Default)]
pub struct TrainingPool {
    pub examples: Vec<Example>,
    reserved: HashSet<String>,
}

impl TrainingPool {
    pub fn is_reserved(&self, canonical_text: &str) -> bool {
        self.reserved.contains(canonical_text)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Samples `n_roots` two-operation expressions and emits an example for both
/// steps of each solution path (`e_2` and `e_1`), all in the training split.
pub fn build_training_pool<R: Rng + ?Sized>(
    rng: &mut R,
    n_roots: usize,
    task: Task,
    gen: &GenConfig,
) -> Result<TrainingPool, DataError> {
    let mut pool = TrainingPool::default();
    let cfg = gen.with_nesting(2);
    for _ in 0..n_roots {
        let root = sample_expression(rng, &cfg)?;
        let first = root.solve_step().expect("root has two operations");
        for e in [root, first] {
            let ex = Example::new(&e, task, Split::Train);
            pool.reserved.insert(ex.input_text.clone());
            pool.examples.push(ex);
        }
    }
    Ok(pool)
}

/// On-the-fly batch source respecting the hash split and the reserved pool.
#[derive(Debug, Clone)]
pub struct Sampler {
    pub gen: GenConfig,
    pub ratios: SplitRatios,
    pub pool: TrainingPool,
    /// Probability that a training slot is filled from the pool instead of a fresh sample.
    pub pool_fraction: f64,
}

impl Sampler {
    pub fn new(gen: GenConfig, ratios: SplitRatios) -> Self {
        Self { gen, ratios, pool: TrainingPool::default(), pool_fraction: 0.0 }
    }

    pub fn with_pool(mut self, pool: TrainingPool, pool_fraction: f64) -> Self {
        self.pool = pool;
        self.pool_fraction = pool_fraction;
        self
    }

    /// Split membership taking the reserved pool into account.
    pub fn split_of(&self, canonical_text: &str) -> Split {
        if self.pool.is_reserved(canonical_text) {
            Split::Train
        } else {
            assign_split(canonical_text, self.ratios)
        }
    }

    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        task: Task,
        nesting_set: &[usize],
        batch_size: usize,
        split: Split,
    ) -> Result<Vec<Example>, DataError> {
        if nesting_set.is_empty() {
            return Err(DataError::Invalid("nesting set is empty".into()));
        }
        if let Some(&bad) = nesting_set.iter().find(|&&n| n == 0 || (split == Split::Train && n > 2)) {
            return Err(DataError::InvalidNesting(bad));
        }
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            if split == Split::Train && !self.pool.is_empty() && rng.random_bool(self.pool_fraction) {
                let mut ex = self.pool.examples[rng.random_range(0..self.pool.len())].clone();
                if ex.task != task {
                    ex = Example::new(&crate::expr::parse(&ex.input_text).expect("pool text is valid"), task, split);
                }
                batch.push(ex);
                continue;
            }
            let nesting = nesting_set[rng.random_range(0..nesting_set.len())];
            batch.push(self.sample_in_split(rng, task, nesting, split)?);
        }
        Ok(batch)
    }

    pub fn sample_in_split<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        task: Task,
        nesting: usize,
        split: Split,
    ) -> Result<Example, DataError> {
        let cfg = self.gen.with_nesting(nesting);
        for _ in 0..cfg.max_retries {
            let expr = sample_expression(rng, &cfg)?;
            let text = expr.render();
            if self.split_of(&text) == split {
                return Ok(Example::new(&expr, task, split));
            }
        }
        Err(DataError::ExhaustedRetries { nesting, retries: cfg.max_retries })
    }
}
