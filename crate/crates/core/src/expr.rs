//! Nested integer arithmetic expressions in canonical, fully parenthesized form.
//!
//! The text format is the wire format used across the crate:
//!
//! ```text
//! expr := int | "(" expr op expr ")"
//! int  := "-"? digit+
//! op   := "+" | "-" | "*"
//! ```
//!
//! Generated data is always in *chain form*: every operation node has at most
//! one non-leaf child, so there is exactly one innermost operation.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Op {
    Add,
    Sub,
    Mul,
}

impl Op {
    pub const ALL: [Op; 3] = [Op::Add, Op::Sub, Op::Mul];

    pub fn symbol(self) -> char {
        match self {
            Op::Add => '+',
            Op::Sub => '-',
            Op::Mul => '*',
        }
    }

    pub fn from_symbol(c: char) -> Option<Op> {
        match c {
            '+' => Some(Op::Add),
            '-' => Some(Op::Sub),
            '*' => Some(Op::Mul),
            _ => None,
        }
    }

    /// Exact integer application; `None` on `i64` overflow.
    pub fn checked_apply(self, lhs: i64, rhs: i64) -> Option<i64> {
        match self {
            Op::Add => lhs.checked_add(rhs),
            Op::Sub => lhs.checked_sub(rhs),
            Op::Mul => lhs.checked_mul(rhs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Expr {
    Leaf(i64),
    Node(Op, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntaxErrorKind {
    Empty,
    UnbalancedParens,
    BareOperator,
    EmptyOperand,
    MissingOperator,
    IllegalCharacter(char),
    IntegerOverflow,
}

impl fmt::Display for SyntaxErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SyntaxErrorKind::Empty => write!(f, "empty input"),
            SyntaxErrorKind::UnbalancedParens => write!(f, "unbalanced parentheses"),
            SyntaxErrorKind::BareOperator => write!(f, "binary operation without parentheses"),
            SyntaxErrorKind::EmptyOperand => write!(f, "empty operand"),
            SyntaxErrorKind::MissingOperator => write!(f, "missing operator"),
            SyntaxErrorKind::IllegalCharacter(c) => write!(f, "illegal character {c:?}"),
            SyntaxErrorKind::IntegerOverflow => write!(f, "integer literal out of range"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExprError {
    #[error("syntax error at byte {pos}: {kind}")]
    Syntax { pos: usize, kind: SyntaxErrorKind },
    #[error("expression is not in chain form")]
    NotChainForm,
    #[error("expression is a bare integer")]
    IsLeaf,
    #[error("target {0:?} does not occur in text")]
    TargetAbsent(String),
}

/// The innermost operation of an expression, as text, together with its value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InnermostRef {
    pub subexpr_text: String,
    pub result: i64,
}

/// Parses canonical text and requires chain form.
pub fn parse(text: &str) -> Result<Expr, ExprError> {
    let expr = parse_permissive(text)?;
    if !expr.is_chain_form() {
        return Err(ExprError::NotChainForm);
    }
    Ok(expr)
}

/// Parses canonical text into a general binary tree (chain form not required).
pub fn parse_permissive(text: &str) -> Result<Expr, ExprError> {
    let mut parser = Parser { bytes: text.as_bytes(), pos: 0 };
    if parser.bytes.is_empty() {
        return Err(parser.error(SyntaxErrorKind::Empty));
    }
    let expr = parser.expr()?;
    match parser.peek() {
        None => Ok(expr),
        Some(b')') => Err(parser.error(SyntaxErrorKind::UnbalancedParens)),
        Some(b'+' | b'-' | b'*') => Err(parser.error(SyntaxErrorKind::BareOperator)),
        Some(b) => Err(parser.error(illegal_or(b, SyntaxErrorKind::BareOperator))),
    }
}

/// Returns true if `text` is a bare (optionally negative) integer literal.
pub fn is_integer_literal(text: &str) -> bool {
    let digits = text.strip_prefix('-').unwrap_or(text);
    !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit())
}

/// Replaces the leftmost occurrence of `target` in `text` with `candidate`.
pub fn substitute_once(text: &str, target: &str, candidate: &str) -> Result<String, ExprError> {
    assert!(!target.is_empty(), "substitution target must be non-empty");
    let start = text
        .find(target)
        .ok_or_else(|| ExprError::TargetAbsent(target.to_string()))?;
    let mut out = String::with_capacity(text.len() + candidate.len() - target.len().min(text.len()));
    out.push_str(&text[..start]);
    out.push_str(candidate);
    out.push_str(&text[start + target.len()..]);
    Ok(out)
}

fn illegal_or(b: u8, fallback: SyntaxErrorKind) -> SyntaxErrorKind {
    match b {
        b'0'..=b'9' | b'(' | b')' | b'+' | b'-' | b'*' => fallback,
        _ => SyntaxErrorKind::IllegalCharacter(b as char),
    }
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn error(&self, kind: SyntaxErrorKind) -> ExprError {
        ExprError::Syntax { pos: self.pos, kind }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let lhs = self.expr()?;
                let op = match self.peek() {
                    Some(b) if Op::from_symbol(b as char).is_some() => {
                        self.pos += 1;
                        Op::from_symbol(b as char).unwrap()
                    }
                    Some(b')') => return Err(self.error(SyntaxErrorKind::MissingOperator)),
                    None => return Err(self.error(SyntaxErrorKind::UnbalancedParens)),
                    Some(b) => return Err(self.error(illegal_or(b, SyntaxErrorKind::MissingOperator))),
                };
                let rhs = self.expr()?;
                match self.peek() {
                    Some(b')') => self.pos += 1,
                    None => return Err(self.error(SyntaxErrorKind::UnbalancedParens)),
                    Some(b'+' | b'-' | b'*') => return Err(self.error(SyntaxErrorKind::BareOperator)),
                    Some(b) => return Err(self.error(illegal_or(b, SyntaxErrorKind::UnbalancedParens))),
                }
                Ok(Expr::Node(op, Box::new(lhs), Box::new(rhs)))
            }
            Some(b'-' | b'0'..=b'9') => self.integer(),
            None | Some(b')' | b'+' | b'*') => Err(self.error(SyntaxErrorKind::EmptyOperand)),
            Some(b) => Err(self.error(SyntaxErrorKind::IllegalCharacter(b as char))),
        }
    }

    fn integer(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        let negative = self.peek() == Some(b'-');
        if negative {
            self.pos += 1;
        }
        let digits_start = self.pos;
        while matches!(self.peek(), Some(b'0'..=b'9')) {
            self.pos += 1;
        }
        if self.pos == digits_start {
            return Err(match self.peek() {
                Some(b) => self.error(illegal_or(b, SyntaxErrorKind::EmptyOperand)),
                None => self.error(SyntaxErrorKind::EmptyOperand),
            });
        }
        // Accumulate negatively so that i64::MIN is representable.
        let mut value: i64 = 0;
        for &b in &self.bytes[digits_start..self.pos] {
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_sub(i64::from(b - b'0')))
                .ok_or(ExprError::Syntax { pos: start, kind: SyntaxErrorKind::IntegerOverflow })?;
        }
        if !negative {
            value = value
                .checked_neg()
                .ok_or(ExprError::Syntax { pos: start, kind: SyntaxErrorKind::IntegerOverflow })?;
        }
        Ok(Expr::Leaf(value))
    }
}

#[derive(Clone, Copy)]
enum Side {
    Left,
    Right,
}

impl Expr {
    pub fn node(op: Op, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Node(op, Box::new(lhs), Box::new(rhs))
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Expr::Leaf(_))
    }

    pub fn render(&self) -> String {
        self.to_string()
    }

    /// Exact value of the expression.
    ///
    /// Panics if an intermediate value overflows `i64`; use [`Expr::checked_evaluate`]
    /// for untrusted input.
    pub fn evaluate(&self) -> i64 {
        self.checked_evaluate().expect("expression value overflows i64")
    }

    pub fn checked_evaluate(&self) -> Option<i64> {
        match self {
            Expr::Leaf(v) => Some(*v),
            Expr::Node(op, lhs, rhs) => op.checked_apply(lhs.checked_evaluate()?, rhs.checked_evaluate()?),
        }
    }

    /// Number of nested operation levels: 0 for a leaf.
    pub fn nesting_depth(&self) -> usize {
        match self {
            Expr::Leaf(_) => 0,
            Expr::Node(_, lhs, rhs) => 1 + lhs.nesting_depth().max(rhs.nesting_depth()),
        }
    }

    /// Total number of operation nodes.
    pub fn op_count(&self) -> usize {
        match self {
            Expr::Leaf(_) => 0,
            Expr::Node(_, lhs, rhs) => 1 + lhs.op_count() + rhs.op_count(),
        }
    }

    pub fn is_chain_form(&self) -> bool {
        match self {
            Expr::Leaf(_) => true,
            Expr::Node(_, lhs, rhs) => {
                if !lhs.is_leaf() && !rhs.is_leaf() {
                    return false;
                }
                lhs.is_chain_form() && rhs.is_chain_form()
            }
        }
    }

    /// Visits every leaf value, left to right.
    pub fn leaves(&self) -> Vec<i64> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves(&self, out: &mut Vec<i64>) {
        match self {
            Expr::Leaf(v) => out.push(*v),
            Expr::Node(_, lhs, rhs) => {
                lhs.collect_leaves(out);
                rhs.collect_leaves(out);
            }
        }
    }

    /// Deepest node whose children are both leaves; leftmost on ties (only
    /// possible outside chain form).
    fn innermost_path(&self) -> Option<(usize, Vec<Side>)> {
        match self {
            Expr::Leaf(_) => None,
            Expr::Node(_, lhs, rhs) if lhs.is_leaf() && rhs.is_leaf() => Some((0, Vec::new())),
            Expr::Node(_, lhs, rhs) => {
                let left = lhs.innermost_path();
                let right = rhs.innermost_path();
                let (side, (depth, mut path)) = match (left, right) {
                    (Some(l), Some(r)) if r.0 > l.0 => (Side::Right, r),
                    (Some(l), _) => (Side::Left, l),
                    (None, Some(r)) => (Side::Right, r),
                    (None, None) => unreachable!("a node always contains a reducible node"),
                };
                path.push(side);
                Some((depth + 1, path))
            }
        }
    }

    fn at_path(&self, path: &[Side]) -> &Expr {
        path.iter().rev().fold(self, |e, side| match (e, side) {
            (Expr::Node(_, lhs, _), Side::Left) => lhs,
            (Expr::Node(_, _, rhs), Side::Right) => rhs,
            (Expr::Leaf(_), _) => unreachable!("path leads through a leaf"),
        })
    }

    pub fn innermost(&self) -> Result<InnermostRef, ExprError> {
        let (_, path) = self.innermost_path().ok_or(ExprError::IsLeaf)?;
        let node = self.at_path(&path);
        Ok(InnermostRef { subexpr_text: node.render(), result: node.evaluate() })
    }

    /// Replaces the innermost operation by its value.
    pub fn solve_step(&self) -> Result<Expr, ExprError> {
        let (_, mut path) = self.innermost_path().ok_or(ExprError::IsLeaf)?;
        path.reverse();
        Ok(self.replace_at(&path))
    }

    fn replace_at(&self, path: &[Side]) -> Expr {
        match (self, path.split_first()) {
            (node, None) => Expr::Leaf(node.evaluate()),
            (Expr::Node(op, lhs, rhs), Some((Side::Left, rest))) => Expr::node(*op, lhs.replace_at(rest), (**rhs).clone()),
            (Expr::Node(op, lhs, rhs), Some((Side::Right, rest))) => Expr::node(*op, (**lhs).clone(), rhs.replace_at(rest)),
            (Expr::Leaf(_), Some(_)) => unreachable!("path leads through a leaf"),
        }
    }

    /// `[e, solve_step(e), ..., value]`, of length `nesting_depth + 1` for chain form.
    pub fn solution_chain(&self) -> Vec<Expr> {
        let mut chain = vec![self.clone()];
        while let Ok(next) = chain.last().unwrap().solve_step() {
            chain.push(next);
        }
        chain
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Leaf(v) => write!(f, "{v}"),
            Expr::Node(op, lhs, rhs) => write!(f, "({lhs}{}{rhs})", op.symbol()),
        }
    }
}

impl std::str::FromStr for Expr {
    type Err = ExprError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s)
    }
}
