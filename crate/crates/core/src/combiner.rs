//! Turns a multiset of solver outputs into the next, shorter expression.
//!
//! A solver output is well formed when it matches `INT "_" "(" INT OP INT ")"`
//! exactly, with `INT := "-"? digit{1,3}`. Arithmetic correctness is never
//! checked here: the combiner only votes and substitutes.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::expr::substitute_once;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedCandidate {
    pub result_text: String,
    pub target_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverCandidate {
    pub raw: String,
    pub parsed: Option<ParsedCandidate>,
}

impl SolverCandidate {
    pub fn is_well_formed(&self) -> bool {
        self.parsed.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HaltReason {
    NoWellFormed,
    ModalIllFormed,
    TargetAbsent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CombineOutcome {
    Next(String),
    Halted(HaltReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CombinerVariant {
    /// Filter well-formed candidates, then vote.
    #[default]
    Default,
    /// Vote over all candidates, then check the winner.
    Alt,
}

/// Full result of one combiner application, for traces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub outcome: CombineOutcome,
    pub chosen: Option<SolverCandidate>,
    pub n_wellformed: usize,
}

fn scan_int(s: &[u8]) -> Option<usize> {
    let sign = usize::from(s.first() == Some(&b'-'));
    let digits = s[sign..].iter().take_while(|b| b.is_ascii_digit()).count();
    (1..=3).contains(&digits).then_some(sign + digits)
}

pub fn parse_candidate(raw: &str) -> SolverCandidate {
    SolverCandidate { raw: raw.to_string(), parsed: match_candidate(raw) }
}

fn match_candidate(raw: &str) -> Option<ParsedCandidate> {
    let b = raw.as_bytes();
    let result_len = scan_int(b)?;
    if b.get(result_len) != Some(&b'_') || b.get(result_len + 1) != Some(&b'(') {
        return None;
    }
    let mut i = result_len + 2;
    i += scan_int(&b[i..])?;
    if !matches!(b.get(i), Some(b'+' | b'-' | b'*')) {
        return None;
    }
    i += 1;
    i += scan_int(&b[i..])?;
    if b.get(i) != Some(&b')') || i + 1 != b.len() {
        return None;
    }
    Some(ParsedCandidate {
        result_text: raw[..result_len].to_string(),
        target_text: raw[result_len + 1..].to_string(),
    })
}

/// Most frequent string; ties go to the lexicographically smallest.
pub fn modal<'a, I>(items: I) -> Option<&'a str>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in items {
        *counts.entry(s).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|(a, ca), (b, cb)| ca.cmp(cb).then_with(|| b.cmp(a)))
        .map(|(s, _)| s)
}

/// The candidate the default combiner would apply, if any.
pub fn select_default<'a>(input: &str, candidates: &'a [String]) -> Option<(&'a str, ParsedCandidate)> {
    let usable: Vec<(&str, ParsedCandidate)> = candidates
        .iter()
        .filter_map(|raw| match_candidate(raw).map(|p| (raw.as_str(), p)))
        .filter(|(_, p)| input.contains(&p.target_text))
        .collect();
    let winner = modal(usable.iter().map(|(raw, _)| *raw))?;
    usable.into_iter().find(|(raw, _)| *raw == winner)
}

pub fn combine(variant: CombinerVariant, input: &str, candidates: &[String]) -> Decision {
    assert!(!candidates.is_empty(), "combiner needs at least one candidate");
    let n_wellformed = candidates.iter().filter(|c| match_candidate(c).is_some()).count();
    let apply = |raw: &str, parsed: ParsedCandidate| {
        let next = substitute_once(input, &parsed.target_text, &parsed.result_text)
            .expect("target presence was checked");
        Decision {
            outcome: CombineOutcome::Next(next),
            chosen: Some(SolverCandidate { raw: raw.to_string(), parsed: Some(parsed) }),
            n_wellformed,
        }
    };
    let halt = |reason, chosen| Decision { outcome: CombineOutcome::Halted(reason), chosen, n_wellformed };

    match variant {
        CombinerVariant::Default => match select_default(input, candidates) {
            Some((raw, parsed)) => apply(raw, parsed),
            None => halt(HaltReason::NoWellFormed, None),
        },
        CombinerVariant::Alt => {
            let winner = modal(candidates.iter().map(String::as_str)).expect("non-empty");
            let candidate = parse_candidate(winner);
            match candidate.parsed {
                None => halt(HaltReason::ModalIllFormed, Some(candidate)),
                Some(ref p) if !input.contains(&p.target_text) => halt(HaltReason::TargetAbsent, Some(candidate)),
                Some(p) => apply(winner, p),
            }
        }
    }
}

pub fn combine_default(input: &str, candidates: &[String]) -> CombineOutcome {
    combine(CombinerVariant::Default, input, candidates).outcome
}

pub fn combine_alt(input: &str, candidates: &[String]) -> CombineOutcome {
    combine(CombinerVariant::Alt, input, candidates).outcome
}
