//! Few-shot prompting of an external text-completion endpoint on the same task.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::datagen::{Sampler, Task};
use crate::eval::{evaluate_with, EvalError, EvalOutput, EvalPlan, Prediction};
use crate::expr::{is_integer_literal, parse};

pub const STOP_TOKEN: &str = "<END>";
pub const ENDPOINT_VAR: &str = "LLM_ENDPOINT";
pub const API_KEY_VAR: &str = "LLM_API_KEY";
pub const MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("demo {expr} evaluates to {expected}, not {given}")]
    InvalidDemo { expr: String, expected: i64, given: i64 },
    #[error("invalid expression {0:?}")]
    InvalidExpr(String),
    #[error("network error: {0}")]
    Network(String),
    #[error("endpoint rejected credentials (HTTP {0})")]
    Auth(u16),
    #[error("rate limited after {0} attempts")]
    RateLimited(usize),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("unexpected response: {0}")]
    BadResponse(String),
    #[error("environment variable {0} is not set")]
    MissingEnv(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpec {
    pub demo_expr: String,
    pub demo_result: i64,
    pub query_expr: String,
    pub stop_token: String,
}

impl PromptSpec {
    pub fn new(demo_expr: &str, demo_result: i64, query_expr: &str) -> Self {
        Self { demo_expr: demo_expr.into(), demo_result, query_expr: query_expr.into(), stop_token: STOP_TOKEN.into() }
    }
}

/// `{demo}={result}{stop}\n{query}=`
pub fn build_prompt(spec: &PromptSpec) -> Result<String, LlmError> {
    let demo = parse(&spec.demo_expr).map_err(|_| LlmError::InvalidExpr(spec.demo_expr.clone()))?;
    let expected = demo.checked_evaluate().ok_or_else(|| LlmError::InvalidExpr(spec.demo_expr.clone()))?;
    if expected != spec.demo_result {
        return Err(LlmError::InvalidDemo { expr: spec.demo_expr.clone(), expected, given: spec.demo_result });
    }
    parse(&spec.query_expr).map_err(|_| LlmError::InvalidExpr(spec.query_expr.clone()))?;
    Ok(format!("{}={}{}\n{}=", spec.demo_expr, spec.demo_result, spec.stop_token, spec.query_expr))
}

/// The integer before the first stop token, or `None` if the completion is
/// anything else.
pub fn parse_completion(text: &str) -> Option<i64> {
    let head = text.split(STOP_TOKEN).next().unwrap_or("").trim();
    if is_integer_literal(head) {
        head.parse().ok()
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EndpointConfig {
    /// Completion URL; falls back to `LLM_ENDPOINT` when empty.
    pub url: String,
    #[serde(skip)]
    pub api_key: Option<String>,
    pub model: String,
    pub max_tokens: u32,
    pub timeout_secs: u64,
    pub max_attempts: usize,
    pub initial_backoff_ms: u64,
    /// Concurrent requests, at most 4.
    pub parallelism: usize,
    pub demo_expr: String,
    pub demo_result: i64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            url: String::new(),
            api_key: None,
            model: String::new(),
            max_tokens: 8,
            timeout_secs: 60,
            max_attempts: 3,
            initial_backoff_ms: 500,
            parallelism: 1,
            demo_expr: "((2+4)*6)".into(),
            demo_result: 36,
        }
    }
}

impl EndpointConfig {
    /// Fills the URL (if unset) and API key from the environment.
    pub fn with_env(mut self) -> Result<Self, LlmError> {
        if self.url.is_empty() {
            self.url = std::env::var(ENDPOINT_VAR).map_err(|_| LlmError::MissingEnv(ENDPOINT_VAR))?;
        }
        self.api_key = std::env::var(API_KEY_VAR).ok();
        Ok(self)
    }

    fn client(&self) -> Result<reqwest::blocking::Client, LlmError> {
        reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(self.timeout_secs))
            .build()
            .map_err(|e| LlmError::Network(e.to_string()))
    }
}

enum Attempt {
    Done(String),
    Retry(LlmError),
    Fail(LlmError),
}

fn attempt(client: &reqwest::blocking::Client, cfg: &EndpointConfig, prompt: &str) -> Attempt {
    let body = json!({
        "model": cfg.model,
        "prompt": prompt,
        "stop": [STOP_TOKEN],
        "max_tokens": cfg.max_tokens,
        "temperature": 0,
    });
    let mut req = client.post(&cfg.url).json(&body);
    if let Some(key) = &cfg.api_key {
        req = req.bearer_auth(key);
    }
    let resp = match req.send() {
        Ok(r) => r,
        Err(e) => return Attempt::Retry(LlmError::Network(e.to_string())),
    };
    let status = resp.status().as_u16();
    match status {
        401 | 403 => return Attempt::Fail(LlmError::Auth(status)),
        429 => return Attempt::Retry(LlmError::RateLimited(cfg.max_attempts)),
        500..=599 => return Attempt::Retry(LlmError::Http { status, body: resp.text().unwrap_or_default() }),
        200..=299 => {}
        _ => return Attempt::Fail(LlmError::Http { status, body: resp.text().unwrap_or_default() }),
    }
    let value: serde_json::Value = match resp.json() {
        Ok(v) => v,
        Err(e) => return Attempt::Fail(LlmError::BadResponse(e.to_string())),
    };
    match value.pointer("/choices/0/text").and_then(|t| t.as_str()) {
        Some(text) => Attempt::Done(text.to_string()),
        None => Attempt::Fail(LlmError::BadResponse(value.to_string())),
    }
}

fn query_with(client: &reqwest::blocking::Client, cfg: &EndpointConfig, prompt: &str) -> Result<String, LlmError> {
    let mut backoff = Duration::from_millis(cfg.initial_backoff_ms);
    let mut last = LlmError::Network("no attempt made".into());
    for i in 0..cfg.max_attempts.max(1) {
        if i > 0 {
            thread::sleep(backoff);
            backoff *= 2;
        }
        match attempt(client, cfg, prompt) {
            Attempt::Done(text) => return Ok(text),
            Attempt::Fail(e) => return Err(e),
            Attempt::Retry(e) => last = e,
        }
    }
    Err(last)
}

/// POSTs one completion request, retrying transient failures with
/// exponential backoff.
pub fn query_endpoint(cfg: &EndpointConfig, prompt: &str) -> Result<String, LlmError> {
    query_with(&cfg.client()?, cfg, prompt)
}

/// Results in prompt order, with at most `cfg.parallelism` (capped at 4) requests in flight.
pub fn query_many(cfg: &EndpointConfig, prompts: &[String]) -> Vec<Result<String, LlmError>> {
    let client = match cfg.client() {
        Ok(c) => c,
        Err(e) => return prompts.iter().map(|_| Err(LlmError::Network(e.to_string()))).collect(),
    };
    let workers = cfg.parallelism.clamp(1, MAX_IN_FLIGHT).min(prompts.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Vec<Mutex<Option<Result<String, LlmError>>>> = prompts.iter().map(|_| Mutex::new(None)).collect();
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(prompt) = prompts.get(i) else { break };
                *results[i].lock().expect("no poisoned slot") = Some(query_with(&client, cfg, prompt));
            });
        }
    });
    results.into_iter().map(|m| m.into_inner().expect("no poisoned slot").expect("every slot filled")).collect()
}

/// Scores the endpoint on final values. Unparseable completions are kept as
/// raw text, so they count as wrong but still receive character credit.
pub fn evaluate_llm(cfg: &EndpointConfig, sampler: &Sampler, plan: &EvalPlan, seed: u64) -> Result<EvalOutput, EvalError> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| EvalError::Other(e.to_string()))?;
    pool.install(|| {
        evaluate_with("llm", sampler, Task::EndToEnd, plan, seed, |batch, _| {
            let prompts = batch
                .iter()
                .map(|ex| build_prompt(&PromptSpec::new(&cfg.demo_expr, cfg.demo_result, &ex.input_text)))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| EvalError::Other(e.to_string()))?;
            query_many(cfg, &prompts)
                .into_iter()
                .map(|r| {
                    let text = r.map_err(|e| EvalError::Other(e.to_string()))?;
                    Ok(Prediction::Output(match parse_completion(&text) {
                        Some(v) => v.to_string(),
                        None => text.split(STOP_TOKEN).next().unwrap_or("").trim().to_string(),
                    }))
                })
                .collect()
        })
    })
}
