//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any criterion fails. The two long training criteria (9, 10)
//! only run with `-- --ignored`; set `NESYARITH_SOFT_RUNS` to a directory
//! holding `label/`, `sinusoidal/` and `e2e/` checkpoints to reuse them.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;

use nesyarith::combiner::{combine, CombineOutcome, CombinerVariant};
use nesyarith::datagen::{sample_expression, GenConfig, Task};
use nesyarith::eval::{char_accuracy, seq_accuracy, EvalRecord, Prediction};
use nesyarith::experiment::{evaluate_condition, train, Condition, RunConfig};
use nesyarith::expr::{Expr, Op};
use nesyarith::hybrid::{run_hybrid, HybridOptions, OracleErrorModel, OracleSolver, Outcome};
use nesyarith::llm::{build_prompt, parse_completion, LlmError, PromptSpec};
use nesyarith::neural::{gradient_check, label_positions, sinusoidal_table, GradientCorruption, Model, ModelConfig, PeMode};
use nesyarith::rng::{keyed, Stream};
use nesyarith::vocab::Vocab;

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(label: &str) -> rand_chacha::ChaCha8Rng {
    keyed(2024, Stream::Eval, label, 0)
}

fn within(limit: Duration, elapsed: Duration, v: Verdict) -> Verdict {
    match v {
        Ok(d) if elapsed > limit => Err(format!("{d}; took {elapsed:.1?}, limit {limit:?}")),
        other => other,
    }
}

fn c1_oracle_equivalence() -> Verdict {
    let start = Instant::now();
    let solver = OracleSolver::new(OracleErrorModel::exact());
    let opts = HybridOptions::new(CombinerVariant::Default, 1).without_trace();
    let failures: usize = (1..=10usize)
        .into_par_iter()
        .map(|nesting| {
            let mut r = keyed(1, Stream::Eval, "c1", nesting as u64);
            let cfg = GenConfig::default().with_nesting(nesting);
            (0..1000)
                .filter(|_| {
                    let expr = sample_expression(&mut r, &cfg).unwrap();
                    let trace = run_hybrid(&solver, &opts, &expr.render(), &mut r).unwrap();
                    !(trace.outcome == Outcome::Solved { value: reference_value(&expr) } && trace.iterations <= nesting)
                })
                .count()
        })
        .sum();
    within(Duration::from_secs(10), start.elapsed(), check(failures == 0, format!("{failures}/10000 runs not solved exactly within nesting steps")))
}

fn reference_value(e: &Expr) -> i64 {
    match e {
        Expr::Leaf(v) => *v,
        Expr::Node(op, l, r) => {
            let (a, b) = (reference_value(l), reference_value(r));
            match op {
                Op::Add => a + b,
                Op::Sub => a - b,
                Op::Mul => a * b,
            }
        }
    }
}

/// Chain form: every node has at most one non-leaf child. Returns the value
/// and every intermediate result.
fn chain_values(e: &Expr, out: &mut Vec<i64>) -> Option<i64> {
    match e {
        Expr::Leaf(v) => Some(*v),
        Expr::Node(op, l, r) => {
            if !l.is_leaf() && !r.is_leaf() {
                return None;
            }
            let (a, b) = (chain_values(l, out)?, chain_values(r, out)?);
            let v = match op {
                Op::Add => a + b,
                Op::Sub => a - b,
                Op::Mul => a * b,
            };
            out.push(v);
            Some(v)
        }
    }
}

fn leaves(e: &Expr, out: &mut Vec<i64>) {
    match e {
        Expr::Leaf(v) => out.push(*v),
        Expr::Node(_, l, r) => {
            leaves(l, out);
            leaves(r, out);
        }
    }
}

fn c2_generator_constraints() -> Verdict {
    let start = Instant::now();
    let bad: Vec<String> = (1..=10usize)
        .into_par_iter()
        .flat_map_iter(|nesting| {
            let mut r = keyed(2, Stream::Eval, "c2", nesting as u64);
            let cfg = GenConfig::default().with_nesting(nesting);
            (0..10_000).filter_map(move |_| {
                let e = sample_expression(&mut r, &cfg).unwrap();
                let (mut inter, mut leaf) = (Vec::new(), Vec::new());
                let chain = chain_values(&e, &mut inter);
                leaves(&e, &mut leaf);
                let ok = chain.is_some()
                    && inter.len() == nesting
                    && leaf.iter().all(|v| (0..=99).contains(v))
                    && inter.iter().all(|v| (-99..=99).contains(v));
                (!ok).then(|| e.render())
            })
        })
        .collect();
    let detail = match bad.first() {
        None => "100000 samples valid".to_string(),
        Some(first) => format!("{} invalid samples, e.g. {first}", bad.len()),
    };
    within(Duration::from_secs(30), start.elapsed(), check(bad.is_empty(), detail))
}

/// Independent restatement of both voting rules over a multiset given as counts.
fn combiner_oracle(variant: CombinerVariant, input: &str, alphabet: &[&str], counts: &[usize]) -> Option<String> {
    let well_formed = |s: &str| -> Option<(String, String)> {
        let (result, target) = s.split_once('_')?;
        let ok_int = |t: &str| {
            let d = t.strip_prefix('-').unwrap_or(t);
            (1..=3).contains(&d.len()) && d.bytes().all(|b| b.is_ascii_digit())
        };
        let inner = target.strip_prefix('(')?.strip_suffix(')')?;
        let at = inner.char_indices().skip(1).find(|(_, c)| "+-*".contains(*c))?.0;
        (ok_int(result) && ok_int(&inner[..at]) && ok_int(&inner[at + 1..])).then(|| (result.to_string(), target.to_string()))
    };
    fn best<'a>(items: Vec<(&'a str, usize)>) -> Option<&'a str> {
        let mut v: Vec<_> = items.into_iter().filter(|(_, c)| *c > 0).collect();
        v.sort_by(|(a, ca), (b, cb)| cb.cmp(ca).then(a.cmp(b)));
        v.first().map(|(s, _)| *s)
    }
    let apply = |s: &str| {
        let (result, target) = well_formed(s).unwrap();
        let at = input.find(&target).unwrap();
        format!("{}{}{}", &input[..at], result, &input[at + target.len()..])
    };
    let pairs: Vec<(&str, usize)> = alphabet.iter().copied().zip(counts.iter().copied()).collect();
    match variant {
        CombinerVariant::Default => {
            let kept = pairs.into_iter().filter(|(s, _)| well_formed(s).is_some_and(|(_, t)| input.contains(&t))).collect();
            best(kept).map(apply)
        }
        CombinerVariant::Alt => {
            let winner = best(pairs)?;
            well_formed(winner).filter(|(_, t)| input.contains(t.as_str())).map(|_| apply(winner))
        }
    }
}

fn c3_combiner_enumeration() -> Verdict {
    let input = "(((2+3)*4)-7)";
    let alphabets: [[&str; 3]; 3] = [
        ["5_(2+3)", "7_(8+1)", "5_(2+3"],
        ["5_(2+3)", "6_(2+3)", "x"],
        ["5_(2+3)", "9_(9+9)", "(2+3)"],
    ];
    let (mut cases, mut mismatches, mut implication_failures) = (0, Vec::new(), 0);
    for alphabet in &alphabets {
        for a in 0..=6usize {
            for b in 0..=6 - a {
                for c in 0..=6 - a - b {
                    if a + b + c == 0 {
                        continue;
                    }
                    let counts = [a, b, c];
                    let bag: Vec<String> =
                        alphabet.iter().zip(counts).flat_map(|(s, n)| std::iter::repeat_n(s.to_string(), n)).collect();
                    let mut outcomes = BTreeMap::new();
                    for variant in [CombinerVariant::Default, CombinerVariant::Alt] {
                        let expected = combiner_oracle(variant, input, alphabet, &counts);
                        for order in [bag.clone(), bag.iter().rev().cloned().collect()] {
                            cases += 1;
                            let got = match combine(variant, input, &order).outcome {
                                CombineOutcome::Next(t) => Some(t),
                                CombineOutcome::Halted(_) => None,
                            };
                            if got != expected {
                                mismatches.push(format!("{variant:?} {order:?}: {got:?} vs {expected:?}"));
                            }
                        }
                        outcomes.insert(variant == CombinerVariant::Alt, expected.is_none());
                    }
                    if outcomes[&false] && !outcomes[&true] {
                        implication_failures += 1;
                    }
                }
            }
        }
    }
    check(
        mismatches.is_empty() && implication_failures == 0,
        format!(
            "{cases} cases, {} mismatches{}, {implication_failures} default-halts-but-alt-proceeds",
            mismatches.len(),
            mismatches.first().map(|m| format!(" (first: {m})")).unwrap_or_default()
        ),
    )
}

fn halted_fraction(n_outputs: usize, runs: usize) -> f64 {
    let solver = OracleSolver::new(OracleErrorModel { p_malformed: 0.3, ..OracleErrorModel::exact() });
    let opts = HybridOptions::new(CombinerVariant::Default, n_outputs).without_trace();
    let halted: usize = (0..runs)
        .into_par_iter()
        .map(|i| {
            let mut r = keyed(4, Stream::Oracle, &format!("c4/N{n_outputs}"), i as u64);
            let expr = sample_expression(&mut r, &GenConfig::default().with_nesting(10)).unwrap();
            usize::from(run_hybrid(&solver, &opts, &expr.render(), &mut r).unwrap().is_halted())
        })
        .sum();
    halted as f64 / runs as f64
}

fn c4_halting_monotonicity() -> Verdict {
    let start = Instant::now();
    let runs = 10_000;
    let ns = [1usize, 20, 100];
    let h: Vec<f64> = ns.iter().map(|&n| halted_fraction(n, runs)).collect();
    let sigma = |p: f64| (p * (1.0 - p) / runs as f64).sqrt();
    let ratio_ok = h[0] >= 5.0 * h[2];
    let monotone = h.windows(2).all(|w| w[1] <= w[0] + 2.0 * (sigma(w[0]).powi(2) + sigma(w[1]).powi(2)).sqrt());
    let detail = format!("halted% N=1 {:.2}, N=20 {:.2}, N=100 {:.2}", 100.0 * h[0], 100.0 * h[1], 100.0 * h[2]);
    within(Duration::from_secs(120), start.elapsed(), check(ratio_ok && monotone, detail))
}

fn c5_gradient_check() -> Verdict {
    let start = Instant::now();
    let cfg = ModelConfig { d_model: 16, n_heads: 2, d_ff: 32, ..ModelConfig::default() };
    let mut worst = (0.0f64, String::new());
    let mut skipped = 0;
    for seed in 0..3 {
        let report = gradient_check(&cfg, &GradientCorruption::None, &mut keyed(seed, Stream::ModelInit, "c5", 0)).map_err(|e| e.to_string())?;
        skipped += report.n_skipped_kinks;
        if report.max_rel_error > worst.0 {
            worst = (report.max_rel_error, report.worst_tensor);
        }
    }
    let control = gradient_check(
        &cfg,
        &GradientCorruption::Scale { tensor: "output.weight".into(), factor: 2.0 },
        &mut keyed(0, Stream::ModelInit, "c5", 0),
    )
    .map_err(|e| e.to_string())?;
    let detail = format!(
        "max rel error {:.1e} ({}) over 3 seeds, {skipped} kink entries skipped; corrupted control {:.1e}",
        worst.0, worst.1, control.max_rel_error
    );
    within(Duration::from_secs(60), start.elapsed(), check(worst.0 <= 1e-3 && control.max_rel_error > 1e-3, detail))
}

fn c6_positional_encodings() -> Verdict {
    let (m, d) = (150, 128);
    let table = sinusoidal_table::<f64>(m, d);
    let mut max_dev = 0.0f64;
    for pos in 0..m {
        for col in 0..d {
            let freq = (10000f64).powf(-((col - col % 2) as f64) / d as f64);
            let want = if col % 2 == 0 { (pos as f64 * freq).sin() } else { (pos as f64 * freq).cos() };
            max_dev = max_dev.max((table[[pos, col]] - want).abs());
        }
    }
    let f32_table = sinusoidal_table::<f32>(m, d);
    let f32_dev = table.iter().zip(f32_table.iter()).map(|(a, b)| (a - *b as f64).abs()).fold(0.0, f64::max);

    let mut r = rng("c6");
    let mut draws_ok = true;
    for _ in 0..2000 {
        let m = r.random_range(1..=150);
        let k = r.random_range(0..=m);
        let p = label_positions(&mut r, k, m).unwrap();
        draws_ok &= p.len() == k && p.windows(2).all(|w| w[0] < w[1]) && p.iter().all(|&x| x < m);
    }
    draws_ok &= label_positions(&mut r, 4, 3).is_err();

    let mut pairs = BTreeMap::new();
    for _ in 0..10_000 {
        let p = label_positions(&mut r, 2, 10).unwrap();
        *pairs.entry((p[0], p[1])).or_insert(0usize) += 1;
    }
    let expected = 10_000.0 / 45.0;
    let chi2: f64 = (0..10)
        .flat_map(|a| (a + 1..10).map(move |b| (a, b)))
        .map(|k| (*pairs.get(&k).unwrap_or(&0) as f64 - expected).powi(2) / expected)
        .sum();

    let text = "(((12+34)*56)-78)";
    let ids = Vocab.encode(text).unwrap();
    let k = ids.len();
    let label_cfg = ModelConfig { pe_mode: PeMode::Label, max_positions: k, ..ModelConfig::default() };
    let sin_cfg = ModelConfig { pe_mode: PeMode::Sinusoidal, ..label_cfg.clone() };
    let label: Model<f32> = Model::init(label_cfg, &mut rng("c6-model"));
    let sinusoidal = Model::new(sin_cfg, label.params.clone());
    let same = label.embed(&ids, &mut rng("a")).unwrap() == sinusoidal.embed(&ids, &mut rng("b")).unwrap();

    check(
        max_dev <= 1e-6 && f32_dev <= 1e-6 && draws_ok && chi2 < 78.7 && same,
        format!(
            "formula deviation {max_dev:.1e} (f32 {f32_dev:.1e}); draws sorted/distinct/in range: {draws_ok}; \
             pair chi2 {chi2:.1} (44 df); label m=k equals sinusoidal bit-exactly: {same}"
        ),
    )
}

fn c7_metrics() -> Verdict {
    let cases: [(Prediction, &str, f64, f64); 6] = [
        (Prediction::Output("15_(21-6)".into()), "15_(21-6)", 1.0, 1.0),
        (Prediction::Output("31".into()), "30", 0.5, 0.0),
        (Prediction::Output("3".into()), "30", 0.5, 0.0),
        (Prediction::Output("9".into()), "9", 1.0, 1.0),
        (Prediction::Output("9 ".into()), "9", 0.5, 0.0),
        (Prediction::Halted, "9", 0.0, 0.0),
    ];
    let mut bad = Vec::new();
    for (p, target, c, s) in &cases {
        if p.score(target) != (*c, *s) {
            bad.push(format!("{p:?} vs {target}: {:?}", p.score(target)));
        }
    }
    let direct = char_accuracy("31", "30") == 0.5 && seq_accuracy("9 ", "9") == 0.0 && seq_accuracy("9", "9") == 1.0;
    check(bad.is_empty() && direct, format!("{} examples, mismatches: {bad:?}", cases.len() + 3))
}

fn c8_determinism() -> Verdict {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = RunConfig::from_json_with_overrides("", &["train.steps=2000".into(), "train.seed=7".into()]).map_err(|e| e.to_string())?;
    let mut artifacts = Vec::new();
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        train(&cfg, Task::SubExpr, &run, |_| {}).map_err(|e| e.to_string())?;
        artifacts.push((fs::read(run.join("model.ckpt")).unwrap(), fs::read(run.join("loss.csv")).unwrap()));
    }
    let same_ckpt = artifacts[0].0 == artifacts[1].0;
    let same_loss = artifacts[0].1 == artifacts[1].1;
    check(
        same_ckpt && same_loss,
        format!(
            "checkpoints identical: {same_ckpt} ({} bytes), loss logs identical: {same_loss} ({} rows); {:.0?}",
            artifacts[0].0.len(),
            String::from_utf8_lossy(&artifacts[0].1).lines().count() - 1,
            start.elapsed()
        ),
    )
}

fn c11_llm_offline() -> Verdict {
    let prompt = build_prompt(&PromptSpec::new("((2+4)*6)", 36, "(((3*2)-2)+5)")).map_err(|e| e.to_string())?;
    let prompt_ok = prompt == "((2+4)*6)=36<END>\n(((3*2)-2)+5)=";
    let demo_checked = matches!(build_prompt(&PromptSpec::new("(2+2)", 5, "(1+1)")), Err(LlmError::InvalidDemo { .. }));
    let parse_ok = parse_completion("9<END>") == Some(9)
        && parse_completion("  -12") == Some(-12)
        && parse_completion("the answer is 9").is_none()
        && (-99..=99).all(|v| parse_completion(&format!("{v}<END>")) == Some(v));
    check(
        prompt_ok && demo_checked && parse_ok,
        format!("prompt byte-exact: {prompt_ok}; invalid demo rejected: {demo_checked}; completion parsing: {parse_ok}; live endpoint not exercised"),
    )
}

// Long-running criteria.

fn soft_root() -> PathBuf {
    std::env::var_os("NESYARITH_SOFT_RUNS")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("soft-runs"))
}

fn base_config() -> RunConfig {
    RunConfig::from_json_with_overrides("", &["train.steps=20000".into()]).expect("defaults are valid")
}

/// Trains into `root/name` unless a checkpoint is already there.
fn ensure_trained(name: &str, task: Task, overrides: &[&str]) -> Result<PathBuf, String> {
    let run = soft_root().join(name);
    let ckpt = run.join("model.ckpt");
    if !ckpt.exists() {
        let overrides: Vec<String> = ["train.steps=20000"].iter().chain(overrides).map(|s| s.to_string()).collect();
        let cfg = RunConfig::from_json_with_overrides("", &overrides).map_err(|e| e.to_string())?;
        train(&cfg, task, &run, |_| {}).map_err(|e| e.to_string())?;
    }
    Ok(ckpt)
}

fn mean_seq(records: &[EvalRecord], levels: impl Fn(usize) -> bool) -> f64 {
    let picked: Vec<f64> = records.iter().filter(|r| levels(r.nesting)).map(|r| r.seq_acc_mean).collect();
    picked.iter().sum::<f64>() / picked.len() as f64
}

fn solver_records(ckpt: PathBuf) -> Result<Vec<EvalRecord>, String> {
    let mut cfg = base_config();
    cfg.eval.checkpoint = Some(ckpt);
    let out = evaluate_condition(&cfg, Condition::Solver).map_err(|e| e.to_string())?;
    Ok(out.into_iter().flat_map(|o| o.records).collect())
}

fn per_level(records: &[EvalRecord]) -> String {
    records.iter().map(|r| format!("{:.1}", r.seq_acc_mean)).collect::<Vec<_>>().join("/")
}

fn c9_desk_learning() -> Verdict {
    let label = solver_records(ensure_trained("label", Task::SubExpr, &[])?)?;
    let sinusoidal = solver_records(ensure_trained("sinusoidal", Task::SubExpr, &["model.pe_mode=sinusoidal"])?)?;
    let in_dist = mean_seq(&label, |n| n <= 2);
    let (l_ood, s_ood) = (mean_seq(&label, |n| n >= 4), mean_seq(&sinusoidal, |n| n >= 4));
    check(
        in_dist >= 90.0 && l_ood - s_ood >= 20.0,
        format!(
            "label in-distribution seq acc {in_dist:.1}%; nesting>=4 mean label {l_ood:.1}% vs sinusoidal {s_ood:.1}% \
             (per level label {}, sinusoidal {}); curves in {}",
            per_level(&label),
            per_level(&sinusoidal),
            soft_root().display()
        ),
    )
}

fn c10_e2e_contrast() -> Verdict {
    let solver = ensure_trained("label", Task::SubExpr, &[])?;
    let e2e = ensure_trained("e2e", Task::EndToEnd, &[])?;
    let mut cfg = base_config();
    cfg.eval.checkpoint = Some(solver);
    cfg.eval.e2e_checkpoint = Some(e2e);
    cfg.eval.nesting_list = vec![5];
    cfg.eval.n_outputs = vec![20];
    let hybrid = evaluate_condition(&cfg, Condition::Hybrid).map_err(|e| e.to_string())?;
    let baseline = evaluate_condition(&cfg, Condition::E2E).map_err(|e| e.to_string())?;
    let (h, b) = (hybrid[0].records[0].seq_acc_mean, baseline[0].records[0].seq_acc_mean);
    check(h - b >= 30.0, format!("nesting 5 seq acc: hybrid (N=20) {h:.1}% vs end-to-end {b:.1}%"))
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let run_long = args.iter().any(|a| a == "--ignored" || a == "--include-ignored");
    let filter = args.iter().find(|a| !a.starts_with('-'));
    if args.iter().any(|a| a == "--list") {
        return;
    }

    type Criterion = (u32, &'static str, fn() -> Verdict, bool);
    let criteria: [Criterion; 11] = [
        (1, "oracle equivalence", c1_oracle_equivalence, false),
        (2, "generator constraints", c2_generator_constraints, false),
        (3, "combiner brute-force equivalence", c3_combiner_enumeration, false),
        (4, "halting monotonicity", c4_halting_monotonicity, false),
        (5, "gradient check", c5_gradient_check, false),
        (6, "positional-encoding exactness", c6_positional_encodings, false),
        (7, "metric unit suite", c7_metrics, false),
        (8, "training determinism", c8_determinism, false),
        (9, "desk-scale learning", c9_desk_learning, true),
        (10, "end-to-end contrast", c10_e2e_contrast, true),
        (11, "LLM harness (offline)", c11_llm_offline, false),
    ];

    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (id, name, run, long) in criteria {
        if filter.is_some_and(|f| !name.contains(f.as_str()) && *f != id.to_string()) {
            continue;
        }
        if long && !run_long {
            println!("criterion {id:>2} {name}: SKIP (long training run; use -- --ignored)");
            continue;
        }
        let start = Instant::now();
        let verdict = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(format!("panicked: {}", p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(d) => println!("criterion {id:>2} {name}: PASS {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {id:>2} {name}: FAIL {d} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
