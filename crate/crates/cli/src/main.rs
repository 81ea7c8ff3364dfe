//! `nesyarith` command line: dataset dumps, training, evaluation and the
//! gradient check. Exit codes: 0 success, 1 gradient check failed, 2 config
//! error, 3 runtime error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nesyarith::experiment::{
    evaluate_condition, generate_dataset, train, write_reports, Condition, ExperimentError, RunConfig, TrainEvent,
};
use nesyarith::neural::{gradient_check, GradientCorruption, ModelConfig};
use nesyarith::rng::{stream, Stream};
use nesyarith::Task;

#[derive(Parser)]
#[command(name = "nesyarith", version, about = "Hybrid neural/symbolic arithmetic solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; omitted means all defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for parallel evaluation (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory; defaults to `<output_root>/<timestamp>-<config hash>`.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a TSV dataset dump.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Destination file; defaults to `data.tsv` in the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the sub-expression solver.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Train the end-to-end baseline.
    TrainE2e {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate one or more conditions and write reports.
    Eval {
        #[command(flatten)]
        common: Common,
        /// solver, hybrid, hybrid-alt, e2e, oracle-hybrid or llm. Repeatable.
        #[arg(long, default_value = "solver")]
        condition: Vec<String>,
    },
    /// Compare analytic and finite-difference gradients on a small model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Double one gradient before comparing (should fail).
        #[arg(long)]
        corrupt: bool,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn setup(common: &Common) -> Result<(RunConfig, PathBuf), Failure> {
    let cfg = match &common.config {
        Some(path) => RunConfig::load(path, &common.overrides)?,
        None => RunConfig::from_json_with_overrides("", &common.overrides)?,
    };
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Failure::Config("config error: --threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    let run_dir = common.run_dir.clone().unwrap_or_else(|| {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        cfg.output_root.join(format!("{stamp}-{}", cfg.hash()))
    });
    fs::create_dir_all(&run_dir)?;
    fs::write(run_dir.join("config.json"), serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n")?;
    Ok((cfg, run_dir))
}

fn run_training(common: &Common, task: Task) -> Result<(), Failure> {
    let (cfg, run_dir) = setup(common)?;
    println!("run directory: {}", run_dir.display());
    let summary = train(&cfg, task, &run_dir, |event| match event {
        TrainEvent::Logged { step, loss } => println!("step {step:>6}  loss {loss:.4}"),
        TrainEvent::Validated { step, seq_acc } => println!("step {step:>6}  val seq acc {seq_acc:.1}%"),
        TrainEvent::Checkpointed { step, path } => println!("step {step:>6}  checkpoint {}", path.display()),
    })?;
    println!("trained {} steps; checkpoint {}", summary.steps, summary.checkpoint.display());
    Ok(())
}

fn gen_data(common: &Common, out: Option<&Path>) -> Result<(), Failure> {
    let (cfg, run_dir) = setup(common)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join("data.tsv"));
    let counts = generate_dataset(&cfg, &out)?;
    println!("wrote {} rows to {}", cfg.data.dump_rows, out.display());
    for c in counts {
        println!("{}\tnesting {}\t{}", c.split, c.nesting, c.rows);
    }
    Ok(())
}

fn eval(common: &Common, conditions: &[String]) -> Result<(), Failure> {
    let conditions = conditions.iter().map(|c| c.parse::<Condition>()).collect::<Result<Vec<_>, _>>()?;
    let (cfg, run_dir) = setup(common)?;
    let mut outputs = Vec::new();
    for c in conditions {
        outputs.extend(evaluate_condition(&cfg, c)?);
    }
    write_reports(&run_dir, &outputs, cfg.eval.dump_sequences)?;
    print!("{}", fs::read_to_string(run_dir.join("report.md"))?);
    println!("reports written to {}", run_dir.display());
    Ok(())
}

fn gradcheck(common: &Common, corrupt: bool) -> Result<bool, Failure> {
    let cfg = match &common.config {
        Some(path) => RunConfig::load(path, &common.overrides)?,
        None => RunConfig::from_json_with_overrides("", &common.overrides)?,
    };
    let model = ModelConfig { d_model: 16, n_heads: 2, d_ff: 32, ..cfg.model.clone() };
    let corruption = if corrupt {
        GradientCorruption::Scale { tensor: "output.weight".into(), factor: 2.0 }
    } else {
        GradientCorruption::None
    };
    let report = gradient_check(&model, &corruption, &mut stream(cfg.train.seed, Stream::ModelInit))
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let pass = report.max_rel_error <= 1e-3;
    println!(
        "{}: max relative error {:.1e} ({}; {} entries checked, {} skipped at ReLU kinks)",
        if pass { "PASS" } else { "FAIL" },
        report.max_rel_error,
        report.worst_tensor,
        report.n_checked,
        report.n_skipped_kinks
    );
    Ok(pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData { common, out } => gen_data(common, out.as_deref()).map(|_| true),
        Command::Train { common } => run_training(common, Task::SubExpr).map(|_| true),
        Command::TrainE2e { common } => run_training(common, Task::EndToEnd).map(|_| true),
        Command::Eval { common, condition } => eval(common, condition).map(|_| true),
        Command::Gradcheck { common, corrupt } => gradcheck(common, *corrupt),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Config(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
