//! `fatsim` CLI: run federated adversarial training experiments, evaluate
//! checkpoints under attack suites, compare runs, and export plot-ready data.

mod curves;
mod overrides;

use clap::{Parser, Subcommand};
use fatsim_core::nn::load_checkpoint;
use fatsim_core::orchestrator::{
    evaluate_model, read_records, run_experiment, ExperimentConfig, ExperimentError, RoundRecord,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

// Distinct exit codes per failure class.
const EXIT_CONFIG: u8 = 2;
const EXIT_DATASET: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

#[derive(Parser)]
#[command(
    name = "fatsim",
    about = "Deterministic federated adversarial training simulator",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Dotted-key overrides applied before validation, e.g.
        /// --set rounds=10 --set attack.kind=none
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory for metrics.jsonl and checkpoints.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint with the evaluators configured in a config.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Surrogate checkpoint for a black-box transfer evaluation.
        #[arg(long)]
        surrogate: Option<PathBuf>,
        /// Write the report as JSON here in addition to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print metric deltas between runs at matched evaluation rounds.
    Compare {
        /// Metrics files; the first is the baseline.
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Export metrics files as tidy CSV (run_id, round, metric, value).
    ExportCurves {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_for(err: &ExperimentError) -> u8 {
    match err {
        ExperimentError::Config(_) => EXIT_CONFIG,
        ExperimentError::DatasetMissing(_) => EXIT_DATASET,
        ExperimentError::Runtime(_) | ExperimentError::Io(_) => EXIT_RUNTIME,
    }
}

fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        ExperimentError::Config(format!("cannot read config {}: {e}", path.display()))
    })?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
    for entry in overrides {
        overrides::apply(&mut value, entry).map_err(ExperimentError::Config)?;
    }
    let cfg = ExperimentConfig::from_value(value)?;
    cfg.validate()?;
    Ok(cfg)
}

fn print_eval_line(rec: &RoundRecord) {
    if !rec.has_eval() {
        return;
    }
    let mut line = format!("round {:>5}", rec.round);
    for (name, value) in rec.metric_values() {
        line.push_str(&format!("  {name}={value:.4}"));
    }
    if rec.skipped {
        line.push_str("  [skipped]");
    }
    println!("{line}");
}

fn cmd_run(config: &Path, overrides: &[String], out: &Path) -> Result<(), ExperimentError> {
    let cfg = load_config(config, overrides)?;
    let records = run_experiment(cfg, Some(out), print_eval_line)?;
    let evals = records.iter().filter(|r| r.has_eval()).count();
    let skipped = records.iter().filter(|r| r.skipped).count();
    println!(
        "done: {} rounds, {evals} evaluations, {skipped} skipped rounds; metrics at {}",
        records.len(),
        out.join("metrics.jsonl").display()
    );
    Ok(())
}

fn cmd_eval(
    ckpt: &Path,
    config: &Path,
    surrogate: Option<&Path>,
    out: Option<&Path>,
    overrides: &[String],
) -> Result<(), ExperimentError> {
    let cfg = load_config(config, overrides)?;
    let (model, round) = load_checkpoint(ckpt)
        .map_err(|e| ExperimentError::Config(format!("checkpoint: {e}")))?;
    if model.arch.input != cfg.arch.input || model.arch.classes != cfg.arch.classes {
        return Err(ExperimentError::Config(format!(
            "checkpoint arch {:?}/{} does not match config arch {:?}/{}",
            model.arch.input, model.arch.classes, cfg.arch.input, cfg.arch.classes
        )));
    }
    let surrogate_model = match surrogate {
        Some(path) => {
            let (s, _) = load_checkpoint(path)
                .map_err(|e| ExperimentError::Config(format!("surrogate: {e}")))?;
            if s.arch.input != cfg.arch.input || s.arch.classes != cfg.arch.classes {
                return Err(ExperimentError::Config(
                    "surrogate arch does not match config arch".into(),
                ));
            }
            Some(s)
        }
        None => None,
    };
    let (_, test) = cfg.load_datasets()?;
    let outcome = evaluate_model(
        &model,
        &test,
        None,
        &cfg.eval_pgd,
        cfg.eval_logit_scale_t,
        surrogate_model.as_ref(),
        cfg.seed,
        cfg.eval_batch_size,
    )?;
    println!("checkpoint: {} (round {round})", ckpt.display());
    println!("clean_acc            {:.4}", outcome.clean_acc);
    println!("adv_acc_pgd          {:.4}", outcome.adv_pgd);
    if let Some(v) = outcome.adv_logit_scaled {
        println!("adv_acc_logit_scaled {v:.4}");
    }
    if let Some(v) = outcome.adv_transfer {
        println!("adv_acc_transfer     {v:.4}");
    }
    if let Some(path) = out {
        let mut report = serde_json::json!({
            "checkpoint": ckpt.display().to_string(),
            "round": round,
            "clean_acc": outcome.clean_acc,
            "adv_acc_pgd": outcome.adv_pgd,
        });
        if let Some(v) = outcome.adv_logit_scaled {
            report["adv_acc_logit_scaled"] = serde_json::json!(v);
        }
        if let Some(v) = outcome.adv_transfer {
            report["adv_acc_transfer"] = serde_json::json!(v);
        }
        std::fs::write(path, serde_json::to_string_pretty(&report).expect("report"))?;
    }
    Ok(())
}

fn cmd_compare(files: &[PathBuf]) -> Result<(), ExperimentError> {
    let mut runs = Vec::new();
    for path in files {
        let text = std::fs::read_to_string(path)?;
        let records = read_records(&text).map_err(ExperimentError::Config)?;
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run").to_string();
        runs.push((id, records));
    }
    let (base_id, base) = &runs[0];
    for (other_id, other) in &runs[1..] {
        println!("# {other_id} vs {base_id}");
        for rec in base.iter().filter(|r| r.has_eval()) {
            let Some(peer) = other.iter().find(|r| r.round == rec.round && r.has_eval()) else {
                continue;
            };
            let mut line = format!("round {:>5}", rec.round);
            for (name, a) in rec.metric_values() {
                if let Some((_, b)) = peer.metric_values().iter().find(|(n, _)| *n == name) {
                    line.push_str(&format!("  {name}: {a:.4} -> {b:.4} ({:+.4})", b - a));
                }
            }
            println!("{line}");
        }
    }
    Ok(())
}

fn run_command(cli: Cli) -> Result<(), ExperimentError> {
    match &cli.command {
        Command::Run { config, overrides, out } => cmd_run(config, overrides, out),
        Command::Eval { ckpt, config, surrogate, out, overrides } => {
            cmd_eval(ckpt, config, surrogate.as_deref(), out.as_deref(), overrides)
        }
        Command::Compare { files } => cmd_compare(files),
        Command::ExportCurves { files, out } => curves::export(files, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run_command(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_for(&err))
        }
    }
}
