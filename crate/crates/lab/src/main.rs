use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use fpd_lab::commands::{cmd_distill, cmd_eval, cmd_gen_world, cmd_gradcheck, cmd_train_teacher, render_report, Run};
use fpd_lab::config::{EvalModel, RawConfig};

#[derive(Parser)]
#[command(name = "fpdlab", about = "Masked diffusion teacher and one-step distillation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file with `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for inputs and outputs.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Global seed; per-stage seeds default to it.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config key, e.g. `--set distill.estimator=soft`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build and freeze the codebook, decoder, backbone and dataset.
    GenWorld(Common),
    /// Pretrain the masked-diffusion teacher.
    TrainTeacher(Common),
    /// Distill the one-step student from the teacher.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Continue from the student checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Sample a model and write the report and sample dump.
    Eval(Common),
    /// Finite-difference check of every differentiable operator.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn raw_config(c: &Common) -> Result<RawConfig> {
    let mut raw = match &c.config {
        Some(p) => RawConfig::load(p)?,
        None => RawConfig::default(),
    };
    if let Some(seed) = c.seed {
        raw.set(&format!("seed={seed}"))?;
    }
    for s in &c.overrides {
        raw.set(s)?;
    }
    Ok(raw)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenWorld(c) => {
            let path = cmd_gen_world(&Run::new(&raw_config(&c)?, &c.out)?)?;
            println!("wrote {}", path.display());
        }
        Command::TrainTeacher(c) => {
            let loss = cmd_train_teacher(&Run::new(&raw_config(&c)?, &c.out)?)?;
            println!("final teacher loss {loss}");
        }
        Command::Distill { common, resume } => {
            let metrics = cmd_distill(&Run::new(&raw_config(&common)?, &common.out)?, resume)?;
            if let Some(m) = metrics.last() {
                println!("step {} drift loss {} residual {}", m.step, m.drift_loss, m.fp_residual);
            }
        }
        Command::Eval(c) => {
            let r = Run::new(&raw_config(&c)?, &c.out)?;
            let report = cmd_eval(&r)?;
            let model = match r.cfg.eval.model {
                EvalModel::Teacher => "teacher",
                EvalModel::Student => "student",
            };
            print!("{}", render_report(&report, model, r.cfg.eval.steps));
        }
        Command::Gradcheck { common, inject_fault } => {
            let cfg = raw_config(&common)?.build()?;
            let (rows, table) = cmd_gradcheck(cfg.seed, inject_fault.as_deref())?;
            print!("{table}");
            return Ok(rows.iter().all(|r| r.passed()));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("gradient check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
