use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use promptkd::harness::{
    parse_override_args, run_ablation, run_stages, Axis, Experiment, ExperimentConfig, RunManifest, Stage, StageStatus,
};
use promptkd::Error;

/// Two-stage prompt distillation on a synthetic vision-language task.
#[derive(Parser)]
#[command(name = "promptkd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` config file applied over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Reuse valid artifacts from earlier invocations.
    #[arg(long)]
    resume: bool,
    /// Config overrides as `--section.key value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0.., value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Stage I: pretrain the backbone if needed, then learn teacher prompts.
    Pretrain(Common),
    /// Encode every class name once with the teacher and store the table.
    Cache(Common),
    /// Stage II: distill the teacher into the student on unlabeled images.
    Distill(Common),
    /// Evaluate the distilled student and write the report.
    Eval(Common),
    /// All four stages for every seed.
    Pipeline(Common),
    /// Sweep one axis, holding everything else fixed.
    Ablate {
        /// kd_form, method, projector_layers, temperature, images_per_class, teacher_capacity or epochs.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values; the axis defaults when omitted.
        #[arg(long)]
        values: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Rebuild the report from existing evaluations.
    Report(Common),
}

enum Failure {
    Config(String),
    Stage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            other => Failure::Stage(other.to_string()),
        }
    }
}

impl Common {
    /// Moves `--config` and `--resume` given after the first override back
    /// into their fields.
    fn normalize(&mut self) -> Result<(), Failure> {
        let mut rest = Vec::new();
        let mut args = std::mem::take(&mut self.overrides).into_iter();
        while let Some(a) = args.next() {
            if a == "--resume" {
                self.resume = true;
            } else if a == "--config" {
                let path = args
                    .next()
                    .ok_or_else(|| Failure::Config("--config needs a value".into()))?;
                self.config = Some(path.into());
            } else if let Some(path) = a.strip_prefix("--config=") {
                self.config = Some(path.into());
            } else {
                rest.push(a);
            }
        }
        self.overrides = rest;
        Ok(())
    }
}

fn load(common: &mut Common) -> Result<ExperimentConfig, Failure> {
    common.normalize()?;
    let overrides = parse_override_args(&common.overrides)?;
    Ok(ExperimentConfig::load(common.config.as_deref(), &overrides)?)
}

fn summarize(m: &RunManifest) -> Result<(), Failure> {
    for r in &m.records {
        let status = match &r.status {
            StageStatus::Done => "done".to_string(),
            StageStatus::Resumed => "resumed".to_string(),
            StageStatus::Skipped(c) => format!("skipped ({c})"),
            StageStatus::Failed(c) => format!("FAILED: {c}"),
        };
        println!("seed {} {:<7} {status}", r.seed, r.stage.name());
    }
    println!("run directory: {}", m.run_dir.display());
    for r in &m.reports {
        println!("report: {}", m.run_dir.join(r).display());
    }
    if m.any_failed() {
        Err(Failure::Stage("one or more stages failed".into()))
    } else {
        Ok(())
    }
}

fn stages(mut common: Common, stages: &[Stage]) -> Result<(), Failure> {
    let cfg = load(&mut common)?;
    summarize(&run_stages(&cfg, stages, common.resume)?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Pretrain(c) => stages(c, &[Stage::Stage1]),
        Command::Cache(c) => stages(c, &[Stage::Cache]),
        Command::Distill(c) => stages(c, &[Stage::Stage2]),
        Command::Eval(c) => stages(c, &[Stage::Eval]),
        Command::Pipeline(c) => stages(c, &Stage::ALL),
        Command::Ablate { axis, values, mut common } => {
            let cfg = load(&mut common)?;
            let axis: Axis = axis.parse()?;
            let values = values.map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
            let report = run_ablation(&cfg, axis, values)?;
            print!("{}", report.to_table(promptkd::harness::pipeline::scoring_note(cfg.table_mode)));
            if report.failures.is_empty() {
                Ok(())
            } else {
                Err(Failure::Stage(format!("{} axis values failed", report.failures.len())))
            }
        }
        Command::Report(mut c) => {
            let exp = Experiment::new(load(&mut c)?)?;
            exp.write_report()?;
            print!("{}", std::fs::read_to_string(exp.run_dir.join("report.txt")).map_err(|e| Failure::Stage(e.to_string()))?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("{m}");
            ExitCode::from(1)
        }
        Err(Failure::Stage(m)) => {
            eprintln!("{m}");
            ExitCode::from(2)
        }
    }
}
