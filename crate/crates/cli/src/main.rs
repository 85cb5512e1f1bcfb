use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aepo::config::{RunConfig, KEYS};
use aepo::diagnostics::diagnose;
use aepo::encoding::StateEncoder;
use aepo::env::{read_tasks, write_tasks};
use aepo::policy::PolicyParams;
use aepo::trainer::{compare, compare_csv, evaluate, held_out_tasks, run_training, Trainer};
use aepo::update::Variant;
use aepo::verify::{verify, VerifyOptions};
use aepo::{Error, Result};
use clap::{Args, Parser, Subcommand};

const EXIT_ORACLE: u8 = 3;

#[derive(Parser)]
#[command(name = "aepo", version, about = "Entropy-balanced agentic policy optimization on a synthetic tool world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value configuration file, applied before any override.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Configuration overrides, given last as `--key value` or `--key=value`.
    #[arg(
        value_name = "OVERRIDES",
        trailing_var_arg = true,
        allow_hyphen_values = true,
        num_args = 0..
    )]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write a run directory.
    Train {
        /// Continue from a checkpoint directory.
        #[arg(long, value_name = "DIR")]
        resume: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Estimate Pass@1..Pass@n of a checkpoint.
    Evaluate {
        /// Checkpoint directory containing policy.bin.
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        /// Task file written by dump-tasks; generated when absent.
        #[arg(long, value_name = "FILE")]
        tasks: Option<PathBuf>,
        /// Number of generated tasks when no task file is given.
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Samples per task.
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Statistics over rollout pool dumps.
    Diagnose {
        #[arg(required = true, value_name = "DUMP")]
        dumps: Vec<PathBuf>,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run every numerical oracle and report error against tolerance.
    Verify {
        /// Corrupt the analytic gradient factor (negative control).
        #[arg(long)]
        mutate_gradient_factor: bool,
    },
    /// Train one run per rule with identical seeds and tabulate metrics.
    Compare {
        /// Comma separated rules, e.g. aepo,grpo,cispo.
        #[arg(long, value_delimiter = ',', required = true)]
        rules: Vec<String>,
        /// CSV output path; defaults to <out_dir>/compare.csv.
        #[arg(long, value_name = "FILE")]
        csv: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write generated tasks as JSONL.
    DumpTasks {
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn parse_overrides(items: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = items.iter();
    while let Some(item) = it.next() {
        let Some(flag) = item.strip_prefix("--") else {
            return Err(Error::Config(format!("expected --key, found '{item}'")));
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("flag --{flag} needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        if !KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!(
                "unknown configuration key '{key}' (known keys: {})",
                KEYS.join(", ")
            )));
        }
        out.push((key, value));
    }
    Ok(out)
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for (k, v) in parse_overrides(&args.overrides)? {
        cfg.set(&k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(resume: Option<&Path>, args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let trainer = match resume {
        Some(dir) => Trainer::resume(cfg, dir)?,
        None => Trainer::new(cfg)?,
    };
    let out_dir = trainer.config.out_dir.clone();
    let summary = run_training(trainer, |m| {
        if m.step % 50 == 0 || m.step == 1 {
            eprintln!(
                "step {:>5}  reward {:.3}  entropy {:.3}  tool calls {:.2}  zeroed {:.4}",
                m.step, m.mean_reward, m.mean_entropy, m.mean_tool_calls, m.zeroed_frac
            );
        }
    })?;
    println!("run directory: {}", out_dir.display());
    println!("final checkpoint: {}", summary.final_checkpoint.display());
    Ok(())
}

fn run_evaluate(checkpoint: &Path, tasks: Option<&Path>, count: usize, n: usize, args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let env = cfg.env()?;
    let encoder = StateEncoder::new(cfg.vocab, cfg.max_len);
    let params = PolicyParams::load(&checkpoint.join("policy.bin"))?;
    if params.vocab_size() != cfg.vocab || params.feature_dim() != encoder.dim() {
        return Err(Error::Config(
            "checkpoint shape does not match the vocab and max_len settings".into(),
        ));
    }
    let tasks = match tasks {
        Some(path) => read_tasks(path)?,
        None => held_out_tasks(&cfg, count)?,
    };
    let report = evaluate(&params, &env, &encoder, &tasks, n, cfg.temperature, cfg.seed)?;
    println!("tasks {}  samples per task {}", report.tasks, report.samples);
    for (j, p) in report.pass.iter().enumerate() {
        println!("pass@{} {:.4}", j + 1, p);
    }
    Ok(())
}

fn run_compare(rules: &[String], csv: Option<&Path>, args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let variants = rules
        .iter()
        .map(|r| r.parse::<Variant<f64>>())
        .collect::<Result<Vec<_>>>()?;
    let results = compare(&cfg, &variants)?;
    let text = compare_csv(&results);
    let path = csv.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join("compare.csv"));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(&path, &text).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    for (name, metrics) in &results {
        let tail = &metrics[metrics.len().saturating_sub(50)..];
        let mean = tail.iter().map(|m| m.mean_reward).sum::<f64>() / tail.len().max(1) as f64;
        println!("{name:<10} mean reward over last {} steps {:.4}", tail.len(), mean);
    }
    println!("table: {}", path.display());
    Ok(())
}

fn dump_tasks(out: &Path, count: usize, args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let tasks = held_out_tasks(&cfg, count)?;
    write_tasks(out, &tasks)?;
    println!("wrote {} tasks to {}", tasks.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { resume, cfg } => train(resume.as_deref(), &cfg)?,
        Command::Evaluate {
            checkpoint,
            tasks,
            count,
            n,
            cfg,
        } => run_evaluate(&checkpoint, tasks.as_deref(), count, n, &cfg)?,
        Command::Diagnose { dumps, json } => {
            let report = diagnose(&dumps)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report).expect("serializable report"));
            } else {
                print!("{}", report.render());
            }
        }
        Command::Verify { mutate_gradient_factor } => {
            let report = verify(VerifyOptions { mutate_gradient_factor });
            print!("{}", report.render());
            if !report.all_passed() {
                return Ok(ExitCode::from(EXIT_ORACLE));
            }
        }
        Command::Compare { rules, csv, cfg } => run_compare(&rules, csv.as_deref(), &cfg)?,
        Command::DumpTasks { out, count, cfg } => dump_tasks(&out, count, &cfg)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
