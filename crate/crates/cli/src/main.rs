use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use sharelab::complexity::{self, render_table};
use sharelab::experiments::{
    self, analyze::render_buckets, cmd_analyze, cmd_compare, cmd_run, cmd_sweep_share,
    ExperimentConfig,
};
use sharelab::{Error, ModelConfig, ShareMode};

#[derive(Parser)]
#[command(
    name = "sharelab",
    version,
    about = "Parameter-shared transformer experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; built-in defaults fill missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set train.lr_peak=0.002`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
    Base,
    Big,
}

impl Preset {
    fn model(self) -> ModelConfig {
        match self {
            Preset::Toy => ModelConfig::toy(),
            Preset::Base => ModelConfig::base(),
            Preset::Big => ModelConfig::big(),
        }
    }
}

#[derive(Args)]
struct StaticArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Start from a named architecture instead of the toy defaults.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its artifacts.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (defaults to `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every sharing mode at every share factor, plus baselines.
    SweepShare {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        n: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "SIL,SIB,SIM")]
        modes: Vec<ShareMode>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pair the validation curves of two configurations over several seeds.
    Compare {
        #[arg(long)]
        config_a: Option<PathBuf>,
        #[arg(long = "set-a", value_name = "KEY=VALUE")]
        set_a: Vec<String>,
        #[arg(long)]
        config_b: Option<PathBuf>,
        #[arg(long = "set-b", value_name = "KEY=VALUE")]
        set_b: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bucket the decoded test outputs of a finished run.
    Analyze {
        run_dir: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Forward-pass multiply-accumulates and parallelism.
    Flops {
        #[command(flatten)]
        args: StaticArgs,
        #[arg(long, default_value_t = 30)]
        src_len: usize,
        #[arg(long, default_value_t = 30)]
        tgt_len: usize,
    },
    /// Trainable parameter count.
    Params {
        #[command(flatten)]
        args: StaticArgs,
    },
}

/// Failure of a command that already knows its exit code.
struct Failure {
    code: i32,
    err: anyhow::Error,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: experiments::exit_code(&e),
            err: e.into(),
        }
    }
}

fn load(args: &ConfigArgs, base: Option<ModelConfig>) -> Result<ExperimentConfig, Error> {
    let mut start = ExperimentConfig::default();
    if let Some(model) = base {
        start.model = model;
    }
    ExperimentConfig::load_from(&start, args.config.as_deref(), &args.set)
}

fn out_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| cfg.output.dir.clone())
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value)
        .context("serializing report")
        .map_err(|err| Failure { code: 1, err })?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<i32, Failure> {
    match cli.command {
        Command::Run { cfg, out } => {
            let cfg = load(&cfg, None)?;
            let dir = out_dir(&cfg, out);
            let summary = cmd_run(&cfg, &dir)?;
            println!("wrote {}", dir.display());
            if let Some(d) = &summary.diverged {
                eprintln!("run diverged at step {}: {}", d.step, d.reason);
                return Ok(experiments::EXIT_DIVERGED);
            }
            if let Some(loss) = summary.final_valid_loss {
                println!("final valid loss {loss:.4}");
            }
            if let Some(t) = &summary.test {
                println!(
                    "test bleu3 {:.4}, exact match {:.4}",
                    t.mean_bleu3, t.exact_match
                );
            }
        }
        Command::SweepShare { cfg, n, modes, out } => {
            let cfg = load(&cfg, None)?;
            let report = cmd_sweep_share(&cfg, &modes, &n, &out_dir(&cfg, out))?;
            print!("{}", report.render());
        }
        Command::Compare {
            config_a,
            set_a,
            config_b,
            set_b,
            seeds,
            out,
        } => {
            let a = load(
                &ConfigArgs {
                    config: config_a,
                    set: set_a,
                },
                None,
            )?;
            let b = load(
                &ConfigArgs {
                    config: config_b,
                    set: set_b,
                },
                None,
            )?;
            let dir = out.unwrap_or_else(|| a.output.dir.join("compare"));
            let report = cmd_compare(&a, &b, &seeds, Some(&dir))?;
            print!("{}", report.render());
        }
        Command::Analyze { run_dir, json } => {
            let report = cmd_analyze(&run_dir)?;
            if json {
                print_json(&report)?;
            } else {
                print!("{}", render_buckets(&report));
            }
        }
        Command::Flops {
            args,
            src_len,
            tgt_len,
        } => {
            let cfg = load(&args.cfg, args.preset.map(Preset::model))?;
            let report = complexity::report(&cfg.model, src_len, tgt_len)?;
            if args.json {
                print_json(&report)?;
            } else {
                print!("{}", render_table(&[(label(&cfg), report)]));
            }
        }
        Command::Params { args } => {
            let cfg = load(&args.cfg, args.preset.map(Preset::model))?;
            let count = complexity::count_params(&cfg.model);
            if args.json {
                print_json(&serde_json::json!({
                    "params": count,
                    "breakdown": complexity::param_breakdown(&cfg.model),
                }))?;
            } else {
                println!(
                    "{} {count} ({})",
                    label(&cfg),
                    complexity::format_mega(count)
                );
            }
        }
    }
    Ok(experiments::EXIT_OK)
}

fn label(cfg: &ExperimentConfig) -> String {
    let m = &cfg.model;
    let mut s = format!("{}-{} d{}", m.enc_depth, m.dec_depth, m.width);
    if m.sharing.mode != ShareMode::None {
        s.push_str(&format!(" {} n={}", m.sharing.mode, m.sharing.factor));
    }
    s
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code as u8)
        }
    }
}
