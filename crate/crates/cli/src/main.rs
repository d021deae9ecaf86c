use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use drrnet_core::pipeline::{apply_deterministic_env, evaluate, infer, report_complexity, train};
use drrnet_core::{Config, DrrnetError};

#[derive(Parser)]
#[command(name = "drrnet", version, about = "Camouflaged object detection: train, infer, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file, writing a checkpoint per epoch.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides any config key, e.g. --set train.epochs=2. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write sigmoid probability maps for every image in a directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Prediction level, 0 (finest) to 4.
        #[arg(long, default_value_t = 0)]
        level: usize,
    },
    /// Score predictions against masks and write a CSV report.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print parameter count and FLOPs of the configured model.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn load_config(path: &Path, seed: Option<u64>, overrides: &[String]) -> Result<Config, DrrnetError> {
    let mut text =
        std::fs::read_to_string(path).map_err(|e| DrrnetError::InvalidConfig(format!("{}: {e}", path.display())))?;
    text.push('\n');
    for o in overrides {
        if !o.contains('=') {
            return Err(DrrnetError::InvalidConfig(format!("--set {o}: expected KEY=VALUE")));
        }
        text.push_str(o);
        text.push('\n');
    }
    if let Some(s) = seed {
        text.push_str(&format!("train.seed = {s}\n"));
    }
    Config::parse(&text)
}

fn run(cli: Cli) -> Result<(), DrrnetError> {
    match cli.command {
        Command::Train { config, seed, overrides } => {
            let cfg = load_config(&config, seed, &overrides)?;
            let report = train(&cfg)?;
            let last = report.log.last();
            println!(
                "trained steps={} final_loss={} checkpoint={}",
                last.map_or(0, |r| r.step),
                last.map_or(f64::NAN, |r| r.loss),
                report.last_checkpoint.as_ref().map_or("none".into(), |p| p.display().to_string())
            );
        }
        Command::Infer { checkpoint, input, output, level } => {
            let written = infer(&checkpoint, &input, &output, level)?;
            println!("wrote {} maps to {}", written.len(), output.display());
        }
        Command::Eval { pred, gt, out } => {
            let rec = evaluate(&pred, &gt, &out)?;
            let a = &rec.aggregate;
            println!(
                "images={} mae={:.6} s_alpha={:.6} e_phi={:.6} f_beta_w={:.6}",
                rec.per_image.len(),
                a.mae,
                a.s_alpha,
                a.e_phi,
                a.f_beta_w
            );
        }
        Command::Report { config, overrides } => {
            let cfg = load_config(&config, None, &overrides)?;
            let c = report_complexity(&cfg)?;
            println!("params = {}", c.params);
            println!("params_m = {:.2}", c.params_m());
            println!("flops = {}", c.flops);
            println!("flops_g = {:.2}", c.flops_g());
            println!("input_size = {}", c.input_size);
        }
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: UsageError: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    if apply_deterministic_env() {
        log::info!("deterministic mode: sequential kernels");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.class(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
