use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msvcl_core::harness::gradcheck::{run_suite, tolerance, OpReport, SuiteOptions};
use msvcl_core::harness::{threads_from_env, ExperimentConfig, Method, Runner};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "msvcl", version, about = "Contrastive pretraining and cross-domain lesion detection on synthetic images")]
struct Cli {
    /// Experiment config (TOML). Built-in desk defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Re-run stages even when the ledger marks them complete.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// random, simclr, mscl, mvcl or msvcl
    #[arg(long)]
    scheme: Method,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic multi-style dataset.
    GenData,
    /// Contrastive pretraining (or random initialization) of the encoder.
    Pretrain(RunArgs),
    /// Detection fine-tuning from a pretrained encoder.
    Finetune(RunArgs),
    /// Test-split mAP on every style.
    Eval(RunArgs),
    /// Domain probe and 2-D projection of backbone features.
    Probe(RunArgs),
    /// Assemble the methods x seeds matrix into CSV and JSON.
    Report,
    /// Every stage for every configured method and seed, then the report.
    RunAll,
    /// Finite-difference check of all differentiable operations.
    Gradcheck {
        /// Check in single precision (informational tolerance).
        #[arg(long)]
        f32: bool,
        #[arg(long, default_value_t = 20)]
        configs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_for_test: bool,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn load_config(path: Option<&PathBuf>) -> msvcl_core::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn print_gradcheck(reports: &[OpReport], tol: f64) -> bool {
    let mut ok = true;
    println!("{:<18} {:>7} {:>12} {:>8}  worst", "op", "configs", "max_rel_err", "status");
    for r in reports {
        let pass = r.passes(tol);
        ok &= pass;
        println!(
            "{:<18} {:>7} {:>12.3e} {:>8}  {}",
            r.op,
            r.configs,
            r.report.max_rel_error,
            if pass { "ok" } else { "FAIL" },
            r.report.worst
        );
    }
    ok
}

fn run(cli: Cli) -> msvcl_core::Result<bool> {
    if let Command::Gradcheck { f32, configs, seed, corrupt_for_test } = cli.command {
        let opts = SuiteOptions { configs, seed, corrupt: corrupt_for_test };
        let ok = if f32 {
            print_gradcheck(&run_suite::<f32>(&opts)?, tolerance::<f32>())
        } else {
            print_gradcheck(&run_suite::<f64>(&opts)?, tolerance::<f64>())
        };
        return Ok(ok);
    }

    let cfg = load_config(cli.config.as_ref())?;
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_toml_string()?);
        return Ok(true);
    }
    let runner = Runner::new(cfg, cli.force);
    match cli.command {
        Command::GenData => {
            let s = runner.gen_data()?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Pretrain(a) => println!("{}", runner.pretrain(a.scheme, a.seed)?.display()),
        Command::Finetune(a) => println!("{}", runner.finetune(a.scheme, a.seed)?.display()),
        Command::Eval(a) => {
            let r = runner.eval(a.scheme, a.seed)?;
            let header = msvcl_core::metrics::EvalReport::csv_header(&r.seen, &r.unseen);
            println!("{}", header.join(","));
            let vals: Vec<String> = r.csv_values().iter().map(|v| format!("{v:.4}")).collect();
            println!("{},{}", r.method, vals.join(","));
        }
        Command::Probe(a) => {
            let p = runner.probe(a.scheme, a.seed)?;
            println!("domain probe accuracy {:.4} ({} folds)", p.accuracy, p.n_folds);
        }
        Command::Report => print!("{}", runner.report()?.mean_csv()),
        Command::RunAll => {
            let report = runner.run_all(threads_from_env()?)?;
            print!("{}", report.mean_csv());
        }
        Command::Gradcheck { .. } | Command::ShowConfig => unreachable!("handled above"),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_RUNTIME),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { EXIT_USAGE } else { EXIT_RUNTIME })
        }
    }
}
