use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use duo_core::harness::config::ExperimentConfig;
use duo_core::harness::experiments::{
    prepare_detector, run_ablation, run_grid, run_observation1, run_observation2, run_stream_dumping, train_source,
    write_json, write_stream,
};
use duo_core::harness::selftest::run_selftest;
use duo_core::DuoError;

#[derive(Parser)]
#[command(name = "duo", version, about = "Dual-uncertainty test-time adaptation on synthetic driving scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Flat `key = value` experiment file.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source detector on clean scenes and save the checkpoint.
    Train(ConfigArg),
    /// Adapt over the corrupted stream, writing metrics.csv and summary.json.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        /// Comma-separated lambda values; with --grid-alpha runs the full grid.
        #[arg(long, value_delimiter = ',')]
        grid_lambda: Vec<f64>,
        /// Comma-separated focal alpha values.
        #[arg(long, value_delimiter = ',')]
        grid_alpha: Vec<f64>,
    },
    /// Score quartile shifts under none, entropy_min and duo.
    Obs1(ConfigArg),
    /// Per-head uncertainty trajectories under depth_unc_min and duo.
    Obs2(ConfigArg),
    /// Component ablation table.
    Ablate(ConfigArg),
    /// Run the fast property suite.
    Selftest,
}

fn exit_code(e: &DuoError) -> u8 {
    match e {
        DuoError::MissingCheckpoint(_) => 2,
        DuoError::Config(_) => 3,
        _ => 1,
    }
}

fn load(arg: &ConfigArg) -> Result<ExperimentConfig, DuoError> {
    ExperimentConfig::load(&arg.config)
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "yes"
    } else {
        "no"
    }
}

fn execute(cmd: Command) -> Result<bool, DuoError> {
    match cmd {
        Command::Train(arg) => {
            let cfg = load(&arg)?;
            let (_, log) = train_source(&cfg)?;
            write_json(&cfg.output_dir.join("train_log.json"), &log)?;
            let c = &log.clean;
            println!("saved {}", cfg.checkpoint.display());
            println!("clean F1 {:.4}  precision {:.4}  recall {:.4}  depth MAE {:.4}", c.f1, c.precision, c.recall, c.depth_mae);
        }
        Command::Run { config, grid_lambda, grid_alpha } => {
            let cfg = load(&config)?;
            let det = prepare_detector(&cfg)?;
            if !grid_lambda.is_empty() || !grid_alpha.is_empty() {
                let lambdas = if grid_lambda.is_empty() { vec![cfg.adapt.lambda] } else { grid_lambda };
                let alphas = if grid_alpha.is_empty() { vec![cfg.adapt.focal.alpha] } else { grid_alpha };
                for r in run_grid(&cfg, &det, &lambdas, &alphas)? {
                    println!("lambda {:<6} alpha {:<6} F1 {:.4}  MAE {:.4}", r.lambda, r.alpha, r.f1, r.depth_mae);
                }
                return Ok(true);
            }
            let r = run_stream_dumping(&cfg, &det, Some(&cfg.output_dir.join("dump")))?;
            write_stream(&r, &cfg.output_dir)?;
            let s = &r.summary;
            println!(
                "{} on {}@{}: F1 {:.4}  depth MAE {:.4}  entropy {:.4}  skipped {}/{}",
                s.objective, s.corruption, s.severity, s.f1, s.depth_mae, s.mean_entropy, s.skipped_steps, s.steps
            );
        }
        Command::Obs1(arg) => {
            let cfg = load(&arg)?;
            let r = run_observation1(&cfg, &prepare_detector(&cfg)?)?;
            for m in &r.methods {
                println!(
                    "{:<12} q25 {:.4} ({:+.4})  q75 {:.4} ({:+.4})  skew {:.3}",
                    m.objective, m.q25, m.delta_q25, m.q75, m.delta_q75, m.skew_ratio
                );
            }
            println!("duo lifts the bottom quartile more: {}", verdict(r.duo_q25_gain_exceeds_entropy));
            println!("duo gains are less top-heavy: {}", verdict(r.duo_skew_below_entropy));
        }
        Command::Obs2(arg) => {
            let cfg = load(&arg)?;
            let r = run_observation2(&cfg, &prepare_detector(&cfg)?)?;
            for m in &r.methods {
                let f = m.min_sigma_fraction;
                println!(
                    "{:<14} collapse ratio {:.3}  min sigma fraction [{:.3}, {:.3}, {:.3}]",
                    m.objective, m.collapse_ratio, f[0], f[1], f[2]
                );
            }
            println!("regression head collapses over twice as fast: {}", verdict(r.ratio_exceeds_twice_duo));
            println!("duo keeps every head above 10% of its start: {}", verdict(r.duo_sigma_floor_held));
        }
        Command::Ablate(arg) => {
            let cfg = load(&arg)?;
            let rows = run_ablation(&cfg, &prepare_detector(&cfg)?)?;
            println!("{:<10} {:>4} {:>4} {:>5} {:>8} {:>8}", "variant", "cfl", "ncl", "mask", "F1", "MAE");
            for r in &rows {
                let b = |v: bool| if v { "on" } else { "off" };
                println!("{:<10} {:>4} {:>4} {:>5} {:>8.4} {:>8.4}", r.name, b(r.cfl), b(r.ncl), b(r.mask), r.f1, r.depth_mae);
            }
            let full = rows.iter().find(|r| r.name == "full").map_or(0.0, |r| r.f1);
            let best_single = rows.iter().filter(|r| r.name != "full").map(|r| r.f1).fold(0.0, f64::max);
            println!("full method at least as good as every variant: {}", verdict(full >= best_single));
        }
        Command::Selftest => {
            let mut all = true;
            for c in run_selftest(0)? {
                println!("{} {:<22} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                all &= c.passed;
            }
            return Ok(all);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
