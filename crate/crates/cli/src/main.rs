//! Command-line driver for the federated-aggregation simulator.
//!
//! Exit codes: 0 success, 2 configuration error, 3 divergence, 4 internal
//! failure.

use clap::{Args, Parser, Subcommand};
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use safelm_core::config::ExperimentConfig;
use safelm_core::error::SafeLmError;
use safelm_core::experiment::{
    self, compression_table, execute_run, run_ablation, run_inversion,
};
use safelm_core::fed::RunOutcome;
use safelm_core::guard::score_csv;
use safelm_core::paillier;

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_INTERNAL: u8 = 4;

#[derive(Parser)]
#[command(
    name = "safelm",
    version,
    about = "Secure federated-aggregation simulator: binarized updates, homomorphic summation, Byzantine filtering, and a threat harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the aggregation mode (snake_case name).
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Paillier keypair and write it as a JSON document.
    Keygen {
        #[arg(long, default_value_t = 2048)]
        bits: u64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the federated simulation for every configured seed.
    Simulate(RunArgs),
    /// Run the single-component ablation matrix.
    Ablate(RunArgs),
    /// Paired gradient-inversion trials: full-precision vs binarized.
    AttackInversion {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 300)]
        iters: usize,
        /// Also dump original/reconstruction vectors as CSV.
        #[arg(long)]
        dump_reconstructions: bool,
    },
    /// Run the configured poisoning adversary and report attack success.
    AttackPoison(RunArgs),
    /// Uplink payload accounting for a d-coordinate update.
    BenchCompression {
        #[arg(long, default_value_t = 35)]
        d: u64,
        #[arg(long, default_value_t = 2048)]
        key_bits: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score claim rows (CSV: `nli;scores,confidence`) and emit decisions.
    GuardScore {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.55)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                SafeLmError::Config { .. } | SafeLmError::InvalidArgument(_) => {
                    ExitCode::from(EXIT_CONFIG)
                }
                SafeLmError::Divergence { .. } => ExitCode::from(EXIT_DIVERGENCE),
                _ => ExitCode::from(EXIT_INTERNAL),
            }
        }
    }
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, SafeLmError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                SafeLmError::config(path.display().to_string(), format!("cannot read config: {e}"))
            })?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(mode) = &args.mode {
        cfg.mode = serde_json::from_value(serde_json::Value::String(mode.clone()))
            .map_err(|_| SafeLmError::config("mode", format!("unknown mode `{mode}`")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cmd: Command) -> Result<ExitCode, SafeLmError> {
    match cmd {
        Command::Keygen { bits, seed, out } => {
            let (pk, sk) = paillier::keygen(bits, seed)?;
            let doc = paillier::keypair_to_document(&pk, &sk);
            fs::create_dir_all(&out)?;
            let path = out.join("keypair.json");
            fs::write(&path, serde_json::to_string_pretty(&doc)?)?;
            println!("wrote {}-bit keypair to {}", bits, path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate(args) => {
            let cfg = load_config(&args)?;
            let mut diverged = false;
            for &seed in &cfg.seeds {
                let (run, summary) = execute_run(&cfg, seed, Some(&args.out))?;
                let dir = experiment::run_dir(&args.out, &cfg, seed);
                println!(
                    "seed {seed}: {} rounds, final acc {:.4}, artifacts in {}",
                    summary.rounds_completed,
                    summary.final_test_acc,
                    dir.display()
                );
                if let RunOutcome::Diverged { round, detail } = &run.outcome {
                    eprintln!("seed {seed}: diverged at round {round}: {detail}");
                    diverged = true;
                }
            }
            Ok(if diverged {
                ExitCode::from(EXIT_DIVERGENCE)
            } else {
                ExitCode::SUCCESS
            })
        }
        Command::Ablate(args) => {
            let cfg = load_config(&args)?;
            let summary = run_ablation(&cfg, Some(&args.out))?;
            println!(
                "wrote {} ablation rows to {}",
                summary.rows.len(),
                args.out.display()
            );
            for row in &summary.rows {
                println!(
                    "  {:<20} acc={:.4} wire={:.4}MB floor_psnr={:.1}dB",
                    row.name, row.mean_final_acc, row.comm_wire_mb, row.psnr_plaintext_floor_db
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::AttackInversion {
            run,
            trials,
            iters,
            dump_reconstructions,
        } => {
            let cfg = load_config(&run)?;
            let seed = cfg.seeds[0];
            let report = run_inversion(&cfg, seed, trials, iters, dump_reconstructions)?;
            fs::create_dir_all(&run.out)?;
            fs::write(
                run.out.join("inversion.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            let mut csv = String::from("trial,psnr_full,psnr_binarized,label_ok_full,label_ok_binarized\n");
            for (i, t) in report.trials.iter().enumerate() {
                csv.push_str(&format!(
                    "{i},{:.4},{:.4},{},{}\n",
                    t.psnr_full, t.psnr_binarized, t.label_ok_full, t.label_ok_binarized
                ));
            }
            fs::write(run.out.join("inversion_trials.csv"), csv)?;
            if dump_reconstructions {
                let mut csv = String::from("trial,coord,original,from_full,from_binarized\n");
                for p in &report.pairs {
                    for j in 0..p.original.len() {
                        csv.push_str(&format!(
                            "{},{},{},{},{}\n",
                            p.trial, j, p.original[j], p.from_full[j], p.from_binarized[j]
                        ));
                    }
                }
                fs::write(run.out.join("reconstructions.csv"), csv)?;
            }
            println!(
                "inversion over {trials} trials: full {:.2} dB vs binarized {:.2} dB (gap {:.2}), label recovery {:.1}% vs {:.1}%",
                report.mean_psnr_full,
                report.mean_psnr_binarized,
                report.psnr_gap,
                100.0 * report.label_recovery_full,
                100.0 * report.label_recovery_binarized,
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::AttackPoison(args) => {
            let cfg = load_config(&args)?;
            if cfg.attack.is_none() {
                return Err(SafeLmError::config(
                    "attack",
                    "attack-poison requires an `attack` section in the config",
                ));
            }
            let mut diverged = false;
            for &seed in &cfg.seeds {
                let (run, summary) = execute_run(&cfg, seed, Some(&args.out))?;
                println!(
                    "seed {seed}: final asr {:?}, clean acc {:.4}",
                    summary.final_asr, summary.final_test_acc
                );
                if matches!(run.outcome, RunOutcome::Diverged { .. }) {
                    diverged = true;
                }
            }
            Ok(if diverged {
                ExitCode::from(EXIT_DIVERGENCE)
            } else {
                ExitCode::SUCCESS
            })
        }
        Command::BenchCompression { d, key_bits, out } => {
            let rows = compression_table(d, key_bits);
            let mut csv = String::from("scheme,bits,ratio_vs_full32\n");
            for r in &rows {
                csv.push_str(&format!("{},{},{}\n", r.scheme, r.bits, r.ratio_vs_full32));
                println!("{:<16} {:>10} bits  ratio {:.4}x", r.scheme, r.bits, r.ratio_vs_full32);
            }
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("compression.csv"), csv)?;
                fs::write(
                    dir.join("compression.json"),
                    serde_json::to_string_pretty(&rows)?,
                )?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::GuardScore { input, tau, out } => {
            if !(0.0..=1.0).contains(&tau) {
                return Err(SafeLmError::config("tau", "must be in [0, 1]"));
            }
            let text = fs::read_to_string(&input).map_err(|e| {
                SafeLmError::config(input.display().to_string(), format!("cannot read input: {e}"))
            })?;
            let mut output = Vec::new();
            let rows = score_csv(text.as_bytes(), tau, &mut output)?;
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            fs::write(&out, output)?;
            println!("scored {rows} claims at tau = {tau} into {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
