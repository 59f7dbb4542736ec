use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pfin_core::federation::evaluate_auc;
use pfin_sim::experiment::{calibrate, prepare};
use pfin_sim::matrix::{run_matrix, Sweep};
use pfin_sim::report::{collect_summaries, compare, render_reports, ResultTable};
use pfin_sim::{checkpoint, dataset, manifest, selftest};
use pfin_sim::{run_experiment, Existing, ExperimentConfig, Result, SimError};

#[derive(Parser)]
#[command(name = "pfin", version, about = "Federated P-FIN / Fed-UQ-Avg simulator on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Bare `--key=value` overrides; they must follow every other flag.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, hide = true)]
    rest: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_overrides(&self.set)?;
        for arg in &self.rest {
            if !arg.starts_with("--") {
                return Err(SimError::Validation(format!("unexpected argument `{arg}`")));
            }
            cfg.apply_override(arg)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Replace an existing output directory instead of verifying it.
        #[arg(long)]
        force: bool,
    },
    /// Run a methods × ratios × seeds sweep.
    Matrix {
        sweep: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Rank methods from the summaries found under a directory.
    Compare {
        dir: PathBuf,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Calibration report for a checkpoint on the config's test split.
    Calibrate {
        /// Checkpoint manifest (`.json`).
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Evaluate on these JSON-lines samples instead of the test split.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the config's client datasets and test split as JSON lines.
    Export {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-hash an experiment directory against its manifest.
    Verify { dir: PathBuf },
    /// Gradient checks and numeric fixtures.
    Selftest {
        #[arg(long, default_value_t = 20)]
        points: u64,
    },
}

fn existing(force: bool) -> Existing {
    if force {
        Existing::Replace
    } else {
        Existing::Verify
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| SimError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { cfg, force } => {
            let cfg = cfg.resolve()?;
            let s = run_experiment(&cfg, existing(force))?;
            println!(
                "{} {} seed {}: test AUC {:.4}, ECE {:.4}, spearman {}",
                s.method,
                s.ratio,
                s.seed,
                s.mean_auc,
                s.ece,
                s.spearman.map_or("undefined".into(), |r| format!("{r:.3}"))
            );
            println!("artifacts in {}", cfg.output_dir.display());
        }
        Command::Matrix { sweep, force } => {
            let outcome = run_matrix(&Sweep::load(&sweep)?, existing(force))?;
            print!("{}", outcome.report);
        }
        Command::Compare { dir, csv } => {
            let summaries = collect_summaries(&dir)?;
            if summaries.is_empty() {
                return Err(SimError::Validation(format!("no summary.json under {}", dir.display())));
            }
            let table = ResultTable::from_summaries(&summaries);
            print!("{}\n{}", table.render(), render_reports(&compare(&table)));
            if let Some(path) = csv {
                table.write_csv(&path)?;
            }
        }
        Command::Calibrate { checkpoint: ckpt, cfg, data, out } => {
            let cfg = cfg.resolve()?;
            let params = checkpoint::load(&ckpt)?;
            let prepared = prepare(&cfg)?;
            let samples = match data {
                Some(p) => dataset::import_samples(&p)?,
                None => prepared.test,
            };
            let fed = cfg.federation_config(prepared.global_mean);
            let report = calibrate(&params, &samples, &fed)?;
            let auc = evaluate_auc(&params, &samples, &fed)?;
            fs::create_dir_all(&out).map_err(|source| SimError::Io { path: out.clone(), source })?;
            let mut rel = String::from("level,observed\n");
            for (l, o) in report.reliability.nominal_levels.iter().zip(&report.reliability.observed_coverage) {
                rel.push_str(&format!("{l},{o}\n"));
            }
            write_text(&out.join("reliability.csv"), &rel)?;
            let mut dec = String::from("bin,mean_sigma,mean_err,count\n");
            for (i, b) in report.deciles.bins.iter().enumerate() {
                dec.push_str(&format!("{},{},{},{}\n", i + 1, b.mean_sigma_sq, b.mean_sq_error, b.count));
            }
            write_text(&out.join("deciles.csv"), &dec)?;
            let json = serde_json::json!({
                "ece": report.reliability.ece,
                "spearman": report.spearman,
                "mean_auc": auc,
            });
            write_text(&out.join("calibration.json"), &(serde_json::to_string_pretty(&json).expect("json") + "\n"))?;
            println!(
                "ECE {:.4}, spearman {}, AUC {:.4} on {} samples",
                report.reliability.ece,
                report.spearman.map_or("undefined".into(), |r| format!("{r:.3}")),
                auc,
                samples.len()
            );
        }
        Command::Export { cfg, out } => {
            let cfg = cfg.resolve()?;
            let prepared = prepare(&cfg)?;
            fs::create_dir_all(&out).map_err(|source| SimError::Io { path: out.clone(), source })?;
            dataset::export_clients(&out.join("clients.jsonl"), &prepared.clients)?;
            dataset::export_samples(&out.join("validation.jsonl"), &prepared.validation)?;
            dataset::export_samples(&out.join("test.jsonl"), &prepared.test)?;
            println!("wrote {} clients and splits to {}", prepared.clients.len(), out.display());
        }
        Command::Verify { dir } => {
            manifest::verify(&dir)?;
            println!("{}: all hashes match", dir.display());
        }
        Command::Selftest { points } => {
            let checks = selftest::run_all(points);
            for c in &checks {
                println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(SimError::Selftest(failed.join(", ")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::from(e.exit_code())
        }
    }
}
