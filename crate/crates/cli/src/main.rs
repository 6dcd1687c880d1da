use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use flowrft_core::harness::{self, VH_REPORT_FILE};
use flowrft_core::{ExperimentConfig, Method, VhParams};

#[derive(Parser, Debug)]
#[command(name = "flowrft", version, about = "Reinforcement fine-tuning lab for toy flow-matching models")]
struct Cli {
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the base velocity model on the toy mixture.
    Pretrain,
    /// Fine-tune the pretrained checkpoint with the configured method.
    Finetune {
        /// Overrides the configured method.
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
    },
    /// Gradient checks, objective identities, scaling test and image-metric oracles.
    Verify,
    /// Group diversity and perception-correlation tables.
    Diagnose,
    /// Image metrics for PGM files and latent consistency for trajectory dumps.
    EvalVh {
        /// Files or directories.
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    [
        Method::Grpo,
        Method::Fine,
        Method::Coarse,
        Method::ConsistentRft,
        Method::Dpo,
        Method::Ddpo,
    ]
    .into_iter()
    .find(|m| m.name() == s)
    .ok_or_else(|| format!("unknown method {s:?}"))
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output.dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn save_config(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(&cfg.output.dir)?;
    std::fs::write(cfg.output.dir.join("config.toml"), cfg.to_toml_string()?)?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Pretrain => {
            save_config(&cfg)?;
            let (_, summary) = harness::run_pretrain(&cfg)?;
            println!(
                "pretrained {} steps: final loss {:.5}, energy distance {:.5} (data vs data {:.5})",
                summary.steps, summary.final_loss_mean, summary.energy_distance, summary.reference_energy_distance
            );
            println!("checkpoint: {}", cfg.pretrained_path().display());
        }
        Command::Finetune { method } => {
            if let Some(m) = method {
                cfg.method = m;
            }
            save_config(&cfg)?;
            let out = harness::run_finetune(&cfg)?;
            println!(
                "{}: {} iterations, eval reward {:.5} -> {:.5}, latent consistency {:.5} -> {:.5}",
                cfg.method.name(),
                out.records.len(),
                out.initial_eval.mean_reward,
                out.final_eval.mean_reward,
                out.initial_eval.latent_consistency,
                out.final_eval.latent_consistency
            );
            println!("outputs: {}", cfg.output.dir.display());
        }
        Command::Verify => {
            let out = harness::run_verify(&cfg)?;
            let text = format!("{}\n{}", out.report, out.scaling.to_text());
            std::fs::create_dir_all(&cfg.output.dir)?;
            std::fs::write(cfg.output.dir.join("verify_report.txt"), &text)?;
            std::fs::write(cfg.output.dir.join("verify_report.json"), out.report.to_json()?)?;
            print!("{text}");
            let passed = out.report.passed();
            println!("overall: {}", if passed { "PASS" } else { "FAIL" });
            return Ok(passed);
        }
        Command::Diagnose => {
            let report = harness::run_diagnostics(&cfg)?;
            print!("{}", report.to_text());
        }
        Command::EvalVh { paths } => {
            let out = harness::run_eval_vh(&paths, &VhParams::default())?;
            std::fs::create_dir_all(&cfg.output.dir)?;
            let path = cfg.output.dir.join(VH_REPORT_FILE);
            std::fs::write(&path, out.to_jsonl()?)?;
            let s = &out.summary;
            println!(
                "{} images, {} trajectory dumps, {} errors -> {}",
                s.images,
                s.trajectory_files,
                s.errors,
                path.display()
            );
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
