use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{error::ErrorKind, Parser, Subcommand};
use rap_core::harness::{
    count_params, evaluate_model, export_diagnostics, generate_dataset, run_ablation, suite_registry, train,
    Checkpoint, Evaluation, ExperimentConfig,
};
use rap_core::retrieval::MetricsReport;

#[derive(Parser)]
#[command(
    name = "rap",
    version,
    about = "Train, evaluate and ablate low-rank video retrieval adapters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train adapters on a synthetic dataset and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Config override, `key=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a freshly generated dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data_seed: u64,
        /// Also report metrics after dual-softmax re-scoring.
        #[arg(long)]
        dsl: bool,
        #[arg(long)]
        json: bool,
    },
    /// Run an ablation suite and print a comparison table.
    Ablate {
        #[arg(long)]
        suite: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        json: bool,
    },
    /// Report trainable and frozen parameter counts for a config.
    CountParams {
        #[arg(long)]
        config: PathBuf,
    },
    /// Export modulation matrices and an attention affinity map as CSV.
    ExportDiag {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Defaults to the checkpoint's training data seed.
        #[arg(long)]
        data_seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long, default_value_t = 0)]
        patch: usize,
    },
    /// Generate a synthetic dataset and print its captions and latents as JSON.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        pairs: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::toy(),
    };
    for o in overrides {
        let Some((k, v)) = o.split_once('=') else {
            bail!(rap_core::Error::Config(format!("override `{o}` is not key=value")));
        };
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn metrics_line(label: &str, m: &MetricsReport) -> String {
    format!(
        "{label:<12} R@1 {:>6.3}  R@5 {:>6.3}  R@10 {:>6.3}  MdR {:>5.1}  MnR {:>6.2}",
        m.r_at[&1], m.r_at[&5], m.r_at[&10], m.mdr, m.mnr
    )
}

fn print_eval(e: &Evaluation) {
    println!("{}", metrics_line("text->video", &e.text_to_video));
    println!("{}", metrics_line("video->text", &e.video_to_text));
    if let Some((t, v)) = &e.dsl {
        println!("{}", metrics_line("dsl t->v", t));
        println!("{}", metrics_line("dsl v->t", v));
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, overrides } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let data = generate_dataset(cfg.data_seed, cfg.pairs, &cfg)?;
            let outcome = train(&cfg, &data)?;
            for log in &outcome.history {
                let loss = log.loss.map_or("-".to_string(), |l| format!("{l:.5}"));
                eprintln!(
                    "epoch {:>4}  steps {:>5}  loss {loss:>9}  t2v R@1 {:.3}  v2t R@1 {:.3}",
                    log.epoch,
                    log.steps,
                    log.eval.text_to_video.r1(),
                    log.eval.video_to_text.r1()
                );
            }
            if let Some(n) = outcome.steps_to_perfect {
                eprintln!("R@1 = 1 in both directions after {n} steps");
            }
            Checkpoint::from_model(&outcome.model, outcome.rng_state)
                .save(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            print_eval(&outcome.history.last().expect("initial evaluation").eval);
        }
        Command::Eval {
            ckpt,
            data_seed,
            dsl,
            json,
        } => {
            let model = Checkpoint::load(&ckpt)
                .with_context(|| format!("reading {}", ckpt.display()))?
                .into_model()?;
            let cfg = &model.config;
            let data = generate_dataset(data_seed, cfg.pairs, cfg)?;
            let eval = evaluate_model(&model, &data, dsl.then_some(cfg.dsl_temperature))?;
            if json {
                println!("{}", serde_json::to_string_pretty(&eval)?);
            } else {
                print_eval(&eval);
            }
        }
        Command::Ablate {
            suite,
            config,
            overrides,
            json,
        } => {
            // Reject unknown suites before any work.
            suite_registry().create(&suite, &())?;
            let cfg = load_config(config.as_deref(), &overrides)?;
            let report = run_ablation(&suite, &cfg)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.to_table());
            }
        }
        Command::CountParams { config } => {
            let cfg = load_config(Some(&config), &[])?;
            println!("{}", count_params(&cfg)?);
        }
        Command::ExportDiag {
            ckpt,
            out_dir,
            data_seed,
            frame,
            patch,
        } => {
            let model = Checkpoint::load(&ckpt)
                .with_context(|| format!("reading {}", ckpt.display()))?
                .into_model()?;
            let cfg = &model.config;
            let data = generate_dataset(data_seed.unwrap_or(cfg.data_seed), cfg.pairs, cfg)?;
            for path in export_diagnostics(&model, &data, &out_dir, (frame, patch))? {
                println!("{}", path.display());
            }
        }
        Command::GenData {
            seed,
            pairs,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref(), &[])?;
            let data = generate_dataset(seed, pairs, &cfg)?;
            let text = serde_json::to_string_pretty(&data)?;
            match out {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => println!("{text}"),
            }
        }
    }
    Ok(())
}

/// Numeric failures exit with 2; every other failure, including usage
/// errors, exits with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<rap_core::Error>())
        .map_or(1, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
