use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use capt_core::checkpoint::Checkpoint;
use capt_core::diagnostics::{run_gradcheck, GradcheckOptions};
use capt_core::probe::{
    compare_runs, curves_csv, finetune_all, generate_probe_data, median_final_accuracy,
    read_probe_data, write_probe_data, Curve, ProbeTask,
};
use capt_core::{run_pretrain, Error, RunConfig};
use clap::{Parser, Subcommand};
use log::info;

#[derive(Parser)]
#[command(
    name = "capt",
    version,
    about = "Contrastive pre-training of a transformer encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train from a config file.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Verify analytic gradients against each other and finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        batches: usize,
        /// Scale reverse-mode gradients by (1 + x) to exercise the failure path.
        #[arg(long, hide = true, default_value_t = 0.0)]
        corrupt_gradient: f64,
    },
    /// Write probe train/validation splits and an unlabeled pre-training corpus.
    GenerateProbe {
        #[arg(long)]
        config: PathBuf,
        /// Directory for train.txt, train.labels, val.txt, val.labels.
        #[arg(long)]
        out: PathBuf,
        /// Also write this many unlabeled lines to the config's corpus path.
        #[arg(long)]
        corpus_lines: Option<usize>,
    },
    /// Fine-tune a checkpoint on the probe task, optionally against a baseline.
    Probe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Directory holding the probe splits; defaults to `<output_dir>/probe`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print a checkpoint's config and parameter norms.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_numeric() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Pretrain { config, resume } => {
            let cfg = RunConfig::load(&config)?;
            let summary = run_pretrain(&cfg, resume.as_deref())?;
            println!(
                "ran {} steps; checkpoint {}; metrics {}",
                summary.steps_run,
                summary.final_checkpoint.display(),
                summary.metrics.display()
            );
        }
        Command::Gradcheck {
            seed,
            batches,
            corrupt_gradient,
        } => {
            let results = run_gradcheck(&GradcheckOptions {
                seed,
                batches,
                perturb: corrupt_gradient,
            })?;
            for r in &results {
                println!("{r}");
            }
            if results.iter().any(|r| !r.passed()) {
                return Ok(ExitCode::from(1));
            }
        }
        Command::GenerateProbe {
            config,
            out,
            corpus_lines,
        } => {
            let cfg = RunConfig::load(&config)?;
            let task = ProbeTask::from_options(&cfg.probe);
            let data = generate_probe_data(
                &task,
                cfg.probe.probe_train,
                cfg.probe.probe_val,
                cfg.probe.probe_seed,
            )?;
            write_probe_data(&out, &data)?;
            println!(
                "wrote {} train and {} validation sentences to {}",
                data.train.len(),
                data.val.len(),
                out.display()
            );
            if let Some(n) = corpus_lines {
                let lines = task.corpus_lines(n, cfg.model.seed);
                if let Some(parent) = cfg.corpus.parent() {
                    fs::create_dir_all(parent)?;
                }
                fs::write(&cfg.corpus, lines.join("\n") + "\n")
                    .with_context(|| format!("writing {}", cfg.corpus.display()))?;
                println!("wrote {n} corpus lines to {}", cfg.corpus.display());
            }
        }
        Command::Probe {
            config,
            checkpoint,
            baseline,
            data,
        } => {
            let cfg = RunConfig::load(&config)?;
            let dir = data.unwrap_or_else(|| cfg.output_dir.join("probe"));
            let probe_data = read_probe_data(&dir)
                .with_context(|| format!("reading probe data from {}", dir.display()))?;
            let run_all = |path: &Path| -> anyhow::Result<Vec<Curve>> {
                info!("fine-tuning {}", path.display());
                let ckpt = Checkpoint::load(path)?;
                Ok(finetune_all(&ckpt, &probe_data, &cfg.probe)?)
            };
            let curves = run_all(&checkpoint)?;
            let mut groups: Vec<(&str, &[Curve])> = vec![("checkpoint", &curves)];
            let base_curves;
            if let Some(b) = &baseline {
                base_curves = run_all(b)?;
                groups.push(("baseline", &base_curves));
                let cmp = compare_runs(&curves, &base_curves, cfg.probe.probe_threshold);
                print!("{}", cmp.table("checkpoint", "baseline"));
            } else {
                for (i, c) in curves.iter().enumerate() {
                    let first = c
                        .first_reaching(cfg.probe.probe_threshold)
                        .map_or("not reached".to_string(), |s| s.to_string());
                    println!(
                        "seed {}: final accuracy {:.4}, threshold at {first}",
                        i + 1,
                        c.final_accuracy()
                    );
                }
            }
            for (name, cs) in &groups {
                println!(
                    "{name}: median final accuracy {:.4}",
                    median_final_accuracy(cs)
                );
            }
            fs::create_dir_all(&cfg.output_dir)?;
            let csv = cfg.output_dir.join("probe_curves.csv");
            fs::write(&csv, curves_csv(&groups))?;
            println!("curves written to {}", csv.display());
        }
        Command::Inspect { checkpoint } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            println!("# step {}", ckpt.step);
            print!("{}", ckpt.config.to_config_text());
            println!(
                "# vocabulary {} tokens, queue {}/{}",
                ckpt.vocab.len(),
                ckpt.queue.len(),
                ckpt.queue.capacity()
            );
            for (name, t) in ckpt.params.iter() {
                println!(
                    "{name:<32} {:<12} {:.6}",
                    format!("{:?}", t.shape()),
                    t.norm()
                );
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
