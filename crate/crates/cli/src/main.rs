use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use imtl::analysis::{oracle_ratio, run_preset, shrink_eval, write_shrink_csv, Preset, ProtocolConfig};
use imtl::data::{Corpus, SeedStream};
use imtl::report::export_plots;
use imtl::train::{run, Checkpoint, RunConfig, RunDir, Trainer};
use imtl::Error;

#[derive(Parser)]
#[command(name = "imtl", version, about = "Multi-task speech translation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model into a run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the corpus, model and training seeds.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Gradient-consistency and entropy reports from a run's checkpoints.
    Analyze {
        /// Run directory produced by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Must match the config stored in the checkpoints if given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "modules-bar")]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Probe samples per repeat.
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Also render every report as SVG.
        #[arg(long)]
        plots: bool,
    },
    /// Per-batch shrink ratios for every checkpoint of a run, as CSV.
    ShrinkEval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        batches: u64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Dump corpus samples as JSON lines.
    ExportCorpus {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 100)]
        n: u64,
    },
    /// Render report CSVs as SVG charts.
    ExportPlots {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        csvs: Vec<PathBuf>,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> imtl::Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cmd: Command) -> imtl::Result<()> {
    match cmd {
        Command::Train { config, out, seed, resume } => {
            let cfg = match (&config, &resume) {
                (None, Some(ckpt)) if seed.is_none() => Checkpoint::load(ckpt)?.config,
                _ => load_config(config.as_deref(), seed)?,
            };
            let summary = run(cfg, &out, resume.as_deref())?;
            println!(
                "trained {} steps; ST accuracy {:.4} (copy baseline {:.4}); checkpoint {}",
                summary.steps,
                summary.eval.accuracy,
                summary.eval.copy_baseline,
                summary.final_checkpoint.display()
            );
        }
        Command::Analyze {
            run: run_dir,
            config,
            out,
            preset,
            seed,
            n,
            repeats,
            plots,
        } => {
            let preset = Preset::parse(&preset)?;
            let dir = RunDir::new(run_dir);
            if let Some(p) = config {
                let cfg = RunConfig::load(&p)?;
                for (_, ck) in dir.list_checkpoints()? {
                    if Checkpoint::load(&ck)?.config != cfg {
                        return Err(Error::Config(format!("{} was not trained with {}", ck.display(), p.display())));
                    }
                }
            }
            let proto = ProtocolConfig {
                n,
                repeats,
                batch_size: n.min(50),
                seed,
                pool: None,
            };
            let written = run_preset(preset, &dir, &out, &proto)?;
            for p in &written {
                println!("{}", p.display());
            }
            if plots {
                for p in export_plots(&written, &out)? {
                    println!("{}", p.display());
                }
            }
        }
        Command::ShrinkEval {
            run: run_dir,
            out,
            batches,
            batch_size,
        } => {
            let dir = RunDir::new(run_dir);
            let cks = dir.list_checkpoints()?;
            if cks.is_empty() {
                return Err(Error::Config(format!("no checkpoints under {}", dir.root.display())));
            }
            let mut rows = Vec::new();
            let mut oracle = None;
            for (step, path) in cks {
                let trainer = Trainer::from_checkpoint(Checkpoint::load(&path)?)?;
                let data: Vec<_> = (0..batches)
                    .map(|i| trainer.corpus().stream_batch(SeedStream::Eval, i, batch_size))
                    .collect::<imtl::Result<_>>()?;
                oracle.get_or_insert_with(|| oracle_ratio(&data));
                rows.extend(shrink_eval(trainer.model(), &data, step, trainer.config().toggles.use_lbm)?);
            }
            write_shrink_csv(&out, &rows)?;
            if let Some(o) = oracle {
                println!("alignment oracle ratio {o:.4}");
            }
        }
        Command::ExportCorpus { config, out, seed, n } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let corpus = Corpus::new(cfg.corpus)?;
            corpus.export_jsonl(BufWriter::new(File::create(&out)?), SeedStream::Train, n)?;
        }
        Command::ExportPlots { out, csvs } => {
            for p in export_plots(&csvs, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
