//! Training, evaluation, synthetic data and result tables.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mewehv::harness::{build_table, collect_reports, evaluate, make_toy_fusion_dataset, train, ExperimentConfig};

#[derive(Parser)]
#[command(name = "mewehv", about = "Train and evaluate MFCC + wave-encoder classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; flags override the config file.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest and print the report as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Directory of precomputed embeddings, if not the recorded one.
        #[arg(long)]
        encoder_dir: Option<PathBuf>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic two-cue dataset.
    Toyset {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        n_per_class: usize,
    },
    /// Tabulate every report.json under a directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        /// Also write the table as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

macro_rules! train_flags {
    ($($field:ident),+ $(,)?) => {
        #[derive(Args)]
        struct TrainArgs {
            /// `key = value` config file.
            #[arg(long)]
            config: Option<PathBuf>,
            $(
                #[arg(long, allow_negative_numbers = true)]
                $field: Option<String>,
            )+
        }

        impl TrainArgs {
            fn overrides(&self) -> Vec<(String, String)> {
                let mut out = Vec::new();
                $(
                    if let Some(v) = &self.$field {
                        out.push((stringify!($field).to_string(), v.clone()));
                    }
                )+
                out
            }
        }
    };
}

train_flags!(
    task,
    dataset,
    train_manifest,
    val_manifest,
    test_manifest,
    encoder,
    encoder_dir,
    encoder_seed,
    width,
    kind,
    hidden,
    classes,
    lambda,
    loss_mode,
    lr,
    clip_norm,
    dropout,
    epochs,
    batch_size,
    seed,
    out,
    clip_seconds,
    cap_per_class,
    target_val_accuracy,
    speaker_disjoint,
    workers,
    precision,
    n_mfcc,
);

fn run_train(args: TrainArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    config.apply(&args.overrides(), Path::new("."))?;
    let out = train(&config)?;
    let r = &out.report;
    println!("{} on {}: best epoch {:?}", r.kind, r.dataset, r.best_epoch);
    for (name, m) in &r.splits {
        println!("  {name}: accuracy {:.4} ({} clips), mean nll {:.4}", m.accuracy, m.clips, m.mean_nll);
    }
    println!("report and checkpoint in {}", config.out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train(args) => run_train(args)?,
        Command::Eval {
            ckpt,
            manifest,
            encoder_dir,
            out,
        } => {
            let report = evaluate(&ckpt, &manifest, encoder_dir.as_deref())?;
            let json = report.to_json();
            if let Some(path) = out {
                std::fs::write(&path, &json).with_context(|| format!("writing {}", path.display()))?;
            }
            print!("{json}");
        }
        Command::Toyset { seed, out, n_per_class } => {
            let ds = make_toy_fusion_dataset(&out, seed, n_per_class)?;
            println!(
                "wrote {}, {} and {}",
                ds.train.display(),
                ds.val.display(),
                ds.test.display()
            );
        }
        Command::Report { input, json } => {
            let table = build_table(&collect_reports(&input)?)?;
            print!("{}", table.to_text());
            if let Some(path) = json {
                std::fs::write(&path, table.to_json()).with_context(|| format!("writing {}", path.display()))?;
            }
        }
    }
    Ok(())
}
