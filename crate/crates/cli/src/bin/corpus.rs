//! Corpus construction: silence segmentation, key-disjoint splits and
//! summary statistics.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mewehv::corpus::{
    build_corpus, compute_stats, read_manifest, split_by_key, write_manifest, ClipRecord, SegmentationConfig,
    SplitSpec,
};

#[derive(Parser)]
#[command(name = "corpus", about = "Build clip corpora from long recordings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cut `<speaker>_<video>_<gender>_<label>.wav` recordings at silences
    /// and write the clips plus `manifest.csv`.
    Segment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = -40.0, allow_negative_numbers = true)]
        threshold_db: f64,
        #[arg(long, default_value_t = 200.0)]
        min_silence_ms: f64,
        #[arg(long, default_value_t = 10.0)]
        window_ms: f64,
        #[arg(long, default_value_t = 3.5)]
        min_clip_s: f64,
        #[arg(long, default_value_t = 12.0)]
        max_clip_s: f64,
    },
    /// Partition a manifest into train/val/test with no key shared between
    /// parts.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        /// Train, validation and test fractions.
        #[arg(long, default_value = "0.7,0.15,0.15", value_delimiter = ',')]
        fractions: Vec<f64>,
        #[arg(long, default_value = "speaker_id")]
        key: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; defaults to the manifest's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print corpus statistics as JSON.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).to_path_buf()
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Segment {
            input,
            out,
            threshold_db,
            min_silence_ms,
            window_ms,
            min_clip_s,
            max_clip_s,
        } => {
            let config = SegmentationConfig {
                threshold_db,
                window_ms,
                min_silence_ms,
                min_clip_s,
                max_clip_s,
            };
            let records = build_corpus(&input, &out, &config)
                .with_context(|| format!("segmenting {}", input.display()))?;
            println!("{} clips written to {}", records.len(), out.display());
        }
        Command::Split {
            manifest,
            fractions,
            key,
            seed,
            out,
        } => {
            let [a, b, c] = fractions[..] else {
                bail!("--fractions needs three values");
            };
            let records = read_manifest(&manifest)?;
            let splits = split_by_key(&records, &SplitSpec::new([a, b, c], key, seed))?;
            let src = manifest_dir(&manifest);
            let out = out.unwrap_or_else(|| src.clone());
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            // keep clip paths valid when the split files move elsewhere
            let relocate = |recs: Vec<ClipRecord>| -> Vec<ClipRecord> {
                if out == src {
                    return recs;
                }
                let src = std::path::absolute(&src).unwrap_or_else(|_| src.clone());
                recs.into_iter()
                    .map(|mut r| {
                        r.path = r.resolve_path(&src).display().to_string();
                        r
                    })
                    .collect()
            };
            for (name, part) in [
                ("train", splits.train),
                ("val", splits.validation),
                ("test", splits.test),
            ] {
                let path = out.join(format!("{name}.csv"));
                let n = part.len();
                write_manifest(&path, &relocate(part))?;
                println!("{name}: {n} clips -> {}", path.display());
            }
        }
        Command::Stats { manifest } => {
            let stats = compute_stats(&read_manifest(&manifest)?)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
    }
    Ok(())
}
