//! `cegl`: command-line driver for the segmentation, graph, training and
//! localization stages. Every stage reads and writes plain files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use serde::de::DeserializeOwned;
use serde::Serialize;

use cegl_core::dataio::{read_annotations, read_feature_matrix, write_atomic, FeatureMatrix};
use cegl_core::metrics::{coverage_curve, coverage_curve_csv};
use cegl_core::model::{load_checkpoint, save_checkpoint, Checkpoint};
use cegl_core::pipeline::{
    classify_video, evaluate_predictions, load_data_dir, localize_video, synth_batch,
    train_on_videos, write_synth_video, Predictions, RunConfig,
};
use cegl_core::segmentation::{pelt, read_partition, write_partition, Partition};
use cegl_core::{Error, Result};

const SEED_ENV: &str = "CEGL_SEED";

#[derive(Parser)]
#[command(
    name = "cegl",
    version,
    about = "Weakly supervised abnormality localization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic videos with planted abnormal frames.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Partition a feature file with PELT.
    Segment {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on every annotated feature file in a directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict segment labels.
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        partition: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select the top-k frames of each segment predicted abnormal.
    Localize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        partition: PathBuf,
        #[arg(long)]
        k: usize,
        /// Localize every segment, not only those predicted abnormal.
        #[arg(long)]
        all_segments: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Coverage for each k over an annotated directory, as CSV.
    CoverageCurve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        ks: Vec<usize>,
        #[arg(long)]
        all_segments: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against frame annotations.
    Evaluate {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        partition: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("cegl: {msg}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { config, out } => {
            let cfg = load_config(&config)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| Error::Usage(format!("{}: {e}", out.display())))?;
            let mut written = Vec::new();
            let result = synth_batch(&cfg.synth, cfg.videos).and_then(|videos| {
                for v in &videos {
                    written.extend(write_synth_video(v, &out)?);
                }
                Ok(videos.len())
            });
            match result {
                Ok(n) => {
                    info!("wrote {n} synthetic videos to {}", out.display());
                    Ok(())
                }
                Err(e) => {
                    for p in &written {
                        let _ = std::fs::remove_file(p);
                    }
                    Err(e)
                }
            }
        }
        Command::Segment {
            features,
            config,
            out,
        } => {
            let cfg = load_config(&config)?;
            let f = read_feature_matrix(&features)?;
            let p = pelt(&f, &cfg.segmentation)?;
            info!("{}: {} segments", f.video_id, p.segment_count());
            write_partition(&f.video_id, &p, &out)
        }
        Command::Train { data, config, out } => {
            let cfg = load_config(&config)?;
            let videos = load_data_dir(&data, &cfg.segmentation)?;
            let (ckpt, outcome) = train_on_videos(&videos, &cfg)?;
            if let (Some(first), Some(last)) =
                (outcome.loss_history.first(), outcome.loss_history.last())
            {
                info!(
                    "loss {first:.6} -> {last:.6} over {} epochs",
                    outcome.loss_history.len()
                );
            }
            save_checkpoint(&ckpt, &out)
        }
        Command::Classify {
            model,
            features,
            partition,
            out,
        } => {
            let ckpt = load_model(&model)?;
            let (f, p) = load_inputs(&features, &partition)?;
            write_json(&out, &classify_video(&ckpt, &f, &p)?)
        }
        Command::Localize {
            model,
            features,
            partition,
            k,
            all_segments,
            out,
        } => {
            let ckpt = load_model(&model)?;
            let (f, p) = load_inputs(&features, &partition)?;
            write_json(&out, &localize_video(&ckpt, &f, &p, k, all_segments)?.segments)
        }
        Command::CoverageCurve {
            model,
            data,
            ks,
            all_segments,
            out,
        } => {
            let ckpt = load_model(&model)?;
            let videos = load_data_dir(&data, &ckpt.segmentation)?;
            let curve = coverage_curve(&ckpt, &videos, &ks, all_segments)?;
            write_atomic(&out, coverage_curve_csv(&curve).as_bytes())
        }
        Command::Evaluate {
            preds,
            annotations,
            partition,
            out,
        } => {
            let preds: Predictions = read_json(&preds)?;
            let ann = read_annotations(&annotations)?;
            let (_, p) = read_partition(&partition)?;
            ann.validate(Some(p.frame_count()))?;
            write_json(&out, &evaluate_predictions(&preds, &ann, &p)?)
        }
    }
}

/// Loads a run configuration and applies the `CEGL_SEED` override.
fn load_config(path: &Path) -> Result<RunConfig> {
    if !path.exists() {
        return Err(Error::Usage(format!(
            "config not found: {}",
            path.display()
        )));
    }
    let mut cfg = RunConfig::load(path)?;
    if let Ok(raw) = std::env::var(SEED_ENV) {
        let seed = raw.trim().parse().map_err(|_| {
            Error::Config(format!(
                "{SEED_ENV}={raw:?} is not a 64-bit unsigned integer"
            ))
        })?;
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::Usage(format!(
            "checkpoint not found: {}",
            path.display()
        )));
    }
    load_checkpoint(path)
}

fn load_inputs(features: &Path, partition: &Path) -> Result<(FeatureMatrix, Partition)> {
    let f = read_feature_matrix(features)?;
    let (id, p) = read_partition(partition)?;
    if id != f.video_id {
        log::warn!("partition is for {id:?} but features are {:?}", f.video_id);
    }
    if p.frame_count() != f.frame_count() {
        return Err(Error::Usage(format!(
            "partition covers {} frames, features have {}",
            p.frame_count(),
            f.frame_count()
        )));
    }
    Ok((f, p))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}
