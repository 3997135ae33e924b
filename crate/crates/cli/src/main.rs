//! Batch driver for the geodesic VAE: train, interpolate, diagnose,
//! evaluate. Settings come from an optional JSON config file with
//! command-line flags layered on top; flags win. Every run writes a
//! manifest next to its outputs with the merged result of both.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numerical failure.

mod config;
mod data;
mod diagnose;
mod evaluate;
mod interpolate;
mod train;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{write_manifest, DatasetSpec, Failure, FileConfig, Manifest, Resolved};

#[derive(Debug, Parser)]
#[command(name = "geovae", version, about = "Geodesic VAE batch runner")]
struct Cli {
    #[command(flatten)]
    global: GlobalFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalFlags {
    /// JSON config file; flags given here override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw in the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded reductions: identical config and seed give
    /// byte-identical outputs.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory (default geovae-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint directory written by `train`.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Dataset kind: mnist, fashion, emnist, donut, or glyphs.
    #[arg(long, global = true)]
    dataset: Option<String>,
    /// IDX image file for the file-backed dataset kinds.
    #[arg(long, global = true)]
    images: Option<String>,
    /// IDX label file matching --images.
    #[arg(long, global = true)]
    labels: Option<String>,
    /// Swap the two image axes of every item while loading.
    #[arg(long, global = true)]
    transpose: bool,
    /// Keep only the first N dataset items.
    #[arg(long, global = true)]
    limit: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model, write a checkpoint and training CSVs.
    Train(TrainFlags),
    /// Fit a latent curve between two endpoints through a checkpoint.
    Interpolate(InterpolateFlags),
    /// Sample the prior and report decoder metric diagnostics.
    Diagnose(DiagnoseFlags),
    /// Score a test split: likelihood, denoising, optional outlier ROC.
    Evaluate(EvaluateFlags),
}

#[derive(Debug, Args)]
struct TrainFlags {
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Neighbors per point in the latent graph.
    #[arg(long = "k-neighbors")]
    k_neighbors: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Weight of the geodesic pair term.
    #[arg(long)]
    gd_weight: Option<f64>,
    #[arg(long)]
    latent_a: Option<usize>,
    #[arg(long)]
    latent_b: Option<usize>,
    /// Warp parametrization: direct, decomposed, velocity, or none.
    #[arg(long)]
    warp: Option<String>,
}

#[derive(Debug, Args)]
struct InterpolateFlags {
    /// Start endpoint as a dataset index.
    #[arg(long)]
    from: Option<usize>,
    /// End endpoint as a dataset index.
    #[arg(long)]
    to: Option<usize>,
    /// Start endpoint as comma-separated latent coordinates.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    z1: Option<Vec<f64>>,
    /// End endpoint as comma-separated latent coordinates.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    z2: Option<Vec<f64>>,
    /// Optimizer steps for the curve fit.
    #[arg(long)]
    steps: Option<usize>,
    /// Curve sample count.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Debug, Args)]
struct DiagnoseFlags {
    /// Latent samples to draw (default 8000).
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Debug, Args)]
struct EvaluateFlags {
    /// Corruption model: salt-pepper or gaussian.
    #[arg(long)]
    noise: Option<String>,
    /// Comma-separated corruption levels (default 0.10,0.25,0.40).
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<f64>>,
    /// Importance samples per image (default 50).
    #[arg(long = "iw-k")]
    iw_k: Option<usize>,
    /// Cap on evaluated items.
    #[arg(long)]
    samples: Option<usize>,
    /// Label scored as the outlier class.
    #[arg(long, allow_hyphen_values = true)]
    holdout: Option<i64>,
}

fn main() {
    let cli = Cli::parse();
    std::process::exit(run(&cli));
}

fn run(cli: &Cli) -> i32 {
    let (resolved, raw_config) = match resolve(cli) {
        Ok(v) => v,
        Err(f) => {
            eprintln!("{f}");
            return f.code();
        }
    };
    if resolved.deterministic {
        // A second build_global in-process is fine; the pool is already
        // single-threaded then or the caller opted out.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }

    let mut notes = Vec::new();
    let result = match &cli.command {
        Command::Train(_) => train::run(&resolved, &mut notes),
        Command::Interpolate(_) => interpolate::run(&resolved, &mut notes),
        Command::Diagnose(_) => diagnose::run(&resolved, &mut notes),
        Command::Evaluate(_) => evaluate::run(&resolved, &mut notes),
    };

    // The manifest is written even when the command failed, so an aborted
    // run still records what it was asked to do.
    let manifest = Manifest {
        command: command_name(&cli.command).to_string(),
        seed: resolved.seed,
        deterministic: resolved.deterministic,
        config_file: raw_config,
        flags: std::env::args().skip(1).collect(),
        resolved: serde_json::to_value(&resolved).unwrap_or(serde_json::Value::Null),
        notes,
    };
    if let Err(f) = write_manifest(&resolved.out, &manifest) {
        eprintln!("{f}");
        if result.is_ok() {
            return f.code();
        }
    }

    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{f}");
            f.code()
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Train(_) => "train",
        Command::Interpolate(_) => "interpolate",
        Command::Diagnose(_) => "diagnose",
        Command::Evaluate(_) => "evaluate",
    }
}

fn resolve(cli: &Cli) -> Result<(Resolved, Option<serde_json::Value>), Failure> {
    let g = &cli.global;
    let (file, raw) = match &g.config {
        Some(path) => {
            let (f, v) = FileConfig::load(path)?;
            (f, Some(v))
        }
        None => (FileConfig::default(), None),
    };

    let dataset = resolve_dataset(g, file.dataset)?;
    let mut resolved = Resolved {
        seed: g.seed.or(file.seed).unwrap_or(0),
        deterministic: g.deterministic || file.deterministic.unwrap_or(false),
        out: g
            .out
            .clone()
            .or_else(|| file.out.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("geovae-out")),
        checkpoint: g
            .checkpoint
            .clone()
            .or_else(|| file.checkpoint.as_ref().map(PathBuf::from)),
        dataset,
        limit: g.limit.or(file.limit),
        model: file.model,
        train: file.train,
        interpolate: file.interpolate,
        diagnose: file.diagnose,
        evaluate: file.evaluate,
    };

    match &cli.command {
        Command::Train(f) => {
            if let Some(v) = f.lr {
                resolved.train.learning_rate = Some(v);
            }
            if let Some(v) = f.epochs {
                resolved.train.epochs = Some(v);
            }
            if let Some(v) = f.k_neighbors {
                resolved.train.knn_k = Some(v);
            }
            if let Some(v) = f.batch_size {
                resolved.train.batch_size = Some(v);
            }
            if let Some(v) = f.gd_weight {
                resolved.train.gd_weight = Some(v);
            }
            if let Some(v) = f.latent_a {
                resolved.model.latent_a = Some(v);
            }
            if let Some(v) = f.latent_b {
                resolved.model.latent_b = Some(v);
            }
            if let Some(v) = &f.warp {
                resolved.model.warp = Some(v.clone());
            }
        }
        Command::Interpolate(f) => {
            if let Some(v) = f.from {
                resolved.interpolate.from = Some(v);
            }
            if let Some(v) = f.to {
                resolved.interpolate.to = Some(v);
            }
            if let Some(v) = &f.z1 {
                resolved.interpolate.z1 = Some(v.clone());
            }
            if let Some(v) = &f.z2 {
                resolved.interpolate.z2 = Some(v.clone());
            }
            if let Some(v) = f.steps {
                resolved.interpolate.steps = Some(v);
            }
            if let Some(v) = f.samples {
                resolved.interpolate.samples = Some(v);
            }
        }
        Command::Diagnose(f) => {
            if let Some(v) = f.samples {
                resolved.diagnose.samples = Some(v);
            }
        }
        Command::Evaluate(f) => {
            if let Some(v) = &f.noise {
                resolved.evaluate.noise = Some(v.clone());
            }
            if let Some(v) = &f.levels {
                resolved.evaluate.levels = Some(v.clone());
            }
            if let Some(v) = f.iw_k {
                resolved.evaluate.iw_k = Some(v);
            }
            if let Some(v) = f.samples {
                resolved.evaluate.samples = Some(v);
            }
            if let Some(v) = f.holdout {
                resolved.evaluate.holdout = Some(v);
            }
        }
    }
    Ok((resolved, raw))
}

/// Merge --dataset/--images/--labels/--transpose with the config spec.
/// A kind named on the command line replaces the config kind; file paths
/// carry over only when the kind stays the same.
fn resolve_dataset(
    g: &GlobalFlags,
    from_file: Option<DatasetSpec>,
) -> Result<Option<DatasetSpec>, Failure> {
    let spec = match g.dataset.as_deref() {
        None => from_file,
        Some(name @ ("mnist" | "fashion" | "emnist")) => {
            let carried = match &from_file {
                Some(
                    DatasetSpec::Mnist { images, labels, transpose }
                    | DatasetSpec::Fashion { images, labels, transpose }
                    | DatasetSpec::Emnist { images, labels, transpose },
                ) => Some((images.clone(), labels.clone(), *transpose)),
                _ => None,
            };
            let images = g
                .images
                .clone()
                .or_else(|| carried.as_ref().map(|c| c.0.clone()))
                .ok_or_else(|| {
                    Failure::Config(format!("dataset {name} needs --images (IDX file)"))
                })?;
            let labels = g
                .labels
                .clone()
                .or_else(|| carried.as_ref().and_then(|c| c.1.clone()));
            let transpose = g.transpose || carried.as_ref().is_some_and(|c| c.2);
            let build = |images, labels, transpose| match name {
                "mnist" => DatasetSpec::Mnist { images, labels, transpose },
                "fashion" => DatasetSpec::Fashion { images, labels, transpose },
                _ => DatasetSpec::Emnist { images, labels, transpose },
            };
            Some(build(images, labels, transpose))
        }
        Some("donut") => Some(match from_file {
            Some(spec @ DatasetSpec::Donut { .. }) => spec,
            _ => DatasetSpec::Donut { n: 2000, inner: 0.8, outer: 1.2 },
        }),
        Some("glyphs") => Some(match from_file {
            Some(spec @ DatasetSpec::Glyphs { .. }) => spec,
            _ => DatasetSpec::Glyphs {
                n: 512,
                ranges: geovae::datahub::TransformRanges::mild(),
            },
        }),
        Some(other) => {
            return Err(Failure::Config(format!(
                "unknown dataset {other:?}, expected mnist, fashion, emnist, donut, or glyphs"
            )))
        }
    };

    // File flags given against a generated or absent dataset are mistakes.
    if g.images.is_some() || g.labels.is_some() {
        match &spec {
            Some(
                DatasetSpec::Mnist { .. } | DatasetSpec::Fashion { .. } | DatasetSpec::Emnist { .. },
            ) => {}
            _ => {
                return Err(Failure::Config(
                    "--images/--labels need a file-backed dataset kind (mnist, fashion, emnist)"
                        .into(),
                ))
            }
        }
    }

    // Apply file flags onto a config-declared file dataset.
    let spec = match spec {
        Some(mut s) => {
            if let DatasetSpec::Mnist { images, labels, transpose }
            | DatasetSpec::Fashion { images, labels, transpose }
            | DatasetSpec::Emnist { images, labels, transpose } = &mut s
            {
                if let Some(v) = &g.images {
                    *images = v.clone();
                }
                if let Some(v) = &g.labels {
                    *labels = Some(v.clone());
                }
                if g.transpose {
                    *transpose = true;
                }
            }
            Some(s)
        }
        None => None,
    };
    Ok(spec)
}
