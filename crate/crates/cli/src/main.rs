//! Pipeline command line: `synth`, `train`, `infer`, `eval` and
//! `cluster-labels` subcommands over the KITTI-style dataset layout.
//!
//! Exit codes: 0 success, 1 usage/configuration, 2 data/format, 3 numeric.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cluseg_core::config::PipelineConfig;
use cluseg_core::error::Error;
use cluseg_core::labels::write_prediction_file;
use cluseg_core::model::{evaluate, infer, train, Model};
use cluseg_core::synth::{generate_sequence, read_dataset, write_dataset, LabeledFrame};
use cluseg_core::tensor::ParamStore;

#[derive(Parser)]
#[command(
    name = "cluseg",
    version,
    about = "Dual-branch spatio-temporal LiDAR segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the parallel kernels (0 = library default).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-stage training; re-running with the same --out resumes.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (from `synth` or external).
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path, written after every epoch.
        #[arg(long)]
        out: PathBuf,
        /// Optional checkpoint to start from (defaults to --out if present).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sequential closed-loop inference; writes per-frame prediction files.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory (predictions/ and timings.json).
        #[arg(long)]
        out: PathBuf,
        /// Point branch only: skip clustering, attention and fusion.
        #[arg(long)]
        disable_cluster_branch: bool,
        /// Skip multi-view temporal fusion.
        #[arg(long)]
        disable_mtf: bool,
        /// Label transfer consumes ground-truth history instead of the
        /// model's own previous predictions (debugging aid).
        #[arg(long)]
        oracle_history: bool,
    },
    /// Compare predictions against ground truth and emit reports.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Prediction directory (as written by `infer`).
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Optional JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Optional second prediction directory for a side-by-side report.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Dump label-transfer and clustering intermediates per frame.
    ClusterLabels {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<PipelineConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.threads > 0 {
        cfg.threads = common.threads;
    }
    if cfg.threads > 0 {
        // ignore failure if a pool already exists (tests call main repeatedly)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
    }
    Ok(cfg)
}

fn read_predictions(dir: &Path, gt: &[LabeledFrame]) -> Result<Vec<(Vec<u16>, Vec<u16>)>, Error> {
    let mut out = Vec::with_capacity(gt.len());
    for t in 0..gt.len() {
        let path = dir.join(format!("{t:06}.label"));
        let (sem, mov) = cluseg_core::labels::read_prediction_file(&path)?;
        out.push((sem, mov));
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth { common, out } => {
            let cfg = load_config(&common)?;
            let scene = cfg.scene(cfg.seed)?;
            let frames = generate_sequence(&scene)?;
            write_dataset(&frames, &out)?;
            let points: usize = frames.iter().map(|f| f.scan.points.len()).sum();
            let moving: usize = frames
                .iter()
                .map(|f| f.motion.iter().filter(|&&m| m > 0).count())
                .sum();
            println!(
                "wrote {} frames ({points} points, {moving} moving) to {}",
                frames.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            common,
            data,
            out,
            checkpoint,
        } => {
            let cfg = load_config(&common)?;
            let model = Model::new(cfg.clone())?;
            let frames = read_dataset(&data)?;
            if let Some(p) = &checkpoint {
                if !p.exists() {
                    return Err(Error::data(format!("checkpoint {} not found", p.display())));
                }
            }
            let start_from = checkpoint.clone().or_else(|| {
                if out.exists() {
                    Some(out.clone())
                } else {
                    None
                }
            });
            let mut store = match &start_from {
                Some(path) => {
                    let store = ParamStore::load(path, cfg.seed)?;
                    model.check_compat(&store)?;
                    println!("resuming from {}", path.display());
                    store
                }
                None => ParamStore::new(cfg.seed),
            };
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            let log_path = out.with_extension("log");
            let mut log_lines = String::new();
            let outcome = train(&model, &frames, &mut store, Some(&out), |entry| {
                let line = entry.render();
                println!("{line}");
                log_lines.push_str(&line);
                log_lines.push('\n');
            })?;
            // append to the metrics log (resume keeps earlier lines)
            use std::io::Write;
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&log_path)?;
            f.write_all(log_lines.as_bytes())?;
            store.save(&out)?;
            println!(
                "finished {} epochs; checkpoint at {}, log at {}",
                outcome.log.len(),
                out.display(),
                log_path.display()
            );
            Ok(())
        }
        Command::Infer {
            common,
            checkpoint,
            data,
            out,
            disable_cluster_branch,
            disable_mtf,
            oracle_history,
        } => {
            let mut cfg = load_config(&common)?;
            cfg.disable_cluster_branch |= disable_cluster_branch;
            cfg.disable_mtf |= disable_mtf;
            cfg.oracle_history |= oracle_history;
            let model = Model::new(cfg.clone())?;
            let frames = read_dataset(&data)?;
            let store = ParamStore::load(&checkpoint, cfg.seed)?;
            let result = infer(&model, &frames, &store)?;
            let pred_dir = out.join("predictions");
            std::fs::create_dir_all(&pred_dir)?;
            for (t, (sem, mov)) in result.predictions.iter().enumerate() {
                write_prediction_file(&pred_dir.join(format!("{t:06}.label")), sem, mov)?;
            }
            let mut network_total = 0.0;
            let mut cluster_total = 0.0;
            for t in &result.timings {
                println!(
                    "frame {:>4}: network {:.1} ms, cluster label generation {:.1} ms",
                    t.frame, t.network_ms, t.cluster_label_ms
                );
                network_total += t.network_ms;
                cluster_total += t.cluster_label_ms;
            }
            let n = result.timings.len().max(1) as f64;
            println!(
                "mean per frame: network {:.1} ms, cluster label generation {:.1} ms",
                network_total / n,
                cluster_total / n
            );
            let timing_json = serde_json::to_string_pretty(&result.timings)
                .map_err(|e| Error::data(format!("timing serialization: {e}")))?;
            std::fs::write(out.join("timings.json"), timing_json)?;
            println!("predictions in {}", pred_dir.display());
            Ok(())
        }
        Command::Eval {
            common,
            pred,
            data,
            out,
            baseline,
        } => {
            let cfg = load_config(&common)?;
            let model = Model::new(cfg.clone())?;
            let gt = read_dataset(&data)?;
            let start = std::time::Instant::now();
            let predictions = read_predictions(&pred, &gt)?;
            let report = evaluate(&model, &predictions, &gt, 0.0)?;
            let report = cluseg_core::metrics::MetricsReport {
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
                ..report
            };
            print!("{}", report.render_text());
            if let Some(base_dir) = baseline {
                let base_pred = read_predictions(&base_dir, &gt)?;
                let base = evaluate(&model, &base_pred, &gt, 0.0)?;
                println!("--- baseline ({}) ---", base_dir.display());
                print!("{}", base.render_text());
                println!("--- deltas (primary - baseline) ---");
                println!("mIoU: {:+.4}", report.miou - base.miou);
                if let (Some(a), Some(b)) = (report.iou_moving, base.iou_moving) {
                    println!("IoU (moving): {:+.4}", a - b);
                }
                if let (Some(a), Some(b)) = (report.consistency, base.consistency) {
                    println!("instance consistency: {:+.4}", a - b);
                }
            }
            if let Some(path) = out {
                let json = serde_json::to_string_pretty(&report)
                    .map_err(|e| Error::data(format!("report serialization: {e}")))?;
                std::fs::write(&path, json)?;
                println!("report written to {}", path.display());
            }
            Ok(())
        }
        Command::ClusterLabels {
            common,
            checkpoint,
            data,
            out,
        } => {
            let cfg = load_config(&common)?;
            let model = Model::new(cfg.clone())?;
            let frames = read_dataset(&data)?;
            let store = ParamStore::load(&checkpoint, cfg.seed)?;
            let result = infer(&model, &frames, &store)?;
            let cluster_dir = out.join("cluster");
            let coarse_dir = out.join("coarse");
            std::fs::create_dir_all(&cluster_dir)?;
            std::fs::create_dir_all(&coarse_dir)?;
            for (t, ids) in result.cluster_ids.iter().enumerate() {
                let mut buf = Vec::with_capacity(ids.len() * 4);
                for v in ids {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                std::fs::write(cluster_dir.join(format!("{t:06}.cluster")), buf)?;
                std::fs::write(coarse_dir.join(format!("{t:06}.coarse")), &result.coarse[t])?;
                let n_clusters = ids
                    .iter()
                    .filter(|&&v| v >= 0)
                    .collect::<std::collections::HashSet<_>>()
                    .len();
                println!(
                    "frame {t:>4}: {n_clusters} clusters over {} points",
                    ids.len()
                );
            }
            println!("intermediates in {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // clap help/version are not errors
            use clap::error::ErrorKind;
            let _ = err.print();
            return match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
