use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adjvid_core::dataset::{
    generate_dataset, list_sequences, load_sequence, motion_iou, render_speed_histogram, save_sequence,
    speed_histogram, VideoSequence,
};
use adjvid_core::evaluation::{
    fps_benchmark, match_detections, precision_recall_f1, read_detections_jsonl, save_overlay,
    write_detections_jsonl, write_metrics_csv, Counts, MetricsRow,
};
use adjvid_core::pipeline::{build_pairs, infer_video, load_checkpoint, save_checkpoint, Config, LossWriter, Trainer};
use adjvid_core::Error;
use clap::{Args, Parser, Subcommand};

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  1  internal error
  2  invalid command line or config (unknown key, wrong type, out-of-range value)
  3  unreadable or malformed data (missing files, bad annotations, bad images)
  4  checkpoint problem (corrupt file or architecture mismatch)

Errors are printed to stderr as one JSON line: {\"error\": kind, \"exit_code\": n, \"message\": text}";

/// Two-frame video detection toolkit.
#[derive(Parser)]
#[command(name = "adjvid", version, after_help = EXIT_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; defaults are used for anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set optimizer.epochs=10`; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic sequences into the output directory.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Motion IoU per track and frame, speed proportions and a histogram image.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Dataset root holding one directory per sequence.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a model; writes loss.csv, checkpoint.bin and config.toml.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run sequential inference; writes one <sequence>.jsonl per sequence.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score detection files against annotations; writes metrics.csv
    /// (and fps.csv when a checkpoint is given).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Directory of <sequence>.jsonl detection files.
        #[arg(long)]
        detections: PathBuf,
        /// Also time inference with this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Draw ground truth (yellow), true positives (green) and false positives (red).
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        detections: PathBuf,
    },
}

fn exit_code(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Config { .. } | Error::InvalidParam(_) | Error::InputSize { .. } => ("config", 2),
        Error::MissingFile(_) | Error::Format { .. } | Error::Image(_) | Error::Io(_) | Error::InvalidBox(_) => {
            ("data", 3)
        }
        Error::Checkpoint(_) | Error::ArchitectureMismatch(_) => ("checkpoint", 4),
        Error::Shape(_) | Error::EmptyMask => ("internal", 1),
    }
}

fn overrides(common: &Common) -> Vec<String> {
    let mut o = common.overrides.clone();
    if let Some(seed) = common.seed {
        o.push(format!("seed={seed}"));
    }
    o
}

fn resolve(common: &Common) -> adjvid_core::Result<Config> {
    Config::load(common.config.as_deref(), &overrides(common))
}

fn snapshot(cfg: &Config, dir: &Path) -> adjvid_core::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml_string())?;
    Ok(())
}

fn load_all(data: &Path) -> adjvid_core::Result<Vec<VideoSequence>> {
    list_sequences(data)?.iter().map(|d| load_sequence(d)).collect()
}

fn run(cli: Cli) -> adjvid_core::Result<()> {
    match cli.command {
        Command::Generate { common } => {
            let cfg = resolve(&common)?;
            snapshot(&cfg, &common.out)?;
            for seq in generate_dataset(&cfg.synthesis, cfg.dataset.sequences, cfg.seed)? {
                save_sequence(&seq, &common.out)?;
                println!("{}", seq.id);
            }
        }
        Command::Analyze { common, data } => {
            let cfg = resolve(&common)?;
            let seqs = load_all(&data)?;
            snapshot(&cfg, &common.out)?;
            let mut csv = String::from("sequence,track,frame,motion_iou\n");
            let mut scores = Vec::new();
            for seq in &seqs {
                for m in motion_iou(seq, cfg.analysis.window) {
                    csv.push_str(&format!("{},{},{},{:.6}\n", seq.id, m.track, m.frame, m.score));
                    scores.push(m.score);
                }
            }
            fs::write(common.out.join("motion_iou.csv"), csv)?;
            let p = speed_histogram(&scores, cfg.analysis.bins());
            fs::write(
                common.out.join("speed_histogram.csv"),
                format!(
                    "bin,proportion\nslow,{:.6}\nmedium,{:.6}\nfast,{:.6}\n",
                    p.slow, p.medium, p.fast
                ),
            )?;
            render_speed_histogram(&p).save(common.out.join("speed_histogram.png"))?;
            println!("slow {:.4} medium {:.4} fast {:.4}", p.slow, p.medium, p.fast);
        }
        Command::Train { common, data } => {
            let cfg = resolve(&common)?;
            let seqs = load_all(&data)?;
            snapshot(&cfg, &common.out)?;
            let pairs = build_pairs(&seqs);
            if pairs.is_empty() {
                return Err(Error::InvalidParam(format!("no frame pairs under {}", data.display())));
            }
            let mut trainer = Trainer::new(&cfg)?;
            let mut losses = LossWriter::create(&common.out.join("loss.csv"))?;
            for _ in 0..cfg.optimizer.epochs {
                let rows = trainer.train_epoch(&pairs)?;
                losses.write(&rows)?;
                let mean = rows.iter().map(|r| r.total).sum::<f64>() / rows.len() as f64;
                log::info!("epoch {} mean loss {mean:.5}", trainer.epoch - 1);
            }
            save_checkpoint(&trainer.model, &cfg, &common.out.join("checkpoint.bin"))?;
        }
        Command::Infer {
            common,
            data,
            checkpoint,
        } => {
            let (model, cfg) = load_with_config(&common, &checkpoint)?;
            let seqs = load_all(&data)?;
            snapshot(&cfg, &common.out)?;
            for seq in &seqs {
                let results = infer_video(&model, &cfg, seq)?;
                let frames: Vec<_> = results.into_iter().map(|r| r.detections).collect();
                write_detections_jsonl(&common.out.join(format!("{}.jsonl", seq.id)), &frames)?;
            }
        }
        Command::Eval {
            common,
            data,
            detections,
            checkpoint,
        } => {
            let cfg = resolve(&common)?;
            let seqs = load_all(&data)?;
            fs::create_dir_all(&common.out)?;
            let criterion = cfg.evaluation.criterion();
            let threshold = cfg.inference.score_threshold;
            let mut rows = Vec::new();
            let mut total = Counts::default();
            for seq in &seqs {
                let preds = read_detections_jsonl(&detections.join(format!("{}.jsonl", seq.id)))?;
                if preds.len() != seq.len() {
                    return Err(Error::InvalidParam(format!(
                        "{}: {} detection frames for {} video frames",
                        seq.id,
                        preds.len(),
                        seq.len()
                    )));
                }
                let mut counts = Counts::default();
                for (t, p) in preds.iter().enumerate() {
                    let kept: Vec<_> = p.iter().filter(|d| d.score >= threshold).copied().collect();
                    counts += match_detections(&kept, &seq.detections(t), criterion).counts();
                }
                total += counts;
                rows.push(MetricsRow {
                    split: seq.id.clone(),
                    criterion,
                    threshold,
                    counts,
                    scores: precision_recall_f1(counts),
                });
            }
            let all = precision_recall_f1(total);
            rows.push(MetricsRow {
                split: "all".into(),
                criterion,
                threshold,
                counts: total,
                scores: all,
            });
            write_metrics_csv(&common.out.join("metrics.csv"), &rows)?;
            println!(
                "precision {:.4} recall {:.4} f1 {:.4}",
                all.precision, all.recall, all.f1
            );
            if let Some(ckpt) = checkpoint {
                let (model, mcfg) = load_with_config(&common, &ckpt)?;
                let mut out = fs::File::create(common.out.join("fps.csv"))?;
                writeln!(out, "sequence,mean_fps,std_fps,repeats")?;
                for seq in &seqs {
                    let r = fps_benchmark(
                        &model,
                        &mcfg,
                        seq,
                        mcfg.evaluation.fps_warmup,
                        mcfg.evaluation.fps_repeats,
                    )?;
                    writeln!(out, "{},{:.3},{:.3},{}", seq.id, r.mean, r.std, r.repeats.len())?;
                }
            }
        }
        Command::Visualize {
            common,
            data,
            detections,
        } => {
            let cfg = resolve(&common)?;
            let seqs = load_all(&data)?;
            let criterion = cfg.evaluation.criterion();
            for seq in &seqs {
                let preds = read_detections_jsonl(&detections.join(format!("{}.jsonl", seq.id)))?;
                for (t, frame) in seq.frames.iter().enumerate() {
                    let kept: Vec<_> = preds
                        .get(t)
                        .map(|p| p.iter().filter(|d| d.score >= cfg.inference.score_threshold).copied().collect())
                        .unwrap_or_default();
                    let gts = seq.detections(t);
                    let m = match_detections(&kept, &gts, criterion);
                    let path = common.out.join(&seq.id).join(format!("{t:06}.png"));
                    save_overlay(&path, frame, &gts, &kept, &m)?;
                }
            }
        }
    }
    Ok(())
}

/// Checkpoint plus the config to run it with: the checkpoint's own snapshot
/// with `--set` overrides, or `--config` (whose architecture must match).
fn load_with_config(common: &Common, path: &Path) -> adjvid_core::Result<(adjvid_core::pipeline::Model, Config)> {
    match &common.config {
        Some(_) => {
            let cfg = resolve(common)?;
            let (model, _) = load_checkpoint(path, Some(&cfg.model))?;
            Ok((model, cfg))
        }
        None => {
            let (model, saved) = load_checkpoint(path, None)?;
            let cfg = Config::from_toml_with_overrides(&saved.to_toml_string(), &overrides(common))?;
            if cfg.model != saved.model {
                return Err(Error::ArchitectureMismatch(
                    "model.* overrides do not match the checkpoint".into(),
                ));
            }
            Ok((model, cfg))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = exit_code(&e);
            let line = serde_json::json!({"error": kind, "exit_code": code, "message": e.to_string()});
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}
