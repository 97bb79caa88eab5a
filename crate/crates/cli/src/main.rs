use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use feds_core::bitstream_codec::{compress_image_traced, decompress_image, BitstreamContainer, ContainerHeader};
use feds_core::codec_networks::{pad_image, ImageBuffer, NetworkConfig, Role};
use feds_core::eval_metrics::{
    bd_rate, emit_reports, entropy_report, evaluate_model, psnr, QualityMetric, RDCurve, DEFAULT_HEATMAP_RANKS,
};
use feds_core::feds_distillation::{FEDSWeights, LAMBDA_PRESETS};
use feds_core::training_pipeline::{image_paths, parse_kv, prepare_dataset, Checkpoint, TrainConfig, Trainer};
use feds_core::{CodecModel32, Error, Result};

type Ckpt = Checkpoint<f32>;

#[derive(Parser, Debug)]
#[command(name = "feds", version, about = "Learned image codec: training, coding and evaluation")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

/// Flags shared by every verb.
#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// key=value configuration file (network.*, train.*, feds.*, data.*)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed (overrides the config file and FEDS_SEED)
    #[arg(long)]
    seed: Option<u64>,
    /// Multiplier on iteration counts and learning-rate drop points
    #[arg(long)]
    scale: Option<f64>,
    /// Index into the MSE lambda presets
    #[arg(long)]
    lambda_index: Option<usize>,
    /// Output path (checkpoint, bitstream, image or directory, per verb)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print machine-readable JSON on stdout
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    /// Directory of training images
    #[arg(long)]
    data: Option<PathBuf>,
    /// Use the small desk-scale network instead of the full preset
    #[arg(long)]
    toy: bool,
    /// JSON-lines log file
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue an interrupted run of this stage from its checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Stage 1: train the teacher
    TrainTeacher {
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Stage 2: train a student against a frozen teacher
    Distill {
        /// Completed teacher checkpoint
        #[arg(long)]
        teacher_ckpt: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Stage 3: fine-tune a distilled student on its own
    Finetune {
        /// Completed distillation checkpoint
        #[arg(long)]
        student_ckpt: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Encode an image into a .feds bitstream
    Compress {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Decode a .feds bitstream into a PNG
    Decompress {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Original image, for a PSNR report
        #[arg(long)]
        reference: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Rate-distortion evaluation of a directory of images
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Channel entropy profile and heatmaps of one image or a directory
    EntropyMap {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Comma-separated 1-based channel ranks to render
        #[arg(long)]
        ranks: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// BD-rate of a test curve against an anchor curve (CSV files)
    Bdrate {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// psnr or msssim_db
        #[arg(long, default_value = "psnr")]
        quality: String,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.verb) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn required_out(c: &Common) -> Result<&Path> {
    c.out.as_deref().ok_or_else(|| usage("--out is required"))
}

/// Preset (or `base`) ← config file ← FEDS_SEED ← flags.
fn train_config(base: TrainConfig, common: &Common, train: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = base;
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        cfg = cfg.apply(&parse_kv(&text)?)?;
    }
    cfg = cfg.apply_env()?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(s) = common.scale {
        cfg.scale = s;
    }
    if let Some(i) = common.lambda_index {
        cfg.feds.lambda = *LAMBDA_PRESETS
            .get(i)
            .ok_or_else(|| usage(format!("--lambda-index must be below {}", LAMBDA_PRESETS.len())))?;
    }
    if let Some(d) = &train.data {
        cfg.data.dir = Some(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn preset(role: Role, toy: bool) -> TrainConfig {
    let mut cfg = TrainConfig::preset(role);
    if toy {
        cfg.network = NetworkConfig::toy(role);
    }
    cfg
}

fn run_training(
    mut trainer: Trainer<f32>,
    out: &Path,
    train: &TrainArgs,
    common: &Common,
) -> Result<()> {
    if let Some(log) = &train.log {
        trainer = trainer.with_log(Box::new(BufWriter::new(File::create(log)?)));
    }
    let start = trainer.iteration();
    let ck = trainer.with_checkpoint_path(out.to_path_buf()).run()?;
    let last = ck.iteration;
    let summary = json!({
        "stage": ck.stage.to_string(),
        "iterations": last,
        "resumed_from": start,
        "checkpoint": out.display().to_string(),
    });
    if common.json {
        println!("{summary}");
    } else {
        println!("{} stage finished after {last} iterations; checkpoint {}", ck.stage, out.display());
    }
    Ok(())
}

fn load_ckpt(path: &Path) -> Result<Ckpt> {
    Ckpt::load(path)
}

/// Model and rate-distortion weights stored in a checkpoint; a conflicting
/// `--lambda-index` is rejected.
fn load_model(path: &Path, common: &Common) -> Result<(CodecModel32, FEDSWeights)> {
    let ck = load_ckpt(path)?;
    let w = ck.config.feds;
    if let Some(i) = common.lambda_index {
        if w.lambda_index() != Some(i) {
            return Err(usage(format!(
                "--lambda-index {i} does not match the model (λ = {})",
                w.lambda
            )));
        }
    }
    Ok((ck.model(None)?, w))
}

fn dispatch(verb: Verb) -> Result<()> {
    match verb {
        Verb::TrainTeacher { train, common } => {
            let out = required_out(&common)?;
            let trainer = match &train.resume {
                Some(path) => Trainer::resume(&load_ckpt(path)?, None, prepare_dataset(&resume_config(path, &common, &train)?)?)?,
                None => {
                    let cfg = train_config(preset(Role::Teacher, train.toy), &common, &train)?;
                    Trainer::teacher_stage(cfg.clone(), prepare_dataset(&cfg)?)?
                }
            };
            run_training(trainer, out, &train, &common)
        }
        Verb::Distill {
            teacher_ckpt,
            train,
            common,
        } => {
            let teacher_path = teacher_ckpt.ok_or_else(|| usage("distill requires --teacher-ckpt"))?;
            let out = required_out(&common)?;
            let teacher = load_ckpt(&teacher_path)?;
            let trainer = match &train.resume {
                Some(path) => Trainer::resume(
                    &load_ckpt(path)?,
                    Some(&teacher),
                    prepare_dataset(&resume_config(path, &common, &train)?)?,
                )?,
                None => {
                    let cfg = train_config(preset(Role::Student, train.toy), &common, &train)?;
                    Trainer::distill_stage(cfg.clone(), &teacher, prepare_dataset(&cfg)?)?
                }
            };
            run_training(trainer, out, &train, &common)
        }
        Verb::Finetune {
            student_ckpt,
            train,
            common,
        } => {
            let student_path = student_ckpt.ok_or_else(|| usage("finetune requires --student-ckpt"))?;
            let out = required_out(&common)?;
            let trainer = match &train.resume {
                Some(path) => Trainer::resume(&load_ckpt(path)?, None, prepare_dataset(&resume_config(path, &common, &train)?)?)?,
                None => {
                    let student = load_ckpt(&student_path)?;
                    let cfg = train_config(student.config.clone(), &common, &train)?;
                    Trainer::finetune_stage(cfg.clone(), &student, prepare_dataset(&cfg)?)?
                }
            };
            run_training(trainer, out, &train, &common)
        }
        Verb::Compress { model, input, common } => {
            let out = required_out(&common)?;
            let (model, w) = load_model(&model, &common)?;
            let img = ImageBuffer::load(&input)?;
            let (container, _) = compress_image_traced(&pad_image(&img), &model, &w)?;
            let bytes = container.to_bytes();
            std::fs::write(out, &bytes)?;
            let bpp = 8.0 * bytes.len() as f64 / (img.height() * img.width()) as f64;
            if common.json {
                println!("{}", json!({ "bytes": bytes.len(), "bpp": bpp }));
            } else {
                println!("wrote {} ({} bytes, {bpp:.4} bpp)", out.display(), bytes.len());
            }
            Ok(())
        }
        Verb::Decompress {
            model,
            input,
            reference,
            common,
        } => {
            let out = required_out(&common)?;
            let (model, w) = load_model(&model, &common)?;
            let bytes = std::fs::read(&input)?;
            ContainerHeader::parse(&bytes)?;
            let container = BitstreamContainer::from_bytes(&bytes, model.config.num_slices)?;
            let recon = decompress_image(&container, &model, &w)?;
            recon.save_png(out)?;
            let bpp = container.bpp();
            let quality = match &reference {
                Some(r) => Some(psnr(&ImageBuffer::load(r)?, &recon)?),
                None => None,
            };
            if common.json {
                println!("{}", json!({ "bpp": bpp, "psnr_db": quality }));
            } else {
                match quality {
                    Some(p) => println!("wrote {} ({bpp:.4} bpp, PSNR {p:.2} dB)", out.display()),
                    None => println!("wrote {} ({bpp:.4} bpp)", out.display()),
                }
            }
            Ok(())
        }
        Verb::Eval { model, data, common } => {
            let (model, w) = load_model(&model, &common)?;
            let ev = evaluate_model(&model, &data, &w)?;
            if let Some(out) = &common.out {
                emit_reports(out, Some(&ev), &[], &BTreeSet::new())?;
            }
            if common.json {
                println!("{}", serde_json::to_string_pretty(&ev)?);
            } else {
                let a = &ev.aggregate;
                println!(
                    "{} images: {:.4} bpp, PSNR {:.2} dB{}, enc {:.3} s, dec {:.3} s",
                    a.count,
                    a.bpp,
                    a.psnr_db,
                    a.msssim_db.map(|v| format!(", MS-SSIM {v:.2} dB")).unwrap_or_default(),
                    a.enc_s,
                    a.dec_s
                );
            }
            Ok(())
        }
        Verb::EntropyMap {
            model,
            input,
            ranks,
            common,
        } => {
            let out = required_out(&common)?;
            let (model, _) = load_model(&model, &common)?;
            let ranks: BTreeSet<usize> = match ranks {
                Some(s) => s
                    .split(',')
                    .map(|r| r.trim().parse().map_err(|_| usage(format!("bad rank `{r}`"))))
                    .collect::<Result<_>>()?,
                None => DEFAULT_HEATMAP_RANKS.into_iter().filter(|&r| r <= model.config.m).collect(),
            };
            let paths = if input.is_dir() { image_paths(&input)? } else { vec![input.clone()] };
            let mut reports = Vec::with_capacity(paths.len());
            for p in &paths {
                let name = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                reports.push(entropy_report(&model, &name, &ImageBuffer::load(p)?)?);
            }
            let files = emit_reports(out, None, &reports, &ranks)?;
            if common.json {
                let top: Vec<_> = reports
                    .iter()
                    .map(|r| json!({ "image": r.image, "order": r.ranking.order, "mean_entropy_bits": r.ranking.mean_entropy }))
                    .collect();
                println!("{}", json!({ "images": top, "heatmaps": files.heatmaps.len() }));
            } else {
                println!("{} heatmaps for {} images in {}", files.heatmaps.len(), reports.len(), out.display());
            }
            Ok(())
        }
        Verb::Bdrate {
            anchor,
            test,
            quality,
            common,
        } => {
            let q: QualityMetric = quality.parse()?;
            let read = |p: &Path| -> Result<RDCurve> {
                let text = std::fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
                RDCurve::from_csv(p.display().to_string(), &text)
            };
            let r = bd_rate(&read(&anchor)?, &read(&test)?, q)?;
            if common.json {
                println!(
                    "{}",
                    json!({ "quality": quality, "bd_rate_percent": r.percent, "overlap": [r.overlap.0, r.overlap.1] })
                );
            } else {
                println!("BD-rate {:+.3}% over {:.3}..{:.3}", r.percent, r.overlap.0, r.overlap.1);
            }
            Ok(())
        }
    }
}

/// Configuration for resuming: the checkpoint's own, with data-location flags applied.
fn resume_config(path: &Path, common: &Common, train: &TrainArgs) -> Result<TrainConfig> {
    let ck = load_ckpt(path)?;
    let mut cfg = ck.config;
    if let Some(d) = &train.data {
        cfg.data.dir = Some(d.clone());
    }
    if common.seed.is_some() || common.scale.is_some() || common.lambda_index.is_some() {
        return Err(usage("--seed, --scale and --lambda-index cannot change a resumed run"));
    }
    Ok(cfg)
}
