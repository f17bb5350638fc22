//! `crackseg` command-line front end.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use image::imageops::FilterType;

use crate::data::archive::{
    archive_model, merged_archive, restore_model, ArchiveKind, TensorArchive,
};
use crate::data::config::RunConfig;
use crate::data::synth::{synth_generate, synth_sample};
use crate::data::{load_dataset, rgb_to_tensor, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate_dataset, Granularity, NoiseSpec};
use crate::model::{count_parameters, shape_only, Model};
use crate::params::CountFilter;
use crate::train::gradcheck::{check_model, perturb_zero_deltas, GradcheckPlan};
use crate::train::{binarize_probability, train_loop, EpochLog};

#[derive(Debug, Parser)]
#[command(
    name = "crackseg",
    version,
    about = "Crack segmentation with a parameter-efficient ViT"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the tunable parameters and keep the best-F1 checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `case1` or `case2`.
        #[arg(long)]
        noise: Option<String>,
        #[arg(long, default_value = "micro")]
        granularity: String,
        /// Report path; defaults to `<output.dir>/report-<noise>-<granularity>.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict a {0,255} mask for one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corrupt every image under a directory tree; `masks` folders are copied.
    Corrupt {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        noise: String,
    },
    /// Generate a synthetic crack dataset.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print all / tunable / delta-only parameter counts.
    CountParams {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fold LoRA factors into the base weights.
    MergeLora {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every tunable gradient.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
}

/// Parse the process arguments, run, and map failures to a nonzero status.
pub fn main_from_env() -> i32 {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            1
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config } => train(&RunConfig::from_file(&config)?),
        Command::Eval {
            config,
            checkpoint,
            noise,
            granularity,
            out,
        } => {
            let noise = noise.as_deref().map(NoiseSpec::parse).transpose()?;
            let gran = Granularity::parse(&granularity)?;
            eval(
                &RunConfig::from_file(&config)?,
                &checkpoint,
                noise,
                gran,
                out,
            )
        }
        Command::Infer {
            checkpoint,
            image,
            out,
        } => infer(&checkpoint, &image, &out),
        Command::Corrupt { input, out, noise } => corrupt(&input, &out, &NoiseSpec::parse(&noise)?),
        Command::Synth { n, size, seed, out } => {
            if n == 0 {
                return Err(Error::Config("--n must be at least 1".into()));
            }
            synth_generate(n, size, seed, &out)?;
            println!("wrote {n} samples of {size}x{size} to {}", out.display());
            Ok(())
        }
        Command::CountParams { config } => count_params(&RunConfig::from_file(&config)?),
        Command::MergeLora { checkpoint, out } => {
            let merged = merged_archive(&TensorArchive::load(&checkpoint)?)?;
            merged.save(&out)?;
            println!(
                "wrote merged archive with {} tensors to {}",
                merged.tensors.len(),
                out.display()
            );
            Ok(())
        }
        Command::Gradcheck { config, tolerance } => {
            gradcheck(&RunConfig::from_file(&config)?, tolerance)
        }
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::file(path, e))
}

fn train(cfg: &RunConfig) -> Result<()> {
    let size = cfg.model.encoder.image_size;
    let train_set = load_dataset(&DatasetManifest::new(&cfg.data_root, Split::Train, size))?;
    let val_set = load_dataset(&DatasetManifest::new(&cfg.data_root, Split::Val, size))?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::file(out, e))?;
    write_file(&out.join("config.txt"), cfg.to_text().as_bytes())?;

    let mut model = Model::<f32>::init(&cfg.model, cfg.seed)?;
    eprintln!(
        "training {} tunable parameters on {} samples ({} val)",
        model.params.count(CountFilter::Tunable),
        train_set.len(),
        val_set.len()
    );
    let log_path = out.join("epochs.csv");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::file(&log_path, e))?;
    writeln!(log, "{}", EpochLog::CSV_HEADER)?;
    let mut log_err = None;
    let outcome = train_loop(&mut model, &train_set, &val_set, &cfg.train, |e| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  val f1 {:.4}  val iou {:.4}",
            e.epoch, e.train_loss, e.val.f1, e.val.iou
        );
        if let Err(err) = writeln!(log, "{}", e.csv_line()) {
            log_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = log_err {
        return Err(Error::file(&log_path, err));
    }

    outcome.best.restore(&mut model.params)?;
    let ckpt = archive_model(&model, ArchiveKind::Tunable, cfg.seed)?
        .with_meta("epoch", outcome.best.epoch)
        .with_meta("val_f1", outcome.best.val_f1);
    let ckpt_path = out.join("best.ckpt");
    ckpt.save(&ckpt_path)?;
    println!(
        "best epoch {} (val f1 {:.4}); initial loss {:.4}, final loss {:.4}; checkpoint {}",
        outcome.best.epoch,
        outcome.best.val_f1,
        outcome.initial_loss,
        outcome.final_loss(),
        ckpt_path.display()
    );
    Ok(())
}

fn eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    noise: Option<NoiseSpec>,
    granularity: Granularity,
    out: Option<PathBuf>,
) -> Result<()> {
    let model = restore_model(&TensorArchive::load(checkpoint)?)?;
    let size = model.net.image_size();
    let test = load_dataset(&DatasetManifest::new(&cfg.data_root, Split::Test, size))?;
    let report = evaluate_dataset(
        &model,
        &test,
        noise.as_ref(),
        granularity,
        cfg.train.binarize_threshold,
    )?;
    let tag = noise.map_or("clean".to_string(), |n| format!("case{}", n.case_number()));
    let path = out.unwrap_or_else(|| {
        cfg.output_dir
            .join(format!("report-{tag}-{}.json", granularity.as_str()))
    });
    write_file(&path, report.to_json()?.as_bytes())?;
    println!("{report}");
    println!("report {}", path.display());
    Ok(())
}

fn infer(checkpoint: &Path, image: &Path, out: &Path) -> Result<()> {
    let model = restore_model(&TensorArchive::load(checkpoint)?)?;
    let rgb = image::open(image)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", image.display())))?
        .to_rgb8();
    let (w, h) = rgb.dimensions();
    let s = model.net.image_size() as u32;
    let input = if (w, h) == (s, s) {
        rgb
    } else {
        image::imageops::resize(&rgb, s, s, FilterType::Triangle)
    };
    let prob = model.crack_probability(&rgb_to_tensor(&input))?;
    let mut mask = binarize_probability(&prob, 0.5)?.to_gray();
    if (w, h) != (s, s) {
        mask = image::imageops::resize(&mask, w, h, FilterType::Nearest);
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    mask.save(out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn corrupt(input: &Path, out: &Path, noise: &NoiseSpec) -> Result<()> {
    noise.validate()?;
    let mut count = 0;
    corrupt_tree(input, out, noise, false, &mut count)?;
    if count == 0 {
        return Err(Error::Ingestion(format!(
            "no PNG images under {}",
            input.display()
        )));
    }
    println!("corrupted {count} images into {}", out.display());
    Ok(())
}

fn corrupt_tree(
    input: &Path,
    out: &Path,
    noise: &NoiseSpec,
    copy_only: bool,
    count: &mut usize,
) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Error::file(input, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::file(input, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    fs::create_dir_all(out).map_err(|e| Error::file(out, e))?;
    for path in entries {
        let name = path.file_name().expect("directory entry has a name");
        let target = out.join(name);
        if path.is_dir() {
            let masks = copy_only || name == "masks";
            corrupt_tree(&path, &target, noise, masks, count)?;
        } else if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if copy_only {
                fs::copy(&path, &target).map_err(|e| Error::file(&path, e))?;
            } else {
                let img = image::open(&path)
                    .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?
                    .to_rgb8();
                noise.apply(&img)?.save(&target)?;
                *count += 1;
            }
        }
    }
    Ok(())
}

fn count_params(cfg: &RunConfig) -> Result<()> {
    let (_, reg) = shape_only(&cfg.model)?;
    println!("all         {}", count_parameters(&reg, CountFilter::All));
    println!(
        "tunable     {}",
        count_parameters(&reg, CountFilter::Tunable)
    );
    println!(
        "delta-only  {}",
        count_parameters(&reg, CountFilter::DeltaOnly)
    );
    Ok(())
}

fn gradcheck(cfg: &RunConfig, tolerance: f64) -> Result<()> {
    let mut model = Model::<f32>::init(&cfg.model, cfg.seed)?.cast::<f64>();
    perturb_zero_deltas(&mut model.params, 0.02, cfg.seed);
    let sample = synth_sample(cfg.seed, 0, cfg.model.encoder.image_size)?;
    let plan = GradcheckPlan {
        lambda: cfg.train.lambda_ce,
        seed: cfg.seed,
        ..GradcheckPlan::default()
    };
    let report = check_model(&model, &sample, &plan, |name, s| {
        eprintln!(
            "{name:<48} {:>5} coords  max rel {:.2e}",
            s.checked, s.max_rel_error
        );
    })?;
    let worst = report.coordinates.worst.clone().unwrap_or_default();
    println!(
        "tensors {}  coordinates {} (skipped {})  max rel error {:.3e}  directional {:.3e}  worst {worst}",
        report.tensors,
        report.coordinates.checked,
        report.coordinates.skipped_small,
        report.coordinates.max_rel_error,
        report.directional.max_rel_error
    );
    if report.max_rel_error() >= tolerance {
        return Err(Error::Numeric(format!(
            "max relative error {:.3e} exceeds {tolerance:.1e}",
            report.max_rel_error()
        )));
    }
    Ok(())
}
