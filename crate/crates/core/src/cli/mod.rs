//! `drnet` command line. Logs go to stderr as `key=value` lines; results go
//! to files.

pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::augment::{augment, params_for};
use crate::classifier::{build_classifier, DrClass};
use crate::dcgan::{
    distribution_divergence, generate_images, intensity_distribution, load_gan, save_gan, train_gan,
    write_histogram_csv, write_losses_csv, Gan, GanCheckpoint, HISTOGRAM_BINS,
};
use crate::error::{Error, Result};
use crate::gradsuite::{run_gradient_suite, TOLERANCE};
use crate::imageproc::{load_image, normalize_pm1, preprocess_chain, resize, save_image, NormalizedImage};
use crate::params::NetworkParams;
use crate::pipeline::synth::{shape_dataset, write_class_folders, ShapeStyle, SHAPE_FRACTIONS};
use crate::pipeline::{
    class_stats, classification_report, evaluate, export_history, inject_synthetic, injection_counts, load_classifier,
    load_manifest, load_records, load_subset, save_classifier, save_params, stratified_split, train_classifier,
    ConfusionMatrix, DatasetManifest, EpochRecord, Subset, TrainHooks,
};

pub use config::{Injection, JobConfig};

#[derive(Debug, Parser)]
#[command(name = "drnet", version, about = "Diabetic-retinopathy grading pipeline")]
struct Cli {
    /// key = value job configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for loading and augmentation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the fundus preprocessing chain over a directory tree.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write each normalized image as a one-tensor `.drnet` file.
        #[arg(long)]
        dump_tensors: bool,
    },
    /// Write augmented variants of one image.
    AugmentPreview {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Train a DCGAN on one class (or all images) of a dataset.
    GanTrain {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Class directory name such as `4_proliferative`.
        #[arg(long)]
        class: Option<String>,
    },
    /// Generate images from a GAN checkpoint.
    GanSample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Compare real and generated intensity histograms.
    GanHist {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        class: Option<String>,
        #[arg(long, default_value_t = 256)]
        count: usize,
    },
    /// Train the classifier with early stopping.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Classification report from a confusion-matrix CSV.
    Report {
        #[arg(long)]
        confusion: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Per-class image counts and fractions.
    Stats {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference gradient checks over all layers.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Write the synthetic 5-class shape dataset as class folders.
    SynthData {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 2500)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
}

pub fn log(event: &str, fields: &[(&str, String)]) {
    let mut line = format!("event={event}");
    for (k, v) in fields {
        if v.contains(char::is_whitespace) || v.is_empty() {
            line.push_str(&format!(" {k}={v:?}"));
        } else {
            line.push_str(&format!(" {k}={v}"));
        }
    }
    eprintln!("{line}");
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            log("error", &[("code", e.exit_code().to_string()), ("message", e.to_string())]);
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => JobConfig::load(path)?,
        None => JobConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    // A second initialization only fails when a pool already exists, as in tests.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    log("start", &[("seed", config.seed.to_string()), ("threads", cli.threads.to_string())]);
    for line in config.to_text().lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            log("config", &[("key", k.to_string()), ("value", v.to_string())]);
        }
    }
    match cli.command {
        Command::Preprocess { input, output, dump_tensors } => preprocess_cmd(&config, &input, &output, dump_tensors),
        Command::AugmentPreview { input, output, count } => augment_preview(&config, &input, &output, count),
        Command::GanTrain { data, output, class } => {
            let (data, output) = (data_root(&config, data)?, output.unwrap_or_else(|| config.output_dir.clone()));
            gan_train(&config, &data, &output, class.as_deref())
        }
        Command::GanSample { checkpoint, output, count } => gan_sample(&config, &checkpoint, &output, count),
        Command::GanHist { checkpoint, data, output, class, count } => {
            gan_hist(&config, &checkpoint, &data_root(&config, data)?, &output, class.as_deref(), count)
        }
        Command::Train { data, output } => {
            let (data, output) = (data_root(&config, data)?, output.unwrap_or_else(|| config.output_dir.clone()));
            train_cmd(&config, &data, &output)
        }
        Command::Evaluate { checkpoint, data, output } => {
            let (data, output) = (data_root(&config, data)?, output.unwrap_or_else(|| config.output_dir.clone()));
            evaluate_cmd(&config, &checkpoint, &data, &output)
        }
        Command::Report { confusion, output } => report_cmd(&confusion, &output),
        Command::Stats { data } => stats_cmd(&data_root(&config, data)?),
        Command::Gradcheck { seeds } => gradcheck_cmd(seeds),
        Command::SynthData { output, count, size } => {
            let data = shape_dataset(count, SHAPE_FRACTIONS, ShapeStyle { size, ..ShapeStyle::default() }, config.seed);
            write_class_folders(&data, &output)?;
            log("summary", &[("images", data.len().to_string()), ("output", output.display().to_string())]);
            Ok(())
        }
    }
}

fn data_root(config: &JobConfig, flag: Option<PathBuf>) -> Result<PathBuf> {
    flag.or_else(|| config.data_root.clone())
        .ok_or_else(|| Error::Config("no dataset given: pass --data or set data.root".into()))
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm" | "ppm" | "pnm"))
}

fn image_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if is_image_file(&path) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn preprocess_cmd(config: &JobConfig, input: &Path, output: &Path, dump_tensors: bool) -> Result<()> {
    use rayon::prelude::*;
    let files = image_files(input)?;
    let results: Vec<(PathBuf, Result<NormalizedImage>)> = files
        .par_iter()
        .map(|path| (path.clone(), load_image(path).and_then(|img| preprocess_chain(&img, &config.preprocess))))
        .collect();
    let mut failed = 0;
    for (path, result) in results {
        let rel = path.strip_prefix(input).expect("listed under input").with_extension("png");
        let dest = output.join(&rel);
        let written = result.and_then(|img| {
            save_image(&img.to_raster(), &dest)?;
            if dump_tensors {
                let mut p = NetworkParams::new();
                p.insert("image", img.to_tensor());
                save_params(&p, &dest.with_extension("drnet"))?;
            }
            Ok(())
        });
        if let Err(e) = written {
            failed += 1;
            log("warn", &[("file", path.display().to_string()), ("message", e.to_string())]);
        }
    }
    log("summary", &[("processed", (files.len() - failed).to_string()), ("failed", failed.to_string())]);
    if failed == files.len() {
        return Err(Error::Data(format!("no image under {} could be preprocessed", input.display())));
    }
    Ok(())
}

fn augment_preview(config: &JobConfig, input: &Path, output: &Path, count: usize) -> Result<()> {
    let image = config.loader(config.preprocess.size).load(input)?;
    let aug = config.augment_config();
    for i in 0..count {
        let out = augment(&image, &params_for(&aug, config.seed, 0, i as u64))?;
        save_image(&out.to_raster(), &output.join(format!("augment_{i:03}.png")))?;
    }
    log("summary", &[("written", count.to_string())]);
    Ok(())
}

fn class_filter(manifest: &DatasetManifest, class: Option<&str>) -> Result<Vec<usize>> {
    let wanted = class
        .map(|name| {
            DrClass::from_dir_name(name)
                .or_else(|| DrClass::ALL.into_iter().find(|c| c.name().eq_ignore_ascii_case(name)))
                .ok_or_else(|| Error::Config(format!("unknown class `{name}`")))
        })
        .transpose()?;
    let idx: Vec<usize> =
        (0..manifest.len()).filter(|&i| wanted.is_none_or(|c| manifest.records()[i].label == c)).collect();
    if idx.is_empty() {
        return Err(Error::Data("no images for the requested class".into()));
    }
    Ok(idx)
}

fn gan_file_name(class: Option<&str>) -> String {
    match class.and_then(DrClass::from_dir_name) {
        Some(c) => format!("gan_{}.drnet", c.dir_name()),
        None => "gan.drnet".into(),
    }
}

fn gan_train(config: &JobConfig, data: &Path, output: &Path, class: Option<&str>) -> Result<()> {
    let manifest = load_manifest(data)?;
    let gan = Gan::new(config.gan_config())?;
    let size = gan.config().image_size;
    let images = load_records(&manifest, &class_filter(&manifest, class)?, &config.loader(size))?.images;
    let real_hist = intensity_distribution(&images, HISTOGRAM_BINS)?;
    let steps_per_epoch = gan.config().steps_per_epoch;
    let outcome = train_gan(&gan, &images, |end| {
        let fake = generate_images(&gan, end.gen, images.len().min(256), config.seed)?;
        let js = distribution_divergence(&real_hist, &intensity_distribution(&fake, HISTOGRAM_BINS)?)?;
        let ckpt = GanCheckpoint {
            gen: end.gen.clone(),
            disc: end.disc.clone(),
            step: (end.epoch + 1) * steps_per_epoch,
            mean: end.mean,
        };
        save_gan(&gan, &ckpt, &output.join(format!("gan_epoch{:03}.drnet", end.epoch)))?;
        log(
            "gan_epoch",
            &[
                ("epoch", end.epoch.to_string()),
                ("d_loss", end.mean.d_loss.to_string()),
                ("g_loss", end.mean.g_loss.to_string()),
                ("js", js.to_string()),
            ],
        );
        Ok(())
    })?;
    let last = outcome.steps.last().expect("at least one step");
    let ckpt = GanCheckpoint {
        gen: outcome.gen.clone(),
        disc: outcome.disc.clone(),
        step: outcome.steps.len(),
        mean: last.losses,
    };
    save_gan(&gan, &ckpt, &output.join(gan_file_name(class)))?;
    write_losses_csv(&outcome.steps, &output.join("gan_losses.csv"))?;
    log("summary", &[("images", images.len().to_string()), ("steps", outcome.steps.len().to_string())]);
    Ok(())
}

fn gan_sample(config: &JobConfig, checkpoint: &Path, output: &Path, count: usize) -> Result<()> {
    let (gan, ckpt) = load_gan(checkpoint, config.gan_config())?;
    for (i, img) in generate_images(&gan, &ckpt.gen, count, config.seed)?.iter().enumerate() {
        save_image(&img.to_raster(), &output.join(format!("sample_{i:04}.png")))?;
    }
    log("summary", &[("written", count.to_string())]);
    Ok(())
}

fn gan_hist(
    config: &JobConfig,
    checkpoint: &Path,
    data: &Path,
    output: &Path,
    class: Option<&str>,
    count: usize,
) -> Result<()> {
    let (gan, ckpt) = load_gan(checkpoint, config.gan_config())?;
    let manifest = load_manifest(data)?;
    let real =
        load_records(&manifest, &class_filter(&manifest, class)?, &config.loader(gan.config().image_size))?.images;
    let fake = generate_images(&gan, &ckpt.gen, count.max(1), config.seed)?;
    let (hr, hf) = (intensity_distribution(&real, HISTOGRAM_BINS)?, intensity_distribution(&fake, HISTOGRAM_BINS)?);
    write_histogram_csv(&hr, &hf, output)?;
    log("summary", &[("js", distribution_divergence(&hr, &hf)?.to_string())]);
    Ok(())
}

/// Generated images resized to the classifier input when sizes differ.
fn gan_images(config: &JobConfig, class: DrClass, n: usize, size: usize) -> Result<Vec<NormalizedImage>> {
    let dir = config.gan_dir.as_ref().ok_or_else(|| Error::Config("train.inject = gan needs train.gan_dir".into()))?;
    let (gan, ckpt) = load_gan(&dir.join(format!("gan_{}.drnet", class.dir_name())), config.gan_config())?;
    let seed = config.seed ^ (0x1A7 + class.index() as u64);
    generate_images(&gan, &ckpt.gen, n, seed)?
        .into_iter()
        .map(|img| if img.width() == size { Ok(img) } else { normalize_pm1(&resize(&img.to_raster(), size, size)?) })
        .collect()
}

fn train_cmd(config: &JobConfig, data: &Path, output: &Path) -> Result<()> {
    let manifest = load_manifest(data)?;
    let split = stratified_split(&manifest, config.split, config.seed)?;
    let size = config.classifier.input_size;
    let loader = config.loader(size);
    let mut train = load_subset(&manifest, &split, Subset::Train, &loader)?;
    let val = load_subset(&manifest, &split, Subset::Val, &loader)?;
    if config.injection == Injection::Gan {
        let counts = injection_counts(train.class_counts(), config.inject_fraction);
        log("inject", &[("counts", format!("{counts:?}"))]);
        inject_synthetic(&mut train, counts, |c, n| gan_images(config, c, n, size))?;
    }
    let (model, init) = build_classifier(config.classifier.clone(), config.seed)?;
    let mut hooks = TrainHooks {
        val_loss: None,
        on_epoch: Some(Box::new(|r: &EpochRecord| {
            log(
                "epoch",
                &[
                    ("epoch", r.epoch.to_string()),
                    ("train_loss", r.train_loss.to_string()),
                    ("val_loss", r.val_loss.to_string()),
                    ("lr", r.lr.to_string()),
                    ("seconds", format!("{:.3}", r.seconds)),
                ],
            )
        })),
    };
    let outcome = train_classifier(&model, init, &config.train_config(), &train, &val, &mut hooks)?;
    save_classifier(&model, &outcome.params, &output.join("model.drnet"))?;
    export_history(&outcome.history, &output.join("history.csv"))?;
    write_split(&manifest, &split.subsets, &output.join("split.csv"))?;
    log(
        "summary",
        &[
            ("epochs", outcome.history.len().to_string()),
            ("best_epoch", outcome.best_epoch.to_string()),
            ("best_val_loss", outcome.best_val_loss.to_string()),
            ("stopped_early", outcome.stopped_early.to_string()),
        ],
    );
    Ok(())
}

fn write_split(manifest: &DatasetManifest, subsets: &[Subset], path: &Path) -> Result<()> {
    let mut text = String::from("path,label,subset\n");
    for (r, s) in manifest.records().iter().zip(subsets) {
        let name = match s {
            Subset::Train => "train",
            Subset::Val => "val",
            Subset::Test => "test",
        };
        text.push_str(&format!("{},{},{name}\n", r.path.display(), r.label.index()));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_report(cm: &ConfusionMatrix, output: &Path) -> Result<()> {
    let report = classification_report(cm)?;
    std::fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    let files = [("confusion.csv", cm.to_csv()), ("report.txt", report.to_text()), ("report.csv", report.to_csv())];
    for (name, text) in files {
        let path = output.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    log("summary", &[("accuracy", format!("{:.6}", report.accuracy)), ("total", report.total.to_string())]);
    Ok(())
}

fn evaluate_cmd(config: &JobConfig, checkpoint: &Path, data: &Path, output: &Path) -> Result<()> {
    let (model, params) = load_classifier(checkpoint)?;
    let manifest = load_manifest(data)?;
    let split = stratified_split(&manifest, config.split, config.seed)?;
    let test = load_subset(&manifest, &split, Subset::Test, &config.loader(model.config().input_size))?;
    let cm = evaluate(&model, &params, &test, config.train.batch_size)?;
    write_report(&cm, output)
}

fn report_cmd(confusion: &Path, output: &Path) -> Result<()> {
    let text = std::fs::read_to_string(confusion).map_err(|e| Error::io(confusion, e))?;
    write_report(&ConfusionMatrix::from_csv(&text)?, output)
}

fn stats_cmd(data: &Path) -> Result<()> {
    let stats = class_stats(&load_manifest(data)?)?;
    println!("class,count,fraction");
    for c in DrClass::ALL {
        println!("{},{},{:.4}", c.name(), stats.counts[c.index()], stats.fractions[c.index()]);
    }
    println!("total,{},1.0000", stats.total);
    Ok(())
}

fn gradcheck_cmd(seeds: u64) -> Result<()> {
    let mut failures = 0usize;
    let results = run_gradient_suite(seeds, |r| {
        if !r.passed() {
            failures += 1;
            log(
                "gradcheck_fail",
                &[
                    ("case", r.case.clone()),
                    ("seed", r.seed.to_string()),
                    ("target", r.target.clone()),
                    ("max_rel_error", r.check.max_rel_error.to_string()),
                ],
            );
        }
    })?;
    let worst = results.iter().map(|r| r.check.max_rel_error).fold(0.0, f64::max);
    log(
        "summary",
        &[
            ("checks", results.len().to_string()),
            ("failed", failures.to_string()),
            ("max_rel_error", worst.to_string()),
        ],
    );
    if failures > 0 {
        return Err(Error::NonFinite(format!("{failures} gradient checks exceeded {TOLERANCE}")));
    }
    Ok(())
}
