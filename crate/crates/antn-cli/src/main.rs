//! Command-line driver for the segmentation pipeline: data generation,
//! classical segmenters, color normalization, training, prediction, and
//! evaluation. Every command is deterministic given its inputs and seed,
//! writes only under its output destination, and fails with a one-line
//! diagnostic and a nonzero exit status.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use antn::classical::{kmeans_segment, otsu_segment, ClassPrototypes};
use antn::color::reinhard_normalize;
use antn::io::checkpoint::{read_checkpoint, write_checkpoint, TrainedModel};
use antn::io::config::RunConfig;
use antn::io::pnm;
use antn::metrics::{
    average_transition, cross_entropy_curve, pixel_accuracy, uniformity_disparity,
    TransitionMatrix,
};
use antn::morph::{dilate_labels, erode_labels};
use antn::synth::gen_synthetic;
use antn::train::{
    train_antn, train_ntn, train_unet_direct, Dataset, EpochRecord, LabelSource, CSV_HEADER,
};
use antn::{LabelField, Tensor4};

#[derive(Parser)]
#[command(name = "antn", version, about = "Segmentation from noisy labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SegMethod {
    Kmeans,
    Otsu,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainMethod {
    Unet,
    Ntn,
    Antn,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic circle images plus clean, eroded, and dilated
    /// label maps.
    GenSynth {
        /// Directory for img_####.ppm, clean/noisy1/noisy2_####.pgm.
        #[arg(long)]
        out: PathBuf,
        /// Run configuration file (key = value).
        #[arg(long)]
        config: PathBuf,
    },
    /// Segment images with a classical method to produce noisy labels.
    Segment {
        #[arg(long, value_enum)]
        method: SegMethod,
        /// Image directory, or DIR/PREFIX to select PREFIX*.ppm.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of classes (2..=4); the last class is the background.
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Seed for the K-Means initialization.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Match every image's color statistics to a reference image.
    Normalize {
        /// Reference PPM image.
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on noisy labels.
    Train {
        #[arg(long, value_enum)]
        method: TrainMethod,
        /// Image directory, or DIR/PREFIX to select PREFIX*.ppm.
        #[arg(long)]
        data: PathBuf,
        /// First noisy label set (DIR or DIR/PREFIX for PREFIX*.pgm).
        #[arg(long)]
        labels1: PathBuf,
        /// Second noisy label set; required for antn, selects the mixture
        /// for unet.
        #[arg(long)]
        labels2: Option<PathBuf>,
        /// Clean reference labels, used only for metric curves.
        #[arg(long = "clean-ref")]
        clean_ref: Option<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch metrics CSV output path.
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Predict label maps with a trained model's clean network.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also dump per-class probability heatmaps.
        #[arg(long)]
        probs: bool,
    },
    /// Compare predicted label maps against reference labels.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
    },
    /// Score predicted label maps against their images without references.
    EvalUnsup {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
    },
    /// Export a checkpoint's average transition matrices as CSV and PGM
    /// heatmaps.
    Transitions {
        #[arg(long)]
        ckpt: PathBuf,
        /// Images to average the transition predictions over.
        #[arg(long)]
        data: PathBuf,
        /// Output path prefix; files get _t1/_t2/_q suffixes.
        #[arg(long)]
        out: PathBuf,
        /// Observed labels for source 1 (needed by uniform-remainder heads).
        #[arg(long)]
        labels1: Option<PathBuf>,
        /// Observed labels for source 2.
        #[arg(long)]
        labels2: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<()> {
    if let Ok(v) = std::env::var("ANTN_THREADS") {
        let n: usize = v.trim().parse().context("ANTN_THREADS must be a worker count")?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("limiting the worker pool")?;
    }
    match Cli::parse().command {
        Command::GenSynth { out, config } => cmd_gen_synth(&out, &config),
        Command::Segment { method, input, out, classes, seed } => {
            cmd_segment(method, &input, &out, classes, seed)
        }
        Command::Normalize { reference, input, out } => cmd_normalize(&reference, &input, &out),
        Command::Train { method, data, labels1, labels2, clean_ref, config, out, metrics } => {
            cmd_train(method, &data, &labels1, labels2.as_deref(), clean_ref.as_deref(), &config, &out, &metrics)
        }
        Command::Predict { ckpt, input, out, probs } => cmd_predict(&ckpt, &input, &out, probs),
        Command::Eval { pred, truth, classes } => cmd_eval(&pred, &truth, classes),
        Command::EvalUnsup { pred, images, classes } => cmd_eval_unsup(&pred, &images, classes),
        Command::Transitions { ckpt, data, out, labels1, labels2 } => {
            cmd_transitions(&ckpt, &data, &out, labels1.as_deref(), labels2.as_deref())
        }
    }
}

/// Splits a source argument into (directory, stem prefix): an existing
/// directory selects everything, anything else filters its parent
/// directory by file-name prefix.
fn dir_and_prefix(arg: &Path) -> (PathBuf, String) {
    if arg.is_dir() {
        return (arg.to_path_buf(), String::new());
    }
    let dir = match arg.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let prefix = arg.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    (dir, prefix)
}

/// Sorted files under a source argument with the given extension.
fn select_files(arg: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let (dir, prefix) = dir_and_prefix(arg);
    let entries = fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == ext)
                && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with(&prefix))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no {prefix}*.{ext} files in {}", dir.display());
    }
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

fn load_images(arg: &Path) -> Result<(Vec<String>, Vec<Tensor4>)> {
    let files = select_files(arg, "ppm")?;
    let mut names = Vec::with_capacity(files.len());
    let mut images = Vec::with_capacity(files.len());
    for f in &files {
        names.push(stem(f));
        images.push(pnm::read_ppm(f)?);
    }
    Ok((names, images))
}

fn load_labels(arg: &Path, classes: usize) -> Result<(Vec<String>, Vec<LabelField>)> {
    let files = select_files(arg, "pgm")?;
    let mut names = Vec::with_capacity(files.len());
    let mut labels = Vec::with_capacity(files.len());
    for f in &files {
        names.push(stem(f));
        labels.push(pnm::read_pgm(f, classes)?);
    }
    Ok((names, labels))
}

fn cmd_gen_synth(out: &Path, config: &Path) -> Result<()> {
    let cfg = RunConfig::read(config)?;
    cfg.synth.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let data = gen_synthetic(&cfg.synth)?;
    for (i, (image, labels)) in data.iter().enumerate() {
        pnm::write_ppm(&out.join(format!("img_{i:04}.ppm")), image)?;
        pnm::write_pgm(&out.join(format!("clean_{i:04}.pgm")), labels)?;
        let eroded = erode_labels(labels, cfg.synth.se_size)?;
        pnm::write_pgm(&out.join(format!("noisy1_{i:04}.pgm")), &eroded)?;
        let dilated = dilate_labels(labels, cfg.synth.se_size)?;
        pnm::write_pgm(&out.join(format!("noisy2_{i:04}.pgm")), &dilated)?;
    }
    println!("wrote {} images with labels to {}", data.len(), out.display());
    Ok(())
}

/// The circle colors in on-top order, then the white background last so
/// class indices match the generator's convention.
fn prototypes_for(classes: usize) -> Result<ClassPrototypes> {
    if classes == 4 {
        return Ok(ClassPrototypes::default_four());
    }
    let circles = [[200.0, 60.0, 60.0], [60.0, 200.0, 60.0], [60.0, 60.0, 200.0]];
    if !(2..=4).contains(&classes) {
        bail!("--classes must be between 2 and 4, got {classes}");
    }
    let mut colors: Vec<[f64; 3]> = circles[..classes - 1].to_vec();
    colors.push([200.0, 200.0, 200.0]);
    Ok(ClassPrototypes::new(colors)?)
}

fn cmd_segment(
    method: SegMethod,
    input: &Path,
    out: &Path,
    classes: usize,
    seed: u64,
) -> Result<()> {
    let prototypes = prototypes_for(classes)?;
    let (names, images) = load_images(input)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (name, image) in names.iter().zip(&images) {
        let labels = match method {
            SegMethod::Kmeans => kmeans_segment(image, &prototypes, seed),
            SegMethod::Otsu => otsu_segment(image, &prototypes),
        }
        .with_context(|| format!("segmenting {name}"))?;
        pnm::write_pgm(&out.join(format!("{name}.pgm")), &labels)?;
    }
    println!("segmented {} images into {}", images.len(), out.display());
    Ok(())
}

fn cmd_normalize(reference: &Path, input: &Path, out: &Path) -> Result<()> {
    let reference = pnm::read_ppm(reference)?;
    let (names, images) = load_images(input)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (name, image) in names.iter().zip(&images) {
        let matched = reinhard_normalize(image, &reference)
            .with_context(|| format!("normalizing {name}"))?;
        pnm::write_ppm(&out.join(format!("{name}.ppm")), &matched)?;
    }
    println!("normalized {} images into {}", images.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    method: TrainMethod,
    data: &Path,
    labels1: &Path,
    labels2: Option<&Path>,
    clean_ref: Option<&Path>,
    config: &Path,
    out: &Path,
    metrics: &Path,
) -> Result<()> {
    let cfg = RunConfig::read(config)?;
    let classes = cfg.train.num_classes;
    let (_, images) = load_images(data)?;
    let (_, noisy1) = load_labels(labels1, classes)?;
    let noisy2 = match labels2 {
        Some(dir) => Some(load_labels(dir, classes)?.1),
        None => None,
    };
    let clean_ref = match clean_ref {
        Some(dir) => Some(load_labels(dir, classes)?.1),
        None => None,
    };
    let dataset = Dataset { images, noisy1, noisy2, clean_ref };
    let (model, log) = match method {
        TrainMethod::Antn => {
            if dataset.noisy2.is_none() {
                bail!("--method antn needs two label sources; pass --labels2");
            }
            let (m, log) = train_antn(&dataset, &cfg.train)?;
            (TrainedModel::Antn(m), log)
        }
        TrainMethod::Ntn => {
            if dataset.noisy2.is_some() {
                bail!("--method ntn trains on one source; pass it as --labels1");
            }
            let (m, log) = train_ntn(&dataset, LabelSource::Noisy1, &cfg.train)?;
            (TrainedModel::Ntn(m), log)
        }
        TrainMethod::Unet => {
            let source =
                if dataset.noisy2.is_some() { LabelSource::Mixture } else { LabelSource::Noisy1 };
            let (m, log) = train_unet_direct(&dataset, source, &cfg.train)?;
            (TrainedModel::Unet(m), log)
        }
    };
    write_checkpoint(out, &model)?;
    let mut csv = String::with_capacity(64 * (log.len() + 1));
    csv.push_str(CSV_HEADER);
    csv.push('\n');
    for rec in &log {
        csv.push_str(&rec.to_csv_row());
        csv.push('\n');
    }
    fs::write(metrics, csv).with_context(|| format!("writing {}", metrics.display()))?;
    report_training(&log);
    println!("checkpoint {} and metrics {}", out.display(), metrics.display());
    Ok(())
}

fn report_training(log: &[EpochRecord]) {
    if let Some(last) = log.last() {
        println!(
            "trained {} epochs; final phase {} with clean-reference cross-entropy {}",
            log.len(),
            last.phase,
            last.ce_clean
        );
    }
}

fn cmd_predict(ckpt: &Path, input: &Path, out: &Path, probs: bool) -> Result<()> {
    let model = read_checkpoint(ckpt)?;
    let net = model.clean_net();
    let (names, images) = load_images(input)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (name, image) in names.iter().zip(&images) {
        let field = net.predict_clean(image).with_context(|| format!("predicting {name}"))?;
        pnm::write_pgm(&out.join(format!("{name}.pgm")), &field.argmax_labels())?;
        if probs {
            // A distinct leading prefix keeps the heatmaps out of any
            // later DIR/PREFIX selection of the label maps.
            let (h, w, c) = (field.h(), field.w(), field.num_classes());
            for class in 0..c {
                let gray: Vec<u8> = (0..h * w)
                    .map(|pix| (field.data()[pix * c + class] * 255.0).round() as u8)
                    .collect();
                pnm::write_pgm_gray(&out.join(format!("p{class}_{name}.pgm")), h, w, &gray)?;
            }
        }
    }
    println!("predicted {} images into {}", images.len(), out.display());
    Ok(())
}

fn fmt_score(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

/// Pairs two sorted file sets positionally, insisting on equal counts.
fn paired<'a, T, U>(
    left: &'a [T],
    right: &'a [U],
    what: &str,
) -> Result<impl Iterator<Item = (&'a T, &'a U)>> {
    if left.len() != right.len() {
        bail!("{what}: {} files against {}", left.len(), right.len());
    }
    Ok(left.iter().zip(right.iter()))
}

fn cmd_eval(pred: &Path, truth: &Path, classes: usize) -> Result<()> {
    let (names, pred) = load_labels(pred, classes)?;
    let (_, truth) = load_labels(truth, classes)?;
    let mut acc_sum = 0.0;
    let mut ce_sum = 0.0;
    let mut out = String::from("image,accuracy,cross_entropy\n");
    for (i, (p, t)) in paired(&pred, &truth, "eval")?.enumerate() {
        let acc = pixel_accuracy(p, t)?;
        let ce = cross_entropy_curve(&p.one_hot(), t)?;
        acc_sum += acc;
        ce_sum += ce;
        let _ = writeln!(out, "{},{},{}", names[i], fmt_score(acc), fmt_score(ce));
    }
    let n = pred.len() as f64;
    let _ = writeln!(out, "mean,{},{}", fmt_score(acc_sum / n), fmt_score(ce_sum / n));
    print!("{out}");
    Ok(())
}

fn cmd_eval_unsup(pred: &Path, images: &Path, classes: usize) -> Result<()> {
    let (names, pred) = load_labels(pred, classes)?;
    let (_, images) = load_images(images)?;
    let mut sum = 0.0;
    let mut out = String::from("image,uniformity_disparity\n");
    for (i, (p, img)) in paired(&pred, &images, "eval-unsup")?.enumerate() {
        let score = uniformity_disparity(img, p)
            .with_context(|| format!("scoring {}", names[i]))?;
        sum += score;
        let _ = writeln!(out, "{},{}", names[i], fmt_score(score));
    }
    let _ = writeln!(out, "mean,{}", fmt_score(sum / pred.len() as f64));
    print!("{out}");
    Ok(())
}

fn write_matrix(prefix: &Path, suffix: &str, matrix: &TransitionMatrix) -> Result<()> {
    let base = prefix.to_string_lossy();
    let c = matrix.classes();
    let mut csv = String::new();
    for row in 0..c {
        let cells: Vec<String> = (0..c).map(|col| format!("{}", matrix.at(row, col))).collect();
        let _ = writeln!(csv, "{}", cells.join(","));
    }
    let csv_path = PathBuf::from(format!("{base}_{suffix}.csv"));
    fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;
    let pgm_path = PathBuf::from(format!("{base}_{suffix}.pgm"));
    pnm::write_pgm_gray(&pgm_path, c, c, &matrix.heatmap_bytes())?;
    println!("{} and {}", csv_path.display(), pgm_path.display());
    Ok(())
}

fn cmd_transitions(
    ckpt: &Path,
    data: &Path,
    out: &Path,
    labels1: Option<&Path>,
    labels2: Option<&Path>,
) -> Result<()> {
    let model = read_checkpoint(ckpt)?;
    let (_, images) = load_images(data)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    let classes = model.num_classes();
    let load = |arg: Option<&Path>, which: &str| -> Result<Option<Vec<LabelField>>> {
        match arg {
            Some(a) => {
                let (_, l) = load_labels(a, classes)?;
                if l.len() != images.len() {
                    bail!("{which}: {} label files against {} images", l.len(), images.len());
                }
                Ok(Some(l))
            }
            None => Ok(None),
        }
    };
    match &model {
        TrainedModel::Antn(m) => {
            let obs1 = load(labels1, "--labels1")?;
            let obs2 = load(labels2, "--labels2")?;
            let needs_obs = m.trans1.head() != antn::net::HeadKind::TransitionRowSoftmax;
            if needs_obs && (obs1.is_none() || obs2.is_none()) {
                bail!("this checkpoint's transition heads need --labels1 and --labels2");
            }
            let t1 = average_transition(&m.trans1, &images, obs1.as_deref())?;
            write_matrix(out, "t1", &t1)?;
            let t2 = average_transition(&m.trans2, &images, obs2.as_deref())?;
            write_matrix(out, "t2", &t2)?;
        }
        TrainedModel::Ntn(m) => {
            let c = m.q.classes();
            let q = TransitionMatrix::new(c, m.q.q_matrix(), vec![true; c])?;
            write_matrix(out, "q", &q)?;
        }
        TrainedModel::Unet(_) => bail!("checkpoint holds no transition model"),
    }
    Ok(())
}
