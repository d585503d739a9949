//! Command implementations behind the `scoreforge` binary.
//!
//! Exit-code contract: 0 on success, 1 on usage errors (bad flags, missing
//! inputs, refusing to clobber without --overwrite), 2 on runtime errors.

pub mod chart;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Axis;

use scoreforge_autograd::Tensor;
use scoreforge_core::cyclewgan::{self, CycleWgan, Direction};
use scoreforge_core::dataprep::{
    build_manifest, extract_square_crops, to_grayscale, write_crops, DatasetManifest, Domain,
    PixelData, SourceImage,
};
use scoreforge_core::dcgan::{self, sample_latent, save_images, to_u8_images};
use scoreforge_core::error::Error as CoreError;
use scoreforge_core::metrics::{
    evaluate, load_image_dir_named, pca_project, write_pca_csv, ClassifierAdapter,
    FeatureExtractor, TestExtractor,
};
use scoreforge_core::progan;
use scoreforge_core::traincore::{seed_all, Checkpoint, LossLog, ModelKind, TrainConfig};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

#[derive(Parser, Debug)]
#[command(
    name = "scoreforge",
    version,
    about = "Synthesize handwritten-music staff images with GANs and evaluate the results",
    long_about = "Pipeline: `augment` cuts staff scans into square grayscale crops with a \
                  manifest; `train` fits dcgan/progan/cyclewgan models; `generate` samples \
                  images from a checkpoint; `translate` maps between printed and handwritten \
                  styles; `evaluate` computes IS/FID/KID; `report` renders loss curves and \
                  PCA scatter plots. The SCOREFORGE_DEVICE environment variable selects the \
                  compute device (default and only supported value: cpu)."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Cut staff scans into square grayscale crops and write a manifest
    Augment(AugmentArgs),
    /// Train a model on prepared crops
    Train(TrainArgs),
    /// Sample images from a trained dcgan/progan checkpoint
    Generate(GenerateArgs),
    /// Translate images between domains with a cyclewgan checkpoint
    Translate(TranslateArgs),
    /// Compute IS, FID and KID between a real and a fake directory
    Evaluate(EvaluateArgs),
    /// Render loss-curve figures and PCA scatter plots
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    /// Directory of rectangular staff scans (png/jpg/bmp/tiff)
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for crops and manifest.json
    #[arg(long)]
    pub output: PathBuf,
    /// Source domain of the scans
    #[arg(long)]
    pub domain: String,
    /// Side length of the square crops
    #[arg(long = "crop-size")]
    pub crop_size: usize,
    /// Horizontal step between crops (defaults to crop size; smaller values
    /// produce overlapping crops)
    #[arg(long)]
    pub stride: Option<usize>,
    /// Fraction of sources assigned to the eval split
    #[arg(long = "eval-fraction", default_value_t = 0.0)]
    pub eval_fraction: f64,
    /// Replace existing outputs
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Model to train: dcgan, progan or cyclewgan
    pub model: String,
    /// TOML config file; keys match TrainConfig fields. Flags below override.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Crop directory (with manifest.json) for dcgan/progan
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Printed-domain crop directory for cyclewgan
    #[arg(long = "data-printed")]
    pub data_printed: Option<PathBuf>,
    /// Handwritten-domain crop directory for cyclewgan
    #[arg(long = "data-handwritten")]
    pub data_handwritten: Option<PathBuf>,
    /// Output directory for checkpoints and the loss log
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from a checkpoint file
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Replace existing outputs
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Checkpoint produced by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory for PNG samples
    #[arg(long)]
    pub out: PathBuf,
    /// Number of images to sample
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    /// Output resolution (progan: any trained stage; dcgan: 64)
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Seed for the latent samples
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Replace existing outputs
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    /// CycleWGAN checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of input crops
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for translated images
    #[arg(long)]
    pub out: PathBuf,
    /// p2h (printed to handwritten) or h2p
    #[arg(long, default_value = "p2h")]
    pub direction: String,
    /// Also write a side-by-side contact sheet of input/output pairs
    #[arg(long = "contact-sheet")]
    pub contact_sheet: bool,
    /// Replace existing outputs
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Directory of real images
    #[arg(long)]
    pub real: PathBuf,
    /// Directory of generated images
    #[arg(long)]
    pub fake: PathBuf,
    /// `test` for the deterministic extractor, or a path to a classifier
    /// file for the pretrained-classifier adapter
    #[arg(long, default_value = "test")]
    pub extractor: String,
    /// Number of contiguous groups for the Inception Score
    #[arg(long, default_value_t = 10)]
    pub splits: usize,
    /// Output JSON report path
    #[arg(long, default_value = "metrics.json")]
    pub out: PathBuf,
    /// Replace existing outputs
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Loss-log CSV written by `train`
    #[arg(long)]
    pub losslog: Option<PathBuf>,
    /// Labelled image directories `label=dir` to embed and project with PCA
    /// (repeatable)
    #[arg(long = "pca-features")]
    pub pca_features: Vec<String>,
    /// Extractor for --pca-features: `test` or a classifier file path
    #[arg(long, default_value = "test")]
    pub extractor: String,
    /// Output directory for figures
    #[arg(long)]
    pub out: PathBuf,
    /// Replace existing outputs
    #[arg(long)]
    pub overwrite: bool,
}

/// Refuse to clobber an existing file unless --overwrite was given.
fn guard_overwrite(path: &Path, overwrite: bool) -> CliResult<()> {
    if path.exists() && !overwrite {
        return Err(usage(format!(
            "refusing to overwrite {}; pass --overwrite to replace it",
            path.display()
        )));
    }
    Ok(())
}

fn require_dir(path: &Path, what: &str) -> CliResult<()> {
    if !path.is_dir() {
        return Err(usage(format!("{what} directory {} does not exist", path.display())));
    }
    Ok(())
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if !path.is_file() {
        return Err(usage(format!("{what} file {} does not exist", path.display())));
    }
    Ok(())
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Augment(args) => cmd_augment(args),
        Command::Train(args) => cmd_train(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Translate(args) => cmd_translate(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Report(args) => cmd_report(args),
    }
}

const SCAN_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

pub fn cmd_augment(args: AugmentArgs) -> CliResult<()> {
    require_dir(&args.input, "input")?;
    let domain: Domain = args.domain.parse().map_err(|e: CoreError| usage(e.to_string()))?;
    if args.crop_size == 0 {
        return Err(usage("--crop-size must be at least 1"));
    }
    let stride = args.stride.unwrap_or(args.crop_size);
    if stride == 0 {
        return Err(usage("--stride must be at least 1"));
    }
    if !(0.0..=1.0).contains(&args.eval_fraction) {
        return Err(usage("--eval-fraction must be in [0, 1]"));
    }
    let manifest_path = args.output.join("manifest.json");
    guard_overwrite(&manifest_path, args.overwrite)?;
    std::fs::create_dir_all(&args.output)
        .map_err(|e| runtime(format!("cannot create {}: {e}", args.output.display())))?;

    let mut scan_paths: Vec<PathBuf> = std::fs::read_dir(&args.input)
        .map_err(|e| runtime(format!("cannot read {}: {e}", args.input.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| SCAN_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                    .unwrap_or(false)
        })
        .collect();
    scan_paths.sort();

    let mut rejects: Vec<(PathBuf, String)> = Vec::new();
    let mut sources = 0usize;
    let mut crop_count = 0usize;
    for path in &scan_paths {
        let source_id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("scan")
            .to_string();
        let loaded = image::open(path)
            .map_err(|e| e.to_string())
            .and_then(|img| {
                let pixels = match img {
                    image::DynamicImage::ImageLuma8(g) => {
                        let (w, h) = g.dimensions();
                        PixelData::Gray(
                            ndarray::Array2::from_shape_vec((h as usize, w as usize), g.into_raw())
                                .unwrap(),
                        )
                    }
                    other => {
                        let rgb = other.to_rgb8();
                        let (w, h) = rgb.dimensions();
                        PixelData::Rgb(
                            ndarray::Array3::from_shape_vec(
                                (h as usize, w as usize, 3),
                                rgb.into_raw(),
                            )
                            .unwrap(),
                        )
                    }
                };
                SourceImage::new(pixels, domain, &source_id).map_err(|e| e.to_string())
            });
        match loaded {
            Ok(img) => {
                let gray = to_grayscale(&img).map_err(|e| runtime(e.to_string()))?;
                let crops = extract_square_crops(&gray, args.crop_size, stride)
                    .map_err(|e| runtime(e.to_string()))?;
                crop_count += crops.len();
                write_crops(&crops, &args.output).map_err(|e| runtime(e.to_string()))?;
                sources += 1;
            }
            Err(reason) => rejects.push((path.clone(), reason)),
        }
    }

    let (manifest, manifest_rejects) = build_manifest(&args.output, domain, args.eval_fraction)
        .map_err(|e| runtime(e.to_string()))?;
    for r in manifest_rejects {
        rejects.push((r.path, r.reason));
    }
    manifest.save(&manifest_path).map_err(|e| runtime(e.to_string()))?;

    if !rejects.is_empty() {
        let report_path = args.output.join("rejects.txt");
        let mut report = String::new();
        for (path, reason) in &rejects {
            report.push_str(&format!("{}\t{}\n", path.display(), reason));
            eprintln!("reject: {} ({reason})", path.display());
        }
        std::fs::write(&report_path, report)
            .map_err(|e| runtime(format!("cannot write reject report: {e}")))?;
    }

    println!("domain={domain} sources={sources} crops={crop_count}");
    if !rejects.is_empty() {
        return Err(runtime(format!(
            "{} input file(s) were rejected; see {}",
            rejects.len(),
            args.output.join("rejects.txt").display()
        )));
    }
    Ok(())
}

fn load_manifest_dir(dir: &Path, what: &str) -> CliResult<(DatasetManifest, PathBuf)> {
    require_dir(dir, what)?;
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.is_file() {
        return Err(usage(format!(
            "{what} directory {} has no manifest.json; run `scoreforge augment` first",
            dir.display()
        )));
    }
    let manifest = DatasetManifest::load(&manifest_path).map_err(CliError::from)?;
    Ok((manifest, dir.to_path_buf()))
}

pub fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let model: ModelKind = args.model.parse().map_err(|e: CoreError| usage(e.to_string()))?;
    let mut config = match &args.config {
        Some(path) => {
            require_file(path, "config")?;
            TrainConfig::from_toml_file(path).map_err(|e| usage(e.to_string()))?
        }
        None => TrainConfig::default_for(model),
    };
    if config.model != model {
        return Err(usage(format!(
            "config file is for {}, but the command names {model}",
            config.model
        )));
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
    }
    if let Some(batch) = args.batch_size {
        config.batch_size = batch;
    }
    if let Some(res) = args.resolution {
        config.resolution = res;
    }
    config.validate().map_err(|e| usage(e.to_string()))?;

    let resume = match &args.resume {
        Some(path) => {
            require_file(path, "checkpoint")?;
            Some(Checkpoint::load(path).map_err(|e| runtime(e.to_string()))?)
        }
        None => None,
    };
    if resume.is_none() {
        guard_overwrite(&args.out.join("losslog.csv"), args.overwrite)?;
    }

    let outcome = match model {
        ModelKind::Dcgan | ModelKind::Progan => {
            let data = args
                .data
                .as_ref()
                .ok_or_else(|| usage(format!("--data is required to train {model}")))?;
            let (manifest, dir) = load_manifest_dir(data, "data")?;
            match model {
                ModelKind::Dcgan => {
                    dcgan::train_dcgan(&config, &manifest, &dir, &args.out, resume)?
                }
                _ => progan::train_progan(&config, &manifest, &dir, &args.out, resume)?,
            }
        }
        ModelKind::Cyclewgan => {
            let dp = args
                .data_printed
                .as_ref()
                .ok_or_else(|| usage("--data-printed is required to train cyclewgan"))?;
            let dh = args
                .data_handwritten
                .as_ref()
                .ok_or_else(|| usage("--data-handwritten is required to train cyclewgan"))?;
            let (mp, dir_p) = load_manifest_dir(dp, "printed data")?;
            let (mh, dir_h) = load_manifest_dir(dh, "handwritten data")?;
            cyclewgan::train_cyclewgan(&config, &mp, &dir_p, &mh, &dir_h, &args.out, resume)?
        }
    };

    println!(
        "model={model} epochs={} steps={} checkpoint={} losslog={}",
        config.total_epochs(),
        outcome.log.rows.len(),
        outcome.checkpoint.display(),
        outcome.log_path.display()
    );
    Ok(())
}

pub fn cmd_generate(args: GenerateArgs) -> CliResult<()> {
    require_file(&args.checkpoint, "checkpoint")?;
    if args.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let ck = Checkpoint::load(&args.checkpoint).map_err(|e| runtime(e.to_string()))?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| runtime(format!("cannot create {}: {e}", args.out.display())))?;
    guard_overwrite(&args.out.join("gen_0000.png"), args.overwrite)?;

    let mut latent_rng = seed_all(args.seed).latent;
    let images = match ck.model {
        ModelKind::Dcgan => {
            if let Some(res) = args.resolution {
                if res != 64 {
                    return Err(usage("dcgan generates at a fixed resolution of 64"));
                }
            }
            let gen = dcgan::generator_from_checkpoint(&ck).map_err(CliError::from)?;
            let z = sample_latent(args.count, ck.config.latent_dim, &mut latent_rng);
            to_u8_images(&gen.forward(&z, false))
        }
        ModelKind::Progan => {
            let (gen, trained_stage) =
                progan::generator_from_checkpoint(&ck).map_err(CliError::from)?;
            let resolution = args.resolution.unwrap_or(4usize << trained_stage);
            if !resolution.is_power_of_two() || resolution < 4 {
                return Err(usage("--resolution must be a power of two, at least 4"));
            }
            let stage = (resolution / 4).trailing_zeros();
            if stage > trained_stage {
                return Err(usage(format!(
                    "checkpoint is trained up to {px}x{px}; cannot generate at {resolution}",
                    px = 4usize << trained_stage
                )));
            }
            let z = Tensor::randn(&[args.count, ck.config.latent_dim], 1.0, &mut latent_rng);
            to_u8_images(&gen.forward(&z, stage as usize, 1.0))
        }
        ModelKind::Cyclewgan => {
            return Err(usage(
                "cyclewgan checkpoints translate between domains; use `scoreforge translate`",
            ))
        }
    };
    let resolution = images[0].nrows();
    save_images(&images, &args.out, "gen").map_err(|e| runtime(e.to_string()))?;
    println!(
        "model={} count={} resolution={} out={}",
        ck.model,
        images.len(),
        resolution,
        args.out.display()
    );
    Ok(())
}

pub fn cmd_translate(args: TranslateArgs) -> CliResult<()> {
    require_file(&args.checkpoint, "checkpoint")?;
    require_dir(&args.input, "input")?;
    let direction: Direction =
        args.direction.parse().map_err(|e: CoreError| usage(e.to_string()))?;
    let ck = Checkpoint::load(&args.checkpoint).map_err(|e| runtime(e.to_string()))?;
    if ck.model != ModelKind::Cyclewgan {
        return Err(usage(format!("checkpoint is for {}, expected cyclewgan", ck.model)));
    }
    let model = CycleWgan::from_checkpoint(&ck).map_err(CliError::from)?;

    let (batch, stems) =
        load_image_dir_named(&args.input, model.resolution, None).map_err(CliError::from)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| runtime(format!("cannot create {}: {e}", args.out.display())))?;
    let prefix = match direction {
        Direction::PrintedToHandwritten => "fake_hw",
        Direction::HandwrittenToPrinted => "fake_pr",
    };
    guard_overwrite(&args.out.join(format!("{prefix}_{}.png", stems[0])), args.overwrite)?;

    let n = batch.shape()[0];
    let mut inputs_u8 = Vec::with_capacity(n);
    let mut outputs_u8 = Vec::with_capacity(n);
    for chunk_start in (0..n).step_by(8) {
        let end = (chunk_start + 8).min(n);
        let sub = batch
            .slice_axis(Axis(0), ndarray::Slice::from(chunk_start..end))
            .to_owned();
        let input = Tensor::constant(sub.into_dyn());
        let output = cyclewgan::translate(&model, &input, direction).map_err(CliError::from)?;
        inputs_u8.extend(to_u8_images(&input));
        outputs_u8.extend(to_u8_images(&output));
    }

    for (stem, img) in stems.iter().zip(&outputs_u8) {
        let path = args.out.join(format!("{prefix}_{stem}.png"));
        let raw: Vec<u8> = img.iter().copied().collect();
        image::GrayImage::from_raw(img.ncols() as u32, img.nrows() as u32, raw)
            .ok_or_else(|| runtime("image buffer mismatch"))?
            .save(&path)
            .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))?;
    }

    if args.contact_sheet {
        let sheet_path = args.out.join("contact_sheet.png");
        write_contact_sheet(&inputs_u8, &outputs_u8, &sheet_path)?;
    }
    println!(
        "direction={} count={} resolution={} out={}",
        args.direction,
        n,
        model.resolution,
        args.out.display()
    );
    Ok(())
}

/// Side-by-side pairs (input | output), one row per image, up to 8 rows.
fn write_contact_sheet(
    inputs: &[ndarray::Array2<u8>],
    outputs: &[ndarray::Array2<u8>],
    path: &Path,
) -> CliResult<()> {
    let rows = inputs.len().min(8);
    let size = inputs[0].nrows();
    let gap = 4usize;
    let width = size * 2 + 3 * gap;
    let height = rows * size + (rows + 1) * gap;
    let mut sheet = image::GrayImage::from_pixel(width as u32, height as u32, image::Luma([255]));
    for r in 0..rows {
        let y0 = gap + r * (size + gap);
        for (k, img) in [&inputs[r], &outputs[r]].into_iter().enumerate() {
            let x0 = gap + k * (size + gap);
            for i in 0..size {
                for j in 0..size {
                    sheet.put_pixel((x0 + j) as u32, (y0 + i) as u32, image::Luma([img[[i, j]]]));
                }
            }
        }
    }
    sheet
        .save(path)
        .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn make_extractor(spec: &str) -> CliResult<Box<dyn FeatureExtractor>> {
    if spec == "test" {
        return Ok(Box::new(TestExtractor::default()));
    }
    let path = Path::new(spec);
    require_file(path, "classifier")?;
    Ok(Box::new(
        ClassifierAdapter::from_file(path).map_err(|e| runtime(e.to_string()))?,
    ))
}

pub fn cmd_evaluate(args: EvaluateArgs) -> CliResult<()> {
    require_dir(&args.real, "real")?;
    require_dir(&args.fake, "fake")?;
    if args.splits == 0 {
        return Err(usage("--splits must be at least 1"));
    }
    guard_overwrite(&args.out, args.overwrite)?;
    let extractor = make_extractor(&args.extractor)?;
    let report = evaluate(&args.real, &args.fake, extractor.as_ref(), args.splits)
        .map_err(CliError::from)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| runtime(format!("report serialization: {e}")))?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| runtime(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    std::fs::write(&args.out, json + "\n")
        .map_err(|e| runtime(format!("cannot write {}: {e}", args.out.display())))?;
    println!(
        "is={:.5}±{:.5} fid={:.5} kid={:.5} n_real={} n_fake={} report={}",
        report.is_mean,
        report.is_std,
        report.fid,
        report.kid,
        report.n_real,
        report.n_fake,
        args.out.display()
    );
    Ok(())
}

pub fn cmd_report(args: ReportArgs) -> CliResult<()> {
    if args.losslog.is_none() && args.pca_features.is_empty() {
        return Err(usage("pass --losslog and/or --pca-features label=dir"));
    }
    std::fs::create_dir_all(&args.out)
        .map_err(|e| runtime(format!("cannot create {}: {e}", args.out.display())))?;
    let mut written: Vec<PathBuf> = Vec::new();

    if let Some(losslog) = &args.losslog {
        require_file(losslog, "loss log")?;
        let log = LossLog::read_csv(losslog).map_err(|e| runtime(e.to_string()))?;
        if log.rows.is_empty() {
            return Err(runtime(format!("{} contains no rows", losslog.display())));
        }
        let combined = args.out.join("losses.png");
        guard_overwrite(&combined, args.overwrite)?;
        let series: Vec<(String, Vec<(f64, f64)>)> = log
            .columns
            .iter()
            .enumerate()
            .map(|(c, name)| {
                (
                    name.clone(),
                    log.rows.iter().map(|r| (r.step as f64, r.values[c])).collect(),
                )
            })
            .collect();
        chart::render_line_chart(&series, "TRAINING LOSS", "STEP", "LOSS", 900, 600, &combined)
            .map_err(runtime)?;
        written.push(combined);
        for (name, points) in &series {
            let path = args.out.join(format!("loss_{name}.png"));
            guard_overwrite(&path, args.overwrite)?;
            chart::render_line_chart(
                &[(name.clone(), points.clone())],
                &name.to_uppercase(),
                "STEP",
                name,
                900,
                600,
                &path,
            )
            .map_err(runtime)?;
            written.push(path);
        }
    }

    if !args.pca_features.is_empty() {
        let extractor = make_extractor(&args.extractor)?;
        let mut sets = Vec::new();
        for spec in &args.pca_features {
            let (label, dir) = spec
                .split_once('=')
                .ok_or_else(|| usage(format!("--pca-features expects label=dir, got `{spec}`")))?;
            let dir = Path::new(dir);
            require_dir(dir, "pca feature")?;
            let (batch, _) = load_image_dir_named(dir, extractor.input_resolution(), None)
                .map_err(CliError::from)?;
            let features = extractor
                .embed(&batch)
                .map_err(|e| runtime(format!("extractor `{}`: {e}", extractor.id())))?;
            sets.push((label.to_string(), features));
        }
        let proj = pca_project(&sets, 2).map_err(CliError::from)?;
        let csv_path = args.out.join("pca.csv");
        let png_path = args.out.join("pca.png");
        guard_overwrite(&csv_path, args.overwrite)?;
        guard_overwrite(&png_path, args.overwrite)?;
        write_pca_csv(&proj, &csv_path).map_err(CliError::from)?;
        let scatter: Vec<(String, Vec<(f64, f64)>)> = proj
            .labels
            .iter()
            .zip(&proj.coordinates)
            .map(|(label, coords)| {
                (
                    label.clone(),
                    coords.rows().into_iter().map(|r| (r[0], r[1])).collect(),
                )
            })
            .collect();
        let title = format!(
            "PCA (EVR {:.0}% / {:.0}%)",
            proj.explained_variance_ratio[0] * 100.0,
            proj.explained_variance_ratio[1] * 100.0
        );
        chart::render_scatter(&scatter, &title, "PC1", "PC2", 900, 600, &png_path)
            .map_err(runtime)?;
        written.push(csv_path);
        written.push(png_path);
    }

    for path in &written {
        println!("wrote {}", path.display());
    }
    Ok(())
}
