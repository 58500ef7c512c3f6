use std::path::{Path, PathBuf};

use acanet::checkpoint;
use acanet::data::{
    apply_crop, compute_bbox, generate_synthetic_fixture, load_samples, plan_crop, read_mask, read_rgb,
    stack_images, write_mask, write_rgb, BBox, DatasetManifest, Normalization,
};
use acanet::metrics::MetricsReport;
use acanet::trainer::{evaluate_samples, train_with_observer, Segmenter};
use acanet::types::OBJECT_CLASSES;
use acanet::{Model, SegmentationMap, Variant};
use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::config::{RunConfig, OUTPUT_ROOT_ENV};
use crate::overlay::{composite, overlay_layer};

pub const REPORT_FILE: &str = "report.csv";
pub const PREDICTION_FILE: &str = "prediction.png";
pub const OVERLAY_FILE: &str = "overlay.png";
pub const COMPOSITE_FILE: &str = "composite.png";

#[derive(Debug, Parser)]
#[command(name = "acanet", version, about = "Arm-container affordance segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and report validation metrics.
    Train(TrainArgs),
    /// Score a checkpoint on an annotated manifest.
    Evaluate(EvaluateArgs),
    /// Segment one image and render the class overlay.
    Predict(PredictArgs),
    /// Write a synthetic dataset with manifests.
    MakeFixtures(FixtureArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::Predict(_) => "predict",
            Command::MakeFixtures(_) => "make-fixtures",
        }
    }
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// TOML file with [paths], [model], [train], [augmentation],
    /// [fixtures] and [predict] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Seeds weight initialization, shuffling, augmentation and fixtures.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `acanet` or `rn18u_baseline`.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Crop window side, which is also the network input size.
    #[arg(long)]
    pub window_size: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub train_manifest: Option<PathBuf>,
    #[arg(long)]
    pub val_manifest: Option<PathBuf>,
    /// Initial weights.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, alias = "val-manifest")]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Object box `x_min,y_min,x_max,y_max` (exclusive maxima).
    #[arg(long, value_parser = parse_bbox)]
    pub bbox: Option<BBox>,
    /// Annotation whose object pixels give the box when `--bbox` is absent.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Write only the class map.
    #[arg(long)]
    pub no_overlay: bool,
}

#[derive(Debug, Args, Default)]
pub struct FixtureArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of image/mask pairs.
    #[arg(long)]
    pub n: Option<usize>,
    /// Side of each square image.
    #[arg(long)]
    pub size: Option<usize>,
}

fn parse_bbox(s: &str) -> Result<BBox, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let arr: [usize; 4] = v
        .try_into()
        .map_err(|_| "expected four comma-separated integers".to_string())?;
    BBox::try_from(arr)
}

/// Effective configuration and whether the model architecture was pinned
/// by the user rather than left to a checkpoint.
struct Resolved {
    config: RunConfig,
    model_pinned: bool,
}

fn resolve(common: &CommonArgs) -> anyhow::Result<Resolved> {
    let (mut config, mut model_pinned) = match &common.config {
        Some(p) => {
            let f = RunConfig::read(p)?;
            (f.config, f.has_model_section)
        }
        None => (RunConfig::default(), false),
    };
    if let Some(d) = &common.output_dir {
        config.paths.output_dir = Some(d.clone());
    }
    if let Some(s) = common.seed {
        config.set_seed(s);
    }
    if let Some(v) = common.variant {
        config.model.variant = v;
        model_pinned = true;
    }
    if let Some(w) = common.window_size {
        config.model.input_size = w;
        model_pinned = true;
    }
    Ok(Resolved { config, model_pinned })
}

fn override_path(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if let Some(p) = flag {
        *slot = Some(p.clone());
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
    p.as_deref().ok_or_else(|| anyhow!("no {flag} given"))
}

fn read_manifest(path: &Path) -> anyhow::Result<DatasetManifest> {
    DatasetManifest::read(path).with_context(|| format!("cannot load manifest {}", path.display()))
}

fn load_model(config: &RunConfig, pinned: bool, path: &Path) -> anyhow::Result<Model<f32>> {
    if pinned {
        let mut model = Model::build(config.model.clone())?;
        checkpoint::load_into(&mut model, path)?;
        Ok(model)
    } else {
        Ok(checkpoint::load(path)?)
    }
}

fn write_report(report: &MetricsReport, dir: &Path) -> anyhow::Result<PathBuf> {
    let path = dir.join(REPORT_FILE);
    std::fs::write(&path, report.to_csv()).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(path)
}

/// Crops every record of `manifest` at `window` and scores `segmenter`.
pub fn evaluation_report<S: Segmenter + ?Sized>(
    segmenter: &S,
    manifest: &DatasetManifest,
    window: usize,
) -> anyhow::Result<MetricsReport> {
    let samples = load_samples(manifest, window)?;
    Ok(evaluate_samples(segmenter, &samples, &manifest.normalization)?)
}

pub fn cmd_train(args: &TrainArgs, env_root: Option<&Path>) -> anyhow::Result<PathBuf> {
    let Resolved { mut config, .. } = resolve(&args.common)?;
    override_path(&mut config.paths.train_manifest, &args.train_manifest);
    override_path(&mut config.paths.val_manifest, &args.val_manifest);
    override_path(&mut config.paths.checkpoint, &args.checkpoint);
    if let Some(b) = args.batch_size {
        config.train.batch_size = b;
    }
    if let Some(lr) = args.lr {
        config.train.lr_initial = lr;
    }
    if let Some(e) = args.max_epochs {
        config.train.max_epochs = e;
    }
    config.validate()?;
    let train_manifest = read_manifest(required(&config.paths.train_manifest, "--train-manifest")?)?;
    let val_manifest = read_manifest(required(&config.paths.val_manifest, "--val-manifest")?)?;
    let out = config.output_dir(env_root, "train");
    config.echo(&out)?;

    let mut model = Model::<f32>::build(config.model.clone())?;
    if let Some(p) = &config.paths.checkpoint {
        checkpoint::load_into(&mut model, p)?;
    }
    let outcome = train_with_observer(
        &mut model,
        &train_manifest,
        &val_manifest,
        &config.train,
        &config.augmentation,
        Some(&out),
        &mut |log| {
            eprintln!(
                "epoch {:>3}  loss {:.4}  val mIoU {}  lr {:e}",
                log.epoch,
                log.loss,
                log.val_miou.map_or("nan".to_string(), |v| format!("{v:.4}")),
                log.lr
            )
        },
    )?;
    let report = evaluation_report(&model, &val_manifest, config.model.input_size)?;
    let path = write_report(&report, &out)?;
    eprintln!(
        "stopped: {:?}; best epoch {:?}; report {}",
        outcome.stop_reason,
        outcome.best_epoch,
        path.display()
    );
    print!("{}", report.to_csv());
    Ok(out)
}

pub fn cmd_evaluate(args: &EvaluateArgs, env_root: Option<&Path>) -> anyhow::Result<PathBuf> {
    let Resolved { mut config, model_pinned } = resolve(&args.common)?;
    override_path(&mut config.paths.checkpoint, &args.checkpoint);
    override_path(&mut config.paths.manifest, &args.manifest);
    let ckpt = required(&config.paths.checkpoint, "--checkpoint")?.to_path_buf();
    let manifest = read_manifest(required(&config.paths.manifest, "--manifest")?)?;
    let model = load_model(&config, model_pinned, &ckpt)?;
    config.model = model.config().clone();
    config.validate()?;
    let out = config.output_dir(env_root, "evaluate");
    config.echo(&out)?;
    let report = evaluation_report(&model, &manifest, config.model.input_size)?;
    write_report(&report, &out)?;
    print!("{}", report.to_csv());
    Ok(out)
}

/// Network input for `predict`: the object-centred crop of `image`.
fn predict_crop(image: &acanet::data::RgbImage, bbox: BBox, window: usize) -> anyhow::Result<acanet::data::RgbImage> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let plan = plan_crop(w, h, bbox, window)?;
    let blank = SegmentationMap::filled(w, h, 0);
    Ok(apply_crop(image, &blank, &plan)?.0)
}

pub fn cmd_predict(args: &PredictArgs, env_root: Option<&Path>) -> anyhow::Result<PathBuf> {
    let Resolved { mut config, model_pinned } = resolve(&args.common)?;
    override_path(&mut config.paths.checkpoint, &args.checkpoint);
    override_path(&mut config.paths.image, &args.image);
    override_path(&mut config.paths.mask, &args.mask);
    if args.bbox.is_some() {
        config.predict.bbox = args.bbox;
    }
    if args.no_overlay {
        config.predict.overlay = false;
    }
    let ckpt = required(&config.paths.checkpoint, "--checkpoint")?.to_path_buf();
    let image_path = required(&config.paths.image, "--image")?;
    let image = read_rgb(image_path)?;
    let bbox = match (config.predict.bbox, &config.paths.mask) {
        (Some(b), _) => b,
        (None, Some(m)) => compute_bbox(&read_mask(m)?, &OBJECT_CLASSES)?,
        (None, None) => {
            let (cx, cy) = (image.width() as usize / 2, image.height() as usize / 2);
            BBox::new(cx, cy, cx + 1, cy + 1)?
        }
    };
    let model = load_model(&config, model_pinned, &ckpt)?;
    config.model = model.config().clone();
    config.validate()?;
    let norm = match checkpoint::Checkpoint::read(&ckpt)?.metadata.get(checkpoint::NORMALIZATION_KEY) {
        Some(json) => serde_json::from_str::<Normalization>(json).context("bad normalization in checkpoint")?,
        None => Normalization::default(),
    };
    let out = config.output_dir(env_root, "predict");
    config.echo(&out)?;

    let crop = predict_crop(&image, bbox, config.model.input_size)?;
    let pred = model.forward(&stack_images::<f32>(&[&crop], &norm)?)?;
    let map = pred.segmentation(0);
    write_mask(&map, &out.join(PREDICTION_FILE))?;
    if config.predict.overlay {
        let layer = out.join(OVERLAY_FILE);
        overlay_layer(&map)
            .save(&layer)
            .with_context(|| format!("cannot write {}", layer.display()))?;
        write_rgb(&composite(&crop, &map), &out.join(COMPOSITE_FILE))?;
    }
    Ok(out)
}

pub fn cmd_make_fixtures(args: &FixtureArgs, env_root: Option<&Path>) -> anyhow::Result<PathBuf> {
    let Resolved { mut config, .. } = resolve(&args.common)?;
    if let Some(n) = args.n {
        config.fixtures.count = n;
    }
    if let Some(s) = args.size {
        config.fixtures.size = s;
    }
    if config.fixtures.count == 0 {
        bail!("--n must be at least 1");
    }
    config.validate()?;
    let out = config.output_dir(env_root, "make-fixtures");
    config.echo(&out)?;
    let f = &config.fixtures;
    let manifest = generate_synthetic_fixture(&out, f.count, f.size, f.seed)?;
    eprintln!("wrote {} fixtures to {}", manifest.len(), out.display());
    Ok(out)
}

/// Runs one parsed command; returns its output directory.
pub fn run(cli: &Cli, env_root: Option<&Path>) -> anyhow::Result<PathBuf> {
    match &cli.command {
        Command::Train(a) => cmd_train(a, env_root),
        Command::Evaluate(a) => cmd_evaluate(a, env_root),
        Command::Predict(a) => cmd_predict(a, env_root),
        Command::MakeFixtures(a) => cmd_make_fixtures(a, env_root),
    }
}

/// Output root from the environment, if set.
pub fn env_output_root() -> Option<PathBuf> {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_flag() {
        assert_eq!(parse_bbox("1,2,5,9").unwrap(), BBox::new(1, 2, 5, 9).unwrap());
        assert!(parse_bbox("1,2,5").is_err());
        assert!(parse_bbox("5,2,1,9").is_err());
        assert!(parse_bbox("a,2,5,9").is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\nseed = 3\nlr_initial = 0.2\n[model]\nvariant = \"acanet\"\n").unwrap();
        let r = resolve(&CommonArgs {
            config: Some(p),
            seed: Some(9),
            variant: Some(Variant::Rn18uBaseline),
            ..CommonArgs::default()
        })
        .unwrap();
        assert!(r.model_pinned);
        assert_eq!(r.config.train.seed, 9);
        assert_eq!(r.config.train.lr_initial, 0.2);
        assert_eq!(r.config.model.variant, Variant::Rn18uBaseline);
    }

    #[test]
    fn checkpoint_defines_model_when_unpinned() {
        let r = resolve(&CommonArgs::default()).unwrap();
        assert!(!r.model_pinned);
    }
}
