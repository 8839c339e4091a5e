//! The five subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use nerf_poison::field::{load_checkpoint, write_checkpoint, AnyField, Backend, RadianceField};
use nerf_poison::imaging::{encode_flo, psnr, psnr_for_report, save_png, ssim};
use nerf_poison::poison::{poison_dataset_with, EpochLog};
use nerf_poison::render::{render_image, RenderOptions, SamplingMode};
use nerf_poison::scene::{make_synthetic_scene, poses_to_json, render_dataset, PoseFrame};
use nerf_poison::train::fit;
use nerf_poison::warp::PerturbKind;

use crate::config::{load_scene_spec, RunConfig};
use crate::dataset::{image_file_name, view_name, Dataset, Split, GT_FIELD_FILE, HELDOUT_POSES_FILE, IMAGES_DIR, POSES_FILE};
use crate::error::{CliError, CliResult};
use crate::staging::{check_out_dir, StagedDir, StagedFiles};

pub const POISONED_DIR: &str = "poisoned";
pub const FLOWS_DIR: &str = "flows";
pub const POISON_LOG_FILE: &str = "poison_log.csv";
pub const METRICS_HEADER: [&str; 4] = ["scene", "view", "psnr_db", "ssim"];
pub const MEAN_ROW_LABEL: &str = "mean";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BackendArg {
    Grid,
    Mlp,
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Grid => Backend::Grid,
            BackendArg::Mlp => Backend::Mlp,
        }
    }
}

#[derive(Debug, Clone, clap::Args)]
pub struct SynthArgs {
    /// Scene spec, or a run config with a `scene` section.
    #[arg(long)]
    pub spec: PathBuf,
    /// Output dataset directory; must not exist or be empty.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for camera jitter.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn synth(a: &SynthArgs) -> CliResult<String> {
    let spec = load_scene_spec(&a.spec)?;
    check_out_dir(&a.out)?;
    let scene = make_synthetic_scene(&spec, a.seed)?;
    let images = render_dataset(&scene.field, &scene.cameras, spec.samples_per_ray)?;

    let staged = StagedDir::new(&a.out)?;
    let root = staged.path();
    fs::create_dir(root.join(IMAGES_DIR))?;
    let (mut train, mut heldout) = (Vec::new(), Vec::new());
    for (i, (img, cam)) in images.iter().zip(&scene.cameras).enumerate() {
        let file = format!("{IMAGES_DIR}/{}", image_file_name(i));
        save_png(img, root.join(&file))?;
        let frame = PoseFrame { file, camera: cam.clone() };
        if scene.heldout[i] {
            heldout.push(frame);
        } else {
            train.push(frame);
        }
    }
    fs::write(root.join(POSES_FILE), poses_to_json(&train)?)?;
    fs::write(root.join(HELDOUT_POSES_FILE), poses_to_json(&heldout)?)?;
    fs::write(root.join(GT_FIELD_FILE), write_checkpoint(&AnyField::Grid(scene.field))?)?;
    staged.commit()?;
    Ok(format!(
        "wrote {} training and {} held-out views to {}",
        train.len(),
        heldout.len(),
        a.out.display()
    ))
}

#[derive(Debug, Clone, clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = BackendArg::Grid)]
    pub backend: BackendArg,
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Train on the images in this directory (matched by file name)
    /// instead of the dataset's own, e.g. a poisoned set.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-step loss table; defaults to `<out>.loss.csv`.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

pub fn default_loss_csv(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".loss.csv");
    out.with_file_name(name)
}

pub fn train(a: &TrainArgs) -> CliResult<String> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    let backend = Backend::from(a.backend);
    let fit_cfg = cfg.fit_config(backend)?;
    let ds = Dataset::open(&a.data)?;
    if ds.train.is_empty() {
        return Err(CliError::data("dataset has no training frames"));
    }
    let images = ds.images(Split::Train, a.images.as_deref())?;
    let cameras = ds.cameras(Split::Train);
    let loss_csv = a.loss_csv.clone().unwrap_or_else(|| default_loss_csv(&a.out));

    let mut field = cfg.init_field(backend, cfg.train.seed)?;
    let result = fit(&mut field, &images, &cameras, &fit_cfg)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "loss"])?;
    for (i, l) in result.losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    let table = w.into_inner().map_err(|e| CliError::data(e.to_string()))?;
    let mut staged = StagedFiles::new();
    staged.add(&a.out, &write_checkpoint(&field)?)?;
    staged.add(&loss_csv, &table)?;
    staged.commit()?;
    let last = result.losses.last().map_or("n/a".to_string(), |l| format!("{l:.6}"));
    Ok(format!("trained {} steps, final batch loss {last}; wrote {}", fit_cfg.steps, a.out.display()))
}

#[derive(Debug, Clone, clap::Args)]
pub struct PoisonArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; must not exist or be empty.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `poison.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print every n-th epoch to stderr (0 silences progress).
    #[arg(long, default_value_t = 10)]
    pub progress_every: usize,
}

pub fn poison(a: &PoisonArgs) -> CliResult<String> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.poison.seed = seed;
    }
    let pcfg = cfg.poison_config()?;
    let ds = Dataset::open(&a.data)?;
    if ds.train.is_empty() {
        return Err(CliError::data("dataset has no training frames"));
    }
    let images = ds.images(Split::Train, None)?;
    let cameras = ds.cameras(Split::Train);
    check_out_dir(&a.out)?;

    let field = cfg.init_field(cfg.poison.backend, cfg.poison.seed)?;
    let every = a.progress_every;
    let result = poison_dataset_with(&field, &images, &cameras, &pcfg, |l: &EpochLog| {
        if every > 0 && (l.epoch % every == 0 || l.epoch + 1 == pcfg.m) {
            eprintln!(
                "epoch {:>5}  outer loss {:.6}  mean|g| {:.3e}  step {:.3e}",
                l.epoch, l.outer_loss, l.mean_abs_grad, l.alpha_prime
            );
        }
    })?;

    let staged = StagedDir::new(&a.out)?;
    let root = staged.path();
    fs::create_dir(root.join(POISONED_DIR))?;
    for (frame, img) in ds.train.iter().zip(&result.poisoned) {
        save_png(img, ds.image_path(frame, Some(&root.join(POISONED_DIR)))?)?;
    }
    if result.mode == PerturbKind::SpatialFlow {
        fs::create_dir(root.join(FLOWS_DIR))?;
        for (frame, flow) in ds.train.iter().zip(&result.flows) {
            fs::write(root.join(FLOWS_DIR).join(format!("{}.flo", view_name(frame))), encode_flo(flow))?;
        }
    }
    let mut w = csv::Writer::from_path(root.join(POISON_LOG_FILE))?;
    w.write_record(["epoch", "outer_loss", "mean_abs_grad", "alpha_prime"])?;
    for l in &result.log {
        w.write_record([
            l.epoch.to_string(),
            l.outer_loss.to_string(),
            l.mean_abs_grad.to_string(),
            l.alpha_prime.to_string(),
        ])?;
    }
    w.flush()?;
    drop(w);
    staged.commit()?;
    let max = result.perturbation.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    Ok(format!("poisoned {} views over {} epochs, max |delta| {max:.4}; wrote {}", images.len(), pcfg.m, a.out.display()))
}

#[derive(Debug, Clone, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Heldout)]
    pub split: Split,
    /// Metrics table to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Expected backend; a checkpoint of the other kind is rejected.
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    /// Scene label for the table; defaults to the dataset directory name.
    #[arg(long)]
    pub scene: Option<String>,
    #[arg(long, default_value_t = 64)]
    pub samples_per_ray: usize,
}

/// One row of a metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub scene: String,
    pub view: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

pub fn eval(a: &EvalArgs) -> CliResult<String> {
    let opts = RenderOptions::new(a.samples_per_ray, SamplingMode::Midpoint).map_err(|e| CliError::config(e.to_string()))?;
    let field = load_checkpoint(&a.ckpt)?;
    if let Some(b) = a.backend {
        if field.backend() != Backend::from(b) {
            return Err(CliError::data(format!(
                "{} holds a {:?} field, expected {:?}",
                a.ckpt.display(),
                field.backend(),
                Backend::from(b)
            )));
        }
    }
    let ds = Dataset::open(&a.data)?;
    let frames = ds.frames(a.split);
    if frames.is_empty() {
        return Err(CliError::data(format!("dataset has no {:?} frames", a.split)));
    }
    let images = ds.images(a.split, None)?;
    let scene = a.scene.clone().unwrap_or_else(|| {
        let dir = fs::canonicalize(&ds.dir).unwrap_or_else(|_| ds.dir.clone());
        dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    });

    let mut rows = Vec::with_capacity(frames.len() + 1);
    for (frame, target) in frames.iter().zip(&images) {
        let rendered = render_image(&field, &frame.camera, &opts)?;
        rows.push(MetricRow {
            scene: scene.clone(),
            view: view_name(frame),
            psnr_db: psnr_for_report(psnr(&rendered, target)?),
            ssim: ssim(&rendered, target)?,
        });
    }
    let n = rows.len() as f64;
    let mean = MetricRow {
        scene: scene.clone(),
        view: MEAN_ROW_LABEL.to_string(),
        psnr_db: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
    };
    rows.push(mean.clone());

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    for r in &rows {
        w.write_record([r.scene.clone(), r.view.clone(), r.psnr_db.to_string(), r.ssim.to_string()])?;
    }
    let table = w.into_inner().map_err(|e| CliError::data(e.to_string()))?;
    let mut staged = StagedFiles::new();
    staged.add(&a.out, &table)?;
    staged.commit()?;
    Ok(format!(
        "{:?} split: mean PSNR {:.3} dB, mean SSIM {:.4} over {} views",
        a.split,
        mean.psnr_db,
        mean.ssim,
        rows.len() - 1
    ))
}

/// Reads a metrics table written by [`eval`].
pub fn read_metrics(path: &Path) -> CliResult<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let header = r.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != METRICS_HEADER {
        return Err(CliError::data(format!(
            "{}: expected header {}, found {}",
            path.display(),
            METRICS_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let num = |j: usize| -> CliResult<f64> {
            rec[j]
                .parse::<f64>()
                .map_err(|_| CliError::data(format!("{} row {}: `{}` is not a number", path.display(), i + 1, &rec[j])))
        };
        rows.push(MetricRow { scene: rec[0].to_string(), view: rec[1].to_string(), psnr_db: num(2)?, ssim: num(3)? });
    }
    if rows.is_empty() {
        return Err(CliError::data(format!("{}: no rows", path.display())));
    }
    Ok(rows)
}
