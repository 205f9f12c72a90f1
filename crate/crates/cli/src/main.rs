//! `depthgen`: data preparation, generation, evaluation, gradient checks and
//! smoke training from one binary.

mod output;

use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use depthgen_core::adversarial::train::train_smoke;
use depthgen_core::config::RunConfig;
use depthgen_core::dataprep::{
    convert_panorama, read_pfm, read_pgm, read_scene, turbo, turbo_colorize, write_pfm, write_ppm, write_scene, Image,
};
use depthgen_core::generator::Generator;
use depthgen_core::layers::SemanticLayout;
use depthgen_core::metrics::{depth_metrics, MetricsReport};
use depthgen_core::{suite, ParamStore, Rng, Tensor};
use rayon::prelude::*;
use thiserror::Error;
use walkdir::WalkDir;

use output::Outputs;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] depthgen_core::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(depthgen_core::Error::Config(_) | depthgen_core::Error::Json(_)) => 2,
            _ => 1,
        }
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

fn io_ctx(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { context: path.display().to_string(), source }
}

#[derive(Parser)]
#[command(name = "depthgen", version, about = "Depth and RGB generation from semantic layouts")]
struct Cli {
    /// Seed for every random draw; overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Converts panorama scenes to four perspective side faces.
    PrepareData(PrepareArgs),
    /// Generates depth and RGB for one layout.
    Forward(ForwardArgs),
    /// Scores predicted depth maps against ground truth.
    Evaluate(EvaluateArgs),
    /// Compares analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Runs a short adversarial training loop on synthetic rooms.
    TrainSmoke(TrainArgs),
    /// Renders a PFM depth map with the turbo colormap.
    Colorize(ColorizeArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Directory of scenes, each holding rgb.ppm, sem.pgm and depth.pfm (or depth.pgm).
    #[arg(long)]
    pano_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Face side in pixels.
    #[arg(long, default_value_t = 256)]
    size: usize,
    /// File with one scene id per line; defaults to every subdirectory.
    #[arg(long)]
    list: Option<PathBuf>,
}

#[derive(Args)]
struct ForwardArgs {
    #[arg(long)]
    config: PathBuf,
    /// Generator weights; freshly seeded weights are used when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Label map as binary PGM.
    #[arg(long)]
    layout: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    gt_dir: PathBuf,
    /// Rescale predictions by the ratio of means before scoring.
    #[arg(long)]
    align: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "all")]
    module: String,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    steps: usize,
    /// Per-step loss CSV.
    #[arg(long)]
    report: PathBuf,
    /// Where to save the trained generator weights.
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
}

#[derive(Args)]
struct ColorizeArgs {
    #[arg(long)]
    pfm: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Depth mapped to the blue end; defaults to the finite minimum.
    #[arg(long)]
    min: Option<f64>,
    /// Depth mapped to the red end; defaults to the finite maximum.
    #[arg(long)]
    max: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::PrepareData(a) => prepare_data(a),
        Command::Forward(a) => forward(a, seed),
        Command::Evaluate(a) => evaluate(a),
        Command::Gradcheck(a) => gradcheck(a, seed.unwrap_or(0)),
        Command::TrainSmoke(a) => train(a, seed),
        Command::Colorize(a) => colorize(a),
    }
}

/// Worker pool sized by `DEPTHGEN_THREADS`; 0 or unset lets rayon decide.
fn pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var("DEPTHGEN_THREADS") {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| CliError::Usage(format!("DEPTHGEN_THREADS must be a count, got '{v}'")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| CliError::Failed(e.to_string()))
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut cfg = RunConfig::from_json(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(io_ctx(path))
}

fn prepare_data(a: PrepareArgs) -> Result<()> {
    if a.size < 2 {
        return Err(CliError::Usage(format!("--size must be >= 2, got {}", a.size)));
    }
    let mut scenes: Vec<String> = match &a.list {
        Some(list) => fs::read_to_string(list)
            .map_err(io_ctx(list))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        None => fs::read_dir(&a.pano_dir)
            .map_err(io_ctx(&a.pano_dir))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect(),
    };
    scenes.sort();
    if scenes.is_empty() {
        return Err(CliError::Usage(format!("no scenes under {}", a.pano_dir.display())));
    }

    let converted = pool()?.install(|| {
        scenes
            .par_iter()
            .map(|id| {
                let (rgb, labels, maxval, depth) =
                    read_scene(&a.pano_dir.join(id)).map_err(|e| CliError::Failed(format!("scene {id}: {e}")))?;
                let faces = convert_panorama(&rgb, &labels, &depth, a.size).map_err(|e| CliError::Failed(format!("scene {id}: {e}")))?;
                Ok((id, faces, maxval))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut out = Outputs::new();
    out.dir(&a.out).map_err(io_ctx(&a.out))?;
    let mut max_label = 0u8;
    for (id, faces, maxval) in &converted {
        let dir = a.out.join(id);
        out.dir(&dir).map_err(io_ctx(&dir))?;
        for p in write_scene(&dir, faces, *maxval)? {
            out.track(&p).map_err(io_ctx(&p))?;
        }
        max_label = max_label.max(*maxval);
    }
    let labels = a.out.join("labels.csv");
    out.track(&labels).map_err(io_ctx(&labels))?;
    let mut w = csv::Writer::from_path(&labels)?;
    w.write_record(["id", "name", "r", "g", "b"])?;
    for id in 0..=max_label as usize {
        let t = if max_label == 0 { 0.0 } else { id as f64 / max_label as f64 };
        let rgb = turbo(t).map(|c| ((c * 255.0).round() as u8).to_string());
        w.write_record([id.to_string(), format!("class_{id}"), rgb[0].clone(), rgb[1].clone(), rgb[2].clone()])?;
    }
    w.flush().map_err(io_ctx(&labels))?;
    out.commit();
    println!("converted {} scenes into {}", converted.len(), a.out.display());
    Ok(())
}

/// `[-1, 1]` generator range to the `[0, 255]` range of prepared depth.
fn to_unit_255(v: f64) -> f64 {
    (v + 1.0) * 127.5
}

fn forward(a: ForwardArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&a.config, seed)?;
    let gm = read_pgm(open(&a.layout)?).map_err(|e| CliError::Usage(format!("{}: {e}", a.layout.display())))?;
    let labels: Vec<u32> = gm.image.data.iter().map(|&v| u32::from(v)).collect();
    let layout = SemanticLayout::new(gm.image.height, gm.image.width, cfg.generator.num_labels, labels)
        .map_err(|e| CliError::Usage(format!("{}: {e}", a.layout.display())))?;
    let side = cfg.generator.output_resolution;
    if (layout.height(), layout.width()) != (side, side) {
        return Err(CliError::Usage(format!("layout is {}x{}, config expects {side}x{side}", layout.width(), layout.height())));
    }

    let mut rng = Rng::new(cfg.seed);
    let mut store = ParamStore::new();
    let gen = Generator::new(cfg.generator.clone(), &mut store, &mut rng)?;
    if let Some(ck) = &a.checkpoint {
        store.load_from(&ParamStore::read_checkpoint(open(ck)?)?)?;
    }
    let noise = cfg.generator.latent_noise.then(|| {
        let z = cfg.generator.z_dim;
        Tensor::new(vec![z], (0..z).map(|_| rng.normal()).collect()).expect("noise shape")
    });
    let mut g = depthgen_core::Graph::new();
    let o = gen.forward_with_noise(&mut g, &store, &layout, noise.as_ref())?;
    let (depth, rgb) = (g.value(o.depth), g.value(o.rgb));

    let plane = side * side;
    let depth_img = Image::new(side, side, 1, depth.data().iter().map(|&v| to_unit_255(v)).collect())?;
    let mut rgb_data = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            rgb_data.push(to_unit_255(rgb.data()[c * plane + i]).round().clamp(0.0, 255.0) as u8);
        }
    }
    let rgb_img = Image::new(side, side, 3, rgb_data)?;
    let turbo_img = turbo_colorize(&depth_img, 0.0, 255.0)?;

    let mut out = Outputs::new();
    let p = a.out_dir.join("depth.pfm");
    let mut w = out.create(&p).map_err(io_ctx(&p))?;
    write_pfm(&mut w, &depth_img.map(|v| v as f32))?;
    w.flush().map_err(io_ctx(&p))?;
    for (name, img) in [("rgb.ppm", &rgb_img), ("depth_turbo.ppm", &turbo_img)] {
        let p = a.out_dir.join(name);
        let mut w = out.create(&p).map_err(io_ctx(&p))?;
        write_ppm(&mut w, img)?;
        w.flush().map_err(io_ctx(&p))?;
    }
    out.commit();
    println!("wrote depth.pfm, rgb.ppm and depth_turbo.ppm to {}", a.out_dir.display());
    Ok(())
}

fn pfm_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| CliError::Failed(format!("{}: {e}", root.display())))?;
        if entry.file_type().is_file() && entry.path().extension().is_some_and(|x| x == "pfm") {
            files.push(entry.path().strip_prefix(root).expect("walk stays under root").to_path_buf());
        }
    }
    Ok(files)
}

fn read_depth(path: &Path) -> Result<Image<f32>> {
    read_pfm(open(path)?).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    for d in [&a.pred_dir, &a.gt_dir] {
        if !d.is_dir() {
            return Err(CliError::Usage(format!("{} is not a directory", d.display())));
        }
    }
    let pool = pool()?;
    let files = pfm_files(&a.pred_dir)?;
    if files.is_empty() {
        return Err(CliError::Usage(format!("no .pfm files under {}", a.pred_dir.display())));
    }
    let reports = pool.install(|| {
        files
            .par_iter()
            .map(|rel| {
                let pred = read_depth(&a.pred_dir.join(rel))?;
                let gt = read_depth(&a.gt_dir.join(rel))?;
                if (pred.width, pred.height) != (gt.width, gt.height) {
                    return Err(CliError::Failed(format!(
                        "{}: prediction is {}x{}, ground truth {}x{}",
                        rel.display(),
                        pred.width,
                        pred.height,
                        gt.width,
                        gt.height
                    )));
                }
                let p: Vec<f64> = pred.data.iter().map(|&v| f64::from(v)).collect();
                let g: Vec<f64> = gt.data.iter().map(|&v| f64::from(v)).collect();
                depth_metrics(&p, &g, None, a.align).map_err(|e| CliError::Failed(format!("{}: {e}", rel.display())))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mean = MetricsReport::mean(&reports)?;

    let mut out = Outputs::new();
    out.track(&a.out).map_err(io_ctx(&a.out))?;
    let mut w = csv::Writer::from_path(&a.out)?;
    let mut header = vec!["image"];
    header.extend(MetricsReport::COLUMNS);
    header.push("valid_pixels");
    w.write_record(&header)?;
    let row = |name: String, r: &MetricsReport| {
        let mut v = vec![name];
        v.extend(r.values().iter().map(|x| x.to_string()));
        v.push(r.valid_pixels.to_string());
        v
    };
    for (rel, r) in files.iter().zip(&reports) {
        w.write_record(row(rel.to_string_lossy().replace('\\', "/"), r))?;
    }
    w.write_record(row("mean".into(), &mean))?;
    w.flush().map_err(io_ctx(&a.out))?;
    out.commit();
    println!("scored {} images: mae {:.6} abs_rel {:.6} delta1 {:.4}", reports.len(), mean.mae, mean.abs_rel, mean.delta1);
    Ok(())
}

fn gradcheck(a: GradcheckArgs, seed: u64) -> Result<()> {
    if a.module != "all" && !suite::MODULES.contains(&a.module.as_str()) {
        return Err(CliError::Usage(format!("unknown module '{}'; expected all or one of {}", a.module, suite::MODULES.join(", "))));
    }
    let results = suite::run_named(&a.module, seed)?;
    let mut failed = Vec::new();
    let mut total = 0.0;
    for r in &results {
        total += r.seconds;
        println!(
            "{:<14} max_rel_err {:.3e}  tol {:.0e}  entries {:>6}  {:>7.2}s  {}",
            r.name,
            r.report.max_rel_err,
            r.tolerance,
            r.report.entries,
            r.seconds,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if !r.passed() {
            failed.push(r.name);
        }
    }
    println!("total {total:.1}s");
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&a.config, seed)?;
    if a.steps == 0 {
        return Err(CliError::Usage("--steps must be positive".into()));
    }
    let (report, trainer) = train_smoke(&cfg, a.steps)?;
    let mut out = Outputs::new();
    out.write(&a.report, report.to_csv().as_bytes()).map_err(io_ctx(&a.report))?;
    if let Some(ck) = &a.checkpoint_out {
        let mut w = out.create(ck).map_err(io_ctx(ck))?;
        trainer.g_store.save(&mut w)?;
        w.flush().map_err(io_ctx(ck))?;
    }
    out.commit();
    let last = report.steps.last().expect("at least one step");
    println!("steps {}", report.steps.len());
    println!("final loss_d_depth {:.6} loss_d_rgb {:.6} loss_g_adv {:.6} loss_fm {:.6} loss_ssim {:.6}", last.loss_d_depth, last.loss_d_rgb, last.loss_g_adv, last.loss_fm, last.loss_ssim);
    println!("g_delta_norm {:e}", report.g_delta_norm);
    println!("d_depth_delta_norm {:e}", report.d_depth_delta_norm);
    println!("d_rgb_delta_norm {:e}", report.d_rgb_delta_norm);
    Ok(())
}

fn colorize(a: ColorizeArgs) -> Result<()> {
    let depth = read_depth(&a.pfm)?.map(f64::from);
    let finite = || depth.data.iter().copied().filter(|v| v.is_finite());
    let lo = a.min.unwrap_or_else(|| finite().fold(f64::INFINITY, f64::min));
    let hi = a.max.unwrap_or_else(|| finite().fold(f64::NEG_INFINITY, f64::max));
    let img = turbo_colorize(&depth, lo, hi)?;
    let mut out = Outputs::new();
    let mut w = out.create(&a.out).map_err(io_ctx(&a.out))?;
    write_ppm(&mut w, &img)?;
    w.flush().map_err(io_ctx(&a.out))?;
    out.commit();
    Ok(())
}
