//! The `ics` command line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{contract_err, Error, Result};
use crate::gradsuite::{run_suite, SuiteOptions};
use crate::image::Image;
use crate::io::{crop, load_image, pad_to_multiple, save_image};
use crate::ista::{ista_reconstruct, DEFAULT_ITERS, DEFAULT_THRESHOLD};
use crate::metrics::{psnr, ssim};
use crate::model::{initialize_image, Model, ModelConfig};
use crate::parallel::{init_thread_pool_from_env, Exec};
use crate::sampling::{icsm, init_measurement_matrix, MatrixInit, MeasurementMatrix, MeasurementSet, SamplingConfig};
use crate::sparsity::{allocate, estimate, low_quality_estimate, Estimator};
use crate::tensor::archive;
use crate::train::{measure_image, train, AdamConfig, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "ics", version, about = "Adaptive block compressive sensing")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Measure an image with the adaptive allocation and write an ICSM file.
    Sample(SampleArgs),
    /// Classical reconstruction from an ICSM file.
    ReconstructIsta(IstaArgs),
    /// Network reconstruction from an image or an ICSM file.
    Infer(InferArgs),
    /// Linear initialization `Ψ·y` from an ICSM file.
    InitRecon(InitArgs),
    /// Per-block measurement counts as CSV, optionally as a heatmap.
    AllocMap(AllocArgs),
    /// Train the toy network on synthetic scenes.
    TrainToy(TrainArgs),
    /// Run the gradient check suite.
    Gradcheck(GradArgs),
    /// PSNR and SSIM of test images against references.
    Metrics(MetricsArgs),
}

#[derive(Args, Debug, Clone)]
struct MatrixArgs {
    /// Seed of the generated measurement matrix.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Block side of the generated measurement matrix.
    #[arg(long, default_value_t = 32)]
    block: usize,
    /// Take Φ and Ψ from a weight archive instead.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Model config; accepted for symmetry with `infer`, Φ comes from the archive.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    sr: f64,
    #[arg(long, default_value = "sm")]
    estimator: Estimator,
    #[command(flatten)]
    matrix: MatrixArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct IstaArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    matrix: MatrixArgs,
    #[arg(long, default_value_t = DEFAULT_ITERS)]
    iters: usize,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Crop the output to `HxW` (the size before padding).
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InitArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    matrix: MatrixArgs,
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// PGM/PNG image (sampled first) or ICSM file.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    sr: f64,
    #[arg(long, default_value = "sm")]
    estimator: Estimator,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AllocArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    sr: f64,
    #[arg(long, default_value = "sm")]
    estimator: Estimator,
    #[command(flatten)]
    matrix: MatrixArgs,
    /// CSV grid of counts; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Heatmap PGM, one flat square per block.
    #[arg(long)]
    heatmap: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Output directory for loss.csv, weights.icst and config.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    sr: f64,
    #[arg(long, default_value = "sm")]
    estimator: Estimator,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 16)]
    images: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
}

#[derive(Args, Debug)]
struct GradArgs {
    #[arg(long, default_value_t = 100)]
    coords: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0.25)]
    sr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long = "ref", required = true, num_args = 1..)]
    reference: Vec<PathBuf>,
    #[arg(long, required = true, num_args = 1..)]
    test: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parse `argv` (program name first), run the command, and return the exit
/// code: 0 on success, 1 on a contract or IO error, 2 on a usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_thread_pool_from_env();
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            1
        }
    }
}

fn one_line(e: &Error) -> String {
    e.to_string().replace('\n', " ")
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Sample(a) => sample(a),
        Cmd::ReconstructIsta(a) => reconstruct_ista(a),
        Cmd::Infer(a) => infer(a),
        Cmd::InitRecon(a) => init_recon(a),
        Cmd::AllocMap(a) => alloc_map(a),
        Cmd::TrainToy(a) => train_toy(a),
        Cmd::Gradcheck(a) => gradcheck(a),
        Cmd::Metrics(a) => metrics(a),
    }
}

fn matrix(a: &MatrixArgs) -> Result<MeasurementMatrix> {
    match &a.weights {
        Some(path) => {
            let mut t = archive::load(path)?;
            match (t.remove("phi"), t.remove("psi")) {
                (Some(phi), Some(psi)) => MeasurementMatrix::from_parts(phi, psi),
                _ => contract_err(format!("{} holds no phi/psi tensors", path.display())),
            }
        }
        None => {
            // any valid ratio: the ratio does not enter the matrix
            let cfg = SamplingConfig::new(a.block, 0.5, a.seed)?;
            init_measurement_matrix(&cfg, MatrixInit::OrthonormalRows)
        }
    }
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let parsed = s.split_once(['x', 'X']).and_then(|(h, w)| Some((h.trim().parse().ok()?, w.trim().parse().ok()?)));
    match parsed {
        Some(hw) => Ok(hw),
        None => contract_err(format!("size '{s}' is not of the form HxW")),
    }
}

fn finish(img: Image, size: Option<&str>, out: &Path) -> Result<()> {
    let img = match size {
        Some(s) => {
            let (h, w) = parse_size(s)?;
            crop(&img, h, w)?
        }
        None => img,
    };
    save_image(out, &img)
}

/// Load an image and reflect-pad it to whole blocks, telling the user the
/// original size when padding was needed.
fn load_padded(path: &Path, block: usize) -> Result<(Image, (usize, usize))> {
    let img = load_image(path)?;
    let (padded, (h, w)) = pad_to_multiple(&img, block)?;
    if padded.height() != h || padded.width() != w {
        eprintln!(
            "note: padded {h}x{w} to {}x{}; pass --size {h}x{w} when reconstructing",
            padded.height(),
            padded.width()
        );
    }
    Ok((padded, (h, w)))
}

fn sample(a: SampleArgs) -> Result<()> {
    let mm = matrix(&a.matrix)?;
    let (img, _) = load_padded(&a.input, mm.block_side())?;
    let ms = measure_image(&img, &mm, a.sr, a.estimator)?;
    icsm::save(&a.out, &ms)?;
    println!("blocks={} measurements={} ratio={:.6}", ms.num_blocks(), ms.total(), ratio(&ms));
    Ok(())
}

fn ratio(ms: &MeasurementSet) -> f64 {
    ms.total() as f64 / (ms.image_height * ms.image_width) as f64
}

fn reconstruct_ista(a: IstaArgs) -> Result<()> {
    let mm = matrix(&a.matrix)?;
    let ms = icsm::load(&a.input)?;
    let img = ista_reconstruct(&ms, &mm, a.iters, a.threshold)?;
    finish(img, a.size.as_deref(), &a.out)
}

fn init_recon(a: InitArgs) -> Result<()> {
    let mm = matrix(&a.matrix)?;
    let ms = icsm::load(&a.input)?;
    finish(initialize_image(&ms, &mm)?, a.size.as_deref(), &a.out)
}

fn infer(a: InferArgs) -> Result<()> {
    let model = Model::load(&a.weights, &a.config)?;
    let bytes = std::fs::read(&a.input)?;
    let (ms, reference) = if bytes.starts_with(icsm::MAGIC) {
        (icsm::decode(&bytes)?, None)
    } else {
        let (img, _) = load_padded(&a.input, model.cfg.block)?;
        let mm = model.measurement_matrix()?;
        (measure_image(&img, &mm, a.sr, a.estimator)?, Some(img))
    };
    model.cfg.check_resolution(ms.image_height, ms.image_width)?;
    let out = model.reconstruct(&ms)?;
    if let Some(r) = reference {
        println!("ratio={:.6} psnr={:.4}", ratio(&ms), psnr(&r, &out, 1.0)?);
    }
    finish(out, a.size.as_deref(), &a.out)
}

fn alloc_map(a: AllocArgs) -> Result<()> {
    let mm = matrix(&a.matrix)?;
    let (img, _) = load_padded(&a.input, mm.block_side())?;
    let cfg = SamplingConfig::new(mm.block_side(), a.sr, a.matrix.seed)?;
    let init = crate::sampling::initial_sample(&img, &mm, &cfg)?;
    let x0 = low_quality_estimate(&init, &mm)?;
    let v = estimate(&x0, cfg.block, a.estimator)?;
    let alloc = allocate(&v, &cfg, img.height(), img.width())?;

    let mut csv = String::new();
    for row in alloc.counts.chunks(alloc.cols) {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(csv, "{}", cells.join(","));
    }
    match &a.out {
        Some(p) => std::fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    if let Some(p) = &a.heatmap {
        let max = alloc.counts.iter().copied().max().unwrap_or(1).max(1) as f64;
        let b = cfg.block;
        let heat = Image::from_fn(img.height(), img.width(), |y, x| {
            alloc.counts[(y / b) * alloc.cols + x / b] as f64 / max
        });
        save_image(p, &heat)?;
    }
    Ok(())
}

fn train_toy(a: TrainArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::toy(),
    };
    cfg.validate()?;
    let init = match &a.weights {
        Some(p) => crate::model::ParamStore::load(&cfg, p)?,
        None => crate::model::ParamStore::init(&cfg, a.seed)?,
    };
    let images = crate::synthetic::training_set(a.images, a.size, a.seed);
    let tc = TrainConfig {
        steps: a.steps,
        batch: a.batch,
        sr: a.sr,
        estimator: a.estimator,
        adam: AdamConfig { lr: a.lr, ..AdamConfig::default() },
        seed: a.seed,
        ..TrainConfig::toy()
    };
    std::fs::create_dir_all(&a.out)?;
    let mut csv = String::from("step,l1,l2,l3,total\n");
    let outcome = train(&cfg, init, &images, &tc, Exec::default(), |r| {
        let _ = writeln!(csv, "{},{},{},{},{}", r.step, r.parts.l1, r.parts.l2, r.parts.l3, r.total);
        if r.step % 10 == 0 || r.step + 1 == tc.steps {
            eprintln!("step {:>4}  total {:.6}", r.step, r.total);
        }
    })?;
    std::fs::write(a.out.join("loss.csv"), csv)?;
    Model { cfg, params: outcome.params }.save(a.out.join("weights.icst"), a.out.join("config.json"))?;
    Ok(())
}

fn gradcheck(a: GradArgs) -> Result<()> {
    let opts = SuiteOptions { image_size: a.size, coords: a.coords, sr: a.sr, seed: a.seed };
    let cases = run_suite(&opts)?;
    let mut csv = String::from("case,max_rel_error,tolerance,status\n");
    for c in &cases {
        let status = if c.passed() { "PASS" } else { "FAIL" };
        let _ = writeln!(csv, "{},{:e},{:e},{status}", c.name, c.error, c.tolerance);
    }
    match &a.out {
        Some(p) => std::fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    let failed: Vec<&str> = cases.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        contract_err(format!("gradient check failed for {}", failed.join(", ")))
    }
}

fn metrics(a: MetricsArgs) -> Result<()> {
    if a.reference.len() != a.test.len() {
        return contract_err(format!("{} references but {} test images", a.reference.len(), a.test.len()));
    }
    let pairs = Exec::default().try_map(a.reference.len(), |i| {
        let r = load_image(&a.reference[i])?;
        let t = load_image(&a.test[i])?;
        Ok::<_, Error>((psnr(&r, &t, 1.0)?, ssim(&r, &t)?))
    })?;
    let mut csv = String::from("reference,test,psnr,ssim\n");
    for (i, (p, s)) in pairs.iter().enumerate() {
        let _ = writeln!(csv, "{},{},{p},{s}", a.reference[i].display(), a.test[i].display());
    }
    let n = pairs.len() as f64;
    let mean_p = pairs.iter().map(|x| x.0).sum::<f64>() / n;
    let mean_s = pairs.iter().map(|x| x.1).sum::<f64>() / n;
    let _ = writeln!(csv, "mean,,{mean_p},{mean_s}");
    match &a.out {
        Some(p) => std::fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}
