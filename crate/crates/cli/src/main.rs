use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use burstlab_core::config::{self, KeyValues};
use burstlab_core::io::{load_burst, read_image, write_image, write_json, write_pfm};
use burstlab_core::metrics::MetricReport;
use burstlab_core::pipeline::{dataset_batch, run_ablation_hf, save_sample, simulate_pair};
use burstlab_core::scene::band_limited_rgb;
use burstlab_core::score_distill::{run_distillation, save_trace_csv, StationaryGaussianPrior};
use burstlab_core::spectral::{log_spectrum, make_mask_with, project, Band};
use burstlab_core::subspace::{check_null_space, mask_fidelity_report, BccbOperator, KernelSpec};
use burstlab_core::{Error, ImagePlane};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;

#[derive(Parser)]
#[command(name = "burstlab", version, about = "Burst RAW super-resolution and frequency-band distillation toolkit")]
struct Cli {
    /// Flat `section.key = value` configuration file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Log verbosity (error, warn, info, debug).
    #[arg(long, global = true, default_value = "warn")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a burst from a ground-truth image (or a synthetic scene).
    Simulate(SimulateArgs),
    /// Align and fuse a burst directory onto the super-resolved grid.
    Fuse(FuseArgs),
    /// Keep the high or low band of an image under the radial mask.
    Project(ProjectArgs),
    /// Centered log-magnitude spectrum of an image's luma.
    Spectrum(SpectrumArgs),
    /// Run the toy distillation loop and write its trace.
    Distill(DistillArgs),
    /// Compare the Fourier null-space projector with the dense SVD oracle.
    VerifyNullspace(NullspaceArgs),
    /// PSNR, SSIM and band errors between two images.
    Metrics(MetricsArgs),
    /// Low-frequency ablation over the three distillation modes.
    AblateHf(AblateArgs),
    /// Generate paired samples for every image in a directory.
    Dataset(DatasetArgs),
}

#[derive(Args)]
struct MaskFlags {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Radius rule: half-nyquist-min, half-nyquist-max, per-axis, nyquist-min.
    #[arg(long)]
    radius: Option<String>,
    /// Harden the mask to {0, 1} at this gain.
    #[arg(long)]
    threshold: Option<f64>,
}

impl MaskFlags {
    fn apply(&self, kv: &mut KeyValues) {
        set(kv, "mask.alpha", self.alpha);
        set(kv, "mask.beta", self.beta);
        set(kv, "mask.gamma", self.gamma);
        set(kv, "mask.radius", self.radius.as_ref());
        set(kv, "mask.threshold", self.threshold);
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Output sample directory.
    out_dir: PathBuf,
    /// Ground truth (.pfm or .png); a synthetic band-limited scene of side
    /// `--patch` is used when absent.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    sr: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cfa: Option<String>,
    #[arg(long)]
    magnitude: Option<f64>,
    #[arg(long)]
    smoothness: Option<f64>,
    #[arg(long)]
    shot_gain: Option<f64>,
    #[arg(long)]
    read_sigma: Option<f64>,
    /// Trajectory JSON to use instead of synthesizing one.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Disable sensor noise.
    #[arg(long)]
    noiseless: bool,
}

#[derive(Args)]
struct FuseArgs {
    burst_dir: PathBuf,
    /// Output image (.pfm or .png).
    out: PathBuf,
    /// Super-resolution factor; defaults to the burst's recorded factor.
    #[arg(long)]
    sr: Option<usize>,
    /// Use the stored trajectory instead of estimating one.
    #[arg(long)]
    oracle_alignment: bool,
    #[arg(long)]
    kernel_sigma: Option<f64>,
    #[arg(long)]
    min_weight: Option<f64>,
    /// Motion model for estimation: translation, affine, homography.
    #[arg(long)]
    model: Option<String>,
    /// Raw-domain motion refinement rounds after luma alignment.
    #[arg(long)]
    refine_passes: Option<usize>,
}

#[derive(Args)]
struct ProjectArgs {
    input: PathBuf,
    output: PathBuf,
    #[command(flatten)]
    mask: MaskFlags,
    /// Band to keep.
    #[arg(long, default_value = "high")]
    mode: String,
    /// Also write the mask gains as a one-channel PFM.
    #[arg(long)]
    mask_out: Option<PathBuf>,
}

#[derive(Args)]
struct SpectrumArgs {
    input: PathBuf,
    output: PathBuf,
}

#[derive(Args)]
struct DistillArgs {
    /// Trace CSV (iter, data_loss, reg_norm, lowband_err, highband_energy).
    #[arg(long)]
    out: PathBuf,
    /// Data target image; a synthetic scene of side `--size` when absent.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Image the prior mean is built from and errors are measured against;
    /// defaults to the target.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Mode: data, naive, hf.
    #[arg(long)]
    mode: Option<String>,
    #[command(flatten)]
    mask: MaskFlags,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Weight rule: a constant, `snr` or `adaptive`.
    #[arg(long)]
    omega: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Constant added to the reference to form the prior mean.
    #[arg(long)]
    prior_shift: Option<f64>,
    /// Prior variance scale on the mask's bins.
    #[arg(long)]
    prior_variance: Option<f64>,
    /// Directory for `x_init.pfm` and `x_final.pfm`.
    #[arg(long)]
    dump_dir: Option<PathBuf>,
}

#[derive(Args)]
struct NullspaceArgs {
    #[arg(long, default_value_t = 8)]
    n: usize,
    /// identity, zero, box:k, avg-h, gaussian:s, gaussian-box:s, random:seed.
    #[arg(long, default_value = "gaussian-box:1")]
    kernel: String,
    #[arg(long, default_value_t = 1)]
    decimation: usize,
    #[command(flatten)]
    mask: MaskFlags,
    #[arg(long, default_value_t = 0.5)]
    leak_threshold: f64,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    reference: PathBuf,
    test: PathBuf,
    #[arg(long)]
    mask_alpha: Option<f64>,
    #[arg(long)]
    mask_beta: Option<f64>,
    #[arg(long)]
    mask_gamma: Option<f64>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Directory for report.json, report.csv and per-mode traces.
    out_dir: PathBuf,
    /// Scene image; a synthetic band-limited scene of side `--size` when
    /// absent.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    prior_shift: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DatasetArgs {
    src_dir: PathBuf,
    out_dir: PathBuf,
    #[arg(long)]
    train: Option<f64>,
    #[arg(long)]
    val: Option<f64>,
    #[arg(long)]
    test: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    sr: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
}

/// Error with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn config(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_CONFIG,
            error: error.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Parameter(_) => EXIT_CONFIG,
            Error::Divergence { .. } => EXIT_DIVERGENCE,
            _ => EXIT_DATA,
        };
        Self {
            code,
            error: e.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(Error::Parameter(_)) => EXIT_CONFIG,
            Some(Error::Divergence { .. }) => EXIT_DIVERGENCE,
            _ => EXIT_DATA,
        };
        Self { code, error }
    }
}

type Outcome = Result<(), Failure>;

fn set<T: ToString>(kv: &mut KeyValues, key: &str, value: Option<T>) {
    if let Some(v) = value {
        kv.set(key, v.to_string());
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let kv = match &cli.config {
        Some(p) => KeyValues::load(p).map_err(Failure::config)?,
        None => KeyValues::default(),
    };
    kv.check_known(&config::all_keys()).map_err(Failure::config)?;
    match cli.command {
        Command::Simulate(a) => simulate(kv, a),
        Command::Fuse(a) => fuse(kv, a),
        Command::Project(a) => project_cmd(kv, a),
        Command::Spectrum(a) => spectrum(a),
        Command::Distill(a) => distill(kv, a),
        Command::VerifyNullspace(a) => verify_nullspace(kv, a),
        Command::Metrics(a) => metrics(kv, a),
        Command::AblateHf(a) => ablate(kv, a),
        Command::Dataset(a) => dataset(kv, a),
    }
}

fn load(path: &Path) -> Result<ImagePlane, Failure> {
    read_image(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::from)
}

fn load_any(path: &Path) -> Result<ImagePlane, Failure> {
    // PFMs keep their channel count; other formats go through read_image.
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pfm")) {
        burstlab_core::io::read_pfm(path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(Failure::from)
    } else {
        load(path)
    }
}

fn simulate(mut kv: KeyValues, a: SimulateArgs) -> Outcome {
    set(&mut kv, "sim.n_frames", a.frames);
    set(&mut kv, "sim.sr_factor", a.sr);
    set(&mut kv, "sim.patch", a.patch);
    set(&mut kv, "sim.seed", a.seed);
    set(&mut kv, "sim.cfa", a.cfa);
    set(&mut kv, "tremor.magnitude", a.magnitude);
    set(&mut kv, "tremor.smoothness", a.smoothness);
    set(&mut kv, "noise.shot_gain", a.shot_gain);
    set(&mut kv, "noise.read_sigma", a.read_sigma);
    set(&mut kv, "sim.trajectory", a.trajectory.as_ref().map(|p| p.display()));
    if a.noiseless {
        kv.set("noise.shot_gain", 0);
        kv.set("noise.read_sigma", 0);
    }
    let cfg = config::simulation_config(&kv).map_err(Failure::config)?;
    let gt = match &a.gt {
        Some(p) => load(p)?,
        None => {
            cfg.validate()?;
            band_limited_rgb(cfg.patch, cfg.patch, (cfg.patch / 16).max(1), cfg.seed)
        }
    };
    let sample = simulate_pair(&gt, &cfg)?;
    save_sample(&a.out_dir, &sample)?;
    log::info!(
        "wrote {} frames of {}x{} to {}",
        sample.burst.len(),
        sample.burst.frames()[0].height(),
        sample.burst.frames()[0].width(),
        a.out_dir.display()
    );
    Ok(())
}

fn fuse(mut kv: KeyValues, a: FuseArgs) -> Outcome {
    let burst = load_burst(&a.burst_dir).with_context(|| format!("loading {}", a.burst_dir.display()))?;
    let recorded = burst.meta.get("sr_factor").and_then(|s| s.parse::<usize>().ok());
    if kv.raw("fusion.sr_factor").is_none() {
        set(&mut kv, "fusion.sr_factor", recorded);
    }
    set(&mut kv, "fusion.sr_factor", a.sr);
    set(&mut kv, "fusion.kernel_sigma", a.kernel_sigma);
    set(&mut kv, "fusion.min_weight", a.min_weight);
    set(&mut kv, "align.model", a.model);
    set(&mut kv, "fusion.refine_passes", a.refine_passes);
    if a.oracle_alignment {
        kv.set("fusion.oracle_alignment", true);
    }
    let cfg = config::fusion_config(&kv).map_err(Failure::config)?;
    let rec = burstlab_core::reconstruct(&burst, &cfg)?;
    if !rec.dropped_frames.is_empty() {
        log::warn!("dropped frames {:?}", rec.dropped_frames);
    }
    write_image(&a.out, &rec.image)?;
    Ok(())
}

fn project_cmd(mut kv: KeyValues, a: ProjectArgs) -> Outcome {
    a.mask.apply(&mut kv);
    let band: Band = a.mode.parse().map_err(Failure::config)?;
    let img = load_any(&a.input)?;
    let d = config::distill_config(&kv).map_err(Failure::config)?;
    let mask = d.build_mask(img.height(), img.width()).map_err(Failure::config)?;
    write_image(&a.output, &project(&img, &mask, band)?)?;
    if let Some(p) = &a.mask_out {
        write_pfm(p, &mask.to_image())?;
    }
    Ok(())
}

fn spectrum(a: SpectrumArgs) -> Outcome {
    let img = load_any(&a.input)?;
    let spec = log_spectrum(&img.luma())?;
    write_image(&a.output, &spec)?;
    Ok(())
}

fn distill(mut kv: KeyValues, a: DistillArgs) -> Outcome {
    a.mask.apply(&mut kv);
    set(&mut kv, "distill.mode", a.mode);
    set(&mut kv, "distill.lambda", a.lambda);
    set(&mut kv, "distill.steps", a.steps);
    set(&mut kv, "distill.lr", a.lr);
    set(&mut kv, "distill.omega", a.omega);
    set(&mut kv, "distill.seed", a.seed);
    set(&mut kv, "ablation.prior_shift", a.prior_shift);
    set(&mut kv, "ablation.prior_high_variance", a.prior_variance);
    let cfg = config::distill_config(&kv).map_err(Failure::config)?;
    cfg.validate()?;
    let ab = config::ablation_config(&kv).map_err(Failure::config)?;

    let target = match &a.target {
        Some(p) => load_any(p)?,
        None => band_limited_rgb(a.size, a.size, (a.size / 4).max(1), cfg.seed),
    };
    let reference = match &a.reference {
        Some(p) => load_any(p)?,
        None => target.clone(),
    };
    let mask = cfg.build_mask(target.height(), target.width())?;
    let prior = StationaryGaussianPrior::banded(
        reference.map(|v| v + ab.prior_shift),
        &mask,
        ab.prior_high_variance,
    )?;
    if let Some(dir) = &a.dump_dir {
        fs::create_dir_all(dir).context("creating dump directory")?;
        write_pfm(dir.join("x_init.pfm"), &ImagePlane::zeros(target.height(), target.width(), target.channels()))?;
    }
    match run_distillation(&target, &prior, &cfg, Some(&reference)) {
        Ok(state) => {
            save_trace_csv(&state.trace, &a.out)?;
            if let Some(dir) = &a.dump_dir {
                write_pfm(dir.join("x_final.pfm"), &state.x_hat)?;
            }
            Ok(())
        }
        Err(Error::Divergence { iteration, loss, trace }) => {
            save_trace_csv(&trace, &a.out)?;
            Err(Failure {
                code: EXIT_DIVERGENCE,
                error: anyhow!("diverged at iteration {iteration} (loss {loss:e}); partial trace written"),
            })
        }
        Err(e) => Err(e.into()),
    }
}

fn verify_nullspace(mut kv: KeyValues, a: NullspaceArgs) -> Outcome {
    a.mask.apply(&mut kv);
    let spec: KernelSpec = a.kernel.parse().map_err(Failure::config)?;
    let op = BccbOperator::from_spec(a.n, &spec, a.decimation)?;
    let params = config::mask_params(&kv).map_err(Failure::config)?;
    let mut mask = make_mask_with(a.n, a.n, params).map_err(Failure::config)?.gains().clone();
    if let Some(t) = kv.get::<f64>("mask.threshold").map_err(Failure::config)? {
        mask = mask.binarized(t).map_err(Failure::config)?;
    }
    let fidelity = mask_fidelity_report(&op, &mask, a.leak_threshold)?;
    let oracle = if a.decimation == 1 {
        Some(check_null_space(&op, a.trials, a.seed)?)
    } else {
        None
    };
    println!(
        "kernel {} n {} d {}: rank {}, null dimension {}, mask vs P_H operator norm {:.6}",
        fidelity.kernel, fidelity.n, fidelity.decimation, fidelity.rank, fidelity.null_dimension, fidelity.operator_norm_diff
    );
    if let Some(o) = &oracle {
        println!(
            "fourier vs dense P_H: max relative error {:e} over {} inputs",
            o.max_relative_error, o.trials
        );
    }
    if let Some(p) = &a.json {
        write_json(p, &json!({ "fidelity": fidelity, "oracle": oracle }))?;
    }
    Ok(())
}

fn metrics(mut kv: KeyValues, a: MetricsArgs) -> Outcome {
    set(&mut kv, "mask.alpha", a.mask_alpha);
    set(&mut kv, "mask.beta", a.mask_beta);
    set(&mut kv, "mask.gamma", a.mask_gamma);
    let params = config::mask_params(&kv).map_err(Failure::config)?;
    let r = load_any(&a.reference)?;
    let t = load_any(&a.test)?;
    let mask = make_mask_with(r.height(), r.width(), params).map_err(Failure::config)?;
    let report = MetricReport::compute(&r, &t, mask.gains(), None)?;
    print!("{}", report.to_text());
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    Ok(())
}

fn ablate(mut kv: KeyValues, a: AblateArgs) -> Outcome {
    set(&mut kv, "distill.steps", a.steps);
    set(&mut kv, "distill.lambda", a.lambda);
    set(&mut kv, "ablation.prior_shift", a.prior_shift);
    set(&mut kv, "sim.seed", a.seed);
    if kv.raw("distill.omega").is_none() {
        kv.set("distill.omega", "snr");
    }
    // Defaults sized for a quick 4-frame, 2x run.
    for (key, value) in [("sim.n_frames", "4"), ("sim.sr_factor", "2"), ("noise.shot_gain", "0"), ("noise.read_sigma", "0")] {
        if kv.raw(key).is_none() {
            kv.set(key, value);
        }
    }
    let mut sim = config::simulation_config(&kv).map_err(Failure::config)?;
    let distill = config::distill_config(&kv).map_err(Failure::config)?;
    let ablation = config::ablation_config(&kv).map_err(Failure::config)?;
    let scene = match &a.scene {
        Some(p) => load(p)?,
        None => band_limited_rgb(a.size, a.size, (a.size / 8).max(1), sim.seed),
    };
    sim.patch = scene.height();
    let out = run_ablation_hf(&scene, &sim, &distill, &ablation)?;
    fs::create_dir_all(&a.out_dir).context("creating output directory")?;
    write_json(a.out_dir.join("report.json"), &out.report)?;
    fs::write(a.out_dir.join("report.csv"), out.report.to_csv()).context("writing report.csv")?;
    for (mode, x, trace) in &out.finals {
        save_trace_csv(trace, a.out_dir.join(format!("trace_{mode}.csv")))?;
        write_pfm(a.out_dir.join(format!("final_{mode}.pfm")), x)?;
    }
    for m in &out.report.modes {
        println!("{:<10} lowband {:.6e} highband {:.6e}", m.mode.as_str(), m.lowband_rmse, m.highband_rmse);
    }
    println!("ordering holds: {}", out.report.ordering_holds);
    Ok(())
}

fn dataset(mut kv: KeyValues, a: DatasetArgs) -> Outcome {
    set(&mut kv, "dataset.train", a.train);
    set(&mut kv, "dataset.val", a.val);
    set(&mut kv, "dataset.test", a.test);
    set(&mut kv, "dataset.seed", a.seed);
    set(&mut kv, "sim.n_frames", a.frames);
    set(&mut kv, "sim.sr_factor", a.sr);
    set(&mut kv, "sim.patch", a.patch);
    let cfg = config::simulation_config(&kv).map_err(Failure::config)?;
    cfg.validate()?;
    let ratios = config::split_ratios(&kv).map_err(Failure::config)?;
    ratios.validate()?;
    let seed = kv.get::<u64>("dataset.seed").map_err(Failure::config)?.unwrap_or(0);
    let manifest = dataset_batch(&a.src_dir, &a.out_dir, &cfg, ratios, seed)
        .with_context(|| format!("building dataset from {}", a.src_dir.display()))?;
    for w in &manifest.warnings {
        log::warn!("{w}");
    }
    if manifest.entries.is_empty() {
        return Err(Failure {
            code: EXIT_DATA,
            error: anyhow!("no usable images in {}", a.src_dir.display()),
        });
    }
    println!("{} samples written", manifest.entries.len());
    Ok(())
}
