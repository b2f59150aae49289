//! `microcal` command-line interface.
//!
//! Every pipeline stage is exposed as a subcommand: forward simulation,
//! descriptor extraction, target/candidate comparison, replicate noise
//! studies, full calibration campaigns and report regeneration. Results go
//! to files or standard output; diagnostics go to standard error. The exit
//! code is 0 only when the operation fully succeeded (2 for usage errors,
//! 1 for everything else).

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use microcal::campaign::{
    prepare_target, read_trial_log, run_campaign, run_noise_study, trial_correlations, write_reports, CampaignConfig,
    RunOptions, Scale, BEST_FILE, CORRELATIONS_FILE, TRIALS_FILE,
};
use microcal::densities::{
    kde, objective_labels, objective_vector, scalarize, GridSpec, ScalarizationConfig, ScalarizationMethod,
    TargetDensities,
};
use microcal::descriptors::{
    compute_descriptors, read_samples_csv, segment_grains, write_samples_csv, BandConfig, DescriptorSamples,
    DescriptorSet, FilterConfig,
};
use microcal::lattice::{
    run_grain_growth, run_weld, GrainGrowthParams, Microstructure, Neighborhood, PoolShape, WeldParams,
};

const SEED_ENV: &str = "MICROCAL_SEED";

#[derive(Parser, Debug)]
#[command(name = "microcal", version, about = "Calibrate Potts-model process parameters against target microstructures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run curvature-driven grain growth and write an MSV1 dump.
    #[command(allow_negative_numbers = true)]
    SimulateGg(SimulateGg),
    /// Run the moving weld-pool model and write an MSV1 dump.
    #[command(allow_negative_numbers = true)]
    SimulateWeld(SimulateWeld),
    /// Extract descriptor samples from an MSV1 dump.
    #[command(allow_negative_numbers = true)]
    Describe(Describe),
    /// Compare a candidate against a target (MSV1 dumps or sample CSVs).
    #[command(allow_negative_numbers = true)]
    Compare(Compare),
    /// Replicate noise study at the target parameters of a campaign config.
    Noise(Noise),
    /// Run a calibration campaign.
    Calibrate(Calibrate),
    /// Regenerate convergence and correlation reports from a trial log.
    Report(Report),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StencilArg {
    VonNeumann,
    Moore,
}

impl From<StencilArg> for Neighborhood {
    fn from(s: StencilArg) -> Self {
        match s {
            StencilArg::VonNeumann => Neighborhood::VonNeumann,
            StencilArg::Moore => Neighborhood::Moore,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ShapeArg {
    Teardrop,
    Ellipse,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    WeightedSum,
    Chebyshev,
    AugmentedChebyshev,
}

/// Lattice size: `N` for a square, or `ROWSxCOLS`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Size {
    rows: usize,
    cols: usize,
}

fn parse_size(s: &str) -> Result<Size, String> {
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("invalid size {s:?}; expected N or ROWSxCOLS"));
    match s.split_once(['x', 'X']) {
        Some((r, c)) => Ok(Size { rows: parse(r)?, cols: parse(c)? }),
        None => {
            let n = parse(s)?;
            Ok(Size { rows: n, cols: n })
        }
    }
}

#[derive(Args, Debug)]
struct SimulateGg {
    #[arg(long)]
    kbts: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Monte Carlo sweeps.
    #[arg(long, default_value_t = 50)]
    steps: u32,
    /// Lattice size; 256 (1024 with --paper-scale) when absent.
    #[arg(long, value_parser = parse_size)]
    size: Option<Size>,
    /// Number of initial labels; 2000 (32000 with --paper-scale) when absent.
    #[arg(long)]
    num_spins: Option<u32>,
    #[arg(long, value_enum, default_value = "von-neumann")]
    stencil: StencilArg,
    #[arg(long)]
    paper_scale: bool,
}

#[derive(Args, Debug)]
struct SimulateWeld {
    /// Travel speed in sites per sweep.
    #[arg(long = "v")]
    velocity: f64,
    /// Heat-affected-zone depth in sites.
    #[arg(long)]
    haz: f64,
    /// Pool width in sites.
    #[arg(long)]
    width: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    kbts: f64,
    /// Lattice size as lateral ROWS x travel COLS; 256x512 (805x1575 with --paper-scale) when absent.
    #[arg(long, value_parser = parse_size)]
    size: Option<Size>,
    #[arg(long, value_enum, default_value = "teardrop")]
    pool_shape: ShapeArg,
    #[arg(long, value_enum, default_value = "von-neumann")]
    stencil: StencilArg,
    #[arg(long)]
    paper_scale: bool,
}

#[derive(Args, Debug, Clone)]
struct DescriptorFlags {
    /// Comma-separated descriptor ids in 1..=11.
    #[arg(long)]
    descriptors: Option<String>,
    /// Grains need area strictly above this to pass the filter.
    #[arg(long)]
    threshold: Option<f64>,
    /// Disable the grain-area filter.
    #[arg(long)]
    no_filter: bool,
    #[arg(long)]
    band_width: Option<usize>,
    #[arg(long)]
    band_spacing: Option<usize>,
    #[arg(long)]
    num_bands: Option<usize>,
    /// Row of the weld axis; the lattice centerline when absent.
    #[arg(long)]
    band_axis: Option<f64>,
}

impl DescriptorFlags {
    fn explicit_set(&self) -> Result<Option<DescriptorSet>> {
        self.descriptors
            .as_deref()
            .map(|s| s.parse::<DescriptorSet>().with_context(|| format!("--descriptors {s:?}")))
            .transpose()
    }

    fn filter(&self, base: FilterConfig) -> FilterConfig {
        if self.no_filter {
            FilterConfig::disabled()
        } else if let Some(t) = self.threshold {
            FilterConfig::threshold(t)
        } else {
            base
        }
    }

    fn bands(&self, base: BandConfig) -> BandConfig {
        BandConfig {
            band_width: self.band_width.unwrap_or(base.band_width),
            band_spacing: self.band_spacing.unwrap_or(base.band_spacing),
            num_bands: self.num_bands.unwrap_or(base.num_bands),
            axis_y: self.band_axis.or(base.axis_y),
        }
    }
}

#[derive(Args, Debug)]
struct Describe {
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    flags: DescriptorFlags,
    /// Samples CSV; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write one KDE density CSV per descriptor into this directory.
    #[arg(long)]
    densities: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Compare {
    /// Target MSV1 dump or samples CSV.
    #[arg(long)]
    target: PathBuf,
    /// Candidate MSV1 dump or samples CSV.
    #[arg(long)]
    candidate: PathBuf,
    /// Campaign config supplying descriptor, filter, band, grid and scalarization settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: DescriptorFlags,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Comma-separated scalarization weights.
    #[arg(long)]
    weights: Option<String>,
    /// Also write the result as JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CampaignFlags {
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "microcal-out")]
    out: PathBuf,
    /// Cap on concurrent simulations; the batch-policy total when absent.
    #[arg(long)]
    jobs: Option<usize>,
    /// Use paper-scale domain sizes.
    #[arg(long)]
    paper_scale: bool,
}

impl CampaignFlags {
    fn load(&self) -> Result<CampaignConfig> {
        let mut cfg = CampaignConfig::load(&self.config)?;
        if self.paper_scale {
            cfg.scale = Scale::Paper;
        }
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.master_seed = s.trim().parse().with_context(|| format!("{SEED_ENV}={s:?} is not an unsigned integer"))?;
            log::info!("master seed overridden by {SEED_ENV}: {}", cfg.master_seed);
        }
        if let Some(j) = self.jobs {
            ensure!(j > 0, "--jobs must be positive");
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct Noise {
    #[command(flatten)]
    campaign: CampaignFlags,
    /// Replicate count; the config's `replicatesForNoise` when absent.
    #[arg(long)]
    replicates: Option<usize>,
}

#[derive(Args, Debug)]
struct Calibrate {
    #[command(flatten)]
    campaign: CampaignFlags,
    /// Continue from the trial log already in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct Report {
    #[arg(long)]
    log: PathBuf,
    /// Output directory; the log's directory when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Campaign config used to label objectives by descriptor id.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn resolve_size(size: Option<Size>, desk: Size, paper: Size, paper_scale: bool) -> Size {
    size.unwrap_or(if paper_scale { paper } else { desk })
}

fn summarize(ms: &Microstructure) -> String {
    let grains = segment_grains(ms);
    let mean = ms.num_sites() as f64 / grains.len().max(1) as f64;
    format!("{}x{} grains={} mean_area={mean:.3}", ms.length(), ms.width(), grains.len())
}

fn save(ms: &Microstructure, out: &Path) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    ms.save_msv1(out).with_context(|| format!("writing {}", out.display()))
}

fn simulate_gg(a: SimulateGg) -> Result<()> {
    let size = resolve_size(a.size, Size { rows: 256, cols: 256 }, Size { rows: 1024, cols: 1024 }, a.paper_scale);
    let params = GrainGrowthParams {
        width: size.cols,
        length: size.rows,
        num_spins: a.num_spins.unwrap_or(if a.paper_scale { 32_000 } else { 2000 }),
        kbts: a.kbts,
        steps: a.steps,
        seed: a.seed,
        mobility: Default::default(),
        neighborhood: a.stencil.into(),
    };
    let ms = run_grain_growth(&params)?;
    save(&ms, &a.out)?;
    println!("{}", summarize(&ms));
    Ok(())
}

fn simulate_weld(a: SimulateWeld) -> Result<()> {
    let size = resolve_size(a.size, Size { rows: 256, cols: 512 }, Size { rows: 805, cols: 1575 }, a.paper_scale);
    let params = WeldParams {
        width: size.cols,
        length: size.rows,
        velocity: a.velocity,
        haz: a.haz,
        pool_width: a.width,
        pool_shape: match a.pool_shape {
            ShapeArg::Teardrop => PoolShape::Teardrop,
            ShapeArg::Ellipse => PoolShape::Ellipse,
        },
        kbts: a.kbts,
        seed: a.seed,
        haz_profile: Default::default(),
        base_metal: Default::default(),
        neighborhood: a.stencil.into(),
    };
    let ms = run_weld(&params)?;
    save(&ms, &a.out)?;
    println!("{}", summarize(&ms));
    Ok(())
}

/// The 60/20 band layout when all its bands fit in `length` rows, else the
/// compact 20/8 layout used at desk scale.
fn default_bands(length: usize) -> BandConfig {
    let wide = BandConfig::default();
    if wide.rows(length, wide.num_bands - 1).is_ok() {
        wide
    } else {
        BandConfig { band_width: 20, band_spacing: 8, ..wide }
    }
}

fn load_ms(path: &Path) -> Result<Microstructure> {
    Microstructure::load_msv1(path).with_context(|| format!("reading {}", path.display()))
}

fn describe(a: Describe) -> Result<()> {
    let ms = load_ms(&a.input)?;
    let set = a.flags.explicit_set()?.unwrap_or_else(|| "4".parse().expect("valid id"));
    let samples = compute_descriptors(&ms, &set, &a.flags.filter(FilterConfig::default()), &a.flags.bands(default_bands(ms.length())))?;
    match &a.out {
        Some(p) => write_samples_csv(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?), &samples)?,
        None => write_samples_csv(io::stdout().lock(), &samples)?,
    }
    if let Some(dir) = &a.densities {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for d in &samples {
            let path = dir.join(format!("density_d{}.csv", d.id));
            let density = kde(&d.samples, &GridSpec::default()).with_context(|| format!("descriptor {}", d.id))?;
            density.write_csv(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))?;
        }
    }
    for d in &samples {
        log::info!("descriptor {}: {} samples", d.id, d.count());
    }
    Ok(())
}

/// Samples from an MSV1 dump (computed with `set`) or a samples CSV (which must hold exactly `set`).
fn load_samples(
    path: &Path,
    set: &DescriptorSet,
    filter: &FilterConfig,
    bands: &dyn Fn(usize) -> BandConfig,
) -> Result<Vec<DescriptorSamples>> {
    let mut first = String::new();
    BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?).read_line(&mut first)?;
    if first.starts_with("MSV1") {
        let ms = load_ms(path)?;
        return compute_descriptors(&ms, set, filter, &bands(ms.length())).with_context(|| path.display().to_string());
    }
    let samples = read_samples_csv(BufReader::new(File::open(path)?)).with_context(|| path.display().to_string())?;
    let ids: Vec<_> = samples.iter().map(|d| d.id).collect();
    if ids != set.ids() {
        bail!(
            "{} holds descriptors {:?} but the comparison uses {:?}",
            path.display(),
            ids.iter().map(|i| i.get()).collect::<Vec<_>>(),
            set.ids().iter().map(|i| i.get()).collect::<Vec<_>>()
        );
    }
    Ok(samples)
}

fn compare(a: Compare) -> Result<()> {
    let cfg = a.config.as_deref().map(CampaignConfig::load).transpose()?;
    let explicit = a.flags.explicit_set()?;
    let set = match (&cfg, explicit) {
        (Some(c), Some(e)) if c.descriptors != e => bail!(
            "--descriptors {:?} conflicts with the config's descriptor set {:?}",
            a.flags.descriptors.as_deref().unwrap_or_default(),
            c.descriptors.ids().iter().map(|i| i.get()).collect::<Vec<_>>()
        ),
        (_, Some(e)) => e,
        (Some(c), None) => c.descriptors.clone(),
        (None, None) => "4".parse().expect("valid id"),
    };
    let filter = a.flags.filter(cfg.as_ref().map_or_else(FilterConfig::default, |c| c.filter));
    let bands = |length: usize| a.flags.bands(cfg.as_ref().map_or_else(|| default_bands(length), |c| c.band_config()));
    let grid = cfg.as_ref().map_or_else(GridSpec::default, |c| c.grid);
    let mut scal = cfg.as_ref().map_or_else(ScalarizationConfig::default, |c| c.scalarization.clone());
    if let Some(m) = a.method {
        scal.method = match m {
            MethodArg::WeightedSum => ScalarizationMethod::WeightedSum,
            MethodArg::Chebyshev => ScalarizationMethod::Chebyshev,
            MethodArg::AugmentedChebyshev => ScalarizationMethod::AugmentedChebyshev,
        };
    }
    if let Some(w) = &a.weights {
        let w: Vec<f64> = w
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .with_context(|| format!("--weights {w:?}"))?;
        scal.weights = Some(w);
    }

    let target_samples = load_samples(&a.target, &set, &filter, &bands)?;
    let candidate_samples = load_samples(&a.candidate, &set, &filter, &bands)?;
    let mut target = TargetDensities::from_samples(&target_samples, &grid)?;
    if let Some(c) = &cfg {
        target.orientation = c.kl_orientation;
    }
    let y = objective_vector(&target, &candidate_samples, &grid)?;
    let y_scalar = scalarize(&y.values, &scal)?;
    let result = serde_json::json!({
        "descriptors": y.ids.iter().map(|i| i.get()).collect::<Vec<_>>(),
        "labels": objective_labels(&y.ids),
        "yVector": y.values,
        "yScalar": y_scalar,
    });
    let text = serde_json::to_string_pretty(&result)?;
    println!("{text}");
    if let Some(p) = &a.out {
        fs::write(p, format!("{text}\n")).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn noise(a: Noise) -> Result<()> {
    let cfg = a.campaign.load()?;
    let replicates = a.replicates.unwrap_or(cfg.replicates_for_noise);
    let target = prepare_target(&cfg)?;
    let jobs = a.campaign.jobs.unwrap_or(cfg.batch_policy.total());
    let profile = run_noise_study(&cfg, &target, replicates, jobs, Some(&a.campaign.out))?;
    ensure!(
        profile.replicates == replicates,
        "only {} of {replicates} replicates succeeded",
        profile.replicates
    );
    println!("replicates={} total_mean={:.6e} total_variance={:.6e}", profile.replicates, profile.total_mean, profile.total_variance);
    Ok(())
}

fn calibrate(a: Calibrate) -> Result<()> {
    let cfg = a.campaign.load()?;
    let target = prepare_target(&cfg)?;
    let opts = RunOptions { out_dir: Some(a.campaign.out.clone()), jobs: a.campaign.jobs, resume: a.resume };
    let report = run_campaign(&cfg, &target, &opts)?;
    match &report.best {
        Some(b) => println!(
            "trials={} best_trial={} x={:?} y={:.6e} wall={:.1}s",
            b.trial_count, b.trial_id, b.x, b.y_scalar, b.wall_time_seconds
        ),
        None => bail!("no trial completed"),
    }
    log::info!(
        "wrote {} and {} under {}",
        TRIALS_FILE,
        BEST_FILE,
        a.campaign.out.display()
    );
    Ok(())
}

fn report(a: Report) -> Result<()> {
    let trials = read_trial_log(&a.log)?;
    ensure!(!trials.is_empty(), "{} holds no trials", a.log.display());
    let labels = match &a.config {
        Some(p) => Some(objective_labels(CampaignConfig::load(p)?.descriptors.ids())),
        None => None,
    };
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.log.parent().map(Path::to_path_buf).unwrap_or_default());
    let out = if out.as_os_str().is_empty() { PathBuf::from(".") } else { out };
    let completed = trials.iter().filter(|t| t.is_completed()).count();
    ensure!(completed >= 3 || labels.is_some() || completed > 0, "{} holds no completed trials", a.log.display());
    match write_reports(&trials, labels.clone(), &out)? {
        Some(_) => println!("trials={} completed={completed} wrote convergence.csv and {CORRELATIONS_FILE}", trials.len()),
        None => {
            // fewer than three completed trials: report why the matrix is missing
            let err = trial_correlations(&trials, labels).err().map(|e| e.to_string()).unwrap_or_default();
            bail!("wrote convergence.csv but not {CORRELATIONS_FILE}: {err}");
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SimulateGg(a) => simulate_gg(a),
        Command::SimulateWeld(a) => simulate_weld(a),
        Command::Describe(a) => describe(a),
        Command::Compare(a) => compare(a),
        Command::Noise(a) => noise(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {
            let _ = io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
