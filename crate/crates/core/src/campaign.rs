//! End-to-end calibration campaigns.
//!
//! A campaign owns the target (synthesized from known parameters or loaded
//! from an MSV1 file), caches its descriptor densities once, and wires the
//! candidate evaluator (simulate, describe, compare, scalarize) into the
//! asynchronous optimizer. Artifacts are written by a single writer:
//! `trials.jsonl`, `convergence.csv`, `correlations.csv`, `noise.csv` and
//! `best.json`.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::densities::{
    objective_correlations, objective_labels, objective_vector, quantify_noise, scalarize, CorrelationMatrix,
    DensityError, GridSpec, KlOrientation, NoiseProfile, ObjectiveVector, ScalarizationConfig, TargetDensities,
};
use crate::descriptors::{compute_descriptors, BandConfig, DescriptorError, DescriptorSamples, DescriptorSet, FilterConfig};
use crate::lattice::{
    run_grain_growth, run_weld, BaseMetal, GrainGrowthParams, HazProfile, LatticeError, Microstructure, MobilityModel,
    Neighborhood, PoolShape, WeldParams,
};
use crate::optimizer::{
    best_so_far, resume, run_dispatcher, AcquisitionWeights, BatchPolicy, Bounds, CompletionOrder, Dispatcher,
    Evaluation, IncumbentMode, OptimizerConfig, OptimizerError, ProposalOptions, Trial,
};
use crate::seeding::split_seed;
use crate::surrogate::FitOptions;

const STREAM_TARGET: u64 = 0x7a2e_7000_0000_0001;
const STREAM_NOISE: u64 = 0x7a2e_7000_0000_0002;

pub const TRIALS_FILE: &str = "trials.jsonl";
pub const CONVERGENCE_FILE: &str = "convergence.csv";
pub const CORRELATIONS_FILE: &str = "correlations.csv";
pub const NOISE_FILE: &str = "noise.csv";
pub const BEST_FILE: &str = "best.json";

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parameter {name} = {value} is outside [{lower}, {upper}]")]
    OutOfBounds { name: String, value: f64, lower: f64, upper: f64 },
    #[error("target: {0}")]
    Target(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> CampaignError + '_ {
    move |source| CampaignError::File { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ProcessModel {
    GrainGrowth,
    Weld,
}

/// Domain-size preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Scale {
    /// 256x256 grain growth; 256 lateral x 512 travel weld.
    #[default]
    Desk,
    /// 1024x1024 grain growth; 805 lateral x 1575 travel weld.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ParameterRange {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
}

/// Forward-model settings that are not searched over. Unset sizes follow
/// the campaign scale.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct FixedParams {
    /// Columns (the weld travel direction).
    pub width: Option<usize>,
    /// Rows (lateral to the weld).
    pub length: Option<usize>,
    pub steps: Option<u32>,
    pub num_spins: Option<u32>,
    pub neighborhood: Neighborhood,
    pub mobility: MobilityModel,
    /// Weld-model simulation temperature.
    pub kbts: Option<f64>,
    pub velocity: Option<f64>,
    pub haz: Option<f64>,
    pub pool_width: Option<f64>,
    pub pool_shape: PoolShape,
    pub haz_profile: HazProfile,
    pub base_metal: BaseMetal,
}

/// Where the target microstructure comes from: exactly one of `params` or `file`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct TargetConfig {
    /// Raw parameter values in `parameterSpace` order.
    pub params: Option<Vec<f64>>,
    /// Simulation seed for a synthesized target; derived from the master seed when absent.
    pub seed: Option<u64>,
    /// MSV1 file holding the target.
    pub file: Option<PathBuf>,
}

/// Optimizer knobs beyond the batch policy and budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct OptimizerSettings {
    pub weights: AcquisitionWeights,
    pub incumbent: IncumbentMode,
    pub proposal: ProposalOptions,
    pub fit: FitOptions,
    pub failure_budget: usize,
    pub completion: CompletionOrder,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            weights: AcquisitionWeights::default(),
            incumbent: IncumbentMode::default(),
            proposal: ProposalOptions::default(),
            fit: FitOptions::default(),
            failure_budget: 10,
            completion: CompletionOrder::default(),
        }
    }
}

fn default_replicates() -> usize {
    25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct CampaignConfig {
    pub process_model: ProcessModel,
    #[serde(default)]
    pub scale: Scale,
    pub parameter_space: Vec<ParameterRange>,
    #[serde(default)]
    pub fixed_params: FixedParams,
    pub descriptors: DescriptorSet,
    #[serde(default)]
    pub filter: FilterConfig,
    /// Band layout; scale dependent when absent.
    #[serde(default)]
    pub bands: Option<BandConfig>,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub kl_orientation: KlOrientation,
    #[serde(default)]
    pub scalarization: ScalarizationConfig,
    pub batch_policy: BatchPolicy,
    #[serde(default)]
    pub initial_points: Vec<Vec<f64>>,
    pub max_trials: usize,
    #[serde(default)]
    pub objective_threshold: Option<f64>,
    #[serde(default = "default_replicates")]
    pub replicates_for_noise: usize,
    #[serde(default)]
    pub master_seed: u64,
    pub target: TargetConfig,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    /// Write every candidate microstructure as MSV1 under `microstructures/`.
    #[serde(default)]
    pub dump_microstructures: bool,
}

/// Canonical parameter names per model, with accepted aliases.
fn canonical_name(model: ProcessModel, name: &str) -> Option<&'static str> {
    match (model, name) {
        (ProcessModel::GrainGrowth, "kbts" | "kBTs") => Some("kbts"),
        (ProcessModel::Weld, "velocity" | "v") => Some("velocity"),
        (ProcessModel::Weld, "haz") => Some("haz"),
        (ProcessModel::Weld, "poolWidth" | "width") => Some("poolWidth"),
        _ => None,
    }
}

impl CampaignConfig {
    pub fn from_json(text: &str) -> Result<Self, CampaignError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CampaignError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CampaignError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(file_err(path))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| CampaignError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        // relative target files resolve against the config's directory
        if let (Some(f), Some(dir)) = (cfg.target.file.as_mut(), path.parent()) {
            if f.is_relative() {
                *f = dir.join(&*f);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical names of the searched parameters, in `parameterSpace` order.
    pub fn parameter_names(&self) -> Vec<&'static str> {
        self.parameter_space
            .iter()
            .map(|p| canonical_name(self.process_model, &p.name).unwrap_or("?"))
            .collect()
    }

    pub fn validate(&self) -> Result<(), CampaignError> {
        let cfg_err = |m: String| Err(CampaignError::Config(m));
        if self.parameter_space.is_empty() {
            return cfg_err("parameterSpace is empty".into());
        }
        let mut seen = Vec::new();
        for p in &self.parameter_space {
            let Some(c) = canonical_name(self.process_model, &p.name) else {
                return cfg_err(format!("unknown parameter {:?} for the {:?} model", p.name, self.process_model));
            };
            if seen.contains(&c) {
                return cfg_err(format!("parameter {c} listed twice"));
            }
            seen.push(c);
            if !(p.lower < p.upper) || !p.lower.is_finite() || !p.upper.is_finite() {
                return cfg_err(format!("parameter {}: bounds [{}, {}] must be finite with lower < upper", p.name, p.lower, p.upper));
            }
        }
        match self.process_model {
            ProcessModel::GrainGrowth => {
                if !seen.contains(&"kbts") {
                    return cfg_err("grain-growth campaigns must search over kbts".into());
                }
                if self.parameter_space.iter().any(|p| p.lower < 0.0) {
                    return cfg_err("kbts bounds must be nonnegative".into());
                }
            }
            ProcessModel::Weld => {
                let fp = &self.fixed_params;
                for (name, fixed) in [("velocity", fp.velocity), ("haz", fp.haz), ("poolWidth", fp.pool_width)] {
                    if !seen.contains(&name) && fixed.is_none() {
                        return cfg_err(format!("weld parameter {name} is neither searched nor fixed"));
                    }
                }
            }
        }
        if self.descriptors.is_empty() {
            return cfg_err("descriptor set is empty".into());
        }
        self.scalarization.validate(Some(self.descriptors.len()))?;
        self.batch_policy.validate()?;
        if self.max_trials == 0 {
            return cfg_err("maxTrials must be positive".into());
        }
        let d = self.parameter_space.len();
        self.bounds()?;
        for p in &self.initial_points {
            if p.len() != d {
                return cfg_err(format!("initial point {p:?} has {} coordinates, expected {d}", p.len()));
            }
            self.check_bounds(p)?;
        }
        let t = &self.target;
        match (&t.params, &t.file) {
            (Some(_), Some(_)) => return cfg_err("target must give either params or file, not both".into()),
            (None, None) => return cfg_err("target needs params or file".into()),
            (Some(p), None) => {
                if p.len() != d {
                    return cfg_err(format!("target params {p:?} have {} coordinates, expected {d}", p.len()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn bounds(&self) -> Result<Bounds, CampaignError> {
        Ok(Bounds::new(
            self.parameter_space.iter().map(|p| p.lower).collect(),
            self.parameter_space.iter().map(|p| p.upper).collect(),
        )?)
    }

    /// Rejects points outside the parameter box, naming the offending bound.
    pub fn check_bounds(&self, x: &[f64]) -> Result<(), CampaignError> {
        if x.len() != self.parameter_space.len() {
            return Err(CampaignError::Config(format!(
                "expected {} parameters, got {}",
                self.parameter_space.len(),
                x.len()
            )));
        }
        for (v, p) in x.iter().zip(&self.parameter_space) {
            if !(*v >= p.lower && *v <= p.upper) {
                return Err(CampaignError::OutOfBounds { name: p.name.clone(), value: *v, lower: p.lower, upper: p.upper });
            }
        }
        Ok(())
    }

    /// Lattice size as (columns, rows).
    pub fn domain(&self) -> (usize, usize) {
        let (w, l) = match (self.process_model, self.scale) {
            (ProcessModel::GrainGrowth, Scale::Desk) => (256, 256),
            (ProcessModel::GrainGrowth, Scale::Paper) => (1024, 1024),
            (ProcessModel::Weld, Scale::Desk) => (512, 256),
            (ProcessModel::Weld, Scale::Paper) => (1575, 805),
        };
        (self.fixed_params.width.unwrap_or(w), self.fixed_params.length.unwrap_or(l))
    }

    pub fn band_config(&self) -> BandConfig {
        self.bands.unwrap_or(match self.scale {
            Scale::Desk => BandConfig { band_width: 20, band_spacing: 8, ..BandConfig::default() },
            Scale::Paper => BandConfig::default(),
        })
    }

    fn named(&self, x: &[f64]) -> BTreeMap<&'static str, f64> {
        self.parameter_names().into_iter().zip(x.iter().copied()).collect()
    }

    /// Grain-growth parameters for raw input `x`.
    pub fn grain_growth_params(&self, x: &[f64], seed: u64) -> GrainGrowthParams {
        let (width, length) = self.domain();
        let fp = &self.fixed_params;
        let default_q = if self.scale == Scale::Paper { 32_000 } else { 2000 };
        GrainGrowthParams {
            width,
            length,
            num_spins: fp.num_spins.unwrap_or(default_q),
            kbts: self.named(x)["kbts"],
            steps: fp.steps.unwrap_or(50),
            seed,
            mobility: fp.mobility,
            neighborhood: fp.neighborhood,
        }
    }

    /// Weld parameters for raw input `x`.
    pub fn weld_params(&self, x: &[f64], seed: u64) -> WeldParams {
        let (width, length) = self.domain();
        let fp = &self.fixed_params;
        let named = self.named(x);
        let get = |k: &str, fixed: Option<f64>| named.get(k).copied().or(fixed).unwrap_or(f64::NAN);
        WeldParams {
            width,
            length,
            velocity: get("velocity", fp.velocity),
            haz: get("haz", fp.haz),
            pool_width: get("poolWidth", fp.pool_width),
            pool_shape: fp.pool_shape,
            kbts: fp.kbts.unwrap_or(0.5),
            seed,
            haz_profile: fp.haz_profile,
            base_metal: fp.base_metal,
            neighborhood: fp.neighborhood,
        }
    }

    /// Runs the forward model at raw input `x`.
    pub fn simulate(&self, x: &[f64], seed: u64) -> Result<Microstructure, CampaignError> {
        self.check_bounds(x)?;
        self.simulate_unchecked(x, seed)
    }

    fn simulate_unchecked(&self, x: &[f64], seed: u64) -> Result<Microstructure, CampaignError> {
        Ok(match self.process_model {
            ProcessModel::GrainGrowth => run_grain_growth(&self.grain_growth_params(x, seed))?,
            ProcessModel::Weld => run_weld(&self.weld_params(x, seed))?,
        })
    }

    pub fn describe(&self, ms: &Microstructure) -> Result<Vec<DescriptorSamples>, CampaignError> {
        Ok(compute_descriptors(ms, &self.descriptors, &self.filter, &self.band_config())?)
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        let o = &self.optimizer;
        OptimizerConfig {
            batch: self.batch_policy,
            weights: o.weights,
            incumbent: o.incumbent,
            proposal: o.proposal,
            fit: o.fit.clone(),
            max_trials: self.max_trials,
            objective_threshold: self.objective_threshold,
            failure_budget: o.failure_budget,
            completion: o.completion,
        }
    }

    pub fn target_seed(&self) -> u64 {
        self.target.seed.unwrap_or_else(|| split_seed(self.master_seed, STREAM_TARGET))
    }
}

/// Prepared target: microstructure plus cached samples and densities.
#[derive(Debug, Clone)]
pub struct TargetSpec {
    pub params: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub microstructure: Microstructure,
    pub samples: Vec<DescriptorSamples>,
    pub densities: TargetDensities,
}

/// Synthesizes or loads the target and caches its descriptor densities.
pub fn prepare_target(cfg: &CampaignConfig) -> Result<TargetSpec, CampaignError> {
    let (ms, params, seed) = match (&cfg.target.params, &cfg.target.file) {
        (Some(p), None) => {
            let seed = cfg.target_seed();
            // the target may sit outside the search box
            (cfg.simulate_unchecked(p, seed)?, Some(p.clone()), Some(seed))
        }
        (None, Some(path)) => (Microstructure::load_msv1(path).map_err(|e| CampaignError::Target(format!("{}: {e}", path.display())))?, None, None),
        _ => return Err(CampaignError::Config("target needs exactly one of params or file".into())),
    };
    let samples = cfg.describe(&ms).map_err(|e| CampaignError::Target(e.to_string()))?;
    let mut densities = TargetDensities::from_samples(&samples, &cfg.grid).map_err(|e| CampaignError::Target(e.to_string()))?;
    densities.orientation = cfg.kl_orientation;
    Ok(TargetSpec { params, seed, microstructure: ms, samples, densities })
}

/// Objective vector and scalar of one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateEvaluation {
    pub objectives: ObjectiveVector,
    pub y_scalar: f64,
}

/// Simulate, describe, compare and scalarize. Pure given its inputs.
pub fn evaluate_candidate(
    x: &[f64],
    seed: u64,
    cfg: &CampaignConfig,
    target: &TargetSpec,
) -> Result<CandidateEvaluation, CampaignError> {
    let ms = cfg.simulate(x, seed)?;
    evaluate_microstructure(&ms, cfg, target)
}

/// Compares an existing microstructure against the target.
pub fn evaluate_microstructure(
    ms: &Microstructure,
    cfg: &CampaignConfig,
    target: &TargetSpec,
) -> Result<CandidateEvaluation, CampaignError> {
    let samples = cfg.describe(ms)?;
    let objectives = objective_vector(&target.densities, &samples, &cfg.grid)?;
    let y_scalar = scalarize(&objectives.values, &cfg.scalarization)?;
    Ok(CandidateEvaluation { objectives, y_scalar })
}

/// Counting semaphore capping concurrent simulations.
struct JobLimit {
    free: Mutex<usize>,
    cv: Condvar,
}

impl JobLimit {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
            while *free == 0 {
                free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
            }
            *free -= 1;
        }
        struct Release<'a>(&'a JobLimit);
        impl Drop for Release<'_> {
            fn drop(&mut self) {
                *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
                self.0.cv.notify_one();
            }
        }
        let _release = Release(self);
        f()
    }
}

/// Replicate seeds of the noise study.
pub fn noise_seeds(cfg: &CampaignConfig, replicates: usize) -> Vec<u64> {
    (0..replicates as u64).map(|i| split_seed(split_seed(cfg.master_seed, STREAM_NOISE), i)).collect()
}

/// Objective vectors of the target parameters under each seed. Failed
/// replicates are logged and skipped.
pub fn noise_replicates(
    cfg: &CampaignConfig,
    target: &TargetSpec,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<ObjectiveVector>, CampaignError> {
    let params = target.params.clone().ok_or_else(|| {
        CampaignError::Config("the noise study needs target parameters (the target was loaded from a file)".into())
    })?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CampaignError::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<ObjectiveVector, CampaignError>> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&s| {
                let ms = cfg.simulate_unchecked(&params, s)?;
                evaluate_microstructure(&ms, cfg, target).map(|e| e.objectives)
            })
            .collect()
    });
    let mut out = Vec::new();
    for (r, s) in results.into_iter().zip(seeds) {
        match r {
            Ok(v) => out.push(v),
            Err(e) => log::warn!("noise replicate with seed {s} failed: {e}"),
        }
    }
    Ok(out)
}

/// Replicate study at the target parameters; writes `noise.csv` when `out_dir` is given.
pub fn run_noise_study(
    cfg: &CampaignConfig,
    target: &TargetSpec,
    replicates: usize,
    jobs: usize,
    out_dir: Option<&Path>,
) -> Result<NoiseProfile, CampaignError> {
    if replicates < 2 {
        return Err(CampaignError::Config(format!("the noise study needs at least 2 replicates, got {replicates}")));
    }
    let vectors = noise_replicates(cfg, target, &noise_seeds(cfg, replicates), jobs)?;
    let profile = quantify_noise(&vectors)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(file_err(dir))?;
        let path = dir.join(NOISE_FILE);
        let f = File::create(&path).map_err(file_err(&path))?;
        profile.write_csv(BufWriter::new(f))?;
    }
    Ok(profile)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    /// Cap on concurrent simulations; defaults to the batch total.
    pub jobs: Option<usize>,
    /// Continue from an existing `trials.jsonl` in `out_dir`.
    pub resume: bool,
}

/// Summary written to `best.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BestSummary {
    pub trial_id: u64,
    pub x: Vec<f64>,
    pub parameters: BTreeMap<String, f64>,
    pub y_scalar: f64,
    /// GP posterior mean at `x` when the selection used it.
    pub posterior_mean: Option<f64>,
    pub selection: IncumbentMode,
    pub best_observed_trial_id: u64,
    pub best_observed_y_scalar: f64,
    pub trial_count: usize,
    pub completed: usize,
    pub failed: usize,
    pub wall_time_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct CampaignReport {
    pub trials: Vec<Trial>,
    pub best: Option<BestSummary>,
    pub correlations: Option<CorrelationMatrix>,
    pub wall_time: f64,
}

/// Reads a JSON-lines trial log.
pub fn read_trial_log(path: &Path) -> Result<Vec<Trial>, CampaignError> {
    let f = File::open(path).map_err(file_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(file_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trial = serde_json::from_str(&line)
            .map_err(|e| CampaignError::Parse { path: path.to_path_buf(), message: format!("line {}: {e}", i + 1) })?;
        out.push(t);
    }
    Ok(out)
}

/// `index,trialId,batch,acquisition,yScalar,bestSoFar`; failed trials leave `yScalar` empty.
pub fn write_convergence_csv<W: Write>(trials: &[Trial], mut w: W) -> std::io::Result<()> {
    writeln!(w, "index,trialId,batch,acquisition,yScalar,bestSoFar")?;
    for (i, (t, b)) in trials.iter().zip(best_so_far(trials)).enumerate() {
        let y = t.y_scalar.filter(|_| t.is_completed()).map(|v| format!("{v}")).unwrap_or_default();
        let b = if b.is_finite() { format!("{b}") } else { String::new() };
        writeln!(w, "{},{},{},{},{},{}", i + 1, t.trial_id, t.batch, t.acquisition, y, b)?;
    }
    Ok(())
}

/// R^2 matrix over the objective vectors of completed trials.
pub fn trial_correlations(trials: &[Trial], labels: Option<Vec<String>>) -> Result<CorrelationMatrix, CampaignError> {
    let rows: Vec<Vec<f64>> = trials.iter().filter(|t| t.is_completed()).map(|t| t.y_vector.clone()).collect();
    let s = rows.first().map_or(0, Vec::len);
    let labels = labels.unwrap_or_else(|| (1..=s).map(|i| format!("y{i}")).collect());
    Ok(objective_correlations(&labels, &rows)?)
}

/// Writes `convergence.csv` and, with at least three completed trials, `correlations.csv`.
pub fn write_reports(
    trials: &[Trial],
    labels: Option<Vec<String>>,
    out_dir: &Path,
) -> Result<Option<CorrelationMatrix>, CampaignError> {
    fs::create_dir_all(out_dir).map_err(file_err(out_dir))?;
    let path = out_dir.join(CONVERGENCE_FILE);
    let f = File::create(&path).map_err(file_err(&path))?;
    write_convergence_csv(trials, BufWriter::new(f)).map_err(file_err(&path))?;
    let completed = trials.iter().filter(|t| t.is_completed()).count();
    if completed < 3 {
        log::warn!("only {completed} completed trials; skipping the correlation analysis");
        return Ok(None);
    }
    let m = trial_correlations(trials, labels)?;
    let path = out_dir.join(CORRELATIONS_FILE);
    let f = File::create(&path).map_err(file_err(&path))?;
    m.write_csv(BufWriter::new(f))?;
    Ok(Some(m))
}

fn summarize(cfg: &CampaignConfig, d: &Dispatcher, wall: f64) -> Option<BestSummary> {
    let best = d.best_trial()?;
    let observed = d
        .trials()
        .iter()
        .filter(|t| t.is_completed())
        .min_by(|a, b| a.y_scalar.unwrap().total_cmp(&b.y_scalar.unwrap()))?;
    let posterior_mean = match (cfg.optimizer.incumbent, d.model()) {
        (IncumbentMode::PosteriorMean, Some(m)) => Some(m.predict(&d.bounds().to_unit(&best.x)).0),
        _ => None,
    };
    let completed = d.trials().iter().filter(|t| t.is_completed()).count();
    Some(BestSummary {
        trial_id: best.trial_id,
        x: best.x.clone(),
        parameters: cfg.parameter_names().iter().map(|s| s.to_string()).zip(best.x.iter().copied()).collect(),
        y_scalar: best.y_scalar.unwrap(),
        posterior_mean,
        selection: cfg.optimizer.incumbent,
        best_observed_trial_id: observed.trial_id,
        best_observed_y_scalar: observed.y_scalar.unwrap(),
        trial_count: d.trials().len(),
        completed,
        failed: d.trials().len() - completed,
        wall_time_seconds: wall,
    })
}

/// Runs the optimizer against a prepared target, writing artifacts to
/// `opts.out_dir` as it goes. On failure-budget exhaustion the partial
/// artifacts are still written before the error is returned.
pub fn run_campaign(cfg: &CampaignConfig, target: &TargetSpec, opts: &RunOptions) -> Result<CampaignReport, CampaignError> {
    let clock = Instant::now();
    let bounds = cfg.bounds()?;
    let labels = objective_labels(cfg.descriptors.ids());
    let log_path = opts.out_dir.as_ref().map(|d| d.join(TRIALS_FILE));
    let ms_dir = opts.out_dir.as_ref().filter(|_| cfg.dump_microstructures).map(|d| d.join("microstructures"));

    let previous = match (&log_path, opts.resume) {
        (Some(p), true) if p.exists() => read_trial_log(p)?,
        _ => Vec::new(),
    };
    let mut dispatcher = if previous.is_empty() {
        Dispatcher::new(cfg.optimizer_config(), bounds.clone(), cfg.initial_points.clone(), cfg.master_seed)?
    } else {
        log::info!("resuming from {} logged trials", previous.len());
        resume(cfg.optimizer_config(), bounds.clone(), cfg.initial_points.clone(), cfg.master_seed, &previous)?
    };

    let mut log_writer = match &log_path {
        Some(p) => {
            let dir = p.parent().unwrap();
            fs::create_dir_all(dir).map_err(file_err(dir))?;
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!previous.is_empty())
                .truncate(previous.is_empty())
                .open(p)
                .map_err(file_err(p))?;
            Some(BufWriter::new(f))
        }
        None => None,
    };
    if let Some(dir) = &ms_dir {
        fs::create_dir_all(dir).map_err(file_err(dir))?;
    }

    let limit = JobLimit::new(opts.jobs.unwrap_or(cfg.batch_policy.total()));
    let evaluator = |x: &[f64], seed: u64| -> Result<Evaluation, String> {
        limit.run(|| {
            let ms = cfg.simulate(x, seed).map_err(|e| e.to_string())?;
            if let Some(dir) = &ms_dir {
                let path = dir.join(format!("seed_{seed:016x}.msv1"));
                ms.save_msv1(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            }
            let e = evaluate_microstructure(&ms, cfg, target).map_err(|e| e.to_string())?;
            Ok(Evaluation { y_vector: e.objectives.values, y_scalar: e.y_scalar })
        })
    };
    let mut io_error: Option<CampaignError> = None;
    let outcome = run_dispatcher(
        &mut dispatcher,
        &evaluator,
        |_| {},
        |t| {
            match t.y_scalar {
                Some(y) => log::info!("trial {} [batch {} {}] x={:?} y={y:.6e}", t.trial_id, t.batch, t.acquisition, t.x),
                None => log::warn!("trial {} failed: {}", t.trial_id, t.error.as_deref().unwrap_or("unknown error")),
            }
            if let (Some(w), Some(p)) = (log_writer.as_mut(), log_path.as_ref()) {
                let line = serde_json::to_string(t).expect("trials serialize");
                if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                    io_error.get_or_insert(CampaignError::File { path: p.clone(), source: e });
                }
            }
        },
    );
    drop(log_writer);
    if let Some(e) = io_error {
        return Err(e);
    }

    let wall = clock.elapsed().as_secs_f64();
    let trials = dispatcher.trials().to_vec();
    let best = summarize(cfg, &dispatcher, wall);
    let correlations = match &opts.out_dir {
        Some(dir) => {
            let m = write_reports(&trials, Some(labels.clone()), dir)?;
            if let Some(b) = &best {
                let path = dir.join(BEST_FILE);
                fs::write(&path, serde_json::to_string_pretty(b).expect("summary serializes")).map_err(file_err(&path))?;
            }
            m
        }
        None if trials.iter().filter(|t| t.is_completed()).count() >= 3 => Some(trial_correlations(&trials, Some(labels))?),
        None => None,
    };
    outcome?;
    Ok(CampaignReport { trials, best, correlations, wall_time: wall })
}
