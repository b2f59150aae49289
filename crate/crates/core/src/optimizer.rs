//! Asynchronous parallel Bayesian optimization.
//!
//! The dispatcher keeps a fixed number of evaluations in flight, split into
//! an acquisition-driven batch (multi-acquisition: EI, PI or UCB drawn per
//! proposal), an exploration batch (maximum posterior variance) and a
//! feasibility batch whose classifier is not implemented (its slots draw
//! uniform random points). Whenever any evaluation finishes the GP is refit
//! on every completed trial and a replacement is proposed for the freed slot;
//! in-flight points enter the proposal model through posterior-mean
//! ("believer") imputation.
//!
//! All model updates happen on the calling thread in completion order, so a
//! trial log is enough to replay the exact proposal sequence.

use std::collections::VecDeque;
use std::sync::mpsc;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

use crate::seeding::{rng_from_seed, split_seed, SimRng};
use crate::surrogate::{FitOptions, GpModel, SurrogateError};

/// Posterior variance (standardized units) below which a point is treated as
/// exactly known by the acquisition functions.
pub const VARIANCE_FLOOR: f64 = 1e-7;

const STREAM_INIT: u64 = 0x1a17;
const STREAM_PROPOSAL: u64 = 0x9e0f;
const STREAM_FIT: u64 = 0xf17;

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("evaluation failure budget of {budget} exhausted; last errors: {last:?}")]
    FailureBudget { budget: usize, last: Vec<String> },
    #[error("trial log is inconsistent: {0}")]
    Log(String),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
}

/// Axis-aligned parameter box in raw units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, OptimizerError> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(OptimizerError::Config("bounds need matching, nonempty lower and upper vectors".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(u > l) || !l.is_finite() || !u.is_finite()) {
            return Err(OptimizerError::Config(format!("every lower bound must be below its upper bound: {lower:?} {upper:?}")));
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.lower.iter().zip(&self.upper)).map(|(v, (l, u))| (v - l) / (u - l)).collect()
    }

    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(t, (l, h))| (l + t.clamp(0.0, 1.0) * (h - l)).clamp(*l, *h))
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| v >= l && v <= u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", tag = "kind")]
pub enum AcquisitionKind {
    ExpectedImprovement,
    ProbabilityOfImprovement,
    UpperConfidenceBound { beta: f64 },
    MaxPosteriorVariance,
}

impl AcquisitionKind {
    pub fn label(&self) -> &'static str {
        match self {
            AcquisitionKind::ExpectedImprovement => "ei",
            AcquisitionKind::ProbabilityOfImprovement => "pi",
            AcquisitionKind::UpperConfidenceBound { .. } => "ucb",
            AcquisitionKind::MaxPosteriorVariance => "max_variance",
        }
    }
}

fn std_normal() -> Normal {
    Normal::standard()
}

/// Acquisition score at unit-box point `x`; larger is better.
///
/// Minimization oriented: `incumbent` is the best (lowest) objective so far.
pub fn acquisition_value(model: &GpModel, x: &[f64], kind: AcquisitionKind, incumbent: f64) -> f64 {
    let (mu_s, var_s) = model.predict_standardized(x);
    let st = model.standardization();
    let mu = st.inverse(mu_s);
    let sigma = if var_s < VARIANCE_FLOOR { 0.0 } else { var_s.sqrt() * st.scale };
    acquisition_from_moments(mu, sigma, kind, incumbent)
}

/// Closed-form acquisition from a posterior mean and standard deviation.
pub fn acquisition_from_moments(mu: f64, sigma: f64, kind: AcquisitionKind, incumbent: f64) -> f64 {
    let improvement = incumbent - mu;
    match kind {
        AcquisitionKind::ExpectedImprovement => {
            if sigma <= 0.0 {
                return improvement.max(0.0);
            }
            let z = improvement / sigma;
            let n = std_normal();
            (improvement * n.cdf(z) + sigma * n.pdf(z)).max(0.0)
        }
        AcquisitionKind::ProbabilityOfImprovement => {
            if sigma <= 0.0 {
                return if mu < incumbent { 1.0 } else { 0.0 };
            }
            std_normal().cdf(improvement / sigma)
        }
        AcquisitionKind::UpperConfidenceBound { beta } => -(mu - beta * sigma),
        AcquisitionKind::MaxPosteriorVariance => sigma * sigma,
    }
}

/// Concurrent evaluation slots per batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BatchPolicy {
    pub batch1: usize,
    pub batch2: usize,
    #[serde(default)]
    pub batch3: usize,
}

impl BatchPolicy {
    pub fn new(batch1: usize, batch2: usize, batch3: usize) -> Result<Self, OptimizerError> {
        let p = Self { batch1, batch2, batch3 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), OptimizerError> {
        if self.batch1 == 0 {
            return Err(OptimizerError::Config("batch1 must be at least 1".into()));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.batch1 + self.batch2 + self.batch3
    }

    /// Batch tag of each slot, acquisition slots first.
    fn slot_batches(&self) -> Vec<u8> {
        let mut v = vec![1u8; self.batch1];
        v.extend(std::iter::repeat_n(2u8, self.batch2));
        v.extend(std::iter::repeat_n(3u8, self.batch3));
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PendingPoint {
    pub trial_id: u64,
    pub batch: u8,
    /// Unit-box coordinates.
    pub x: Vec<f64>,
    /// Believer value assigned at the last proposal, if any.
    pub imputed: Option<f64>,
}

/// Points currently being evaluated.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PendingSet {
    points: Vec<PendingPoint>,
    capacity: usize,
}

impl PendingSet {
    pub fn with_capacity(capacity: usize) -> Self {
        Self { points: Vec::new(), capacity }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[PendingPoint] {
        &self.points
    }

    pub fn unit_points(&self) -> Vec<Vec<f64>> {
        self.points.iter().map(|p| p.x.clone()).collect()
    }

    pub fn insert(&mut self, p: PendingPoint) -> Result<(), OptimizerError> {
        if self.points.len() >= self.capacity {
            return Err(OptimizerError::Config(format!("pending set is full ({} points)", self.capacity)));
        }
        if self.points.iter().any(|q| dist(&q.x, &p.x) < 1e-9) {
            return Err(OptimizerError::Config("duplicate pending point".into()));
        }
        self.points.push(p);
        Ok(())
    }

    pub fn remove(&mut self, trial_id: u64) -> Option<PendingPoint> {
        let i = self.points.iter().position(|p| p.trial_id == trial_id)?;
        Some(self.points.remove(i))
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Budget for maximizing an acquisition over the unit box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ProposalOptions {
    pub candidates: usize,
    pub polish_starts: usize,
    pub polish_evals: usize,
    /// Proposals closer than this (unit units) to a known point are perturbed.
    pub min_separation: f64,
}

impl Default for ProposalOptions {
    fn default() -> Self {
        Self { candidates: 2048, polish_starts: 8, polish_evals: 100, min_separation: 1e-6 }
    }
}

const PRIMES: [u32; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

/// Randomly shifted Halton points in the unit box.
pub fn shifted_halton<R: Rng>(n: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let shift: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
    (1..=n as u64)
        .map(|i| {
            (0..dim)
                .map(|k| {
                    let base = PRIMES.get(k).copied().unwrap_or(2) as u64;
                    (radical_inverse(i, base) + shift[k]).fract()
                })
                .collect()
        })
        .collect()
}

/// Coordinate-wise golden-section ascent inside `[x - r, x + r]`, clipped to the box.
fn polish<F: Fn(&[f64]) -> f64>(f: &F, x0: Vec<f64>, v0: f64, radius: f64, budget: usize) -> (Vec<f64>, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let d = x0.len();
    let per_coord = (budget / (2 * d)).max(4);
    let (mut x, mut v) = (x0, v0);
    let mut r = radius;
    let mut used = 0;
    while used + 2 <= budget {
        for k in 0..d {
            if used + 2 > budget {
                break;
            }
            let mut lo = (x[k] - r).max(0.0);
            let mut hi = (x[k] + r).min(1.0);
            let eval_at = |t: f64, used: &mut usize| {
                let mut y = x.clone();
                y[k] = t;
                *used += 1;
                (f(&y), y)
            };
            let mut c = hi - INV_PHI * (hi - lo);
            let mut e = lo + INV_PHI * (hi - lo);
            let (mut fc, mut yc) = eval_at(c, &mut used);
            let (mut fe, mut ye) = eval_at(e, &mut used);
            let mut best = if fc >= fe { (fc, yc.clone()) } else { (fe, ye.clone()) };
            let mut steps = 2;
            while steps < per_coord && used < budget {
                if fc >= fe {
                    hi = e;
                    e = c;
                    fe = fc;
                    ye = yc.clone();
                    c = hi - INV_PHI * (hi - lo);
                    (fc, yc) = eval_at(c, &mut used);
                    if fc > best.0 {
                        best = (fc, yc.clone());
                    }
                } else {
                    lo = c;
                    c = e;
                    fc = fe;
                    yc = ye.clone();
                    e = lo + INV_PHI * (hi - lo);
                    (fe, ye) = eval_at(e, &mut used);
                    if fe > best.0 {
                        best = (fe, ye.clone());
                    }
                }
                steps += 1;
            }
            if best.0 > v {
                v = best.0;
                x = best.1;
            }
        }
        r *= 0.5;
        if r < 1e-9 {
            break;
        }
    }
    (x, v)
}

/// Maximizes an acquisition over the unit box.
///
/// Pending points are imputed with their posterior means before the search
/// (and the incumbent is lowered to any believed mean below it), so the
/// returned point steers away from evaluations already in flight. Without a
/// model the proposal is uniform random.
pub fn propose(
    model: Option<&GpModel>,
    dim: usize,
    kind: AcquisitionKind,
    incumbent: f64,
    pending: &[Vec<f64>],
    known: &[Vec<f64>],
    opts: &ProposalOptions,
    rng: &mut SimRng,
) -> Vec<f64> {
    let Some(model) = model else {
        return separated((0..dim).map(|_| rng.random::<f64>()).collect(), pending, known, opts, rng);
    };
    let believed = model.with_believed(pending).unwrap_or_else(|e| {
        log::warn!("believer refactorization failed ({e}); ignoring pending points");
        model.clone()
    });
    let incumbent = pending
        .iter()
        .map(|p| believed.predict(p).0)
        .fold(incumbent, f64::min);
    let acq = |x: &[f64]| acquisition_value(&believed, x, kind, incumbent);

    let cands = shifted_halton(opts.candidates.max(1), dim, rng);
    let mut scored: Vec<(f64, Vec<f64>)> = cands.into_iter().map(|c| (acq(&c), c)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let radius = 2.0 * (opts.candidates.max(1) as f64).powf(-1.0 / dim as f64);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for (v, x) in scored.into_iter().take(opts.polish_starts.max(1)) {
        let (px, pv) = polish(&acq, x, v, radius, opts.polish_evals);
        if best.as_ref().is_none_or(|(bv, _)| pv > *bv) {
            best = Some((pv, px));
        }
    }
    let (_, x) = best.expect("at least one candidate");
    separated(x, pending, known, opts, rng)
}

/// Resamples near `x` until it is at least `min_separation` from every known point.
fn separated(x: Vec<f64>, pending: &[Vec<f64>], known: &[Vec<f64>], opts: &ProposalOptions, rng: &mut SimRng) -> Vec<f64> {
    let too_close = |p: &[f64]| pending.iter().chain(known).any(|q| dist(p, q) < opts.min_separation.max(1e-9) * 1.0001);
    if !too_close(&x) {
        return x;
    }
    let mut scale = 1e-3;
    for attempt in 0..64 {
        let y: Vec<f64> = if attempt < 48 {
            x.iter().map(|v| (v + scale * (2.0 * rng.random::<f64>() - 1.0)).clamp(0.0, 1.0)).collect()
        } else {
            x.iter().map(|_| rng.random::<f64>()).collect()
        };
        if !too_close(&y) {
            return y;
        }
        scale *= 2.0;
    }
    x
}

/// Per-proposal acquisition mix of the first batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct AcquisitionWeights {
    pub ei: f64,
    pub pi: f64,
    pub ucb: f64,
    pub beta: f64,
}

impl Default for AcquisitionWeights {
    fn default() -> Self {
        Self { ei: 0.5, pi: 0.25, ucb: 0.25, beta: 2.0 }
    }
}

impl AcquisitionWeights {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        let w = [self.ei, self.pi, self.ucb];
        if w.iter().any(|v| !(*v >= 0.0)) || !(w.iter().sum::<f64>() > 0.0) {
            return Err(OptimizerError::Config("acquisition weights must be nonnegative with a positive sum".into()));
        }
        if !(self.beta > 0.0) {
            return Err(OptimizerError::Config(format!("UCB beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> AcquisitionKind {
        let total = self.ei + self.pi + self.ucb;
        let u = rng.random::<f64>() * total;
        if u < self.ei {
            AcquisitionKind::ExpectedImprovement
        } else if u < self.ei + self.pi {
            AcquisitionKind::ProbabilityOfImprovement
        } else {
            AcquisitionKind::UpperConfidenceBound { beta: self.beta }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum IncumbentMode {
    /// Lowest GP posterior mean over the observed inputs.
    #[default]
    PosteriorMean,
    /// Lowest raw observation.
    RawMinimum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum CompletionOrder {
    /// Process completions as they arrive.
    #[default]
    Arrival,
    /// Process completions strictly by trial id; reproducible across runs.
    TrialId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OptimizerConfig {
    pub batch: BatchPolicy,
    #[serde(default)]
    pub weights: AcquisitionWeights,
    #[serde(default)]
    pub incumbent: IncumbentMode,
    #[serde(default)]
    pub proposal: ProposalOptions,
    #[serde(default)]
    pub fit: FitOptions,
    pub max_trials: usize,
    #[serde(default)]
    pub objective_threshold: Option<f64>,
    #[serde(default = "default_failure_budget")]
    pub failure_budget: usize,
    #[serde(default)]
    pub completion: CompletionOrder,
}

fn default_failure_budget() -> usize {
    10
}

impl OptimizerConfig {
    pub fn new(batch: BatchPolicy, max_trials: usize) -> Self {
        Self {
            batch,
            weights: AcquisitionWeights::default(),
            incumbent: IncumbentMode::default(),
            proposal: ProposalOptions::default(),
            fit: FitOptions::default(),
            max_trials,
            objective_threshold: None,
            failure_budget: default_failure_budget(),
            completion: CompletionOrder::default(),
        }
    }

    pub fn validate(&self) -> Result<(), OptimizerError> {
        self.batch.validate()?;
        self.weights.validate()?;
        if self.max_trials == 0 {
            return Err(OptimizerError::Config("max_trials must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum TrialStatus {
    Completed,
    Failed,
}

/// One evaluation, as written to the JSON-lines trial log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Trial {
    pub trial_id: u64,
    pub batch: u8,
    pub acquisition: String,
    /// Raw parameter values.
    pub x: Vec<f64>,
    pub seed: u64,
    pub y_vector: Vec<f64>,
    pub y_scalar: Option<f64>,
    pub status: TrialStatus,
    pub start_time: f64,
    pub end_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Trial {
    pub fn is_completed(&self) -> bool {
        self.status == TrialStatus::Completed && self.y_scalar.is_some()
    }
}

/// Result of one successful evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub y_vector: Vec<f64>,
    pub y_scalar: f64,
}

/// A proposal handed to the evaluator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Proposal {
    pub trial_id: u64,
    pub batch: u8,
    pub acquisition: String,
    pub x: Vec<f64>,
    pub seed: u64,
}

/// Instrumentation hook events.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DispatchEvent {
    Launched { trial_id: u64, in_flight: usize },
    Completed { trial_id: u64, in_flight: usize },
}

fn now_secs() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Single-writer optimizer state: trial log, GP and pending set.
pub struct Dispatcher {
    cfg: OptimizerConfig,
    bounds: Bounds,
    seed: u64,
    init_queue: VecDeque<Vec<f64>>,
    pending: PendingSet,
    trials: Vec<Trial>,
    model: Option<GpModel>,
    next_id: u64,
    launched: usize,
    failures: usize,
    recent_errors: Vec<String>,
    stopped: bool,
}

impl Dispatcher {
    /// `initial` is the explicit initial design in raw units; when empty a
    /// Latin-hypercube design of `max(2d, 4)` points is used instead.
    pub fn new(cfg: OptimizerConfig, bounds: Bounds, initial: Vec<Vec<f64>>, seed: u64) -> Result<Self, OptimizerError> {
        cfg.validate()?;
        for p in &initial {
            if !bounds.contains(p) {
                return Err(OptimizerError::Config(format!("initial point {p:?} is outside the bounds")));
            }
        }
        let d = bounds.dim();
        let init_queue: VecDeque<Vec<f64>> = if initial.is_empty() {
            let n = (2 * d).max(4);
            let mut rng = rng_from_seed(split_seed(seed, STREAM_INIT));
            latin_hypercube_unit(n, d, &mut rng).into_iter().map(|u| bounds.from_unit(&u)).collect()
        } else {
            initial.into()
        };
        let capacity = cfg.batch.total();
        Ok(Self {
            cfg,
            bounds,
            seed,
            init_queue,
            pending: PendingSet::with_capacity(capacity),
            trials: Vec::new(),
            model: None,
            next_id: 0,
            launched: 0,
            failures: 0,
            recent_errors: Vec::new(),
            stopped: false,
        })
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn model(&self) -> Option<&GpModel> {
        self.model.as_ref()
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn in_flight(&self) -> usize {
        self.pending.len()
    }

    fn can_launch(&self) -> bool {
        !self.stopped && self.launched < self.cfg.max_trials && self.pending.len() < self.cfg.batch.total()
    }

    /// Lowest objective estimate among completed trials, per the incumbent mode.
    pub fn incumbent(&self) -> Option<f64> {
        let done: Vec<&Trial> = self.trials.iter().filter(|t| t.is_completed()).collect();
        if done.is_empty() {
            return None;
        }
        match (self.cfg.incumbent, &self.model) {
            (IncumbentMode::PosteriorMean, Some(m)) => done
                .iter()
                .map(|t| m.predict(&self.bounds.to_unit(&t.x)).0)
                .reduce(f64::min),
            _ => done.iter().filter_map(|t| t.y_scalar).reduce(f64::min),
        }
    }

    /// Best completed trial, chosen by posterior mean or raw value per the incumbent mode.
    pub fn best_trial(&self) -> Option<&Trial> {
        let done = self.trials.iter().filter(|t| t.is_completed());
        match (self.cfg.incumbent, &self.model) {
            (IncumbentMode::PosteriorMean, Some(m)) => done
                .map(|t| (m.predict(&self.bounds.to_unit(&t.x)).0, t))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, t)| t),
            _ => done.min_by(|a, b| a.y_scalar.unwrap().total_cmp(&b.y_scalar.unwrap())),
        }
    }

    fn known_unit(&self) -> Vec<Vec<f64>> {
        self.trials.iter().map(|t| self.bounds.to_unit(&t.x)).collect()
    }

    /// Creates the next proposal for a slot of the given batch.
    fn propose_for(&mut self, batch: u8) -> Proposal {
        let trial_id = self.next_id;
        self.next_id += 1;
        self.launched += 1;
        let mut rng = rng_from_seed(split_seed(split_seed(self.seed, STREAM_PROPOSAL), trial_id));
        let eval_seed = split_seed(self.seed, trial_id);
        let pending_unit = self.pending.unit_points();
        let known = self.known_unit();
        let dim = self.bounds.dim();

        let (label, unit) = if let Some(x) = self.init_queue.pop_front() {
            ("initial".to_string(), self.bounds.to_unit(&x))
        } else if batch == 3 || self.model.is_none() {
            let u = propose(None, dim, AcquisitionKind::MaxPosteriorVariance, 0.0, &pending_unit, &known, &self.cfg.proposal, &mut rng);
            ("random".to_string(), u)
        } else {
            let kind = if batch == 1 { self.cfg.weights.sample(&mut rng) } else { AcquisitionKind::MaxPosteriorVariance };
            let inc = self.incumbent().unwrap_or(0.0);
            let u = propose(self.model.as_ref(), dim, kind, inc, &pending_unit, &known, &self.cfg.proposal, &mut rng);
            (kind.label().to_string(), u)
        };
        let x = self.bounds.from_unit(&unit);
        let imputed = self.model.as_ref().map(|m| m.predict(&self.bounds.to_unit(&x)).0);
        let point = PendingPoint { trial_id, batch, x: self.bounds.to_unit(&x), imputed };
        if self.pending.insert(point.clone()).is_err() {
            // exact duplicates (e.g. repeated initial points) are still evaluated
            self.pending.points.push(point);
        }
        Proposal { trial_id, batch, acquisition: label, x, seed: eval_seed }
    }

    /// Proposals for every free slot at startup.
    pub fn start(&mut self) -> Vec<Proposal> {
        let mut out = Vec::new();
        for batch in self.cfg.batch.slot_batches() {
            if !self.can_launch() {
                break;
            }
            out.push(self.propose_for(batch));
        }
        out
    }

    /// Records a finished trial, refits the GP and returns the replacement
    /// proposal for the freed slot, if any.
    pub fn complete(&mut self, trial: Trial) -> Result<Option<Proposal>, OptimizerError> {
        if self.pending.remove(trial.trial_id).is_none() {
            return Err(OptimizerError::Log(format!("trial {} was not in flight", trial.trial_id)));
        }
        let batch = trial.batch;
        if trial.is_completed() {
            if let (Some(th), Some(y)) = (self.cfg.objective_threshold, trial.y_scalar) {
                if y <= th {
                    self.stopped = true;
                }
            }
        } else {
            self.failures += 1;
            self.recent_errors.push(trial.error.clone().unwrap_or_else(|| "unknown error".into()));
            if self.recent_errors.len() > 5 {
                self.recent_errors.remove(0);
            }
        }
        self.trials.push(trial);
        if self.failures > self.cfg.failure_budget {
            self.stopped = true;
            return Err(OptimizerError::FailureBudget { budget: self.cfg.failure_budget, last: self.recent_errors.clone() });
        }
        self.refit()?;
        Ok(self.can_launch().then(|| self.propose_for(batch)))
    }

    fn refit(&mut self) -> Result<(), OptimizerError> {
        let done: Vec<&Trial> = self.trials.iter().filter(|t| t.is_completed()).collect();
        if done.is_empty() {
            self.model = None;
            return Ok(());
        }
        let x: Vec<Vec<f64>> = done.iter().map(|t| self.bounds.to_unit(&t.x)).collect();
        let y: Vec<f64> = done.iter().map(|t| t.y_scalar.unwrap()).collect();
        let opts = FitOptions { seed: split_seed(split_seed(self.seed, STREAM_FIT), self.trials.len() as u64), ..self.cfg.fit.clone() };
        self.model = Some(GpModel::fit(&x, &y, &opts)?);
        Ok(())
    }

    /// Best raw objective after each completed trial (failed trials repeat the previous value).
    pub fn best_so_far(&self) -> Vec<f64> {
        best_so_far(&self.trials)
    }
}

pub fn best_so_far(trials: &[Trial]) -> Vec<f64> {
    let mut best = f64::INFINITY;
    trials
        .iter()
        .map(|t| {
            if let Some(y) = t.y_scalar.filter(|_| t.is_completed()) {
                best = best.min(y);
            }
            best
        })
        .collect()
}

fn latin_hypercube_unit<R: Rng>(n: usize, d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; d]; n];
    for k in 0..d {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        for (i, p) in pts.iter_mut().enumerate() {
            p[k] = (perm[i] as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    pts
}

fn run_one<E>(evaluator: &E, p: &Proposal) -> Trial
where
    E: Fn(&[f64], u64) -> Result<Evaluation, String>,
{
    let start = now_secs();
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| evaluator(&p.x, p.seed)))
        .unwrap_or_else(|_| Err("evaluator panicked".to_string()));
    let end = now_secs();
    let (y_vector, y_scalar, status, error) = match result {
        Ok(e) if e.y_scalar.is_finite() => (e.y_vector, Some(e.y_scalar), TrialStatus::Completed, None),
        Ok(e) => (e.y_vector, None, TrialStatus::Failed, Some(format!("non-finite objective {}", e.y_scalar))),
        Err(msg) => (Vec::new(), None, TrialStatus::Failed, Some(msg)),
    };
    Trial {
        trial_id: p.trial_id,
        batch: p.batch,
        acquisition: p.acquisition.clone(),
        x: p.x.clone(),
        seed: p.seed,
        y_vector,
        y_scalar,
        status,
        start_time: start,
        end_time: end,
        error,
    }
}

/// Runs the asynchronous campaign loop with one OS thread per in-flight
/// evaluation. `on_event` sees every launch and completion; `on_trial` sees
/// each trial as it is recorded (e.g. to append it to a log).
pub fn run_dispatcher<E>(
    dispatcher: &mut Dispatcher,
    evaluator: &E,
    mut on_event: impl FnMut(DispatchEvent),
    mut on_trial: impl FnMut(&Trial),
) -> Result<(), OptimizerError>
where
    E: Fn(&[f64], u64) -> Result<Evaluation, String> + Sync,
{
    let order = dispatcher.cfg.completion;
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<Trial>();
        let launch = |p: Proposal, d: &Dispatcher, on_event: &mut dyn FnMut(DispatchEvent)| {
            on_event(DispatchEvent::Launched { trial_id: p.trial_id, in_flight: d.in_flight() });
            let tx = tx.clone();
            scope.spawn(move || {
                let _ = tx.send(run_one(evaluator, &p));
            });
        };
        for p in dispatcher.start() {
            launch(p, dispatcher, &mut on_event);
        }
        let mut buffered: Vec<Trial> = Vec::new();
        let mut result = Ok(());
        while dispatcher.in_flight() > 0 {
            let trial = match order {
                CompletionOrder::Arrival => rx.recv().expect("worker threads hold a sender"),
                CompletionOrder::TrialId => {
                    let oldest = dispatcher.pending.points().iter().map(|p| p.trial_id).min().unwrap();
                    loop {
                        if let Some(i) = buffered.iter().position(|t| t.trial_id == oldest) {
                            break buffered.swap_remove(i);
                        }
                        buffered.push(rx.recv().expect("worker threads hold a sender"));
                    }
                }
            };
            let id = trial.trial_id;
            on_trial(&trial);
            match dispatcher.complete(trial) {
                Ok(next) => {
                    on_event(DispatchEvent::Completed { trial_id: id, in_flight: dispatcher.in_flight() });
                    if let Some(p) = next {
                        launch(p, dispatcher, &mut on_event);
                    }
                }
                Err(e) => {
                    // let in-flight work finish but stop launching
                    dispatcher.stopped = true;
                    on_event(DispatchEvent::Completed { trial_id: id, in_flight: dispatcher.in_flight() });
                    if result.is_ok() {
                        result = Err(e);
                    }
                }
            }
        }
        result
    })
}

/// Re-drives a dispatcher from a trial log in its recorded completion order
/// and returns the regenerated proposals in launch order.
pub fn replay(
    cfg: OptimizerConfig,
    bounds: Bounds,
    initial: Vec<Vec<f64>>,
    seed: u64,
    log: &[Trial],
) -> Result<Vec<Proposal>, OptimizerError> {
    let mut d = Dispatcher::new(cfg, bounds, initial, seed)?;
    let mut proposals = d.start();
    for t in log {
        match d.complete(t.clone()) {
            Ok(Some(p)) => proposals.push(p),
            Ok(None) => {}
            Err(OptimizerError::FailureBudget { .. }) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(proposals)
}

/// Restores a dispatcher from a partial log so a campaign can continue.
///
/// Completed and failed trials are re-applied in log order; points that were
/// in flight when the log ends are not resumed and new proposals take their
/// slots.
pub fn resume(
    cfg: OptimizerConfig,
    bounds: Bounds,
    initial: Vec<Vec<f64>>,
    seed: u64,
    log: &[Trial],
) -> Result<Dispatcher, OptimizerError> {
    let mut d = Dispatcher::new(cfg, bounds, initial, seed)?;
    let used_initial = log.iter().filter(|t| t.acquisition == "initial").count();
    for _ in 0..used_initial.min(d.init_queue.len()) {
        d.init_queue.pop_front();
    }
    for t in log {
        if !d.bounds.contains(&t.x) {
            return Err(OptimizerError::Log(format!("trial {} lies outside the bounds", t.trial_id)));
        }
        if !t.is_completed() {
            d.failures += 1;
        }
        d.next_id = d.next_id.max(t.trial_id + 1);
        d.trials.push(t.clone());
    }
    d.launched = d.trials.len();
    d.refit()?;
    Ok(d)
}
