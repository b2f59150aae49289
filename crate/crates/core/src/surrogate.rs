//! Gaussian-process regression surrogate.
//!
//! Inputs are expected in the unit box (the optimizer owns the mapping from
//! raw parameter units) and outputs are standardized internally. The kernel is
//! squared-exponential with one lengthscale per input dimension; the
//! hyperparameters are learned by multi-start projected gradient ascent on
//! the log marginal likelihood in log space.

use std::fmt::Write as _;
use std::io::BufRead;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::rng_from_seed;

pub const JITTER_START: f64 = 1e-10;
pub const JITTER_CEILING: f64 = 1e-4;
const SNAPSHOT_MAGIC: &str = "GPSNAP 1";

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("invalid hyperparameters: {0}")]
    Hyperparams(String),
    #[error("invalid training data: {0}")]
    Data(String),
    #[error("kernel matrix not positive definite even with jitter {ceiling:e}")]
    Factorization { ceiling: f64 },
    #[error("malformed snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// SE-ARD hyperparameters in natural (not log) units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Hyperparams {
    pub lengthscales: Vec<f64>,
    pub signal_var: f64,
    pub noise_var: f64,
}

impl Hyperparams {
    pub fn new(lengthscales: Vec<f64>, signal_var: f64, noise_var: f64) -> Result<Self, SurrogateError> {
        let h = Self { lengthscales, signal_var, noise_var };
        h.validate()?;
        Ok(h)
    }

    /// Defaults used when there is too little data to learn anything.
    pub fn default_for(dim: usize) -> Self {
        Self { lengthscales: vec![0.3; dim], signal_var: 1.0, noise_var: 1e-6 }
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn validate(&self) -> Result<(), SurrogateError> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if self.lengthscales.is_empty() {
            return Err(SurrogateError::Hyperparams("no lengthscales".into()));
        }
        if !self.lengthscales.iter().all(|&l| ok(l)) || !ok(self.signal_var) || !ok(self.noise_var) {
            return Err(SurrogateError::Hyperparams(format!("all values must be positive and finite: {self:?}")));
        }
        Ok(())
    }

    /// `[ln l_1 .. ln l_d, ln sf2, ln sn2]`.
    pub fn to_log(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.lengthscales.iter().map(|l| l.ln()).collect();
        v.push(self.signal_var.ln());
        v.push(self.noise_var.ln());
        v
    }

    pub fn from_log(theta: &[f64]) -> Self {
        let d = theta.len() - 2;
        Self {
            lengthscales: theta[..d].iter().map(|t| t.exp()).collect(),
            signal_var: theta[d].exp(),
            noise_var: theta[d + 1].exp(),
        }
    }
}

/// Squared-exponential ARD covariance.
pub fn kernel(x1: &[f64], x2: &[f64], h: &Hyperparams) -> Result<f64, SurrogateError> {
    h.validate()?;
    if x1.len() != h.dim() || x2.len() != h.dim() {
        return Err(SurrogateError::Data(format!(
            "inputs of dimension {} and {} for a {}-d kernel",
            x1.len(),
            x2.len(),
            h.dim()
        )));
    }
    Ok(kernel_unchecked(x1, x2, h))
}

#[inline]
fn kernel_unchecked(x1: &[f64], x2: &[f64], h: &Hyperparams) -> f64 {
    let r2: f64 = x1
        .iter()
        .zip(x2)
        .zip(&h.lengthscales)
        .map(|((a, b), l)| ((a - b) / l).powi(2))
        .sum();
    h.signal_var * (-0.5 * r2).exp()
}

/// Search box for hyperparameter learning, in natural units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct HyperBounds {
    pub lengthscale: (f64, f64),
    pub signal_var: (f64, f64),
    pub noise_var: (f64, f64),
}

impl Default for HyperBounds {
    fn default() -> Self {
        Self { lengthscale: (1e-2, 1e1), signal_var: (1e-3, 1e2), noise_var: (1e-8, 1.0) }
    }
}

impl HyperBounds {
    fn log_box(&self, dim: usize) -> Vec<(f64, f64)> {
        let ln = |(a, b): (f64, f64)| (a.ln(), b.ln());
        let mut v = vec![ln(self.lengthscale); dim];
        v.push(ln(self.signal_var));
        v.push(ln(self.noise_var));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct FitOptions {
    #[serde(default)]
    pub bounds: HyperBounds,
    #[serde(default = "default_starts")]
    pub starts: usize,
    #[serde(default = "default_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub seed: u64,
    /// Skip learning and use these hyperparameters.
    #[serde(default)]
    pub fixed: Option<Hyperparams>,
}

fn default_starts() -> usize {
    8
}

fn default_iters() -> usize {
    100
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { bounds: HyperBounds::default(), starts: default_starts(), max_iters: default_iters(), seed: 0, fixed: None }
    }
}

impl FitOptions {
    pub fn fixed(h: Hyperparams) -> Self {
        Self { fixed: Some(h), ..Self::default() }
    }
}

/// Output standardization `y = mean + scale * z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Standardization {
    pub mean: f64,
    pub scale: f64,
}

impl Standardization {
    pub fn from_outputs(y: &[f64]) -> Self {
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = if y.len() > 1 { y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        let sd = var.sqrt();
        // constant outputs keep unit scale so the standardized targets are exactly zero
        let scale = if sd > 1e-12 * (1.0 + mean.abs()) { sd } else { 1.0 };
        Self { mean, scale }
    }

    pub fn forward(&self, y: f64) -> f64 {
        (y - self.mean) / self.scale
    }

    pub fn inverse(&self, z: f64) -> f64 {
        self.mean + self.scale * z
    }
}

/// Kernel matrix (signal part only) and its factorization.
struct Factor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

fn signal_matrix(x: &[Vec<f64>], h: &Hyperparams) -> DMatrix<f64> {
    let n = x.len();
    DMatrix::from_fn(n, n, |i, j| kernel_unchecked(&x[i], &x[j], h))
}

fn factorize(kf: &DMatrix<f64>, noise_var: f64) -> Result<Factor, SurrogateError> {
    let n = kf.nrows();
    let mut jitter = JITTER_START;
    loop {
        let mut k = kf.clone();
        for i in 0..n {
            k[(i, i)] += noise_var + jitter;
        }
        if let Some(chol) = Cholesky::new(k) {
            return Ok(Factor { chol, jitter });
        }
        jitter *= 10.0;
        if jitter > JITTER_CEILING * (1.0 + 1e-9) {
            return Err(SurrogateError::Factorization { ceiling: JITTER_CEILING });
        }
    }
}

/// Log marginal likelihood of standardized targets and its gradient with
/// respect to the log-hyperparameters.
pub fn lml_with_gradient(
    x: &[Vec<f64>],
    z: &[f64],
    h: &Hyperparams,
) -> Result<(f64, Vec<f64>), SurrogateError> {
    h.validate()?;
    let n = x.len();
    let d = h.dim();
    let kf = signal_matrix(x, h);
    let f = factorize(&kf, h.noise_var)?;
    let zv = DVector::from_column_slice(z);
    let alpha = f.chol.solve(&zv);
    let log_det: f64 = f.chol.l_dirty().diagonal().iter().take(n).map(|v| v.ln()).sum::<f64>() * 2.0;
    let value = -0.5 * zv.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    // W = alpha alpha^T - K^-1; dL/dtheta = 0.5 tr(W dK/dtheta)
    let mut w = &alpha * alpha.transpose();
    w -= f.chol.inverse();
    let mut grad = vec![0.0; d + 2];
    for i in 0..n {
        for j in 0..n {
            let wk = w[(i, j)] * kf[(i, j)];
            grad[d] += wk;
            for (k, l) in h.lengthscales.iter().enumerate() {
                grad[k] += wk * ((x[i][k] - x[j][k]) / l).powi(2);
            }
        }
        grad[d + 1] += w[(i, i)] * h.noise_var;
    }
    grad.iter_mut().for_each(|g| *g *= 0.5);
    Ok((value, grad))
}

/// A fitted GP over unit-box inputs.
#[derive(Clone)]
pub struct GpModel {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    std: Standardization,
    hyp: Hyperparams,
    jitter: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

impl std::fmt::Debug for GpModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GpModel")
            .field("n", &self.x.len())
            .field("hyperparams", &self.hyp)
            .field("standardization", &self.std)
            .field("jitter", &self.jitter)
            .finish()
    }
}

fn validate_data(x: &[Vec<f64>], y: &[f64]) -> Result<usize, SurrogateError> {
    if x.is_empty() {
        return Err(SurrogateError::Data("no training points".into()));
    }
    if x.len() != y.len() {
        return Err(SurrogateError::Data(format!("{} inputs but {} outputs", x.len(), y.len())));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(SurrogateError::Data("inputs must share a positive dimension".into()));
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(SurrogateError::Data("non-finite training value".into()));
    }
    Ok(d)
}

/// Latin-hypercube points in a box.
fn latin_hypercube<R: Rng>(n: usize, bounds: &[(f64, f64)], rng: &mut R) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; bounds.len()]; n];
    for (k, &(lo, hi)) in bounds.iter().enumerate() {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        for (i, p) in pts.iter_mut().enumerate() {
            let u = (perm[i] as f64 + rng.random::<f64>()) / n as f64;
            p[k] = lo + u * (hi - lo);
        }
    }
    pts
}

fn project(theta: &mut [f64], bounds: &[(f64, f64)]) {
    for (t, &(lo, hi)) in theta.iter_mut().zip(bounds) {
        *t = t.clamp(lo, hi);
    }
}

/// Projected gradient ascent with backtracking; returns the best point found.
fn ascend(
    x: &[Vec<f64>],
    z: &[f64],
    start: Vec<f64>,
    bounds: &[(f64, f64)],
    max_iters: usize,
) -> Option<(f64, Vec<f64>)> {
    let eval = |t: &[f64]| lml_with_gradient(x, z, &Hyperparams::from_log(t)).ok();
    let mut theta = start;
    project(&mut theta, bounds);
    let (mut val, mut grad) = eval(&theta)?;
    let mut step = 0.5;
    for _ in 0..max_iters {
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < 1e-8 {
            break;
        }
        let mut improved = false;
        let mut trial_step = step;
        for _ in 0..30 {
            let mut cand: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t + trial_step * g / gnorm).collect();
            project(&mut cand, bounds);
            let moved: f64 = cand.iter().zip(&theta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if moved < 1e-10 {
                break;
            }
            if let Some((v, g)) = eval(&cand) {
                if v > val {
                    theta = cand;
                    val = v;
                    grad = g;
                    improved = true;
                    step = (trial_step * 2.0).min(4.0);
                    break;
                }
            }
            trial_step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Some((val, theta))
}

impl GpModel {
    /// Fits a GP to unit-box inputs `x` and raw outputs `y`.
    pub fn fit(x: &[Vec<f64>], y: &[f64], opts: &FitOptions) -> Result<Self, SurrogateError> {
        let d = validate_data(x, y)?;
        let std = Standardization::from_outputs(y);
        let z: Vec<f64> = y.iter().map(|&v| std.forward(v)).collect();
        let hyp = match &opts.fixed {
            Some(h) => {
                h.validate()?;
                if h.dim() != d {
                    return Err(SurrogateError::Hyperparams(format!("{} lengthscales for {d}-d inputs", h.dim())));
                }
                h.clone()
            }
            None if x.len() < 2 => Hyperparams::default_for(d),
            None => Self::learn(x, &z, d, opts)?,
        };
        Self::assemble(x.to_vec(), y.to_vec(), std, hyp)
    }

    fn learn(x: &[Vec<f64>], z: &[f64], d: usize, opts: &FitOptions) -> Result<Hyperparams, SurrogateError> {
        let bounds = opts.bounds.log_box(d);
        let mut rng = rng_from_seed(opts.seed);
        let starts = latin_hypercube(opts.starts.max(1), &bounds, &mut rng);
        let mut best: Option<(f64, Vec<f64>)> = None;
        for s in starts {
            if let Some((v, t)) = ascend(x, z, s, &bounds, opts.max_iters) {
                if best.as_ref().is_none_or(|(bv, _)| v > *bv) {
                    best = Some((v, t));
                }
            }
        }
        best.map(|(_, t)| Hyperparams::from_log(&t))
            .ok_or(SurrogateError::Factorization { ceiling: JITTER_CEILING })
    }

    fn assemble(x: Vec<Vec<f64>>, y: Vec<f64>, std: Standardization, hyp: Hyperparams) -> Result<Self, SurrogateError> {
        let kf = signal_matrix(&x, &hyp);
        let f = factorize(&kf, hyp.noise_var)?;
        let z = DVector::from_iterator(y.len(), y.iter().map(|&v| std.forward(v)));
        let alpha = f.chol.solve(&z);
        Ok(Self { x, y, std, hyp, jitter: f.jitter, chol: f.chol, alpha })
    }

    /// Rebuilds the model with extra observations, keeping hyperparameters
    /// and output standardization fixed.
    pub fn condition_on(&self, x: &[Vec<f64>], y: &[f64]) -> Result<Self, SurrogateError> {
        if x.len() != y.len() || x.iter().any(|r| r.len() != self.dim()) {
            return Err(SurrogateError::Data("conditioning points do not match the model".into()));
        }
        let mut xs = self.x.clone();
        xs.extend_from_slice(x);
        let mut ys = self.y.clone();
        ys.extend_from_slice(y);
        Self::assemble(xs, ys, self.std, self.hyp.clone())
    }

    /// Believer imputation: conditions on `pending` with their posterior means.
    pub fn with_believed(&self, pending: &[Vec<f64>]) -> Result<Self, SurrogateError> {
        if pending.is_empty() {
            return Ok(self.clone());
        }
        let mut model = self.clone();
        for p in pending {
            let (mu, _) = model.predict(p);
            model = model.condition_on(std::slice::from_ref(p), &[mu])?;
        }
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.hyp.dim()
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hyp
    }

    pub fn standardization(&self) -> Standardization {
        self.std
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.x
    }

    pub fn outputs(&self) -> &[f64] {
        &self.y
    }

    /// Lower-triangular factor of `K + (noise + jitter) I`.
    pub fn factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Posterior mean and latent variance in original output units.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let (m, v) = self.predict_standardized(x);
        (self.std.inverse(m), v * self.std.scale * self.std.scale)
    }

    /// Posterior mean and variance of the standardized process.
    pub fn predict_standardized(&self, x: &[f64]) -> (f64, f64) {
        let kstar = DVector::from_iterator(self.x.len(), self.x.iter().map(|xi| kernel_unchecked(xi, x, &self.hyp)));
        let mean = kstar.dot(&self.alpha);
        let mut v = kstar.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut v);
        // l_dirty may hold stale upper-triangle values; the solve only reads the lower part
        let var = self.hyp.signal_var - v.norm_squared();
        (mean, if var < 0.0 { 0.0 } else { var })
    }

    /// Log marginal likelihood of the standardized targets and its gradient
    /// with respect to `[ln l_1 .. ln l_d, ln sf2, ln sn2]`.
    pub fn log_marginal_likelihood(&self) -> (f64, Vec<f64>) {
        let z: Vec<f64> = self.y.iter().map(|&v| self.std.forward(v)).collect();
        lml_with_gradient(&self.x, &z, &self.hyp).expect("model was factorized at construction")
    }

    /// Versioned text snapshot: a header block followed by the training set as CSV.
    pub fn to_snapshot(&self) -> String {
        let mut s = String::new();
        let join = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "{SNAPSHOT_MAGIC}");
        let _ = writeln!(s, "dim,{}", self.dim());
        let _ = writeln!(s, "n,{}", self.len());
        let _ = writeln!(s, "lengthscales,{}", join(&self.hyp.lengthscales));
        let _ = writeln!(s, "signal_var,{}", self.hyp.signal_var);
        let _ = writeln!(s, "noise_var,{}", self.hyp.noise_var);
        let _ = writeln!(s, "y_mean,{}", self.std.mean);
        let _ = writeln!(s, "y_scale,{}", self.std.scale);
        let _ = writeln!(s, "training");
        for (x, y) in self.x.iter().zip(&self.y) {
            let _ = writeln!(s, "{},{}", join(x), y);
        }
        s
    }

    pub fn from_snapshot<R: BufRead>(r: R) -> Result<Self, SurrogateError> {
        let bad = |m: &str| SurrogateError::Snapshot(m.to_string());
        let mut lines = r.lines();
        let mut next = || -> Result<String, SurrogateError> {
            lines.next().ok_or_else(|| bad("unexpected end of snapshot"))?.map_err(SurrogateError::from)
        };
        if next()?.trim() != SNAPSHOT_MAGIC {
            return Err(bad("missing GPSNAP 1 header"));
        }
        fn field(line: &str, key: &str) -> Result<Vec<f64>, SurrogateError> {
            let mut parts = line.trim().split(',');
            if parts.next() != Some(key) {
                return Err(SurrogateError::Snapshot(format!("expected {key:?}, got {line:?}")));
            }
            parts
                .map(|p| p.parse::<f64>().map_err(|_| SurrogateError::Snapshot(format!("bad number {p:?} in {key}"))))
                .collect()
        }
        let scalar = |line: String, key: &str| -> Result<f64, SurrogateError> {
            match field(&line, key)?.as_slice() {
                [v] => Ok(*v),
                _ => Err(SurrogateError::Snapshot(format!("{key} needs one value"))),
            }
        };
        let dim = scalar(next()?, "dim")? as usize;
        let n = scalar(next()?, "n")? as usize;
        let lengthscales = field(&next()?, "lengthscales")?;
        let signal_var = scalar(next()?, "signal_var")?;
        let noise_var = scalar(next()?, "noise_var")?;
        let mean = scalar(next()?, "y_mean")?;
        let scale = scalar(next()?, "y_scale")?;
        if next()?.trim() != "training" {
            return Err(bad("missing training block"));
        }
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let row: Vec<f64> = next()?
                .trim()
                .split(',')
                .map(|p| p.parse::<f64>().map_err(|_| bad(&format!("bad number {p:?} in training row {i}"))))
                .collect::<Result<_, _>>()?;
            if row.len() != dim + 1 {
                return Err(bad(&format!("training row {i} has {} columns, expected {}", row.len(), dim + 1)));
            }
            y.push(row[dim]);
            x.push(row[..dim].to_vec());
        }
        if lengthscales.len() != dim {
            return Err(bad("lengthscale count does not match dim"));
        }
        if !(scale > 0.0) {
            return Err(bad("y_scale must be positive"));
        }
        let hyp = Hyperparams::new(lengthscales, signal_var, noise_var)?;
        validate_data(&x, &y)?;
        Self::assemble(x, y, Standardization { mean, scale }, hyp)
    }
}
