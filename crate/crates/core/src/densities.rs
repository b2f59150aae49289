//! Densities, divergences and objective post-processing.
//!
//! Descriptor samples are smoothed with a Gaussian KDE onto a uniform grid,
//! compared against the target through `KL(target || candidate)`, and the
//! resulting objective vector is collapsed to one scalar. The module also
//! hosts the replicate-noise statistics and objective correlation analysis.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptors::{DescriptorId, DescriptorSamples};

/// Lower bound applied to every density value before renormalization.
pub const DENSITY_FLOOR: f64 = 1e-12;
pub const DEFAULT_GRID_POINTS: usize = 512;

#[derive(Debug, Error)]
pub enum DensityError {
    #[error("descriptor {id}: {reason}")]
    InsufficientSamples { id: DescriptorId, reason: String },
    #[error("{0}")]
    Insufficient(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid density: {0}")]
    InvalidDensity(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Evaluation grid for [`kde`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct GridSpec {
    pub points: usize,
    /// Fixed `[lo, hi]`; defaults to `[min - 3h, max + 3h]`.
    #[serde(default)]
    pub span: Option<(f64, f64)>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { points: DEFAULT_GRID_POINTS, span: None }
    }
}

/// A probability density tabulated on a strictly increasing grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Density {
    grid: Vec<f64>,
    values: Vec<f64>,
    bandwidth: f64,
}

/// Trapezoidal integral of `values` over `grid`.
pub fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    grid.windows(2)
        .zip(values.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

fn normalize(grid: &[f64], values: &mut [f64]) -> Result<(), DensityError> {
    let z = trapezoid(grid, values);
    if !(z > 0.0) || !z.is_finite() {
        return Err(DensityError::InvalidDensity(format!("integral is {z}")));
    }
    values.iter_mut().for_each(|v| *v /= z);
    Ok(())
}

fn floor_and_normalize(grid: &[f64], values: &mut [f64]) -> Result<(), DensityError> {
    normalize(grid, values)?;
    values.iter_mut().for_each(|v| *v = v.max(DENSITY_FLOOR));
    normalize(grid, values)
}

fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| if i + 1 == n { hi } else { lo + step * i as f64 }).collect()
}

impl Density {
    /// Builds a density from raw nonnegative values, normalizing and flooring them.
    pub fn from_values(grid: Vec<f64>, mut values: Vec<f64>, bandwidth: f64) -> Result<Self, DensityError> {
        if grid.len() < 2 || grid.len() != values.len() {
            return Err(DensityError::InvalidDensity(format!(
                "grid has {} points and values {}",
                grid.len(),
                values.len()
            )));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(DensityError::InvalidDensity("grid is not strictly increasing".into()));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(DensityError::InvalidDensity("values must be finite and nonnegative".into()));
        }
        floor_and_normalize(&grid, &mut values)?;
        Ok(Self { grid, values, bandwidth })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid, &self.values)
    }

    /// Linear interpolation; zero outside the grid.
    pub fn at(&self, x: f64) -> f64 {
        let g = &self.grid;
        if x < g[0] || x > g[g.len() - 1] {
            return 0.0;
        }
        let i = g.partition_point(|&v| v <= x);
        if i == 0 {
            return self.values[0];
        }
        if i >= g.len() {
            return self.values[g.len() - 1];
        }
        let (x0, x1) = (g[i - 1], g[i]);
        let t = (x - x0) / (x1 - x0);
        self.values[i - 1] * (1.0 - t) + self.values[i] * t
    }

    /// Resamples onto `grid`, then floors and renormalizes.
    pub fn resample(&self, grid: &[f64]) -> Result<Density, DensityError> {
        let values = grid.iter().map(|&x| self.at(x)).collect();
        Density::from_values(grid.to_vec(), values, self.bandwidth)
    }

    /// Writes a two-column `grid,value` CSV.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), DensityError> {
        writeln!(w, "grid,value")?;
        for (x, v) in self.grid.iter().zip(&self.values) {
            writeln!(w, "{x},{v}")?;
        }
        Ok(())
    }
}

/// Sample mean and unbiased standard deviation.
fn mean_sd(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Scott's rule bandwidth `sd * n^(-1/5)`.
pub fn scott_bandwidth(samples: &[f64]) -> f64 {
    let (_, sd) = mean_sd(samples);
    sd * (samples.len() as f64).powf(-0.2)
}

/// Gaussian kernel density estimate with Scott's-rule bandwidth.
pub fn kde(samples: &[f64], spec: &GridSpec) -> Result<Density, DensityError> {
    if samples.len() < 2 {
        return Err(DensityError::Insufficient(format!("need at least 2 samples, got {}", samples.len())));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(DensityError::Insufficient("samples must be finite".into()));
    }
    let h = scott_bandwidth(samples);
    if !(h > 0.0) {
        return Err(DensityError::Insufficient("samples have zero variance".into()));
    }
    if spec.points < 2 {
        return Err(DensityError::Config("grid needs at least 2 points".into()));
    }
    let (lo, hi) = match spec.span {
        Some((lo, hi)) if hi > lo => (lo, hi),
        Some((lo, hi)) => return Err(DensityError::Config(format!("empty grid span [{lo}, {hi}]"))),
        None => {
            let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
            let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (min - 3.0 * h, max + 3.0 * h)
        }
    };
    let grid = uniform_grid(lo, hi, spec.points);

    // descriptor samples are often integer-valued; collapse repeats into weights
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut support: Vec<(f64, f64)> = Vec::new();
    for s in sorted {
        match support.last_mut() {
            Some((v, w)) if *v == s => *w += 1.0,
            _ => support.push((s, 1.0)),
        }
    }
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let cutoff = 40.0 * h;
    let values = grid
        .iter()
        .map(|&x| {
            let start = support.partition_point(|&(v, _)| v < x - cutoff);
            support[start..]
                .iter()
                .take_while(|&&(v, _)| v <= x + cutoff)
                .map(|&(v, w)| {
                    let u = (x - v) / h;
                    w * (-0.5 * u * u).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect();
    Density::from_values(grid, values, h)
}

/// `KL(p || q)` for discrete distributions given as probability vectors.
pub fn kl_divergence_discrete(p: &[f64], q: &[f64]) -> Result<f64, DensityError> {
    if p.len() != q.len() {
        return Err(DensityError::Dimension(format!("{} vs {} bins", p.len(), q.len())));
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if !(qi > 0.0) {
                return Ok(f64::INFINITY);
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl)
}

/// `KL(target || candidate)` on a common grid of `DEFAULT_GRID_POINTS`
/// spanning both densities.
pub fn kl_divergence(target: &Density, candidate: &Density) -> Result<f64, DensityError> {
    kl_divergence_on(target, candidate, DEFAULT_GRID_POINTS)
}

pub fn kl_divergence_on(target: &Density, candidate: &Density, points: usize) -> Result<f64, DensityError> {
    if points < 2 {
        return Err(DensityError::Config("grid needs at least 2 points".into()));
    }
    if target == candidate {
        return Ok(0.0);
    }
    let lo = target.grid[0].min(candidate.grid[0]);
    let hi = target.grid[target.grid.len() - 1].max(candidate.grid[candidate.grid.len() - 1]);
    let grid = uniform_grid(lo, hi, points);
    let p = target.resample(&grid)?;
    let q = candidate.resample(&grid)?;
    let integrand: Vec<f64> = p.values.iter().zip(&q.values).map(|(&a, &b)| a * (a / b).ln()).collect();
    let kl = trapezoid(&grid, &integrand);
    if kl < 0.0 && kl >= -1e-9 {
        Ok(0.0)
    } else {
        Ok(kl)
    }
}

/// Which density sits in the numerator of the log-ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum KlOrientation {
    /// `KL(target || candidate)`.
    #[default]
    TargetFirst,
    /// `KL(candidate || target)`.
    CandidateFirst,
}

/// Per-descriptor objective values in descriptor order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ObjectiveVector {
    pub ids: Vec<DescriptorId>,
    pub values: Vec<f64>,
}

impl ObjectiveVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Target densities, computed once and reused for every candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TargetDensities {
    pub entries: Vec<(DescriptorId, Density)>,
    #[serde(default)]
    pub orientation: KlOrientation,
}

impl TargetDensities {
    pub fn from_samples(samples: &[DescriptorSamples], spec: &GridSpec) -> Result<Self, DensityError> {
        let entries = samples
            .iter()
            .map(|d| {
                kde(&d.samples, spec)
                    .map(|k| (d.id, k))
                    .map_err(|e| DensityError::InsufficientSamples { id: d.id, reason: e.to_string() })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { entries, orientation: KlOrientation::default() })
    }

    pub fn ids(&self) -> Vec<DescriptorId> {
        self.entries.iter().map(|(id, _)| *id).collect()
    }
}

/// Objective vector of a candidate against cached target densities.
pub fn objective_vector(
    target: &TargetDensities,
    candidate: &[DescriptorSamples],
    spec: &GridSpec,
) -> Result<ObjectiveVector, DensityError> {
    let ids: Vec<DescriptorId> = candidate.iter().map(|d| d.id).collect();
    if ids != target.ids() {
        return Err(DensityError::Dimension(format!(
            "candidate descriptors {:?} do not match target {:?}",
            ids.iter().map(|i| i.get()).collect::<Vec<_>>(),
            target.ids().iter().map(|i| i.get()).collect::<Vec<_>>()
        )));
    }
    let values = target
        .entries
        .iter()
        .zip(candidate)
        .map(|((id, t), c)| {
            let q = kde(&c.samples, spec)
                .map_err(|e| DensityError::InsufficientSamples { id: *id, reason: e.to_string() })?;
            match target.orientation {
                KlOrientation::TargetFirst => kl_divergence(t, &q),
                KlOrientation::CandidateFirst => kl_divergence(&q, t),
            }
        })
        .collect::<Result<_, _>>()?;
    Ok(ObjectiveVector { ids, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ScalarizationMethod {
    #[default]
    WeightedSum,
    Chebyshev,
    AugmentedChebyshev,
}

/// Collapses an objective vector to a scalar. Missing weights default to 1
/// and a missing ideal point to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ScalarizationConfig {
    #[serde(default)]
    pub method: ScalarizationMethod,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    #[serde(default)]
    pub ideal: Option<Vec<f64>>,
    #[serde(default = "default_rho")]
    pub rho: f64,
}

fn default_rho() -> f64 {
    0.05
}

impl Default for ScalarizationConfig {
    fn default() -> Self {
        Self { method: ScalarizationMethod::WeightedSum, weights: None, ideal: None, rho: default_rho() }
    }
}

impl ScalarizationConfig {
    pub fn method(method: ScalarizationMethod) -> Self {
        Self { method, ..Self::default() }
    }

    pub fn validate(&self, dim: Option<usize>) -> Result<(), DensityError> {
        if let Some(w) = &self.weights {
            if w.iter().any(|v| !(*v >= 0.0)) || !(w.iter().sum::<f64>() > 0.0) {
                return Err(DensityError::Config("weights must be nonnegative with a positive sum".into()));
            }
            if let Some(d) = dim {
                if w.len() != d {
                    return Err(DensityError::Dimension(format!("{} weights for {d} objectives", w.len())));
                }
            }
        }
        if let (Some(z), Some(d)) = (&self.ideal, dim) {
            if z.len() != d {
                return Err(DensityError::Dimension(format!("ideal point has {} entries for {d} objectives", z.len())));
            }
        }
        if self.method == ScalarizationMethod::AugmentedChebyshev && !(self.rho > 0.0) {
            return Err(DensityError::Config(format!("rho must be > 0, got {}", self.rho)));
        }
        Ok(())
    }
}

pub fn scalarize(y: &[f64], cfg: &ScalarizationConfig) -> Result<f64, DensityError> {
    cfg.validate(Some(y.len()))?;
    if y.is_empty() {
        return Err(DensityError::Dimension("empty objective vector".into()));
    }
    let weight = |i: usize| cfg.weights.as_ref().map_or(1.0, |w| w[i]);
    let ideal = |i: usize| cfg.ideal.as_ref().map_or(0.0, |z| z[i]);
    let sum = || y.iter().enumerate().map(|(i, v)| weight(i) * v).sum::<f64>();
    let cheb = || {
        y.iter()
            .enumerate()
            .map(|(i, v)| weight(i) * (v - ideal(i)))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    Ok(match cfg.method {
        ScalarizationMethod::WeightedSum => sum(),
        ScalarizationMethod::Chebyshev => cheb(),
        ScalarizationMethod::AugmentedChebyshev => cheb() + cfg.rho * sum(),
    })
}

/// Replicate statistics of each objective and of their sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NoiseProfile {
    pub ids: Vec<DescriptorId>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub total_mean: f64,
    pub total_variance: f64,
    pub replicates: usize,
}

pub fn quantify_noise(replicates: &[ObjectiveVector]) -> Result<NoiseProfile, DensityError> {
    if replicates.len() < 2 {
        return Err(DensityError::Insufficient(format!(
            "noise quantification needs at least 2 replicates, got {}",
            replicates.len()
        )));
    }
    let ids = replicates[0].ids.clone();
    if replicates.iter().any(|r| r.ids != ids) {
        return Err(DensityError::Dimension("replicates carry different descriptor sets".into()));
    }
    let n = replicates.len() as f64;
    let s = ids.len();
    let mut mean = vec![0.0; s];
    let mut variance = vec![0.0; s];
    for i in 0..s {
        // shifted two-pass form: identical replicates give exactly zero variance
        let x0 = replicates[0].values[i];
        let d: Vec<f64> = replicates.iter().map(|r| r.values[i] - x0).collect();
        let sd = d.iter().sum::<f64>();
        mean[i] = x0 + sd / n;
        variance[i] = ((d.iter().map(|v| v * v).sum::<f64>() - sd * sd / n) / (n - 1.0)).max(0.0);
    }
    Ok(NoiseProfile {
        total_mean: mean.iter().sum(),
        total_variance: variance.iter().sum(),
        ids,
        mean,
        variance,
        replicates: replicates.len(),
    })
}

impl NoiseProfile {
    /// One row per descriptor plus a `total` row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), DensityError> {
        writeln!(w, "objective,descriptor_id,mean,variance")?;
        for (i, id) in self.ids.iter().enumerate() {
            writeln!(w, "y{},{},{:.6e},{:.6e}", i + 1, id, self.mean[i], self.variance[i])?;
        }
        writeln!(w, "total,,{:.6e},{:.6e}", self.total_mean, self.total_variance)?;
        Ok(())
    }
}

/// Labels `y<id>` for a descriptor list, as used in correlation and noise tables.
pub fn objective_labels(ids: &[DescriptorId]) -> Vec<String> {
    ids.iter().map(|i| format!("y{i}")).collect()
}

/// Pairwise squared Pearson correlations; `None` where a column has zero variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CorrelationMatrix {
    /// Column labels, e.g. `y4` for the grain-area objective.
    pub labels: Vec<String>,
    pub r2: Vec<Vec<Option<f64>>>,
}

pub fn objective_correlations(
    labels: &[String],
    rows: &[Vec<f64>],
) -> Result<CorrelationMatrix, DensityError> {
    if rows.len() < 3 {
        return Err(DensityError::Insufficient(format!(
            "correlation analysis needs at least 3 trials, got {}",
            rows.len()
        )));
    }
    let s = labels.len();
    if rows.iter().any(|r| r.len() != s) {
        return Err(DensityError::Dimension("trial objective vectors differ in length".into()));
    }
    let n = rows.len() as f64;
    let means: Vec<f64> = (0..s).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let centered: Vec<Vec<f64>> = (0..s).map(|j| rows.iter().map(|r| r[j] - means[j]).collect()).collect();
    let ss: Vec<f64> = centered.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();
    let defined: Vec<bool> = ss
        .iter()
        .zip(&means)
        .map(|(&v, &m)| v > 1e-24 * (1.0 + m * m) * n)
        .collect();
    let mut r2 = vec![vec![None; s]; s];
    for i in 0..s {
        if !defined[i] {
            continue;
        }
        r2[i][i] = Some(1.0);
        for j in (i + 1)..s {
            if !defined[j] {
                continue;
            }
            let cov: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            let v = (cov * cov / (ss[i] * ss[j])).min(1.0);
            r2[i][j] = Some(v);
            r2[j][i] = Some(v);
        }
    }
    Ok(CorrelationMatrix { labels: labels.to_vec(), r2 })
}

impl CorrelationMatrix {
    /// Square CSV with a header row of labels; undefined cells are `nan`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), DensityError> {
        let header = &self.labels;
        writeln!(w, "objective,{}", header.join(","))?;
        for (i, row) in self.r2.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .map(|c| c.map_or_else(|| "nan".to_string(), |v| format!("{v:.12}")))
                .collect();
            writeln!(w, "{},{}", header[i], cells.join(","))?;
        }
        Ok(())
    }
}
