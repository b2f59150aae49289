//! Grain segmentation and per-grain / per-chord descriptor sample populations.
//!
//! Eleven descriptors are supported, numbered in a fixed order:
//!
//! | id | quantity |
//! |----|----------|
//! | 1  | best-fit ellipse semi-major axis `a` |
//! | 2  | best-fit ellipse semi-minor axis `b` |
//! | 3  | best-fit ellipse orientation `theta` |
//! | 4  | grain area |
//! | 5  | chord length along `x` |
//! | 6  | chord length along `y` |
//! | 7–11 | `x` chord lengths sampled in bands 0–4 about the weld axis |
//!
//! Grain-based descriptors (1–4) use only grains passing the area filter;
//! chord descriptors (5–11) drop runs that lie in filtered-out grains.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{Microstructure, Spin};

#[derive(Debug, Error)]
pub enum DescriptorError {
    #[error("cannot fit an ellipse to an empty grain")]
    EmptyGrain,
    #[error("descriptor {id} has {count} samples; at least 2 are required")]
    InsufficientSamples { id: DescriptorId, count: usize },
    #[error("band {band} is out of range (0..{num_bands})")]
    BandIndex { band: usize, num_bands: usize },
    #[error("band {band} rows [{lo}, {hi}] fall outside the lattice (0..{length})")]
    BandOutsideLattice { band: usize, lo: f64, hi: f64, length: usize },
    #[error("invalid descriptor id {0}; expected 1..=11")]
    BadId(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Descriptor number in `1..=11`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct DescriptorId(u8);

impl DescriptorId {
    pub const ALL: [DescriptorId; 11] = [
        DescriptorId(1),
        DescriptorId(2),
        DescriptorId(3),
        DescriptorId(4),
        DescriptorId(5),
        DescriptorId(6),
        DescriptorId(7),
        DescriptorId(8),
        DescriptorId(9),
        DescriptorId(10),
        DescriptorId(11),
    ];
    pub const AREA: DescriptorId = DescriptorId(4);

    pub fn new(id: u8) -> Result<Self, DescriptorError> {
        if (1..=11).contains(&id) {
            Ok(Self(id))
        } else {
            Err(DescriptorError::BadId(id.to_string()))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn name(self) -> &'static str {
        match self.0 {
            1 => "ellipse_major",
            2 => "ellipse_minor",
            3 => "ellipse_orientation",
            4 => "grain_area",
            5 => "chord_x",
            6 => "chord_y",
            7 => "band0_chord_x",
            8 => "band1_chord_x",
            9 => "band2_chord_x",
            10 => "band3_chord_x",
            _ => "band4_chord_x",
        }
    }

    /// Band index for the banded chord descriptors.
    pub fn band(self) -> Option<usize> {
        (self.0 >= 7).then(|| (self.0 - 7) as usize)
    }
}

impl TryFrom<u8> for DescriptorId {
    type Error = DescriptorError;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<DescriptorId> for u8 {
    fn from(v: DescriptorId) -> u8 {
        v.0
    }
}

impl fmt::Display for DescriptorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Ordered, duplicate-free set of descriptors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct DescriptorSet(Vec<DescriptorId>);

impl DescriptorSet {
    pub fn new(ids: impl IntoIterator<Item = DescriptorId>) -> Result<Self, DescriptorError> {
        let mut v: Vec<DescriptorId> = ids.into_iter().collect();
        v.sort();
        v.dedup();
        if v.is_empty() {
            return Err(DescriptorError::Config("descriptor set is empty".into()));
        }
        Ok(Self(v))
    }

    pub fn all() -> Self {
        Self(DescriptorId::ALL.to_vec())
    }

    pub fn ids(&self) -> &[DescriptorId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<u8>> for DescriptorSet {
    type Error = DescriptorError;
    fn try_from(v: Vec<u8>) -> Result<Self, Self::Error> {
        Self::new(v.into_iter().map(DescriptorId::new).collect::<Result<Vec<_>, _>>()?)
    }
}

impl From<DescriptorSet> for Vec<u8> {
    fn from(s: DescriptorSet) -> Vec<u8> {
        s.0.into_iter().map(u8::from).collect()
    }
}

impl FromStr for DescriptorSet {
    type Err = DescriptorError;

    /// Parses a comma-separated list such as `"1,2,4"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let ids = s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<u8>().map_err(|_| DescriptorError::BadId(t.into())).and_then(DescriptorId::new))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(ids)
    }
}

/// A maximal 4-connected set of sites sharing one label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grain {
    pub label: Spin,
    pub sites: Vec<(usize, usize)>,
}

impl Grain {
    pub fn area(&self) -> usize {
        self.sites.len()
    }
}

/// Site-to-grain map alongside the grains themselves.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub grains: Vec<Grain>,
    /// Grain index for every site, row-major.
    pub grain_of: Vec<u32>,
}

/// Labels 4-connected constant-label components, discovered in row-major order.
pub fn segment(ms: &Microstructure) -> Segmentation {
    let (w, l) = (ms.width(), ms.length());
    const UNSEEN: u32 = u32::MAX;
    let mut grain_of = vec![UNSEEN; w * l];
    let mut grains = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * l {
        if grain_of[start] != UNSEEN {
            continue;
        }
        let id = grains.len() as u32;
        let label = ms.spins()[start];
        let mut sites = Vec::new();
        grain_of[start] = id;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            let (x, y) = (idx % w, idx / w);
            sites.push((x, y));
            let mut visit = |n: usize| {
                if grain_of[n] == UNSEEN && ms.spins()[n] == label {
                    grain_of[n] = id;
                    stack.push(n);
                }
            };
            if x > 0 {
                visit(idx - 1);
            }
            if x + 1 < w {
                visit(idx + 1);
            }
            if y > 0 {
                visit(idx - w);
            }
            if y + 1 < l {
                visit(idx + w);
            }
        }
        grains.push(Grain { label, sites });
    }
    Segmentation { grains, grain_of }
}

pub fn segment_grains(ms: &Microstructure) -> Vec<Grain> {
    segment(ms).grains
}

/// Moment-equivalent ellipse of a grain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseFit {
    /// Semi-major axis in sites.
    pub a: f64,
    /// Semi-minor axis in sites.
    pub b: f64,
    /// Angle of the major axis from `+x` toward `+y`, in `[0, pi)`.
    pub theta: f64,
    pub xc: f64,
    pub yc: f64,
}

/// Fits the ellipse with the same second central moments as the grain,
/// treating each site as a unit square.
pub fn fit_ellipse(grain: &Grain) -> Result<EllipseFit, DescriptorError> {
    let n = grain.sites.len();
    if n == 0 {
        return Err(DescriptorError::EmptyGrain);
    }
    let nf = n as f64;
    let (sx, sy) = grain.sites.iter().fold((0.0, 0.0), |(sx, sy), &(x, y)| (sx + x as f64, sy + y as f64));
    let (xc, yc) = (sx / nf, sy / nf);
    let (mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0);
    for &(x, y) in &grain.sites {
        let dx = x as f64 - xc;
        let dy = y as f64 - yc;
        mxx += dx * dx;
        myy += dy * dy;
        mxy += dx * dy;
    }
    // unit-square correction
    mxx = mxx / nf + 1.0 / 12.0;
    myy = myy / nf + 1.0 / 12.0;
    mxy /= nf;

    let half_tr = 0.5 * (mxx + myy);
    let disc = (0.25 * (mxx - myy).powi(2) + mxy * mxy).sqrt();
    let lmax = half_tr + disc;
    let lmin = (half_tr - disc).max(0.0);
    let theta = if disc == 0.0 {
        0.0
    } else {
        let t = 0.5 * (2.0 * mxy).atan2(mxx - myy);
        t.rem_euclid(std::f64::consts::PI)
    };
    // rem_euclid can round up to exactly pi
    let theta = if theta >= std::f64::consts::PI { 0.0 } else { theta };
    Ok(EllipseFit { a: 2.0 * lmax.sqrt(), b: 2.0 * lmin.sqrt(), theta, xc, yc })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChordAxis {
    X,
    Y,
}

/// Samples of one descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DescriptorSamples {
    pub id: DescriptorId,
    pub samples: Vec<f64>,
}

impl DescriptorSamples {
    pub fn count(&self) -> usize {
        self.samples.len()
    }
}

/// Runs of constant label along one row (`X`) or column (`Y`), reported as
/// `(index of the first site, run length)`.
fn runs_along(ms: &Microstructure, axis: ChordAxis, line: usize, mut emit: impl FnMut(usize, usize)) {
    let (w, l) = (ms.width(), ms.length());
    let (n, stride, base) = match axis {
        ChordAxis::X => (w, 1, line * w),
        ChordAxis::Y => (l, w, line),
    };
    let spins = ms.spins();
    let mut start = 0;
    for i in 1..=n {
        if i == n || spins[base + i * stride] != spins[base + start * stride] {
            emit(base + start * stride, i - start);
            start = i;
        }
    }
}

fn chord_samples(ms: &Microstructure, axis: ChordAxis, lines: &[usize], keep: Option<&[bool]>) -> Vec<f64> {
    let mut out = Vec::new();
    for &line in lines {
        runs_along(ms, axis, line, |first, len| {
            if keep.is_none_or(|k| k[first]) {
                out.push(len as f64);
            }
        });
    }
    out
}

/// Chord lengths over every row (`X`) or column (`Y`), boundary-truncated runs included.
pub fn chord_lengths(ms: &Microstructure, axis: ChordAxis) -> DescriptorSamples {
    let (id, lines) = match axis {
        ChordAxis::X => (5, ms.length()),
        ChordAxis::Y => (6, ms.width()),
    };
    let lines: Vec<usize> = (0..lines).collect();
    DescriptorSamples { id: DescriptorId(id), samples: chord_samples(ms, axis, &lines, None) }
}

/// Horizontal sampling bands placed symmetrically about the weld axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct BandConfig {
    pub band_width: usize,
    pub band_spacing: usize,
    pub num_bands: usize,
    /// Row coordinate of the weld axis; the lattice centerline when absent.
    #[serde(default)]
    pub axis_y: Option<f64>,
}

impl Default for BandConfig {
    fn default() -> Self {
        Self { band_width: 60, band_spacing: 20, num_bands: 5, axis_y: None }
    }
}

impl BandConfig {
    /// Rows sampled by band `band` on a lattice with `length` rows.
    ///
    /// Band 0 is centered on the axis; band `k` consists of the two intervals
    /// centered `k * (band_width + band_spacing)` rows above and below it. A
    /// row belongs to an interval when it lies strictly within half a band
    /// width of the interval center.
    pub fn rows(&self, length: usize, band: usize) -> Result<Vec<usize>, DescriptorError> {
        if self.band_width == 0 {
            return Err(DescriptorError::Config("band width must be > 0".into()));
        }
        if band >= self.num_bands {
            return Err(DescriptorError::BandIndex { band, num_bands: self.num_bands });
        }
        let axis = self.axis_y.unwrap_or((length as f64 - 1.0) * 0.5);
        let offset = (band * (self.band_width + self.band_spacing)) as f64;
        let half = 0.5 * self.band_width as f64;
        let centers: Vec<f64> = if band == 0 { vec![axis] } else { vec![axis - offset, axis + offset] };
        let mut rows = Vec::new();
        for c in centers {
            let lo = (c - half).floor() as i64;
            let hi = (c + half).ceil() as i64;
            let members: Vec<i64> = (lo..=hi).filter(|&y| (y as f64 - c).abs() < half).collect();
            if members.is_empty() || members[0] < 0 || *members.last().unwrap() >= length as i64 {
                return Err(DescriptorError::BandOutsideLattice { band, lo: c - half, hi: c + half, length });
            }
            rows.extend(members.into_iter().map(|y| y as usize));
        }
        rows.sort_unstable();
        rows.dedup();
        Ok(rows)
    }
}

/// `x` chord lengths pooled over the rows of one band.
pub fn banded_chord_lengths(
    ms: &Microstructure,
    cfg: &BandConfig,
    band: usize,
) -> Result<DescriptorSamples, DescriptorError> {
    let rows = cfg.rows(ms.length(), band)?;
    let id = DescriptorId::new(7 + band as u8).unwrap_or(DescriptorId(11));
    Ok(DescriptorSamples { id, samples: chord_samples(ms, ChordAxis::X, &rows, None) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct FilterConfig {
    /// Grains need area strictly greater than this to pass.
    pub area_threshold: f64,
    pub enabled: bool,
}

impl FilterConfig {
    pub fn threshold(area_threshold: f64) -> Self {
        Self { area_threshold, enabled: true }
    }

    pub fn disabled() -> Self {
        Self { area_threshold: 0.0, enabled: false }
    }

    pub fn passes(&self, area: usize) -> bool {
        !self.enabled || area as f64 > self.area_threshold
    }
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self::threshold(150.0)
    }
}

pub fn apply_filter(grains: Vec<Grain>, cfg: &FilterConfig) -> Vec<Grain> {
    grains.into_iter().filter(|g| cfg.passes(g.area())).collect()
}

/// Computes the requested descriptors.
///
/// Fails with [`DescriptorError::InsufficientSamples`] naming the first
/// descriptor left with fewer than two samples.
pub fn compute_descriptors(
    ms: &Microstructure,
    set: &DescriptorSet,
    filter: &FilterConfig,
    bands: &BandConfig,
) -> Result<Vec<DescriptorSamples>, DescriptorError> {
    let out = compute_descriptors_unchecked(ms, set, filter, bands)?;
    if let Some(d) = out.iter().find(|d| d.count() < 2) {
        return Err(DescriptorError::InsufficientSamples { id: d.id, count: d.count() });
    }
    Ok(out)
}

/// As [`compute_descriptors`] but without the minimum-count check.
pub fn compute_descriptors_unchecked(
    ms: &Microstructure,
    set: &DescriptorSet,
    filter: &FilterConfig,
    bands: &BandConfig,
) -> Result<Vec<DescriptorSamples>, DescriptorError> {
    let seg = segment(ms);
    let kept_grain: Vec<bool> = seg.grains.iter().map(|g| filter.passes(g.area())).collect();
    let keep_site: Option<Vec<bool>> =
        filter.enabled.then(|| seg.grain_of.iter().map(|&g| kept_grain[g as usize]).collect());
    let keep = keep_site.as_deref();

    let needs_fit = set.ids().iter().any(|id| id.get() <= 3);
    let fits: Vec<EllipseFit> = if needs_fit {
        seg.grains
            .iter()
            .zip(&kept_grain)
            .filter(|(_, &k)| k)
            .map(|(g, _)| fit_ellipse(g))
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };

    let mut out = Vec::with_capacity(set.len());
    for &id in set.ids() {
        let samples = match id.get() {
            1 => fits.iter().map(|f| f.a).collect(),
            2 => fits.iter().map(|f| f.b).collect(),
            3 => fits.iter().map(|f| f.theta).collect(),
            4 => seg
                .grains
                .iter()
                .zip(&kept_grain)
                .filter(|(_, &k)| k)
                .map(|(g, _)| g.area() as f64)
                .collect(),
            5 => chord_samples(ms, ChordAxis::X, &(0..ms.length()).collect::<Vec<_>>(), keep),
            6 => chord_samples(ms, ChordAxis::Y, &(0..ms.width()).collect::<Vec<_>>(), keep),
            _ => {
                let band = id.band().expect("banded descriptor");
                let rows = bands.rows(ms.length(), band)?;
                chord_samples(ms, ChordAxis::X, &rows, keep)
            }
        };
        out.push(DescriptorSamples { id, samples });
    }
    Ok(out)
}

/// Writes `descriptor_id,value` rows.
pub fn write_samples_csv<W: Write>(mut w: W, samples: &[DescriptorSamples]) -> Result<(), DescriptorError> {
    writeln!(w, "descriptor_id,value")?;
    for d in samples {
        for v in &d.samples {
            writeln!(w, "{},{}", d.id, v)?;
        }
    }
    Ok(())
}

/// Reads the `descriptor_id,value` format of [`write_samples_csv`], keeping
/// descriptors in order of first appearance.
pub fn read_samples_csv<R: BufRead>(r: R) -> Result<Vec<DescriptorSamples>, DescriptorError> {
    let mut out: Vec<DescriptorSamples> = Vec::new();
    let mut lines = r.lines();
    match lines.next().transpose()? {
        Some(h) if h.trim() == "descriptor_id,value" => {}
        _ => return Err(DescriptorError::Config("samples CSV must start with `descriptor_id,value`".into())),
    }
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || DescriptorError::Config(format!("samples CSV line {}: cannot parse {line:?}", i + 2));
        let (id, value) = line.split_once(',').ok_or_else(bad)?;
        let id = DescriptorId::new(id.trim().parse().map_err(|_| bad())?)?;
        let value: f64 = value.trim().parse().map_err(|_| bad())?;
        match out.iter_mut().find(|d| d.id == id) {
            Some(d) => d.samples.push(value),
            None => out.push(DescriptorSamples { id, samples: vec![value] }),
        }
    }
    Ok(out)
}
