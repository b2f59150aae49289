//! Moving weld-pool process model.
//!
//! The pool travels along `+x` on the lattice centerline. Each Monte Carlo
//! step the pool footprint is melted, sites left behind by the pool solidify
//! epitaxially from their solid neighbours, and solid sites within the
//! heat-affected zone coarsen with a mobility that decays with distance from
//! the pool. Everything farther away is frozen.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::potts::{attempt_flip, evolve};
use super::{init_microstructure, LatticeError, Microstructure, Neighborhood, Spin, MOLTEN};
use crate::seeding::{rng_from_seed, split_seed, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum PoolShape {
    /// Semicircular nose of radius `w/2` ahead of the center plus a linear
    /// taper of length `w` behind it.
    #[default]
    Teardrop,
    /// Axis-aligned ellipse with lateral semi-axis `w/2` and longitudinal
    /// semi-axis `3w/4` (same overall length as the teardrop).
    Ellipse,
}

impl PoolShape {
    /// Extent of the pool ahead of and behind its center along the travel axis.
    fn extents(self, pool_width: f64) -> (f64, f64) {
        match self {
            PoolShape::Teardrop => (0.5 * pool_width, pool_width),
            PoolShape::Ellipse => (0.75 * pool_width, 0.75 * pool_width),
        }
    }
}

/// Whether `(x, y)` lies inside a pool centered at `center`. The pool is
/// symmetric about the horizontal line through its center.
pub fn pool_contains(shape: PoolShape, pool_width: f64, center: (f64, f64), x: f64, y: f64) -> bool {
    let r = 0.5 * pool_width;
    let dx = x - center.0;
    let dy = (y - center.1).abs();
    if dy > r {
        return false;
    }
    match shape {
        PoolShape::Teardrop => {
            if dx >= 0.0 {
                dx * dx + dy * dy <= r * r
            } else if dx >= -pool_width {
                dy <= r * (1.0 + dx / pool_width)
            } else {
                false
            }
        }
        PoolShape::Ellipse => {
            let a = 0.75 * pool_width;
            (dx / a).powi(2) + (dy / r).powi(2) <= 1.0
        }
    }
}

/// Mobility as a function of distance `d` from the pool inside the HAZ.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "camelCase")]
pub enum HazProfile {
    /// `M(d) = 1 - d / haz`.
    #[default]
    Linear,
    /// Temperature falls linearly from `peak` at the pool to `ambient` at the
    /// HAZ edge; `M = exp(-Q/T(d))` normalized by its value at the pool.
    Arrhenius { activation: f64, peak: f64, ambient: f64 },
}

impl HazProfile {
    fn mobility(&self, d: f64, haz: f64) -> f64 {
        let frac = (d / haz).clamp(0.0, 1.0);
        match *self {
            HazProfile::Linear => 1.0 - frac,
            HazProfile::Arrhenius { activation, peak, ambient } => {
                let t = peak + (ambient - peak) * frac;
                (-activation / t + activation / peak).exp()
            }
        }
    }
}

/// Base-metal initialization: `width * length / sites_per_label` labels
/// annealed for `sweeps` zero-temperature sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BaseMetal {
    pub sites_per_label: usize,
    pub sweeps: u32,
}

impl Default for BaseMetal {
    fn default() -> Self {
        Self { sites_per_label: 16, sweeps: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WeldParams {
    /// Extent along the travel direction (columns).
    pub width: usize,
    /// Lateral extent (rows).
    pub length: usize,
    /// Travel speed in sites per MCS.
    pub velocity: f64,
    /// Heat-affected-zone depth in sites.
    pub haz: f64,
    pub pool_width: f64,
    #[serde(default)]
    pub pool_shape: PoolShape,
    pub kbts: f64,
    pub seed: u64,
    #[serde(default)]
    pub haz_profile: HazProfile,
    #[serde(default)]
    pub base_metal: BaseMetal,
    #[serde(default)]
    pub neighborhood: Neighborhood,
}

impl WeldParams {
    pub fn validate(&self) -> Result<(), LatticeError> {
        if self.width == 0 || self.length == 0 {
            return Err(LatticeError::EmptyDomain { width: self.width, length: self.length });
        }
        let bad = |m: String| Err(LatticeError::InvalidParameter(m));
        if !(self.velocity > 0.0) || !self.velocity.is_finite() {
            return bad(format!("velocity must be > 0, got {}", self.velocity));
        }
        if !(self.haz >= 0.0) || !self.haz.is_finite() {
            return bad(format!("haz must be >= 0, got {}", self.haz));
        }
        if !(self.pool_width > 0.0) || !self.pool_width.is_finite() {
            return bad(format!("pool width must be > 0, got {}", self.pool_width));
        }
        if self.pool_width > self.length as f64 {
            return bad(format!(
                "pool width {} exceeds the lateral extent {}",
                self.pool_width, self.length
            ));
        }
        if !(self.kbts >= 0.0) {
            return bad(format!("kbts must be >= 0, got {}", self.kbts));
        }
        if self.base_metal.sites_per_label == 0 {
            return bad("base_metal.sites_per_label must be > 0".into());
        }
        Ok(())
    }

    pub fn axis_y(&self) -> f64 {
        (self.length as f64 - 1.0) * 0.5
    }
}

/// Exact squared Euclidean distance transform along one line (lower
/// envelope of parabolas). Empty cells carry [`FAR`].
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let fq = f[q] + (q * q) as f64;
        let mut s = (fq - (f[v[k]] + (v[k] * v[k]) as f64)) / (2.0 * (q - v[k]) as f64);
        while s <= z[k] {
            k -= 1;
            s = (fq - (f[v[k]] + (v[k] * v[k]) as f64)) / (2.0 * (q - v[k]) as f64);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

const FAR: f64 = 1e20;

/// Euclidean distance from each cell of a `cols x rows` grid to the nearest
/// `true` cell.
fn distance_transform(mask: &[bool], cols: usize, rows: usize) -> Vec<f64> {
    let n = cols.max(rows);
    let (mut v, mut z) = (vec![0usize; n], vec![0f64; n + 1]);
    let mut grid: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { FAR }).collect();
    let mut line = vec![0f64; n];
    let mut out = vec![0f64; n];
    for r in 0..rows {
        line[..cols].copy_from_slice(&grid[r * cols..(r + 1) * cols]);
        edt_1d(&line[..cols], &mut out[..cols], &mut v, &mut z);
        grid[r * cols..(r + 1) * cols].copy_from_slice(&out[..cols]);
    }
    for c in 0..cols {
        for r in 0..rows {
            line[r] = grid[r * cols + c];
        }
        edt_1d(&line[..rows], &mut out[..rows], &mut v, &mut z);
        for r in 0..rows {
            grid[r * cols + c] = out[r].sqrt();
        }
    }
    grid
}

/// Pool footprint, HAZ mobilities and the distance field around the pool,
/// all relative to an integer pool center column.
struct PoolStencil {
    /// (dx, y) of molten cells.
    inside: Vec<(isize, usize)>,
    /// (dx, y, mobility) of HAZ cells.
    haz: Vec<(isize, usize, f64)>,
    /// Distance to the pool over the stencil window, row-major.
    dist: Vec<f64>,
    dx_min: isize,
    cols: usize,
}

impl PoolStencil {
    fn build(p: &WeldParams) -> Self {
        let (front, back) = p.pool_shape.extents(p.pool_width);
        // wide enough for the HAZ and for every site the pool leaves behind in one step
        let margin = p.haz.max(p.velocity).ceil() as isize + 2;
        let dx_min = -(back.ceil() as isize) - margin;
        let dx_max = front.ceil() as isize + margin;
        let cols = (dx_max - dx_min + 1) as usize;
        let rows = p.length;
        let cy = p.axis_y();
        let mut mask = vec![false; cols * rows];
        let mut inside = Vec::new();
        for y in 0..rows {
            for c in 0..cols {
                let dx = dx_min + c as isize;
                if pool_contains(p.pool_shape, p.pool_width, (0.0, cy), dx as f64, y as f64) {
                    mask[y * cols + c] = true;
                    inside.push((dx, y));
                }
            }
        }
        let dist = if inside.is_empty() { vec![FAR; cols * rows] } else { distance_transform(&mask, cols, rows) };
        let mut haz = Vec::new();
        if p.haz > 0.0 && !inside.is_empty() {
            for y in 0..rows {
                for c in 0..cols {
                    let d = dist[y * cols + c];
                    if !mask[y * cols + c] && d <= p.haz {
                        haz.push((dx_min + c as isize, y, p.haz_profile.mobility(d, p.haz)));
                    }
                }
            }
        }
        Self { inside, haz, dist, dx_min, cols }
    }

    /// Distance from `(dx, y)` to the pool; infinite outside the window.
    fn distance(&self, dx: isize, y: isize) -> f64 {
        let c = dx - self.dx_min;
        let rows = (self.dist.len() / self.cols) as isize;
        if c < 0 || c >= self.cols as isize || y < 0 || y >= rows {
            return f64::INFINITY;
        }
        self.dist[y as usize * self.cols + c as usize]
    }

    /// Central-difference gradient of the distance field: the outward
    /// normal of the pool, i.e. the direction opposite to heat flow.
    fn gradient(&self, dx: isize, y: isize) -> (f64, f64) {
        let d0 = self.distance(dx, y);
        let diff = |a: f64, b: f64| match (a.is_finite(), b.is_finite()) {
            (true, true) => 0.5 * (a - b),
            (true, false) => d0 - b.min(d0),
            (false, true) => a.min(d0) - d0,
            (false, false) => 0.0,
        };
        let gx = diff(self.distance(dx + 1, y), self.distance(dx - 1, y));
        let gy = diff(self.distance(dx, y + 1), self.distance(dx, y - 1));
        (gx, gy)
    }
}

fn anneal_base_metal(params: &WeldParams) -> Result<(Microstructure, SimRng), LatticeError> {
    let (w, l) = (params.width, params.length);
    let q = ((w * l) / params.base_metal.sites_per_label).clamp(2, u32::MAX as usize - 2) as u32;
    let mut ms = init_microstructure(w, l, q, split_seed(params.seed, 0))?;
    let mut rng = rng_from_seed(split_seed(params.seed, 1));
    evolve(&mut ms, params.base_metal.sweeps, 0.0, 1.0, params.neighborhood, &mut rng, &mut |_, _| {});
    Ok((ms, rng))
}

/// The annealed base metal a weld run with these parameters starts from.
pub fn weld_base_metal(params: &WeldParams) -> Result<Microstructure, LatticeError> {
    params.validate()?;
    Ok(anneal_base_metal(params)?.0)
}

/// Simulates one weld pass and returns the fully solidified microstructure.
pub fn run_weld(params: &WeldParams) -> Result<Microstructure, LatticeError> {
    params.validate()?;
    if params.pool_width + 2.0 * params.haz > params.length as f64 {
        log::warn!(
            "pool width + 2*haz = {} exceeds the lateral extent {}; the HAZ is clipped",
            params.pool_width + 2.0 * params.haz,
            params.length
        );
    }
    let (w, l) = (params.width, params.length);
    let nbhd = params.neighborhood;
    let (mut ms, mut rng) = anneal_base_metal(params)?;

    let mut next_label: Spin = ms.max_label() + 1;
    let stencil = PoolStencil::build(params);
    let (front, back) = params.pool_shape.extents(params.pool_width);
    let start = -front.ceil() - 1.0;
    let mut molten: Vec<usize> = Vec::new();
    let mut in_pool = vec![false; w * l];
    let mut labels = [0 as Spin; 8];

    let mut t = 0u64;
    loop {
        let cx = (start + params.velocity * t as f64).round() as isize;
        t += 1;

        // melt the current footprint
        in_pool.iter_mut().for_each(|b| *b = false);
        let mut newly_molten = Vec::new();
        for &(dx, y) in &stencil.inside {
            let x = cx + dx;
            if x < 0 || x >= w as isize {
                continue;
            }
            let idx = y * w + x as usize;
            in_pool[idx] = true;
            if ms.spins()[idx] != MOLTEN {
                ms.spins_mut()[idx] = MOLTEN;
                newly_molten.push(idx);
            }
        }

        // Solidify what the pool has left behind. Growth is epitaxial along the
        // thermal gradient: sites farthest from the pool freeze first, each
        // copying the solid neighbour that lies most directly away from the pool.
        let mut freed: Vec<(f64, usize)> = molten
            .iter()
            .copied()
            .filter(|&i| !in_pool[i])
            .map(|i| (stencil.distance((i % w) as isize - cx, (i / w) as isize), i))
            .collect();
        molten.retain(|&i| in_pool[i]);
        molten.extend(newly_molten);
        freed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut pending = Vec::new();
        for &(_, idx) in &freed {
            let (x, y) = (idx % w, idx / w);
            let (gx, gy) = stencil.gradient(x as isize - cx, y as isize);
            let mut best: Option<Spin> = None;
            let mut best_score = f64::NEG_INFINITY;
            let mut ties = 0u32;
            for (ox, oy) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                let (nx, ny) = (x as isize + ox, y as isize + oy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= l as isize {
                    continue;
                }
                let s = ms.get(nx as usize, ny as usize);
                if s == MOLTEN {
                    continue;
                }
                let score = ox as f64 * gx + oy as f64 * gy;
                if score > best_score + 1e-9 {
                    best = Some(s);
                    best_score = score;
                    ties = 1;
                } else if (score - best_score).abs() <= 1e-9 {
                    ties += 1;
                    if rng.random_range(0..ties) == 0 {
                        best = Some(s);
                    }
                }
            }
            match best {
                Some(s) => ms.spins_mut()[idx] = s,
                None => pending.push(idx),
            }
        }
        // leftovers enclosed by melt fill in from whatever solid appears next to them
        while !pending.is_empty() {
            let mut assign = Vec::new();
            let mut rest = Vec::new();
            for &idx in &pending {
                let (x, y) = (idx % w, idx / w);
                let mut n = 0;
                for s in super::potts::neighbors(&ms, x, y, Neighborhood::VonNeumann) {
                    if s != MOLTEN {
                        labels[n] = s;
                        n += 1;
                    }
                }
                if n == 0 {
                    rest.push(idx);
                } else {
                    let pick = if n == 1 { 0 } else { rng.random_range(0..n) };
                    assign.push((idx, labels[pick]));
                }
            }
            if assign.is_empty() {
                for idx in rest.drain(..) {
                    ms.spins_mut()[idx] = next_label;
                    next_label += 1;
                }
            }
            for (idx, s) in assign {
                ms.spins_mut()[idx] = s;
            }
            pending = rest;
        }

        // heat-affected-zone coarsening
        if !stencil.haz.is_empty() {
            for _ in 0..stencil.haz.len() {
                let (dx, y, mobility) = stencil.haz[rng.random_range(0..stencil.haz.len())];
                let x = cx + dx;
                if x < 0 || x >= w as isize || mobility <= 0.0 {
                    continue;
                }
                let x = x as usize;
                if ms.get(x, y) == MOLTEN {
                    continue;
                }
                attempt_flip(&mut ms, x, y, params.kbts, mobility, nbhd, Some(MOLTEN), &mut rng);
            }
        }

        let trailing_edge = cx as f64 - back - params.haz - 1.0;
        if molten.is_empty() && trailing_edge > w as f64 {
            break;
        }
    }
    debug_assert!(!ms.spins().contains(&MOLTEN));
    Ok(ms)
}
