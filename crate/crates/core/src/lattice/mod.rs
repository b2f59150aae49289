//! Potts-model lattices and the forward process simulators.
//!
//! A [`Microstructure`] is a 2D grid of grain labels ("spins") stored row-major:
//! `x` indexes columns in `[0, width)` and `y` indexes rows in `[0, length)`.
//! The weld model travels along `+x`, so rows are parallel to the weld axis.

mod potts;
mod weld;

pub use potts::{
    acceptance_probability, init_microstructure, metropolis_flip, run_grain_growth,
    run_grain_growth_observed, site_energy, site_energy_with, FlipRecord, GrainGrowthParams,
    MobilityMode, MobilityModel,
};
pub use weld::{pool_contains, run_weld, weld_base_metal, BaseMetal, HazProfile, PoolShape, WeldParams};

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

/// Grain label stored at each lattice site.
pub type Spin = u32;

/// Label reserved for molten sites while the weld pool is active. Never
/// present in a returned microstructure.
pub const MOLTEN: Spin = Spin::MAX;

#[derive(Debug, Error)]
pub enum LatticeError {
    #[error("lattice has zero area ({width}x{length})")]
    EmptyDomain { width: usize, length: usize },
    #[error("spin array has {got} entries, expected {expected}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("site ({x}, {y}) is outside the {width}x{length} lattice")]
    OutOfBounds { x: usize, y: usize, width: usize, length: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed MSV1 data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Site neighbourhood used for bond energies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Neighborhood {
    /// Four nearest neighbours.
    #[default]
    VonNeumann,
    /// Eight neighbours including diagonals.
    Moore,
}

impl Neighborhood {
    pub(crate) fn offsets(self) -> &'static [(isize, isize)] {
        const VN: [(isize, isize); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
        const MOORE: [(isize, isize); 8] =
            [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];
        match self {
            Neighborhood::VonNeumann => &VN,
            Neighborhood::Moore => &MOORE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Microstructure {
    width: usize,
    length: usize,
    spins: Vec<Spin>,
}

impl Microstructure {
    pub fn new(width: usize, length: usize, spins: Vec<Spin>) -> Result<Self, LatticeError> {
        if width == 0 || length == 0 {
            return Err(LatticeError::EmptyDomain { width, length });
        }
        let expected = width * length;
        if spins.len() != expected {
            return Err(LatticeError::SizeMismatch { expected, got: spins.len() });
        }
        Ok(Self { width, length, spins })
    }

    /// Lattice with every site set to `label`.
    pub fn uniform(width: usize, length: usize, label: Spin) -> Result<Self, LatticeError> {
        Self::new(width, length, vec![label; width * length])
    }

    /// Builds a lattice from rows given top to bottom.
    pub fn from_rows(rows: &[Vec<Spin>]) -> Result<Self, LatticeError> {
        let length = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(LatticeError::Format("ragged rows".into()));
        }
        Self::new(width, length, rows.concat())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn num_sites(&self) -> usize {
        self.spins.len()
    }

    pub fn spins(&self) -> &[Spin] {
        &self.spins
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Spin {
        self.spins[y * self.width + x]
    }

    #[inline]
    pub(crate) fn set(&mut self, x: usize, y: usize, s: Spin) {
        let w = self.width;
        self.spins[y * w + x] = s;
    }

    pub(crate) fn spins_mut(&mut self) -> &mut [Spin] {
        &mut self.spins
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x < self.width && y < self.length
    }

    pub fn row(&self, y: usize) -> &[Spin] {
        &self.spins[y * self.width..(y + 1) * self.width]
    }

    pub fn max_label(&self) -> Spin {
        self.spins.iter().copied().max().unwrap_or(0)
    }

    /// Swaps the roles of `x` and `y`.
    pub fn transpose(&self) -> Self {
        let mut spins = Vec::with_capacity(self.spins.len());
        for x in 0..self.width {
            for y in 0..self.length {
                spins.push(self.get(x, y));
            }
        }
        Self { width: self.length, length: self.width, spins }
    }

    /// Reflects rows about the horizontal centerline (`y -> length - 1 - y`).
    pub fn mirror_rows(&self) -> Self {
        let spins = (0..self.length).rev().flat_map(|y| self.row(y).iter().copied()).collect();
        Self { width: self.width, length: self.length, spins }
    }

    /// Number of unlike nearest-neighbour bonds, each bond counted once.
    pub fn unlike_bonds(&self, nbhd: Neighborhood) -> u64 {
        let mut count = 0u64;
        for y in 0..self.length {
            for x in 0..self.width {
                let s = self.get(x, y);
                for &(dx, dy) in nbhd.offsets() {
                    // forward half of the stencil only
                    if dy < 0 || (dy == 0 && dx < 0) {
                        continue;
                    }
                    let nx = x as isize + dx;
                    let ny = y as isize + dy;
                    if nx < 0 || ny < 0 || nx >= self.width as isize || ny >= self.length as isize {
                        continue;
                    }
                    if self.get(nx as usize, ny as usize) != s {
                        count += 1;
                    }
                }
            }
        }
        count
    }

    /// Renders the MSV1 text dump.
    pub fn to_msv1(&self) -> String {
        let mut out = String::with_capacity(self.spins.len() * 5 + 32);
        let _ = writeln!(out, "MSV1 {} {}", self.width, self.length);
        for y in 0..self.length {
            let row = self.row(y);
            for (i, s) in row.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{s}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_msv1<W: Write>(&self, mut w: W) -> Result<(), LatticeError> {
        w.write_all(self.to_msv1().as_bytes())?;
        Ok(())
    }

    pub fn save_msv1(&self, path: impl AsRef<Path>) -> Result<(), LatticeError> {
        std::fs::write(path, self.to_msv1())?;
        Ok(())
    }

    pub fn read_msv1<R: BufRead>(r: R) -> Result<Self, LatticeError> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| LatticeError::Format("missing header".into()))??;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("MSV1") {
            return Err(LatticeError::Format(format!("bad magic in header {header:?}")));
        }
        let mut dim = |name: &str| -> Result<usize, LatticeError> {
            parts
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| LatticeError::Format(format!("missing or invalid {name}")))
        };
        let width = dim("width")?;
        let length = dim("length")?;
        if width == 0 || length == 0 {
            return Err(LatticeError::EmptyDomain { width, length });
        }
        let mut spins = Vec::with_capacity(width * length);
        for y in 0..length {
            let line = lines
                .next()
                .ok_or_else(|| LatticeError::Format(format!("missing row {y}")))??;
            let before = spins.len();
            for tok in line.split_whitespace() {
                let s: Spin = tok
                    .parse()
                    .map_err(|_| LatticeError::Format(format!("bad label {tok:?} in row {y}")))?;
                spins.push(s);
            }
            if spins.len() - before != width {
                return Err(LatticeError::Format(format!(
                    "row {y} has {} labels, expected {width}",
                    spins.len() - before
                )));
            }
        }
        if let Some(extra) = lines.next() {
            if !extra?.trim().is_empty() {
                return Err(LatticeError::Format("trailing data after last row".into()));
            }
        }
        Self::new(width, length, spins)
    }

    pub fn load_msv1(path: impl AsRef<Path>) -> Result<Self, LatticeError> {
        let f = std::fs::File::open(path)?;
        Self::read_msv1(std::io::BufReader::new(f))
    }
}

impl std::str::FromStr for Microstructure {
    type Err = LatticeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::read_msv1(s.as_bytes())
    }
}
