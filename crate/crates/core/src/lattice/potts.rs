//! Metropolis kinetics for curvature-driven grain growth.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LatticeError, Microstructure, Neighborhood, Spin};
use crate::seeding::{rng_from_seed, split_seed, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "camelCase")]
pub enum MobilityMode {
    /// Unit mobility everywhere.
    #[default]
    Constant,
    /// `M = M0 exp(-Q / T)`, reported relative to its supremum `M0` so that
    /// acceptance probabilities stay in `[0, 1]`.
    Arrhenius {
        prefactor: f64,
        activation: f64,
        temperature: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "camelCase")]
pub struct MobilityModel {
    #[serde(flatten)]
    pub mode: MobilityMode,
}

impl MobilityModel {
    pub fn constant() -> Self {
        Self { mode: MobilityMode::Constant }
    }

    pub fn arrhenius(prefactor: f64, activation: f64, temperature: f64) -> Self {
        Self { mode: MobilityMode::Arrhenius { prefactor, activation, temperature } }
    }

    /// Raw mobility `M0 exp(-Q/T)` in the model's own units.
    pub fn raw(&self) -> f64 {
        match self.mode {
            MobilityMode::Constant => 1.0,
            MobilityMode::Arrhenius { prefactor, activation, temperature } => {
                prefactor * (-activation / temperature).exp()
            }
        }
    }

    /// Mobility normalized into `(0, 1]`.
    pub fn normalized(&self) -> Result<f64, LatticeError> {
        match self.mode {
            MobilityMode::Constant => Ok(1.0),
            MobilityMode::Arrhenius { prefactor, activation, temperature } => {
                if !(prefactor > 0.0) || !(temperature > 0.0) || !(activation >= 0.0) {
                    return Err(LatticeError::InvalidParameter(format!(
                        "arrhenius mobility needs M0 > 0, T > 0, Q >= 0 (got {prefactor}, {temperature}, {activation})"
                    )));
                }
                let m = (-activation / temperature).exp();
                if m > 0.0 {
                    Ok(m)
                } else {
                    Err(LatticeError::InvalidParameter(format!(
                        "arrhenius mobility underflows to zero (Q/T = {})",
                        activation / temperature
                    )))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GrainGrowthParams {
    pub width: usize,
    pub length: usize,
    /// Number of distinct labels in the random initial condition.
    pub num_spins: u32,
    pub kbts: f64,
    /// Monte Carlo sweeps.
    pub steps: u32,
    pub seed: u64,
    #[serde(default)]
    pub mobility: MobilityModel,
    #[serde(default)]
    pub neighborhood: Neighborhood,
}

impl GrainGrowthParams {
    pub fn validate(&self) -> Result<(), LatticeError> {
        if self.width == 0 || self.length == 0 {
            return Err(LatticeError::EmptyDomain { width: self.width, length: self.length });
        }
        if self.num_spins < 2 {
            return Err(LatticeError::InvalidParameter(format!(
                "num_spins must be >= 2, got {}",
                self.num_spins
            )));
        }
        if !(self.kbts >= 0.0) || !self.kbts.is_finite() {
            return Err(LatticeError::InvalidParameter(format!("kbts must be >= 0, got {}", self.kbts)));
        }
        self.mobility.normalized()?;
        Ok(())
    }
}

/// Random initial condition: each site gets an independent uniform label in `[0, q)`.
pub fn init_microstructure(
    width: usize,
    length: usize,
    q: u32,
    seed: u64,
) -> Result<Microstructure, LatticeError> {
    if width == 0 || length == 0 {
        return Err(LatticeError::EmptyDomain { width, length });
    }
    if q < 2 {
        return Err(LatticeError::InvalidParameter(format!("q must be >= 2, got {q}")));
    }
    let mut rng = rng_from_seed(seed);
    let spins = (0..width * length).map(|_| rng.random_range(0..q)).collect();
    Microstructure::new(width, length, spins)
}

/// Number of von Neumann neighbours whose label differs from the site's.
pub fn site_energy(ms: &Microstructure, x: usize, y: usize) -> Result<u32, LatticeError> {
    site_energy_with(ms, x, y, Neighborhood::VonNeumann)
}

pub fn site_energy_with(
    ms: &Microstructure,
    x: usize,
    y: usize,
    nbhd: Neighborhood,
) -> Result<u32, LatticeError> {
    if !ms.contains(x, y) {
        return Err(LatticeError::OutOfBounds { x, y, width: ms.width(), length: ms.length() });
    }
    let s = ms.get(x, y);
    Ok(neighbors(ms, x, y, nbhd).filter(|&n| n != s).count() as u32)
}

#[inline]
pub(crate) fn neighbors(
    ms: &Microstructure,
    x: usize,
    y: usize,
    nbhd: Neighborhood,
) -> impl Iterator<Item = Spin> + '_ {
    let (w, l) = (ms.width() as isize, ms.length() as isize);
    nbhd.offsets().iter().filter_map(move |&(dx, dy)| {
        let nx = x as isize + dx;
        let ny = y as isize + dy;
        (nx >= 0 && ny >= 0 && nx < w && ny < l).then(|| ms.get(nx as usize, ny as usize))
    })
}

/// Metropolis acceptance with a mobility prefactor.
///
/// Returns `M` for `delta_e <= 0` and `M exp(-delta_e / kbts)` otherwise; at
/// `kbts == 0` uphill moves are never accepted.
pub fn acceptance_probability(delta_e: f64, kbts: f64, mobility: f64) -> Result<f64, LatticeError> {
    if !(kbts >= 0.0) {
        return Err(LatticeError::InvalidParameter(format!("kbts must be >= 0, got {kbts}")));
    }
    if !(mobility > 0.0 && mobility <= 1.0) {
        return Err(LatticeError::InvalidParameter(format!("mobility must lie in (0, 1], got {mobility}")));
    }
    Ok(accept_prob_unchecked(delta_e, kbts, mobility))
}

#[inline]
pub(crate) fn accept_prob_unchecked(delta_e: f64, kbts: f64, mobility: f64) -> f64 {
    if delta_e <= 0.0 {
        mobility
    } else if kbts == 0.0 {
        0.0
    } else {
        mobility * (-delta_e / kbts).exp()
    }
}

/// Energy change if site `(x, y)` took the label `candidate`.
#[inline]
pub(crate) fn delta_energy(
    ms: &Microstructure,
    x: usize,
    y: usize,
    candidate: Spin,
    nbhd: Neighborhood,
) -> i32 {
    let current = ms.get(x, y);
    let mut before = 0i32;
    let mut after = 0i32;
    for n in neighbors(ms, x, y, nbhd) {
        before += (n != current) as i32;
        after += (n != candidate) as i32;
    }
    after - before
}

/// Attempts to relabel site `(x, y)` to `candidate` under Metropolis rules.
pub fn metropolis_flip(
    ms: &mut Microstructure,
    x: usize,
    y: usize,
    candidate: Spin,
    kbts: f64,
    mobility: f64,
    rng: &mut impl Rng,
) -> Result<bool, LatticeError> {
    if !ms.contains(x, y) {
        return Err(LatticeError::OutOfBounds { x, y, width: ms.width(), length: ms.length() });
    }
    let de = delta_energy(ms, x, y, candidate, Neighborhood::VonNeumann);
    let p = acceptance_probability(de as f64, kbts, mobility)?;
    let accept = p >= 1.0 || (p > 0.0 && rng.random::<f64>() < p);
    if accept {
        ms.set(x, y, candidate);
    }
    Ok(accept)
}

/// One accepted relabelling during a simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlipRecord {
    pub x: usize,
    pub y: usize,
    pub from: Spin,
    pub to: Spin,
    pub delta_e: i32,
}

/// Distinct labels among the site's neighbours that differ from `current`,
/// excluding `exclude`. Returns the count written into `buf`.
#[inline]
pub(crate) fn unlike_neighbor_labels(
    ms: &Microstructure,
    x: usize,
    y: usize,
    nbhd: Neighborhood,
    exclude: Option<Spin>,
    buf: &mut [Spin; 8],
) -> usize {
    let current = ms.get(x, y);
    let mut n = 0;
    for s in neighbors(ms, x, y, nbhd) {
        if s == current || Some(s) == exclude || buf[..n].contains(&s) {
            continue;
        }
        buf[n] = s;
        n += 1;
    }
    n
}

/// One rejection-free-style flip attempt: pick a random unlike neighbour label
/// and apply Metropolis. Sites with no unlike neighbours are skipped.
#[inline]
pub(crate) fn attempt_flip(
    ms: &mut Microstructure,
    x: usize,
    y: usize,
    kbts: f64,
    mobility: f64,
    nbhd: Neighborhood,
    exclude: Option<Spin>,
    rng: &mut SimRng,
) -> Option<FlipRecord> {
    let mut buf = [0; 8];
    let n = unlike_neighbor_labels(ms, x, y, nbhd, exclude, &mut buf);
    if n == 0 {
        return None;
    }
    let candidate = if n == 1 { buf[0] } else { buf[rng.random_range(0..n)] };
    let de = delta_energy(ms, x, y, candidate, nbhd);
    let p = accept_prob_unchecked(de as f64, kbts, mobility);
    let accept = p >= 1.0 || (p > 0.0 && rng.random::<f64>() < p);
    if !accept {
        return None;
    }
    let from = ms.get(x, y);
    ms.set(x, y, candidate);
    Some(FlipRecord { x, y, from, to: candidate, delta_e: de })
}

/// Isothermal grain growth from a random initial condition.
pub fn run_grain_growth(params: &GrainGrowthParams) -> Result<Microstructure, LatticeError> {
    run_grain_growth_observed(params, |_, _| {})
}

/// Same as [`run_grain_growth`], calling `observer` after every accepted flip.
pub fn run_grain_growth_observed<F>(
    params: &GrainGrowthParams,
    mut observer: F,
) -> Result<Microstructure, LatticeError>
where
    F: FnMut(&Microstructure, &FlipRecord),
{
    params.validate()?;
    let mut ms = init_microstructure(params.width, params.length, params.num_spins, params.seed)?;
    let mobility = params.mobility.normalized()?;
    let mut rng = rng_from_seed(split_seed(params.seed, 1));
    evolve(&mut ms, params.steps, params.kbts, mobility, params.neighborhood, &mut rng, &mut observer);
    Ok(ms)
}

pub(crate) fn evolve<F>(
    ms: &mut Microstructure,
    sweeps: u32,
    kbts: f64,
    mobility: f64,
    nbhd: Neighborhood,
    rng: &mut SimRng,
    observer: &mut F,
) where
    F: FnMut(&Microstructure, &FlipRecord),
{
    let (w, l) = (ms.width(), ms.length());
    let n = w * l;
    for _ in 0..sweeps {
        for _ in 0..n {
            let idx = rng.random_range(0..n);
            let (x, y) = (idx % w, idx / w);
            if let Some(rec) = attempt_flip(ms, x, y, kbts, mobility, nbhd, None, rng) {
                observer(ms, &rec);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptors::{apply_filter, segment_grains, FilterConfig};

    fn gg(kbts: f64, steps: u32, seed: u64) -> GrainGrowthParams {
        GrainGrowthParams {
            width: 64,
            length: 64,
            num_spins: 500,
            kbts,
            steps,
            seed,
            mobility: MobilityModel::constant(),
            neighborhood: Neighborhood::VonNeumann,
        }
    }

    #[test]
    fn init_single_site_and_determinism() {
        let ms = init_microstructure(1, 1, 2, 5).unwrap();
        assert!(ms.get(0, 0) < 2);
        let a = init_microstructure(4, 4, 16, 99).unwrap();
        let b = init_microstructure(4, 4, 16, 99).unwrap();
        assert_eq!(a, b);
        assert!(matches!(init_microstructure(0, 4, 16, 1), Err(LatticeError::EmptyDomain { .. })));
        assert!(init_microstructure(4, 4, 1, 1).is_err());
    }

    #[test]
    fn init_labels_are_uniform() {
        // chi-squared over 1000 cells with 4096 draws; dof = 999, sd = sqrt(2 * 999)
        let q = 1000u32;
        let ms = init_microstructure(64, 64, q, 2024).unwrap();
        let mut counts = vec![0f64; q as usize];
        for &s in ms.spins() {
            counts[s as usize] += 1.0;
        }
        let expected = ms.num_sites() as f64 / q as f64;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        let dof = (q - 1) as f64;
        assert!((chi2 - dof).abs() < 4.0 * (2.0 * dof).sqrt(), "chi2 = {chi2}");
    }

    #[test]
    fn site_energy_examples() {
        let uni = Microstructure::uniform(5, 5, 3).unwrap();
        assert_eq!(site_energy(&uni, 2, 2).unwrap(), 0);
        let checker = Microstructure::from_rows(&[vec![1, 2], vec![2, 1]]).unwrap();
        assert_eq!(site_energy(&checker, 0, 0).unwrap(), 2);
        let mut island = Microstructure::uniform(3, 3, 7).unwrap();
        island.set(1, 1, 9);
        assert_eq!(site_energy(&island, 1, 1).unwrap(), 4);
        assert_eq!(site_energy_with(&island, 1, 1, Neighborhood::Moore).unwrap(), 8);
        assert!(matches!(site_energy(&island, 3, 0), Err(LatticeError::OutOfBounds { .. })));
    }

    #[test]
    fn site_energy_sums_to_twice_bonds() {
        let ms = init_microstructure(17, 11, 4, 3).unwrap();
        for nbhd in [Neighborhood::VonNeumann, Neighborhood::Moore] {
            let total: u64 = (0..ms.length())
                .flat_map(|y| (0..ms.width()).map(move |x| (x, y)))
                .map(|(x, y)| site_energy_with(&ms, x, y, nbhd).unwrap() as u64)
                .sum();
            assert_eq!(total, 2 * ms.unlike_bonds(nbhd));
        }
    }

    #[test]
    fn acceptance_probability_cases() {
        assert_eq!(acceptance_probability(-2.0, 0.5, 1.0).unwrap(), 1.0);
        assert_eq!(acceptance_probability(0.0, 0.5, 1.0).unwrap(), 1.0);
        let p = acceptance_probability(0.7, 0.7, 1.0).unwrap();
        assert!((p - (-1.0f64).exp()).abs() < 1e-15);
        assert!((p - 0.3679).abs() < 1e-4);
        assert_eq!(acceptance_probability(1.0, 0.0, 1.0).unwrap(), 0.0);
        assert_eq!(acceptance_probability(-1.0, 0.0, 0.25).unwrap(), 0.25);
        assert!(acceptance_probability(1.0, -0.1, 1.0).is_err());
        assert!(acceptance_probability(1.0, 0.1, 0.0).is_err());
        assert!(acceptance_probability(1.0, 0.1, 1.5).is_err());
    }

    #[test]
    fn metropolis_flip_downhill_always_accepted() {
        let mut ms = Microstructure::uniform(3, 3, 7).unwrap();
        ms.set(1, 1, 9);
        let mut rng = rng_from_seed(0);
        assert!(metropolis_flip(&mut ms, 1, 1, 7, 0.5, 1.0, &mut rng).unwrap());
        assert_eq!(ms.get(1, 1), 7);
        assert!(metropolis_flip(&mut ms, 1, 1, 7, -1.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn metropolis_flip_uphill_frozen_at_zero_temperature() {
        let mut ms = Microstructure::uniform(3, 3, 7).unwrap();
        let mut rng = rng_from_seed(0);
        for _ in 0..100 {
            assert!(!metropolis_flip(&mut ms, 1, 1, 9, 0.0, 1.0, &mut rng).unwrap());
        }
        assert_eq!(ms.get(1, 1), 7);
    }

    #[test]
    fn metropolis_flip_rate_matches_boltzmann_factor() {
        // site on a flat boundary: 1 unlike neighbour before, 3 after -> dE = 2
        let base = Microstructure::from_rows(&[vec![1, 1, 1], vec![1, 1, 1], vec![2, 2, 2]]).unwrap();
        let mut rng = rng_from_seed(42);
        let trials = 200_000;
        let mut hits = 0;
        for _ in 0..trials {
            let mut ms = base.clone();
            if metropolis_flip(&mut ms, 1, 1, 2, 2.0, 1.0, &mut rng).unwrap() {
                hits += 1;
            }
        }
        let rate = hits as f64 / trials as f64;
        // dE for (1,1) -> 2: neighbours 1,1,1(above),2(below): before 1 unlike, after 3
        let expected = (-1.0f64).exp();
        let sd = (expected * (1.0 - expected) / trials as f64).sqrt();
        assert!((rate - expected).abs() < 5.0 * sd, "rate {rate} vs {expected}");
    }

    #[test]
    fn zero_steps_returns_initial_condition() {
        let p = gg(0.5, 0, 8);
        let ms = run_grain_growth(&p).unwrap();
        assert_eq!(ms, init_microstructure(64, 64, 500, 8).unwrap());
    }

    #[test]
    fn grain_growth_is_deterministic() {
        let p = gg(0.5, 3, 21);
        assert_eq!(run_grain_growth(&p).unwrap(), run_grain_growth(&p).unwrap());
    }

    #[test]
    fn zero_temperature_never_raises_energy() {
        let p = gg(0.0, 10, 4);
        let init = init_microstructure(64, 64, 500, 4).unwrap();
        let mut energy = init.unlike_bonds(Neighborhood::VonNeumann) as i64;
        let start = energy;
        let ms = run_grain_growth_observed(&p, |_, rec| {
            assert!(rec.delta_e <= 0);
            energy += rec.delta_e as i64;
        })
        .unwrap();
        assert_eq!(energy, ms.unlike_bonds(Neighborhood::VonNeumann) as i64);
        assert!(energy <= start);
    }

    #[test]
    fn flips_only_adopt_neighbour_labels() {
        let p = gg(0.8, 2, 5);
        run_grain_growth_observed(&p, |ms, rec| {
            let nb: Vec<Spin> = neighbors(ms, rec.x, rec.y, Neighborhood::VonNeumann).collect();
            assert!(nb.contains(&rec.to));
            assert_ne!(rec.from, rec.to);
        })
        .unwrap();
    }

    #[test]
    fn grains_coarsen_over_time() {
        let count = |steps| {
            let ms = run_grain_growth(&gg(0.5, steps, 13)).unwrap();
            apply_filter(segment_grains(&ms), &FilterConfig::disabled()).len()
        };
        assert!(count(20) < count(2));
    }

    #[test]
    fn arrhenius_mobility_normalized() {
        let m = MobilityModel::arrhenius(5.0, 1.0, 2.0);
        assert!((m.normalized().unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        assert!((m.raw() - 5.0 * (-0.5f64).exp()).abs() < 1e-12);
        assert!(MobilityModel::arrhenius(0.0, 1.0, 1.0).normalized().is_err());
        assert_eq!(MobilityModel::constant().normalized().unwrap(), 1.0);
    }
}
