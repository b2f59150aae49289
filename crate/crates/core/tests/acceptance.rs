//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every criterion reports even when an
//! earlier one fails; the process exits non-zero if any criterion fails.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::Rng;

use microcal::campaign::{
    evaluate_candidate, noise_seeds, prepare_target, read_trial_log, run_campaign, trial_correlations, write_reports,
    CampaignConfig, RunOptions,
};
use microcal::densities::{
    kl_divergence, kl_divergence_discrete, objective_correlations, scalarize, Density, ScalarizationConfig,
    ScalarizationMethod,
};
use microcal::descriptors::{
    apply_filter, chord_lengths, fit_ellipse, segment, segment_grains, BandConfig, ChordAxis, FilterConfig, Grain,
};
use microcal::lattice::{
    acceptance_probability, run_grain_growth_observed, run_weld, weld_base_metal, BaseMetal, GrainGrowthParams,
    HazProfile, Microstructure, MobilityModel, Neighborhood, PoolShape, WeldParams,
};
use microcal::optimizer::{
    best_so_far, replay, run_dispatcher, BatchPolicy, Bounds, CompletionOrder, DispatchEvent, Dispatcher, Evaluation,
    IncumbentMode, OptimizerConfig, Trial,
};
use microcal::seeding::rng_from_seed;
use microcal::surrogate::{lml_with_gradient, FitOptions, GpModel, Hyperparams};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Trial logs produced while checking the criteria, for the trace check.
static LOGS: Mutex<Vec<(String, Vec<Trial>)>> = Mutex::new(Vec::new());

fn record_log(name: String, trials: &[Trial]) {
    LOGS.lock().unwrap().push((name, trials.to_vec()));
}

fn grain_growth_config(master_seed: u64) -> CampaignConfig {
    let cfg = CampaignConfig::from_json(&format!(
        r#"{{
            "processModel": "grainGrowth",
            "parameterSpace": [{{"name": "kbts", "lower": 0.25, "upper": 0.95}}],
            "fixedParams": {{"width": 256, "length": 256, "steps": 50, "numSpins": 2000}},
            "descriptors": [4],
            "filter": {{"enabled": false}},
            "batchPolicy": {{"batch1": 3, "batch2": 1, "batch3": 0}},
            "initialPoints": [[0.45], [0.25], [0.95]],
            "maxTrials": 50,
            "masterSeed": {master_seed},
            "target": {{"params": [0.70]}},
            "optimizer": {{"completion": "trialId"}}
        }}"#
    ))
    .expect("valid config");
    cfg
}

// 1. Grain-growth inverse recovery.
fn recovery() -> Outcome {
    let mut hits = 0;
    let mut details = Vec::new();
    for master in [1u64, 2, 3] {
        let cfg = grain_growth_config(master);
        let target = prepare_target(&cfg).map_err(|e| e.to_string())?;
        let report = run_campaign(&cfg, &target, &RunOptions::default()).map_err(|e| e.to_string())?;
        let completed = report.trials.iter().filter(|t| t.is_completed()).count();
        check(completed <= 50, || format!("seed {master}: {completed} completed trials"))?;
        let best = report.best.as_ref().ok_or("no best trial")?;
        let k = best.x[0];
        let ok = (k - 0.70).abs() <= 0.05;
        hits += ok as usize;
        details.push(format!("seed {master}: kbts={k:.4} ({completed} trials)"));
        record_log(format!("grain-growth seed {master}"), &report.trials);
    }
    let summary = format!("{hits}/3 within 0.05 of 0.70 [{}]", details.join("; "));
    if hits >= 2 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

// 2. Noise-floor separation.
fn noise_separation() -> Outcome {
    let cfg = grain_growth_config(1);
    let target = prepare_target(&cfg).map_err(|e| e.to_string())?;
    let seeds = noise_seeds(&cfg, 10);
    let mean_at = |k: f64| -> Result<f64, String> {
        let mut s = 0.0;
        for &seed in &seeds {
            s += evaluate_candidate(&[k], seed, &cfg, &target).map_err(|e| e.to_string())?.y_scalar;
        }
        Ok(s / seeds.len() as f64)
    };
    let rep = mean_at(0.70)?;
    let off = mean_at(0.25)?;
    let msg = format!("replicate mean {rep:.4e}, off-target mean {off:.4e}, ratio {:.1}", off / rep);
    if rep > 0.0 && off >= 3.0 * rep {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn gaussian_density(mean: f64, grid: &[f64]) -> Density {
    let values = grid
        .iter()
        .map(|x| (-(x - mean).powi(2) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt())
        .collect();
    Density::from_values(grid.to_vec(), values, 1.0).expect("valid density")
}

// 3. KL correctness.
fn kl_correctness() -> Outcome {
    let grid: Vec<f64> = (0..512).map(|i| -10.0 + 21.0 * i as f64 / 511.0).collect();
    let p = gaussian_density(0.0, &grid);
    let q = gaussian_density(1.0, &grid);
    let kl = kl_divergence(&p, &q).map_err(|e| e.to_string())?;
    check(((kl - 0.5) / 0.5).abs() < 0.01, || format!("Gaussian KL {kl}"))?;

    let (pd, qd): ([f64; 2], [f64; 2]) = ([0.5, 0.5], [0.25, 0.75]);
    let oracle: f64 = pd.iter().zip(&qd).map(|(a, b)| a * (a / b).ln()).sum();
    let kd = kl_divergence_discrete(&pd, &qd).map_err(|e| e.to_string())?;
    check((kd - oracle).abs() < 1e-6, || format!("discrete KL {kd} vs summation {oracle}"))?;
    check(format!("{oracle:.5}") == "0.14384", || format!("summation oracle {oracle}"))?;

    let self_kl = kl_divergence(&p, &p).map_err(|e| e.to_string())?;
    let self_kd = kl_divergence_discrete(&pd, &pd).map_err(|e| e.to_string())?;
    check(self_kl == 0.0 && self_kd == 0.0, || format!("kl(p,p) = {self_kl}, {self_kd}"))?;
    Ok(format!("N(0,1)||N(1,1) = {kl:.6}; two-bin = {kd:.8}; kl(p,p) = 0"))
}

/// Component id of every site by breadth-first flood fill, canonicalized to
/// the smallest site index in the component.
fn flood_fill_components(ms: &Microstructure) -> Vec<usize> {
    let (w, l) = (ms.width(), ms.length());
    let mut comp = vec![usize::MAX; w * l];
    for start in 0..w * l {
        if comp[start] != usize::MAX {
            continue;
        }
        let label = ms.spins()[start];
        let mut queue = VecDeque::from([start]);
        comp[start] = start;
        while let Some(i) = queue.pop_front() {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= l as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if comp[j] == usize::MAX && ms.spins()[j] == label {
                    comp[j] = start;
                    queue.push_back(j);
                }
            }
        }
    }
    comp
}

fn desk_weld(seed: u64) -> WeldParams {
    WeldParams {
        width: 512,
        length: 256,
        velocity: 15.0,
        haz: 60.0,
        pool_width: 80.0,
        pool_shape: PoolShape::Teardrop,
        kbts: 0.5,
        seed,
        haz_profile: HazProfile::Linear,
        base_metal: BaseMetal::default(),
        neighborhood: Neighborhood::VonNeumann,
    }
}

// 4. Descriptor oracles.
fn descriptor_oracles() -> Outcome {
    let mut rng = rng_from_seed(0xd35c);
    for case in 0..100 {
        let labels = 2 + case % 4;
        let spins = (0..32 * 32).map(|_| rng.random_range(0..labels as u32)).collect();
        let ms = Microstructure::new(32, 32, spins).map_err(|e| e.to_string())?;
        let seg = segment(&ms);
        let oracle = flood_fill_components(&ms);
        // same partition: sites share a grain iff they share a flood-fill component
        let mut rep = vec![usize::MAX; seg.grains.len()];
        for (i, &g) in seg.grain_of.iter().enumerate() {
            if rep[g as usize] == usize::MAX {
                rep[g as usize] = oracle[i];
            }
            check(rep[g as usize] == oracle[i], || format!("labeling {case}: site {i} differs"))?;
        }
        let distinct: std::collections::HashSet<_> = oracle.iter().collect();
        check(distinct.len() == seg.grains.len(), || format!("labeling {case}: grain count"))?;

        for y in 0..32 {
            let row = Microstructure::from_rows(&[ms.row(y).to_vec()]).unwrap();
            let s: f64 = chord_lengths(&row, ChordAxis::X).samples.iter().sum();
            check(s == 32.0, || format!("labeling {case}: row {y} chords sum to {s}"))?;
        }
        let t = ms.transpose();
        for x in 0..32 {
            let col = Microstructure::from_rows(&[t.row(x).to_vec()]).unwrap();
            let s: f64 = chord_lengths(&col, ChordAxis::X).samples.iter().sum();
            check(s == 32.0, || format!("labeling {case}: column {x} chords sum to {s}"))?;
        }
    }

    let rect = Grain { label: 1, sites: (0..2).flat_map(|y| (0..4).map(move |x| (x + 10, y + 7))).collect() };
    let e = fit_ellipse(&rect).map_err(|e| e.to_string())?;
    let s3 = 3f64.sqrt();
    check(
        (e.a - 4.0 / s3).abs() < 1e-9 && (e.b - 2.0 / s3).abs() < 1e-9 && e.theta.abs() < 1e-9,
        || format!("4x2 ellipse = ({}, {}, {})", e.a, e.b, e.theta),
    )?;

    let weld = run_weld(&desk_weld(11)).map_err(|e| e.to_string())?;
    let grains = segment_grains(&weld);
    let mut counts = Vec::new();
    let mut prev: Option<Vec<Grain>> = None;
    for t in [0.0, 50.0, 100.0, 150.0, 200.0, 250.0] {
        let f = FilterConfig::threshold(t);
        let once = apply_filter(grains.clone(), &f);
        let twice = apply_filter(once.clone(), &f);
        check(once == twice, || format!("filter at {t} is not idempotent"))?;
        if let Some(p) = &prev {
            check(once.iter().all(|g| p.contains(g)), || format!("filter at {t} keeps a grain rejected below it"))?;
        }
        counts.push(once.len());
        prev = Some(once);
    }
    check(counts.windows(2).all(|w| w[1] <= w[0]), || format!("filtered counts {counts:?}"))?;
    Ok(format!("100 labelings match flood fill; chord sums exact; 4x2 ellipse exact; filtered counts {counts:?}"))
}

// 5. Potts invariants.
fn potts_invariants() -> Outcome {
    let params = GrainGrowthParams {
        width: 256,
        length: 256,
        num_spins: 2000,
        kbts: 0.0,
        steps: 50,
        seed: 5,
        mobility: MobilityModel::constant(),
        neighborhood: Neighborhood::VonNeumann,
    };
    let init = microcal::lattice::init_microstructure(256, 256, 2000, 5).map_err(|e| e.to_string())?;
    let mut energy = init.unlike_bonds(Neighborhood::VonNeumann) as i64;
    let start_energy = energy;
    let mut flips = 0u64;
    let mut violation: Option<String> = None;
    let ms = run_grain_growth_observed(&params, |ms, rec| {
        if rec.delta_e > 0 && violation.is_none() {
            violation = Some(format!("flip {flips} raised the energy by {}", rec.delta_e));
        }
        energy += rec.delta_e as i64;
        flips += 1;
        if flips % 200_000 == 0 {
            let full = ms.unlike_bonds(Neighborhood::VonNeumann) as i64;
            if full != energy && violation.is_none() {
                violation = Some(format!("bookkeeping drift after {flips} flips: {energy} vs {full}"));
            }
        }
    })
    .map_err(|e| e.to_string())?;
    if let Some(v) = violation {
        return Err(v);
    }
    let final_energy = ms.unlike_bonds(Neighborhood::VonNeumann) as i64;
    check(final_energy == energy, || format!("final energy {final_energy} vs bookkeeping {energy}"))?;

    let mut rng = rng_from_seed(0xacce);
    for _ in 0..1_000_000 {
        let de = rng.random_range(-16.0..16.0);
        let kbts = if rng.random::<f64>() < 0.1 { 0.0 } else { rng.random_range(0.0..10.0) };
        let m = rng.random_range(f64::MIN_POSITIVE..=1.0);
        let p = acceptance_probability(de, kbts, m).map_err(|e| e.to_string())?;
        check((0.0..=1.0).contains(&p), || format!("P({de}, {kbts}, {m}) = {p}"))?;
    }

    let mut weld = desk_weld(3);
    weld.haz = 0.0;
    let base = weld_base_metal(&weld).map_err(|e| e.to_string())?;
    let welded = run_weld(&weld).map_err(|e| e.to_string())?;
    let (cy, r) = (weld.axis_y(), 0.5 * weld.pool_width);
    let mut frozen = 0usize;
    for y in 0..weld.length {
        if (y as f64 - cy).abs() > r + 0.5 {
            check(welded.row(y) == base.row(y), || format!("frozen row {y} changed"))?;
            frozen += weld.width;
        }
    }
    Ok(format!(
        "energy {start_energy} -> {final_energy} over {flips} flips, never rising; 1e6 acceptance draws in [0,1]; {frozen} frozen sites unchanged"
    ))
}

// 6. GP numerics (the campaign-trace part is checked after every campaign has run).
fn gp_numerics() -> Outcome {
    let mut rng = rng_from_seed(0x6e);
    let mut worst: f64 = 0.0;
    for d in [1usize, 3] {
        for _ in 0..5 {
            let n = 10;
            let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect();
            let z: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
            let h = Hyperparams::new(
                (0..d).map(|_| rng.random_range(0.1..1.5)).collect(),
                rng.random_range(0.3..3.0),
                rng.random_range(1e-4..0.2),
            )
            .map_err(|e| e.to_string())?;
            let (_, grad) = lml_with_gradient(&x, &z, &h).map_err(|e| e.to_string())?;
            let theta = h.to_log();
            let step = 1e-5;
            for k in 0..theta.len() {
                let (mut tp, mut tm) = (theta.clone(), theta.clone());
                tp[k] += step;
                tm[k] -= step;
                let fp = lml_with_gradient(&x, &z, &Hyperparams::from_log(&tp)).map_err(|e| e.to_string())?.0;
                let fm = lml_with_gradient(&x, &z, &Hyperparams::from_log(&tm)).map_err(|e| e.to_string())?.0;
                let fd = (fp - fm) / (2.0 * step);
                worst = worst.max((fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-3));
            }
        }
    }

    let x: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64 / 11.0]).collect();
    let y: Vec<f64> = x.iter().map(|v| (6.0 * v[0]).sin() + 0.3 * v[0]).collect();
    let model = GpModel::fit(&x, &y, &FitOptions::fixed(Hyperparams::new(vec![0.2], 1.0, 1e-8).unwrap()))
        .map_err(|e| e.to_string())?;
    let max_dev = x.iter().zip(&y).map(|(xi, yi)| (model.predict(xi).0 - yi).abs()).fold(0.0, f64::max);
    // The residual of an exact solve is sigma_n^2 (K + sigma_n^2 I)^-1 y, which is not bounded by
    // sigma_n^2 alone; comparing against it separates arithmetic error from the model itself.
    let oracle = exact_interpolation_residuals(&x, &y, 0.2, 1e-8 + model.jitter());
    let oracle_gap = x
        .iter()
        .zip(&y)
        .zip(&oracle)
        .map(|((xi, yi), r)| ((yi - model.predict(xi).0) - r).abs())
        .fold(0.0, f64::max);
    let exact = oracle.iter().fold(0.0_f64, |m, r| m.max(r.abs()));

    let summary = format!(
        "worst gradient error {worst:.2e}; interpolation error {max_dev:.3e} (exact-solve residual {exact:.3e}, model vs exact {oracle_gap:.1e})"
    );
    check(worst < 1e-4 && max_dev < 1e-6 && oracle_gap < 1e-8, || summary.clone())?;
    Ok(summary)
}

/// Residuals `y - mean` at the training inputs of a standardized 1-D SE model,
/// computed by Gaussian elimination with partial pivoting on `K + noise I`.
fn exact_interpolation_residuals(x: &[Vec<f64>], y: &[f64], ell: f64, noise: f64) -> Vec<f64> {
    let n = y.len();
    let mean = y.iter().sum::<f64>() / n as f64;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n)
                .map(|j| (-(x[i][0] - x[j][0]).powi(2) / (2.0 * ell * ell)).exp() + if i == j { noise } else { 0.0 })
                .collect();
            row.push((y[i] - mean) / sd);
            row
        })
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..=n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    let mut alpha = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * alpha[k]).sum();
        alpha[r] = (a[r][n] - s) / a[r][r];
    }
    alpha.iter().map(|al| noise * al * sd).collect()
}

fn trace_check() -> Outcome {
    let logs = LOGS.lock().unwrap();
    check(!logs.is_empty(), || "no campaign logs were produced".into())?;
    for (name, trials) in logs.iter() {
        let trace = best_so_far(trials);
        check(trace.windows(2).all(|w| !(w[1] > w[0])), || format!("{name}: best-so-far trace increases"))?;
    }
    Ok(format!("{} campaign logs with non-increasing best-so-far traces", logs.len()))
}

// 7. Scalarization identities.
fn scalarization_identities() -> Outcome {
    let mut rng = rng_from_seed(0x5ca1);
    let rho = 0.05;
    for _ in 0..1000 {
        let s = rng.random_range(1..=11);
        let y: Vec<f64> = (0..s).map(|_| rng.random_range(0.0..5.0)).collect();
        let cfg = |method| ScalarizationConfig { method, weights: None, ideal: None, rho };
        let ws = scalarize(&y, &cfg(ScalarizationMethod::WeightedSum)).map_err(|e| e.to_string())?;
        let ch = scalarize(&y, &cfg(ScalarizationMethod::Chebyshev)).map_err(|e| e.to_string())?;
        let ac = scalarize(&y, &cfg(ScalarizationMethod::AugmentedChebyshev)).map_err(|e| e.to_string())?;
        let sum: f64 = y.iter().sum();
        let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        check((ws - sum).abs() < 1e-12, || format!("weighted sum {ws} vs {sum}"))?;
        check((ch - max).abs() < 1e-12, || format!("chebyshev {ch} vs {max}"))?;
        check((ac - (ch + rho * ws)).abs() < 1e-12, || format!("augmented {ac} vs {}", ch + rho * ws))?;
    }
    Ok("1000 random vectors satisfy all three identities".into())
}

const QUAD_MIN: f64 = 0.37;

fn quadratic_config(completion: CompletionOrder) -> OptimizerConfig {
    let mut cfg = OptimizerConfig::new(BatchPolicy::new(3, 1, 0).unwrap(), 40);
    cfg.incumbent = IncumbentMode::PosteriorMean;
    cfg.completion = completion;
    cfg
}

fn noisy_quadratic(x: &[f64], seed: u64) -> Result<Evaluation, String> {
    let mut rng = rng_from_seed(seed);
    // Box-Muller keeps the noise reproducible from the trial seed
    let (u1, u2): (f64, f64) = (rng.random_range(f64::EPSILON..1.0), rng.random());
    let noise = 0.01 * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    let y = (x[0] - QUAD_MIN).powi(2) + noise;
    Ok(Evaluation { y_vector: vec![y], y_scalar: y })
}

// 8. Dispatcher contract.
fn dispatcher_contract() -> Outcome {
    let bounds = Bounds::new(vec![0.0], vec![1.0]).unwrap();
    let initial = vec![vec![0.1], vec![0.5], vec![0.9]];

    // instrumented concurrency
    let active = AtomicUsize::new(0);
    let peak = AtomicUsize::new(0);
    let mut reported_peak = 0;
    let mut d = Dispatcher::new(quadratic_config(CompletionOrder::Arrival), bounds.clone(), initial.clone(), 99)
        .map_err(|e| e.to_string())?;
    let evaluator = |x: &[f64], seed: u64| {
        let now = active.fetch_add(1, Ordering::SeqCst) + 1;
        peak.fetch_max(now, Ordering::SeqCst);
        std::thread::sleep(std::time::Duration::from_millis(2 + seed % 5));
        let r = noisy_quadratic(x, seed);
        active.fetch_sub(1, Ordering::SeqCst);
        r
    };
    run_dispatcher(
        &mut d,
        &evaluator,
        |e| {
            if let DispatchEvent::Launched { in_flight, .. } = e {
                reported_peak = reported_peak.max(in_flight);
            }
        },
        |_| {},
    )
    .map_err(|e| e.to_string())?;
    let peak = peak.load(Ordering::SeqCst);
    check(peak <= 4 && reported_peak <= 4, || format!("in-flight peaked at {peak} (reported {reported_peak})"))?;
    check(d.trials().len() == 40, || format!("{} trials", d.trials().len()))?;
    record_log("instrumented quadratic".into(), d.trials());

    // replay of the arrival-ordered log
    let proposals =
        replay(quadratic_config(CompletionOrder::Arrival), bounds.clone(), initial.clone(), 99, d.trials())
            .map_err(|e| e.to_string())?;
    let mut by_id: Vec<&Trial> = d.trials().iter().collect();
    by_id.sort_by_key(|t| t.trial_id);
    check(proposals.len() == by_id.len(), || format!("replay gave {} proposals", proposals.len()))?;
    for (p, t) in proposals.iter().zip(&by_id) {
        let same = p.trial_id == t.trial_id
            && p.acquisition == t.acquisition
            && p.seed == t.seed
            && p.x.iter().zip(&t.x).all(|(a, b)| a.to_bits() == b.to_bits());
        check(same, || format!("replay diverges at trial {}", t.trial_id))?;
    }
    // replay also survives a JSON round trip of the log
    let text: String = d.trials().iter().map(|t| serde_json::to_string(t).unwrap() + "\n").collect();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("trials.jsonl");
    std::fs::write(&path, text).map_err(|e| e.to_string())?;
    let reread = read_trial_log(&path).map_err(|e| e.to_string())?;
    let again = replay(quadratic_config(CompletionOrder::Arrival), bounds.clone(), initial.clone(), 99, &reread)
        .map_err(|e| e.to_string())?;
    check(
        again.iter().zip(&proposals).all(|(a, b)| a.x[0].to_bits() == b.x[0].to_bits()),
        || "replay from the serialized log diverges".into(),
    )?;

    // recovery of the minimizer
    let mut hits = 0;
    let mut found = Vec::new();
    for seed in 0..10u64 {
        let mut d = Dispatcher::new(quadratic_config(CompletionOrder::TrialId), bounds.clone(), initial.clone(), 1000 + seed)
            .map_err(|e| e.to_string())?;
        run_dispatcher(&mut d, &noisy_quadratic, |_| {}, |_| {}).map_err(|e| e.to_string())?;
        let best = d
            .trials()
            .iter()
            .filter(|t| t.is_completed())
            .min_by(|a, b| a.y_scalar.unwrap().total_cmp(&b.y_scalar.unwrap()))
            .ok_or("no completed trial")?;
        hits += ((best.x[0] - QUAD_MIN).abs() <= 0.05) as usize;
        found.push(format!("{:.3}", best.x[0]));
        record_log(format!("quadratic seed {seed}"), d.trials());
    }
    let msg = format!(
        "peak in-flight {peak}; replay bit-exact over {} proposals; best observed within 0.05 in {hits}/10 seeds {found:?}",
        proposals.len()
    );
    if hits >= 9 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// 9. Weld qualitative signature.
fn weld_signature() -> Outcome {
    let bands = BandConfig { band_width: 20, band_spacing: 8, num_bands: 5, axis_y: None };
    let mut details = Vec::new();
    for seed in [1u64, 2, 3] {
        let p = desk_weld(seed);
        let ms = run_weld(&p).map_err(|e| e.to_string())?;
        let rows = bands.rows(ms.length(), 0).map_err(|e| e.to_string())?;
        let (lo, hi) = (rows[0], *rows.last().unwrap());

        let mut x_chords = Vec::new();
        for &y in &rows {
            let row = Microstructure::from_rows(&[ms.row(y).to_vec()]).unwrap();
            x_chords.extend(chord_lengths(&row, ChordAxis::X).samples);
        }
        // column runs that overlap the band rows
        let mut y_chords = Vec::new();
        for x in 0..ms.width() {
            let mut start = 0;
            for y in 1..=ms.length() {
                if y == ms.length() || ms.get(x, y) != ms.get(x, start) {
                    if start <= hi && y - 1 >= lo {
                        y_chords.push((y - start) as f64);
                    }
                    start = y;
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (mx, my) = (mean(&x_chords), mean(&y_chords));

        let seg = segment_grains(&ms);
        let cy = p.axis_y();
        let centroid_offset = |g: &Grain| (g.sites.iter().map(|s| s.1 as f64).sum::<f64>() / g.area() as f64 - cy).abs();
        let track: Vec<f64> = seg
            .iter()
            .filter(|g| FilterConfig::default().passes(g.area()) && centroid_offset(g) <= 0.5 * p.pool_width)
            .map(|g| g.area() as f64)
            .collect();
        let base: Vec<f64> = seg
            .iter()
            .filter(|g| centroid_offset(g) > 0.5 * p.pool_width + p.haz)
            .map(|g| g.area() as f64)
            .collect();
        check(!track.is_empty() && !base.is_empty(), || format!("seed {seed}: empty grain population"))?;
        let (ta, ba) = (mean(&track), mean(&base));
        details.push(format!("seed {seed}: x/y chord {mx:.2}/{my:.2}, track/base area {ta:.1}/{ba:.1}"));
        check(mx > my && ta > ba, || details.join("; "))?;
    }
    Ok(details.join("; "))
}

// 10. Correlation analysis.
fn correlation_analysis() -> Outcome {
    let parse = |text: &str| -> Vec<Vec<f64>> {
        text.lines().skip(1).map(|l| l.split(',').skip(1).map(|v| v.parse::<f64>().unwrap_or(f64::NAN)).collect()).collect()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;

    // a multi-objective campaign with a handful of trials
    let cfg = CampaignConfig::from_json(
        r#"{
            "processModel": "grainGrowth",
            "parameterSpace": [{"name": "kbts", "lower": 0.25, "upper": 0.95}],
            "fixedParams": {"width": 96, "length": 96, "steps": 20, "numSpins": 600},
            "descriptors": [1, 2, 4, 5, 6],
            "filter": {"enabled": false},
            "batchPolicy": {"batch1": 3, "batch2": 1},
            "initialPoints": [[0.45], [0.25], [0.95]],
            "maxTrials": 8,
            "masterSeed": 5,
            "target": {"params": [0.7]}
        }"#,
    )
    .map_err(|e| e.to_string())?;
    let target = prepare_target(&cfg).map_err(|e| e.to_string())?;
    let out = dir.path().join("campaign");
    let report = run_campaign(&cfg, &target, &RunOptions { out_dir: Some(out.clone()), ..Default::default() })
        .map_err(|e| e.to_string())?;
    record_log("multi-objective campaign".into(), &report.trials);
    let mut matrices = vec![("campaign", std::fs::read_to_string(out.join("correlations.csv")).map_err(|e| e.to_string())?)];
    for (name, trials) in LOGS.lock().unwrap().iter().filter(|(_, t)| t.iter().filter(|t| t.is_completed()).count() >= 3) {
        let sub = dir.path().join(name.replace(' ', "_"));
        write_reports(trials, None, &sub).map_err(|e| e.to_string())?;
        matrices.push(("log", std::fs::read_to_string(sub.join("correlations.csv")).map_err(|e| e.to_string())?));
    }
    for (name, text) in &matrices {
        let m = parse(text);
        for i in 0..m.len() {
            check((m[i][i] - 1.0).abs() < 1e-12, || format!("{name}: diagonal {i} = {}", m[i][i]))?;
            for j in 0..m.len() {
                let same = m[i][j] == m[j][i] || (m[i][j].is_nan() && m[j][i].is_nan());
                check(same, || format!("{name}: asymmetric at ({i},{j})"))?;
            }
        }
    }

    // synthetic log with y2 = 2 y1
    let mut rng = rng_from_seed(0xc0);
    let mut lines = String::new();
    for id in 0..20u64 {
        let y1: f64 = rng.random_range(0.0..1.0);
        let y3: f64 = rng.random_range(0.0..1.0);
        let y = [y1, 2.0 * y1, y3];
        lines += &format!(
            "{{\"trialId\":{id},\"batch\":1,\"acquisition\":\"initial\",\"x\":[{}],\"seed\":{id},\"yVector\":[{},{},{}],\"yScalar\":{},\"status\":\"completed\",\"startTime\":0,\"endTime\":0}}\n",
            id as f64 / 20.0,
            y[0],
            y[1],
            y[2],
            y.iter().sum::<f64>()
        );
    }
    let path = dir.path().join("synthetic.jsonl");
    std::fs::write(&path, lines).map_err(|e| e.to_string())?;
    let trials = read_trial_log(&path).map_err(|e| e.to_string())?;
    let m = trial_correlations(&trials, None).map_err(|e| e.to_string())?;
    let r12 = m.r2[0][1].ok_or("undefined R^2(1,2)")?;
    check((r12 - 1.0).abs() < 1e-9, || format!("R^2(y1, 2 y1) = {r12}"))?;
    let rows: Vec<Vec<f64>> = trials.iter().map(|t| t.y_vector.clone()).collect();
    let direct = objective_correlations(&["a".into(), "b".into(), "c".into()], &rows).map_err(|e| e.to_string())?;
    check(direct.r2 == m.r2, || "log-derived and direct matrices differ".into())?;
    Ok(format!("{} matrices symmetric with unit diagonal; synthetic R^2 = {r12:.12}", matrices.len()))
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("1 grain-growth inverse recovery", recovery),
        ("2 noise-floor separation", noise_separation),
        ("3 KL correctness", kl_correctness),
        ("4 descriptor oracles", descriptor_oracles),
        ("5 Potts invariants", potts_invariants),
        ("6 GP numerics", gp_numerics),
        ("7 scalarization identities", scalarization_identities),
        ("8 dispatcher contract", dispatcher_contract),
        ("9 weld qualitative signature", weld_signature),
        ("10 correlation analysis", correlation_analysis),
    ];
    let mut failed = 0;
    let mut gp_outcome = None;
    for (name, f) in &criteria {
        let clock = Instant::now();
        let outcome = f();
        let secs = clock.elapsed().as_secs_f64();
        if name.starts_with("6 ") {
            // the trace part needs every campaign log, so report after the rest
            gp_outcome = Some((outcome, secs));
            continue;
        }
        report(name, &outcome, secs, &mut failed);
    }
    let (gp, secs) = gp_outcome.expect("criterion 6 ran");
    let trace = trace_check();
    let combined = match (gp, trace) {
        (Ok(a), Ok(b)) => Ok(format!("{a}; {b}")),
        (Err(a), Ok(b)) | (Ok(b), Err(a)) => Err(format!("{a}; {b}")),
        (Err(a), Err(b)) => Err(format!("{a}; {b}")),
    };
    report("6 GP numerics", &combined, secs, &mut failed);
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn report(name: &str, outcome: &Outcome, secs: f64, failed: &mut usize) {
    match outcome {
        Ok(msg) => println!("PASS  criterion {name} ({secs:.1}s): {msg}"),
        Err(msg) => {
            *failed += 1;
            println!("FAIL  criterion {name} ({secs:.1}s): {msg}");
        }
    }
}
