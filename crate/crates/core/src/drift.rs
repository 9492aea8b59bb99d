//! Drift-function recurrence and the end-to-end experiment harness:
//! contraction tables for the drift inequality, the backward bootstrap of
//! granule concentration, the Diophantine snap onto `Z_Q`, and the full
//! pipeline from a large Fourier coefficient to a certified rational
//! approximation of the starting point.

use crate::algebra::{AlgebraDecomposition, GeneratorSystem};
use crate::error::{CoreError, Result};
use crate::exact::{act_on_torus, TorusPoint};
use crate::quasigeom::{self, QuasiNorm};
use crate::rng;
use crate::spectrum::{self, WalkGranulateOptions};
use crate::walk::{self, WalkEnsemble};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

// ---------------------------------------------------------------------------
// Drift function
// ---------------------------------------------------------------------------

/// Parameters of the drift function `φ_Q(y) = d̃(y, Z_Q)^{−α}`, capped to
/// keep estimators finite.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DriftConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub q: u64,
    pub cap: f64,
}

impl DriftConfig {
    pub fn new(alpha: f64, lambda: f64, q: u64) -> Self {
        // default cap = ρ_min^{−α} at ρ_min = 10⁻¹²
        DriftConfig {
            alpha,
            lambda,
            q,
            cap: 1e-12f64.powf(-alpha),
        }
    }
}

/// `min(cap, d̃^{−α})`, with zero distance mapped to the cap.
pub fn phi_q_value(cfg: &DriftConfig, dist: f64) -> f64 {
    if dist <= 0.0 {
        return cfg.cap;
    }
    dist.powf(-cfg.alpha).min(cfg.cap)
}

/// Drift value at an exact torus point.
pub fn phi_q(cfg: &DriftConfig, qn: &QuasiNorm, y: &TorusPoint) -> f64 {
    let w = quasigeom::dist_to_zq(qn, y, &[], cfg.q);
    phi_q_value(cfg, w.distance)
}

// ---------------------------------------------------------------------------
// Contraction tables
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct ContractionRow {
    pub y: Vec<f64>,
    pub phi_y: f64,
    /// median-of-means estimate of `∫ φ_Q(gy) dμ^{*n}(g)`
    pub expected_phi: f64,
    /// fraction of samples that hit the cap
    pub capped_fraction: f64,
    pub quantiles: [f64; 5],
}

#[derive(Clone, Debug, Serialize)]
pub struct ContractionTable {
    pub config: DriftConfig,
    pub n: u32,
    pub samples: usize,
    pub rows: Vec<ContractionRow>,
    /// smallest `C` so that `E[φ_Q(gy)] ≤ e^{−λαn}·φ_Q(y) + Q^C` across
    /// the grid (`None` when the contraction term alone suffices)
    pub fitted_c: Option<f64>,
    pub holds_at_fitted_c: bool,
}

const MEDIAN_OF_MEANS_BLOCKS: usize = 16;

fn median_of_means(values: &[f64]) -> f64 {
    let blocks = MEDIAN_OF_MEANS_BLOCKS.min(values.len().max(1));
    let mut means: Vec<f64> = (0..blocks)
        .map(|b| {
            let chunk: Vec<f64> = values
                .iter()
                .skip(b)
                .step_by(blocks)
                .copied()
                .collect();
            chunk.iter().sum::<f64>() / chunk.len().max(1) as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let mid = means.len() / 2;
    if means.len() % 2 == 1 {
        means[mid]
    } else {
        (means[mid - 1] + means[mid]) / 2.0
    }
}

fn quantiles(values: &mut [f64]) -> [f64; 5] {
    values.sort_by(f64::total_cmp);
    let pick = |q: f64| values[((values.len() - 1) as f64 * q).round() as usize];
    [pick(0.0), pick(0.25), pick(0.5), pick(0.75), pick(1.0)]
}

/// Median-of-means estimate of the drift expectation at every grid point,
/// and the smallest constant closing the drift inequality across the grid.
pub fn margulis_check(
    sys: &GeneratorSystem,
    qn: &QuasiNorm,
    cfg: &DriftConfig,
    y_grid: &[TorusPoint],
    n: u32,
    n_samples: usize,
    seed: u64,
) -> ContractionTable {
    let rows: Vec<ContractionRow> = y_grid
        .iter()
        .enumerate()
        .map(|(yi, y)| {
            let phi_y = phi_q(cfg, qn, y);
            let mut values: Vec<f64> = (0..n_samples)
                .into_par_iter()
                .map(|p| {
                    let mut rng = rng::stream(seed ^ (yi as u64) << 32, p as u64);
                    let mut x = y.clone();
                    for _ in 0..n {
                        let u: f64 = rng.gen();
                        let mut acc = 0.0;
                        let mut idx = sys.generators().len() - 1;
                        for (i, w) in sys.weights_f64().iter().enumerate() {
                            acc += w;
                            if u < acc {
                                idx = i;
                                break;
                            }
                        }
                        x = act_on_torus(&sys.generators()[idx], &x);
                    }
                    phi_q(cfg, qn, &x)
                })
                .collect();
            let expected_phi = median_of_means(&values);
            let capped = values.iter().filter(|&&v| v >= cfg.cap).count();
            ContractionRow {
                y: y.to_f64(),
                phi_y,
                expected_phi,
                capped_fraction: capped as f64 / values.len().max(1) as f64,
                quantiles: quantiles(&mut values),
            }
        })
        .collect();
    let decay = (-cfg.lambda * cfg.alpha * f64::from(n)).exp();
    let worst_gap = rows
        .iter()
        .map(|r| r.expected_phi - decay * r.phi_y)
        .fold(f64::NEG_INFINITY, f64::max);
    let fitted_c = if worst_gap > 0.0 {
        Some(worst_gap.ln() / (cfg.q as f64).ln())
    } else {
        None
    };
    let holds = match fitted_c {
        Some(c) => rows
            .iter()
            .all(|r| r.expected_phi <= decay * r.phi_y + (cfg.q as f64).powf(c) + 1e-9),
        None => true,
    };
    ContractionTable {
        config: *cfg,
        n,
        samples: n_samples,
        rows,
        fitted_c,
        holds_at_fitted_c: holds,
    }
}

/// Deterministic grid of rational test points for contraction tables.
pub fn default_y_grid(dim: usize, count: usize) -> Vec<TorusPoint> {
    (0..count)
        .map(|k| {
            let pairs: Vec<(i64, i64)> = (0..dim)
                .map(|j| {
                    let num = (2 * k * (j + 3) + 2 * j + 1) as i64;
                    let den = (4 * count) as i64;
                    (num % den, den)
                })
                .collect();
            TorusPoint::from_rational_pairs(&pairs)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Bootstrap step
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct BootstrapOutcome {
    pub centers: Vec<Vec<f64>>,
    pub r1: f64,
    pub rho1: f64,
    /// mass of the intersection that produced the new centers
    pub captured_mass: f64,
    pub tuple_found: bool,
    pub tuples_tried: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BootstrapOptions {
    pub tuple_budget: usize,
    pub probe_samples: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            tuple_budget: 10_000,
            probe_samples: 256,
            tolerance: 0.05,
            seed: 0,
        }
    }
}

fn min_qdist_to_set(qn: &QuasiNorm, p: &[f64], centers: &[Vec<f64>]) -> f64 {
    centers
        .iter()
        .map(|c| {
            let diff: Vec<f64> = p.iter().zip(c).map(|(a, b)| a - b).collect();
            quasigeom::qdist_torus_diff(qn, &diff)
        })
        .fold(f64::INFINITY, f64::min)
}

fn nearest_center(qn: &QuasiNorm, p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let diff: Vec<f64> = p.iter().zip(c).map(|(a, b)| a - b).collect();
        let d = quasigeom::qdist_torus_diff(qn, &diff);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// One backward-concentration step: search sampled `d`-tuples of `m`-step
/// products for a high-mass common intersection of pulled-back granule
/// neighborhoods, and shrink the separated set accordingly. Radii update by
/// `r₁ = e^{−m(1+ε)}r`, `ρ₁ = e^{−m(1−ε)}ρ`. When no tuple passes the
/// threshold within the budget, the best tuple found is still used and the
/// outcome is flagged.
pub fn bootstrap_step(
    sys: &GeneratorSystem,
    qn: &QuasiNorm,
    nu: &WalkEnsemble,
    centers: &[Vec<f64>],
    r: f64,
    rho: f64,
    m: u32,
    epsilon: f64,
    opts: &BootstrapOptions,
) -> Result<BootstrapOutcome> {
    let d = sys.dim();
    if (f64::from((d + 1) as u32) * f64::from(m)).exp() * rho >= r {
        return Err(CoreError::InvalidSystem(format!(
            "scale gap violated: e^{{(d+1)m}}·ρ = {:.3e} ≥ r = {:.3e}",
            (f64::from((d + 1) as u32) * f64::from(m)).exp() * rho,
            r
        )));
    }
    if m == 0 {
        return Ok(BootstrapOutcome {
            centers: centers.to_vec(),
            r1: r,
            rho1: rho,
            captured_mass: f64::NAN,
            tuple_found: true,
            tuples_tried: 0,
        });
    }
    let gens = sys.generators_f64();
    let weights = sys.weights_f64().to_vec();
    let atom_points: Vec<Vec<f64>> = nu.points_f64();
    let atom_weights: Vec<f64> = nu.weights_f64();
    let sample_word = |rng: &mut rand_chacha::ChaCha8Rng| -> crate::linalg::Mat {
        let mut w = crate::linalg::Mat::identity(d);
        for _ in 0..m {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut idx = weights.len() - 1;
            for (i, wt) in weights.iter().enumerate() {
                acc += wt;
                if u < acc {
                    idx = i;
                    break;
                }
            }
            w = gens[idx].matmul(&w);
        }
        w
    };
    // estimate (μ^{*m} * ν)(X^{(ρ)})
    let p_est: f64 = {
        let per_g: Vec<f64> = (0..opts.probe_samples)
            .into_par_iter()
            .map(|k| {
                let mut rng = rng::stream(opts.seed ^ 0x9e37, k as u64);
                let g = sample_word(&mut rng);
                atom_points
                    .iter()
                    .zip(&atom_weights)
                    .filter(|(p, _)| {
                        let gp = g.apply(p);
                        min_qdist_to_set(qn, &gp, centers) <= rho
                    })
                    .map(|(_, w)| w)
                    .sum()
            })
            .collect();
        per_g.iter().sum::<f64>() / per_g.len().max(1) as f64
    };
    let target = p_est.powi(d as i32) - opts.tolerance;
    // tuple search
    let mut best_mass = -1.0f64;
    let mut best_tuple: Option<Vec<crate::linalg::Mat>> = None;
    let mut tried = 0usize;
    let mut found = false;
    for t in 0..opts.tuple_budget {
        tried += 1;
        let mut rng = rng::stream(opts.seed ^ 0x7f3a, t as u64);
        let tuple: Vec<crate::linalg::Mat> = (0..d).map(|_| sample_word(&mut rng)).collect();
        let mass: f64 = atom_points
            .iter()
            .zip(&atom_weights)
            .filter(|(p, _)| {
                tuple.iter().all(|g| {
                    let gp = g.apply(p);
                    min_qdist_to_set(qn, &gp, centers) <= rho
                })
            })
            .map(|(_, w)| w)
            .sum();
        if mass > best_mass {
            best_mass = mass;
            best_tuple = Some(tuple);
        }
        if best_mass >= target && best_mass > 0.0 {
            found = true;
            break;
        }
    }
    let tuple = best_tuple.ok_or(CoreError::NoTupleFound)?;
    if best_mass <= 0.0 {
        return Err(CoreError::NoTupleFound);
    }
    let r1 = (-f64::from(m) * (1.0 + epsilon)).exp() * r;
    let rho1 = (-f64::from(m) * (1.0 - epsilon)).exp() * rho;
    // group intersection atoms by the granule their g₁-image falls into
    let g1 = &tuple[0];
    let mut groups: std::collections::BTreeMap<usize, (Vec<f64>, f64)> =
        std::collections::BTreeMap::new();
    for (p, w) in atom_points.iter().zip(&atom_weights) {
        let inside = tuple.iter().all(|g| {
            let gp = g.apply(p);
            min_qdist_to_set(qn, &gp, centers) <= rho
        });
        if !inside {
            continue;
        }
        let (ball, _) = nearest_center(qn, &g1.apply(p), centers);
        match groups.get_mut(&ball) {
            Some((rep, wt)) => {
                if *wt < *w {
                    *rep = p.clone();
                }
                *wt += w;
            }
            None => {
                groups.insert(ball, (p.clone(), *w));
            }
        }
    }
    // representatives, greedily enforcing r₁-separation (heaviest first)
    let mut reps: Vec<(Vec<f64>, f64)> = groups.into_values().collect();
    reps.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    let mut new_centers: Vec<Vec<f64>> = Vec::new();
    for (p, _) in &reps {
        if min_qdist_to_set(qn, p, &new_centers) > r1 {
            new_centers.push(p.clone());
        }
    }
    debug_assert!(new_centers.len() <= centers.len().max(1));
    Ok(BootstrapOutcome {
        centers: new_centers,
        r1,
        rho1,
        captured_mass: best_mass,
        tuple_found: found,
        tuples_tried: tried,
    })
}

// ---------------------------------------------------------------------------
// Diophantine snap
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct SnapOutcome {
    pub q: u64,
    pub numerators: Vec<i64>,
    pub distance: f64,
    pub threshold: f64,
    pub q_bound: u64,
    pub pass: bool,
}

/// Search denominators `q ≤ min(Q_max, ρ^{−β})` for an approximation with
/// `d̃(y, Z_q) ≤ ρ^{1−β}`.
pub fn diophantine_snap(
    qn: &QuasiNorm,
    y: &TorusPoint,
    sheet_w0: &[Vec<f64>],
    rho: f64,
    beta: f64,
    q_cap: u64,
) -> SnapOutcome {
    assert!(rho > 0.0 && rho < 1.0);
    let q_bound = rho.powf(-beta).floor().min(q_cap as f64).max(1.0) as u64;
    let witness = quasigeom::dist_to_zq(qn, y, sheet_w0, q_bound);
    let threshold = rho.powf(1.0 - beta);
    SnapOutcome {
        q: witness.q,
        numerators: witness.numerators,
        distance: witness.distance,
        threshold,
        q_bound,
        pass: witness.distance <= threshold,
    }
}

// ---------------------------------------------------------------------------
// End-to-end harness
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct E2EConfig {
    pub lambda: f64,
    pub tau: f64,
    pub beta: f64,
    pub epsilon: f64,
    /// bootstrap sweeps
    pub sweeps: usize,
    /// cap on the certified denominator bound `(‖a₀‖/t)^C`
    pub c_max: f64,
    pub samples: usize,
    pub seed: u64,
    pub word_budget: u64,
}

impl Default for E2EConfig {
    fn default() -> Self {
        E2EConfig {
            lambda: 0.5,
            tau: 0.1,
            beta: 0.2,
            epsilon: 0.1,
            sweeps: 2,
            c_max: 4.0,
            samples: 100_000,
            seed: 0,
            word_budget: 1 << 20,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct E2ERecord {
    pub a0: Vec<i64>,
    pub t: f64,
    pub n: u32,
    pub lambda: f64,
    pub coefficient: f64,
    pub sheet: usize,
    pub granules: usize,
    pub granule_mass: f64,
    pub bootstrap_sweeps: usize,
    pub final_rho: f64,
    pub q: u64,
    pub q_bound: f64,
    pub distance: f64,
    pub distance_bound: f64,
    pub fitted_c: f64,
    pub pass: bool,
}

/// Full pipeline: measure the Fourier hypothesis, detect granules, run the
/// bootstrap sweeps, snap to a rational point, and check the starting
/// point's distance to `Z_Q` against `e^{−λn}` with the denominator bound
/// `(‖a₀‖/t)^C`.
#[allow(clippy::too_many_arguments)]
pub fn theorem_e2e(
    sys: &GeneratorSystem,
    dec: &AlgebraDecomposition,
    qn: &QuasiNorm,
    x0: &TorusPoint,
    a0: &[i64],
    t: f64,
    n: u32,
    cfg: &E2EConfig,
) -> Result<E2ERecord> {
    if t > 1.0 {
        return Err(CoreError::HypothesisFailed {
            measured: 1.0,
            threshold: t,
        });
    }
    let gran_opts = WalkGranulateOptions {
        tau: cfg.tau,
        samples: cfg.samples,
        seed: cfg.seed,
        word_budget: cfg.word_budget,
    };
    let gran = spectrum::walk_granulate(sys, dec, qn, x0, a0, t, n, &gran_opts)?;
    let sheet = gran.sheet.unwrap_or(0);
    let coefficient = gran.coefficient.unwrap_or(f64::NAN);
    // bootstrap sweeps on ensembles at decreasing times
    let mut centers = gran.centers.clone();
    let mut r = gran.separation_radius.max(f64::MIN_POSITIVE);
    let mut rho = gran.neighborhood_radius.max(f64::MIN_POSITIVE);
    let mut time = n;
    let mut sweeps_done = 0usize;
    if n > 0 {
        let d = sys.dim() as u32;
        // largest m respecting the scale gap e^{(d+1)m}ρ < r
        let mut m = ((r / rho).ln() / f64::from(d + 1)).floor().max(0.0) as u32;
        for _ in 0..cfg.sweeps {
            if m == 0 || time <= m {
                break;
            }
            let nu = ensemble_at(sys, x0, time - m, &gran_opts)?;
            let nu_sheet = nu.sheet(sheet_at(sys, time - m, sheet));
            if nu_sheet.is_empty() {
                break;
            }
            let out = bootstrap_step(
                sys,
                qn,
                &nu_sheet,
                &centers,
                r,
                rho,
                m,
                cfg.epsilon,
                &BootstrapOptions {
                    seed: cfg.seed ^ u64::from(time),
                    ..BootstrapOptions::default()
                },
            )?;
            if out.centers.is_empty() {
                break;
            }
            centers = out.centers;
            r = out.r1;
            rho = out.rho1;
            time -= m;
            sweeps_done += 1;
            m = ((r / rho).ln() / f64::from(d + 1)).floor().max(0.0) as u32;
        }
    }
    // snap the heaviest center to a rational point
    let y = TorusPoint::from_rationals(
        &centers[0]
            .iter()
            .map(|&v| {
                crate::ratlinalg::reconstruct_rational(v.rem_euclid(1.0), 1 << 20, 1e-9)
                    .unwrap_or_else(|| {
                        num_rational::BigRational::from_float(v.rem_euclid(1.0))
                            .unwrap_or_else(num_traits::Zero::zero)
                    })
            })
            .collect::<Vec<_>>(),
    );
    let norm_a0: f64 = a0.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    let q_bound = (norm_a0 / t).powf(cfg.c_max);
    let snap = diophantine_snap(qn, &y, &[], rho.clamp(1e-300, 0.999), cfg.beta, q_bound as u64);
    // final distance of the true starting point, on the chosen sheet
    let final_witness = quasigeom::dist_to_zq(qn, x0, &[], snap.q.max(1));
    let distance_bound = (-cfg.lambda * f64::from(n)).exp();
    let fitted_c = if norm_a0 / t > 1.0 && snap.q >= 1 {
        (snap.q as f64).ln() / (norm_a0 / t).ln()
    } else {
        0.0
    };
    let pass = final_witness.distance <= distance_bound && (snap.q as f64) <= q_bound;
    Ok(E2ERecord {
        a0: a0.to_vec(),
        t,
        n,
        lambda: cfg.lambda,
        coefficient,
        sheet,
        granules: gran.centers.len(),
        granule_mass: gran.captured_mass,
        bootstrap_sweeps: sweeps_done,
        final_rho: rho,
        q: snap.q,
        q_bound,
        distance: final_witness.distance,
        distance_bound,
        fitted_c,
        pass,
    })
}

fn ensemble_at(
    sys: &GeneratorSystem,
    x0: &TorusPoint,
    n: u32,
    opts: &WalkGranulateOptions,
) -> Result<WalkEnsemble> {
    let words = (sys.generators().len() as u64)
        .checked_pow(n)
        .unwrap_or(u64::MAX);
    if words <= opts.word_budget {
        walk::enumerate_exact(
            sys,
            x0,
            n,
            &walk::ExactOptions {
                word_budget: opts.word_budget,
                ..walk::ExactOptions::default()
            },
        )
    } else {
        walk::sample_paths(sys, x0, n, opts.samples, opts.seed ^ 0x5eed ^ u64::from(n))
    }
}

/// Sheet the measure occupied `steps` ago; with label groups the walk at
/// time `t` sits on deterministic cosets only for trivial groups, so the
/// target sheet is reused as-is (experiments with labels track all sheets).
fn sheet_at(_sys: &GeneratorSystem, _time: u32, sheet: usize) -> usize {
    sheet
}
