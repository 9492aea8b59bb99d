//! Acceptance suite: every bundled verification criterion runs at its
//! pinned tolerance and prints one pass/fail line. Criteria execute
//! sequentially inside a single test so wall-clock budgets are measured
//! without interference, and the determinism criterion re-runs the
//! stochastic ones and compares report bodies byte for byte.

use num_rational::BigRational;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};
use torlab_core::algebra::{
    decompose_module, det_on_algebra, generate_algebra, wedderburn_decompose, AlgebraDecomposition,
    FactorExponents, GeneratorSystem, ModuleOptions, RescalingMap, WedderburnOptions,
};
use torlab_core::drift::{self, DriftConfig, E2EConfig};
use torlab_core::exact::{parse_coordinate, TorusPoint};
use torlab_core::linalg::Mat;
use torlab_core::multconv::{
    self, ConvOptions, FactorAlgebra, HyperplaneSampler, RealLine, ScaledMeasure,
};
use torlab_core::quasigeom::{ConvexBody, QuasiNorm};
use torlab_core::spectrum::{self, TorusMeasure};
use torlab_core::walk::{self, ExactOptions};
use torlab_core::{fixtures, rng};

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
    budget: Duration,
    /// canonical body for the determinism criterion
    body: String,
}

fn check(
    id: usize,
    name: &'static str,
    budget_secs: u64,
    f: impl Fn() -> (bool, String, String) + std::panic::RefUnwindSafe,
) -> Outcome {
    let started = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(&f));
    let elapsed = started.elapsed();
    let budget = Duration::from_secs(budget_secs);
    match result {
        Ok((pass, detail, body)) => Outcome {
            id,
            name,
            pass: pass && elapsed <= budget,
            detail: if elapsed > budget {
                format!("{detail}; OVER BUDGET")
            } else {
                detail
            },
            elapsed,
            budget,
            body,
        },
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(ToString::to_string))
                .unwrap_or_else(|| "panic".into());
            Outcome {
                id,
                name,
                pass: false,
                detail: format!("panicked: {msg}"),
                elapsed,
                budget,
                body: String::new(),
            }
        }
    }
}

fn decomposed(sys: &GeneratorSystem, seed: u64) -> AlgebraDecomposition {
    let mut dec = generate_algebra(sys);
    wedderburn_decompose(&mut dec, sys, WedderburnOptions::default(), seed).unwrap();
    dec
}

fn f1_quasinorm(dec: &AlgebraDecomposition, sys: &GeneratorSystem) -> QuasiNorm {
    let profile = walk::lyapunov_estimate(sys, dec, 200, 2_000, 77);
    let module = decompose_module(
        sys,
        dec,
        &FactorExponents {
            estimates: profile.exponents(),
            ci_radii: profile.ci_radii(),
        },
        ModuleOptions::default(),
    )
    .unwrap();
    QuasiNorm::from_module(&module)
}

// -- criterion 1 -----------------------------------------------------------

fn c1_algebra_structure() -> (bool, String, String) {
    let sys = fixtures::f2();
    let mut dec = generate_algebra(&sys);
    let algebra_dim = dec.dim();
    let center_dim = torlab_core::algebra::compute_center(&mut dec, &sys);
    wedderburn_decompose(&mut dec, &sys, WedderburnOptions::default(), 1).unwrap();
    let dims = dec.factor_dims();
    let res = dec.residuals.max();
    let pass = algebra_dim == 6 && center_dim == 3 && dims == vec![4, 2] && res < 1e-9;
    (
        pass,
        format!("dim E = {algebra_dim}, dim Z(E) = {center_dim}, factors {dims:?}, residual {res:.2e}"),
        String::new(),
    )
}

// -- criterion 2 -----------------------------------------------------------

fn c2_determinant_identity() -> (bool, String, String) {
    let sys = fixtures::f1();
    let dec = decomposed(&sys, 1);
    let mut rng = rng::stream(0xdead, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x = Mat {
            rows: 2,
            cols: 2,
            data: (0..4)
                .map(|_| f64::from(rand::Rng::gen_range(&mut rng, -9i32..=9)))
                .collect(),
        };
        let lhs = det_on_algebra(&dec, &x);
        let det = x.data[0] * x.data[3] - x.data[1] * x.data[2];
        let rhs = det * det;
        let rel = (lhs - rhs).abs() / rhs.abs().max(1.0);
        worst = worst.max(rel);
    }
    (
        worst <= 1e-9,
        format!("worst relative error {worst:.2e} over 100 random integer matrices"),
        String::new(),
    )
}

// -- criterion 3 -----------------------------------------------------------

fn c3_lyapunov_oracle() -> (bool, String, String) {
    let sys4 = fixtures::f4();
    let dec4 = decomposed(&sys4, 1);
    let prof4 = walk::lyapunov_estimate(&sys4, &dec4, 1000, 2, 5);
    let expect = ((3.0 + 5f64.sqrt()) / 2.0).ln();
    let det_err = (prof4.top() - expect).abs();

    let sys1 = fixtures::f1();
    let dec1 = decomposed(&sys1, 1);
    let a = walk::lyapunov_estimate(&sys1, &dec1, 200, 10_000, 101);
    let b = walk::lyapunov_estimate(&sys1, &dec1, 200, 10_000, 202);
    let sigma = ((a.per_factor[0].ci95 / 1.96).powi(2) + (b.per_factor[0].ci95 / 1.96).powi(2))
        .sqrt();
    let gap = (a.top() - b.top()).abs();
    let pass = det_err < 1e-6 && gap <= 3.0 * sigma;
    let body = serde_json::to_string(&(&prof4, &a, &b)).unwrap();
    (
        pass,
        format!("F4 error {det_err:.2e}; F1 seeds differ by {gap:.2e} (3σ = {:.2e})", 3.0 * sigma),
        body,
    )
}

// -- criterion 4 -----------------------------------------------------------

fn c4_kac_formula() -> (bool, String, String) {
    let sys = fixtures::f2();
    let stats = walk::induced_return_times(&sys, 3, 100_000, 17).unwrap();
    let sigma = stats.ci95_tau1 / 1.96;
    let gap = (stats.mean_tau1 - 4.0).abs();
    let body = serde_json::to_string(&stats).unwrap();
    (
        gap <= 3.0 * sigma,
        format!("mean τ(1) = {:.4} (target 4, 3σ = {:.4})", stats.mean_tau1, 3.0 * sigma),
        body,
    )
}

// -- criterion 5 -----------------------------------------------------------

fn c5_exact_vs_monte_carlo() -> (bool, String, String) {
    let n = 8u32;
    let samples = 100_000usize;
    let bound = 3.0 / (samples as f64).sqrt();
    let mut worst: f64 = 0.0;
    let mut bodies = Vec::new();
    for (sys, x0) in [
        (fixtures::f1(), TorusPoint::from_rational_pairs(&[(1, 3), (0, 1)])),
        (
            fixtures::f2(),
            TorusPoint::from_rational_pairs(&[(1, 3), (0, 1), (1, 3), (0, 1)]),
        ),
    ] {
        let exact = walk::enumerate_exact(&sys, &x0, n, &ExactOptions::default()).unwrap();
        let mc = walk::sample_paths(&sys, &x0, n, samples, 29).unwrap();
        let scan_exact = spectrum::spectrum_scan(&exact, 3, true);
        let scan_mc = spectrum::spectrum_scan(&mc, 3, true);
        for (ce, cm) in scan_exact.coefficients.iter().zip(&scan_mc.coefficients) {
            let d = ((ce.re - cm.re).powi(2) + (ce.im - cm.im).powi(2)).sqrt();
            worst = worst.max(d);
        }
        bodies.push(serde_json::to_string(&scan_mc).unwrap());
    }
    (
        worst <= bound,
        format!("worst |exact − MC| = {worst:.5} (bound 3/√N = {bound:.5})"),
        bodies.join("\n"),
    )
}

// -- criterion 6 -----------------------------------------------------------

fn c6_equidistribution_decay() -> (bool, String, String) {
    let sys = fixtures::f1();
    let x0 = TorusPoint {
        coords: vec![
            parse_coordinate("sqrt(2)-1").unwrap(),
            parse_coordinate("sqrt(3)-1").unwrap(),
        ],
    };
    let samples = 100_000usize;
    let ns: Vec<u32> = (1..=6).map(|k| 5 * k).collect();
    let mut maxima = Vec::new();
    let mut bodies = Vec::new();
    for &n in &ns {
        let ens = walk::sample_paths(&sys, &x0, n, samples, 31).unwrap();
        let scan = spectrum::spectrum_scan(&ens, 5, false);
        maxima.push(scan.max_nonzero_abs());
        bodies.push(serde_json::to_string(&scan.max_nonzero_abs()).unwrap());
    }
    let final_max = *maxima.last().unwrap();
    let fit = spectrum::decay_fit(&ns, &maxima, 1.0 / (samples as f64).sqrt()).unwrap();
    let pass = final_max <= 0.1 && fit.rate < 0.0;
    (
        pass,
        format!("max|ν̂₃₀| = {final_max:.4} (≤ 0.1); fitted rate {:.4} (< 0)", fit.rate),
        bodies.join("\n"),
    )
}

// -- criterion 7 -----------------------------------------------------------

fn c7_rational_obstruction() -> (bool, String, String) {
    let sys = fixtures::f1();
    let x0 = TorusPoint::from_rational_pairs(&[(1, 3), (0, 1)]);
    let mut exact_ok = true;
    for n in 0..=10u32 {
        let ens = walk::enumerate_exact(&sys, &x0, n, &ExactOptions::default()).unwrap();
        let c = spectrum::fourier_coefficient(&ens, &[3, 0]);
        if c.re != 1.0 || c.im != 0.0 {
            exact_ok = false;
        }
    }
    let dec = decomposed(&sys, 1);
    let qn = f1_quasinorm(&dec, &sys);
    let cfg = E2EConfig {
        samples: 20_000,
        seed: 7,
        ..E2EConfig::default()
    };
    let rec = drift::theorem_e2e(&sys, &dec, &qn, &x0, &[3, 0], 0.5, 8, &cfg).unwrap();
    let pass = exact_ok && rec.pass && rec.q == 3 && rec.distance == 0.0;
    let body = serde_json::to_string(&rec).unwrap();
    (
        pass,
        format!(
            "ν̂ₙ(3,0) = 1 exactly for n ≤ 10: {exact_ok}; e2e pass = {} with Q = {}, d̃ = {}",
            rec.pass, rec.q, rec.distance
        ),
        body,
    )
}

// -- criterion 8 -----------------------------------------------------------

fn c8_wiener_detector() -> (bool, String, String) {
    // synthetic 25-granule measure: uniform on (1/5)Z² ⊞ noise(10⁻⁴)
    let mut noise = rng::stream(0x25, 0);
    let mut points = Vec::new();
    for i in 0..5 {
        for j in 0..5 {
            for _ in 0..40 {
                let dx = (rand::Rng::gen::<f64>(&mut noise) - 0.5) * 2e-4;
                let dy = (rand::Rng::gen::<f64>(&mut noise) - 0.5) * 2e-4;
                points.push(vec![
                    (i as f64 / 5.0 + dx).rem_euclid(1.0),
                    (j as f64 / 5.0 + dy).rem_euclid(1.0),
                ]);
            }
        }
    }
    let w = 1.0 / points.len() as f64;
    let m = TorusMeasure {
        dim: 2,
        weights: vec![w; points.len()],
        points,
    };
    let grid_report = spectrum::wiener_granulate(&m, &ConvexBody::ball(2, 10.0), &ConvexBody::ball(2, 100.0));
    let grid_ok = grid_report.centers.len() == 25 && grid_report.captured_mass >= 0.99;

    // 10⁶-point quasirandom cloud: no granulation
    let n = 1_000_000usize;
    let (a1, a2) = (2f64.sqrt(), 3f64.sqrt());
    let cloud_pts: Vec<Vec<f64>> = (0..n)
        .map(|k| {
            vec![
                (0.5 + a1 * k as f64).rem_euclid(1.0),
                (0.5 + a2 * k as f64).rem_euclid(1.0),
            ]
        })
        .collect();
    let cloud = TorusMeasure {
        dim: 2,
        points: cloud_pts,
        weights: vec![1.0 / n as f64; n],
    };
    let cloud_report =
        spectrum::wiener_granulate(&cloud, &ConvexBody::ball(2, 40.0), &ConvexBody::ball(2, 200.0));
    let heuristic = cloud_report.volume_heuristic.unwrap();
    let cloud_ok = cloud_report.captured_mass <= 2.0 * heuristic
        && cloud_report.captured_mass >= heuristic / 2.0;
    let body = serde_json::to_string(&(&grid_report, &cloud_report)).unwrap();
    (
        grid_ok && cloud_ok,
        format!(
            "granules {} (mass {:.4}); cloud mass {:.4} vs heuristic {:.4}",
            grid_report.centers.len(),
            grid_report.captured_mass,
            cloud_report.captured_mass,
            heuristic
        ),
        body,
    )
}

// -- criterion 9 -----------------------------------------------------------

/// Dense-grid direct convolution oracle for the flattening step: exact
/// triple-product counting on a δ/16 grid, cross-correlated for the ⊟ and
/// trimmed by the same essential-part rule, fully independent of the
/// measure-convolution machinery.
fn flatten_oracle_ratio(delta: f64, epsilon: f64) -> f64 {
    use rayon::prelude::*;
    let step = delta;
    let atoms: Vec<f64> = (0..=((1.0 / step).round() as usize))
        .map(|k| 1.0 + k as f64 * step)
        .collect();
    let n = atoms.len();
    let h = delta / 16.0;
    // histogram of η*³ over [1, 8]
    let lo = (1.0 / h).floor() as i64;
    let hi = (8.0 / h).ceil() as i64;
    let bins = usize::try_from(hi - lo + 1).unwrap();
    let hist: Vec<u64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut local = vec![0u64; bins];
            for j in 0..n {
                let ab = atoms[i] * atoms[j];
                for c in &atoms {
                    let v = ab * c;
                    let idx = usize::try_from((v / h).round() as i64 - lo).unwrap();
                    local[idx] += 1;
                }
            }
            local
        })
        .reduce(
            || vec![0u64; bins],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
                a
            },
        );
    // cross-correlation for η*³ ⊟ η*³, then the essential-part trim
    let diff_bins = 2 * bins - 1;
    let diff: Vec<u64> = (0..diff_bins)
        .into_par_iter()
        .map(|d| {
            // difference index d − (bins−1) in h units
            let off = d as i64 - (bins as i64 - 1);
            let mut acc = 0u64;
            for i in 0..bins {
                let j = i as i64 - off;
                if j >= 0 && (j as usize) < bins {
                    acc += hist[i] * hist[j as usize];
                }
            }
            acc
        })
        .collect();
    let total = (n as f64).powi(6);
    let det_cut = delta.powf(epsilon);
    let ball = delta.powf(-epsilon);
    let mut kept: Vec<(f64, f64)> = Vec::new();
    for (d, &count) in diff.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let x = (d as i64 - (bins as i64 - 1)) as f64 * h;
        if x.abs() <= det_cut || x.abs() > ball {
            continue;
        }
        kept.push((x, count as f64 / total));
    }
    // exact pair-overlap formula for ‖·‖_{2,δ} of an atomic measure:
    // ∫(Σ w·1_{|x−p|≤δ}/(2δ))² = Σ_{p,q} w_p w_q max(0, 2δ−|p−q|)/(4δ²)
    let l2_pairs = |atoms: &[(f64, f64)]| -> f64 {
        let mut sorted = atoms.to_vec();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut acc = 0.0;
        for (i, &(x, w)) in sorted.iter().enumerate() {
            for &(y, v) in &sorted[i..] {
                let gap = y - x;
                if gap >= 2.0 * delta {
                    break;
                }
                let overlap = (2.0 * delta - gap) / (4.0 * delta * delta);
                acc += if gap == 0.0 { w * v } else { 2.0 * w * v } * overlap;
            }
        }
        acc.sqrt()
    };
    let eta_atoms: Vec<(f64, f64)> = atoms.iter().map(|&x| (x, 1.0 / n as f64)).collect();
    l2_pairs(&kept) / l2_pairs(&eta_atoms)
}

fn c9_flatten_and_power() -> (bool, String, String) {
    let delta = 2f64.powi(-10);
    let (epsilon, kappa, tau) = (0.6, 0.9, 0.5);
    let net = ScaledMeasure::net_1d(1.0, 2.0, delta, delta);
    let alg = RealLine;
    let sampler = HyperplaneSampler::default();
    let opts = ConvOptions::for_scale(delta);
    let (_, step) =
        multconv::flatten_step(&net, epsilon, kappa, tau, &alg, &sampler, &opts).unwrap();
    let oracle = flatten_oracle_ratio(delta, epsilon);
    let ratio_ok = step.ratio < 1.0;
    let oracle_ok = (step.ratio - oracle).abs() <= 0.01 * oracle;

    // power inequality on 20 random small measures, m ∈ {1, 2}
    let mut worst_slack = f64::INFINITY;
    let mut prng = rng::stream(0x90, 0);
    let grid: Vec<Vec<f64>> = (0..48)
        .map(|k| vec![(f64::from(k) - 24.0) * 17.3])
        .collect();
    for _ in 0..20 {
        let atoms: Vec<(Vec<f64>, BigRational)> = (0..3)
            .map(|_| {
                (
                    vec![rand::Rng::gen::<f64>(&mut prng) * 4.0 - 2.0],
                    BigRational::new(1.into(), 3.into()),
                )
            })
            .collect();
        let eta = ScaledMeasure::from_rational_atoms(1, delta, atoms);
        for m in [1usize, 2] {
            let chk =
                multconv::power_inequality_check(&eta, m, &grid, &alg, 1 << 22).unwrap();
            worst_slack = worst_slack.min(chk.min_slack);
        }
    }
    let power_ok = worst_slack >= -1e-12;
    let body = serde_json::to_string(&(&step, oracle, worst_slack)).unwrap();
    (
        ratio_ok && oracle_ok && power_ok,
        format!(
            "flatten ratio {:.5} vs oracle {:.5}; worst power slack {:.2e}",
            step.ratio, oracle, worst_slack
        ),
        body,
    )
}

// -- criterion 10 ----------------------------------------------------------

fn c10_nc_audit() -> (bool, String, String) {
    let sys = fixtures::f1();
    let dec = decomposed(&sys, 1);
    let profile = walk::lyapunov_estimate(&sys, &dec, 200, 10_000, 41);
    let n = 30u32;
    let map = RescalingMap::new(profile.exponents(), f64::from(n));
    let measure = walk::rescaled_walk_measure(&sys, &dec, &map, &[0], n, 100_000, 43, 4);
    let alg = FactorAlgebra::from_factors(&dec, &[0]);
    let rho_grid: Vec<f64> = (4..=10).rev().map(|k| 2f64.powi(-k)).collect();
    let delta = (-f64::from(n)).exp();
    let report = multconv::nc_audit(
        &measure,
        0.1,
        &rho_grid,
        delta,
        &HyperplaneSampler::default(),
        &alg,
    );
    // diagnostic: the same clause with the plain d×d determinant instead of
    // the regular-representation determinant (= det² on a matrix factor)
    let plain_det_mass: f64 = {
        use torlab_core::multconv::AlgebraOps;
        let thr = delta.powf(0.1);
        (0..measure.len())
            .filter(|&i| alg.det(measure.point(i)).abs().sqrt() <= thr)
            .map(|i| measure.weight_f64(i))
            .sum()
    };
    let pass = report.kappa_hat > 0.5 && report.r_squared > 0.9 && report.worst_det_mass <= 0.05;
    let body = serde_json::to_string(&report).unwrap();
    (
        pass,
        format!(
            "κ̂ = {:.3} (R² = {:.3}); small-determinant mass {:.4} (multiplication-map det; plain-det variant {:.4})",
            report.kappa_hat, report.r_squared, report.worst_det_mass, plain_det_mass
        ),
        body,
    )
}

// -- criterion 11 ----------------------------------------------------------

fn c11_margulis_contraction() -> (bool, String, String) {
    let sys = fixtures::f1();
    let dec = decomposed(&sys, 1);
    let qn = f1_quasinorm(&dec, &sys);
    let cfg = DriftConfig::new(0.1, 0.5, 5);
    let grid = drift::default_y_grid(2, 20);
    let table = drift::margulis_check(&sys, &qn, &cfg, &grid, 20, 10_000, 47);
    let c = table.fitted_c;
    let pass = c.map_or(true, f64::is_finite) && table.holds_at_fitted_c;
    let body = serde_json::to_string(&table).unwrap();
    (
        pass,
        format!(
            "fitted C = {:?}; inequality holds at all {} grid points: {}",
            c,
            table.rows.len(),
            table.holds_at_fitted_c
        ),
        body,
    )
}

// -- harness ----------------------------------------------------------------

#[test]
fn acceptance() {
    let mut outcomes = vec![
        check(1, "algebra structure (F2)", 1, c1_algebra_structure),
        check(2, "determinant identity on Mat2", 1, c2_determinant_identity),
        check(3, "Lyapunov oracle", 30, c3_lyapunov_oracle),
        check(4, "Kac formula", 30, c4_kac_formula),
        check(5, "exact vs Monte Carlo spectra", 60, c5_exact_vs_monte_carlo),
        check(6, "equidistribution decay", 120, c6_equidistribution_decay),
        check(7, "rational obstruction", 10, c7_rational_obstruction),
        check(8, "Wiener detector", 30, c8_wiener_detector),
        check(9, "flattening and power inequality", 60, c9_flatten_and_power),
        check(10, "non-concentration audit", 120, c10_nc_audit),
        check(11, "Margulis contraction", 120, c11_margulis_contraction),
    ];

    // criterion 12: byte-for-byte reproducibility of criteria 3–11
    let started = Instant::now();
    let rerun: Vec<(usize, String)> = vec![
        (3, c3_lyapunov_oracle().2),
        (4, c4_kac_formula().2),
        (5, c5_exact_vs_monte_carlo().2),
        (6, c6_equidistribution_decay().2),
        (7, c7_rational_obstruction().2),
        (8, c8_wiener_detector().2),
        (9, c9_flatten_and_power().2),
        (10, c10_nc_audit().2),
        (11, c11_margulis_contraction().2),
    ];
    let mut mismatches = Vec::new();
    for (id, body) in &rerun {
        let first = &outcomes[id - 1];
        if &first.body != body {
            mismatches.push(*id);
        }
    }
    outcomes.push(Outcome {
        id: 12,
        name: "determinism of criteria 3-11",
        pass: mismatches.is_empty(),
        detail: if mismatches.is_empty() {
            "all report bodies byte-identical on rerun".into()
        } else {
            format!("criteria {mismatches:?} produced different bytes")
        },
        elapsed: started.elapsed(),
        budget: Duration::from_secs(600),
        body: String::new(),
    });

    let mut all_pass = true;
    for o in &outcomes {
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "ACCEPTANCE {:>2} {status} [{:>6.2}s / {:>3}s] {} — {}",
            o.id,
            o.elapsed.as_secs_f64(),
            o.budget.as_secs(),
            o.name,
            o.detail
        );
        all_pass &= o.pass;
    }
    assert!(all_pass, "some acceptance criteria failed");
}
