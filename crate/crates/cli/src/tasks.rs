//! Task dispatch: every subcommand builds its inputs from the validated
//! config, runs the corresponding engine, and serializes a deterministic
//! body. Side artifacts (CSV tables, fixture configs) come back as named
//! byte buffers so the binary can write them under `--out`.

use crate::config::{ExperimentConfig, SystemConfig, TaskConfig};
use crate::report::{config_hash, RunReport};
use crate::{CliError, Result};
use serde_json::json;
use torlab_core::algebra::{
    decompose_module, generate_algebra, wedderburn_decompose, AlgebraDecomposition,
    FactorExponents, GeneratorSystem, ModuleOptions, RescalingMap, WedderburnOptions,
};
use torlab_core::drift::{self, DriftConfig, E2EConfig};
use torlab_core::multconv::{
    self, ConvOptions, FactorAlgebra, HyperplaneSampler, RealLine, ScaledMeasure,
};
use torlab_core::quasigeom::QuasiNorm;
use torlab_core::spectrum::{self, WalkGranulateOptions};
use torlab_core::walk::{self, ExactOptions};
use torlab_core::{exact::TorusPoint, rng, ARTIFACT_VERSION};

/// A side artifact produced by a task (file name is relative to `--out`).
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

/// Output format for tabular artifacts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

/// Dispatch the configured task. Identical `(config, seed)` produce a
/// byte-identical report body and artifact set.
pub fn run(cfg: &ExperimentConfig, seed: u64, format: Format) -> Result<(RunReport, Vec<Artifact>)> {
    let mut warnings: Vec<String> = Vec::new();
    let mut artifacts: Vec<Artifact> = Vec::new();
    let body = match &cfg.task {
        TaskConfig::Decompose { tol } => {
            let sys = cfg.system()?;
            let dec = decomposed(&sys, tol.unwrap_or(1e-9), seed)?;
            let report = torlab_core::algebra::decomposition_report(&dec);
            let ident = if sys.coset_labels().is_some() {
                let e0 = torlab_core::algebra::generate_identity_component_algebra(&sys, 6)?;
                Some(e0.dim())
            } else {
                None
            };
            json!({
                "decomposition": report,
                "identity_component_dim": ident,
            })
        }
        TaskConfig::Lyapunov { n, samples } => {
            let sys = cfg.system()?;
            let dec = decomposed(&sys, 1e-9, seed)?;
            let profile =
                walk::lyapunov_estimate(&sys, &dec, *n, *samples, rng::domain_seed(seed, "lyap"));
            json!({
                "profile": profile,
                "top": profile.top(),
            })
        }
        TaskConfig::Walk {
            n,
            samples,
            return_times,
        } => {
            let sys = cfg.system()?;
            let x0 = cfg.start_point(sys.dim())?;
            let ens = ensemble(&sys, &x0, *n, samples.unwrap_or(100_000), seed, &mut warnings)?;
            let mut csv = Vec::new();
            walk::ensemble_to_csv(&ens, &mut csv)?;
            if format == Format::Csv {
                artifacts.push(Artifact {
                    name: "ensemble.csv".into(),
                    bytes: csv.clone(),
                });
            }
            let mut cache = Vec::new();
            walk::ensemble_to_cache(&ens, &mut cache)?;
            artifacts.push(Artifact {
                name: "ensemble.bin".into(),
                bytes: cache,
            });
            let returns = return_times
                .map(|m| -> Result<_> {
                    Ok(walk::induced_return_times(
                        &sys,
                        m,
                        samples.unwrap_or(100_000),
                        rng::domain_seed(seed, "kac"),
                    )?)
                })
                .transpose()?;
            json!({
                "mode": ens.mode,
                "n": ens.n,
                "atoms": ens.len(),
                "mass": ens.total_weight().to_string(),
                "csv_digest": config_hash(std::str::from_utf8(&csv).unwrap_or_default()),
                "return_times": returns,
            })
        }
        TaskConfig::Fourier {
            a_max,
            n_grid,
            samples,
            fit_frequency,
        } => {
            let sys = cfg.system()?;
            let x0 = cfg.start_point(sys.dim())?;
            let mut scans = Vec::new();
            for &n in n_grid {
                let ens =
                    ensemble(&sys, &x0, n, samples.unwrap_or(100_000), seed, &mut warnings)?;
                let report = spectrum::spectrum_scan(&ens, *a_max, false);
                if format == Format::Csv {
                    let mut csv = Vec::new();
                    report.to_csv(&mut csv)?;
                    artifacts.push(Artifact {
                        name: format!("spectrum_n{n}.csv"),
                        bytes: csv,
                    });
                }
                scans.push(report);
            }
            let fit = fit_frequency
                .as_ref()
                .map(|a| -> Result<_> {
                    let values: Vec<f64> = scans
                        .iter()
                        .map(|r| {
                            r.coefficient_at(a).map(|c| c.abs()).ok_or_else(|| {
                                CliError::Config(format!(
                                    "task.fit_frequency: {a:?} outside the scan box"
                                ))
                            })
                        })
                        .collect::<Result<_>>()?;
                    let floor = scans
                        .iter()
                        .flat_map(|r| r.coefficients.iter().map(|c| c.stderr))
                        .fold(0.0f64, f64::max);
                    Ok(spectrum::decay_fit(n_grid, &values, floor)?)
                })
                .transpose()?;
            let summary: Vec<_> = n_grid
                .iter()
                .zip(&scans)
                .map(|(&n, r)| json!({ "n": n, "max_nonzero": r.max_nonzero_abs() }))
                .collect();
            json!({
                "scans": scans,
                "summary": summary,
                "fit": fit,
            })
        }
        TaskConfig::Granulate {
            n,
            a0,
            t,
            tau,
            samples,
        } => {
            let sys = cfg.system()?;
            let x0 = cfg.start_point(sys.dim())?;
            let (dec, qn) = geometry(&sys, seed)?;
            let opts = WalkGranulateOptions {
                tau: tau.unwrap_or(0.1),
                samples: samples.unwrap_or(100_000),
                seed: rng::domain_seed(seed, "granulate"),
                word_budget: 1 << 20,
            };
            let report = spectrum::walk_granulate(&sys, &dec, &qn, &x0, a0, *t, *n, &opts)?;
            json!({ "granulation": report })
        }
        TaskConfig::AuditNc {
            n,
            samples,
            boxplus,
            epsilon,
            rho_log2_range,
        } => {
            let sys = cfg.system()?;
            let (dec, module, profile) = module_geometry(&sys, seed)?;
            let selected = noncompact_factors(&module);
            let map = RescalingMap::new(profile.exponents(), f64::from(*n));
            let measure = walk::rescaled_walk_measure(
                &sys,
                &dec,
                &map,
                &selected,
                *n,
                *samples,
                rng::domain_seed(seed, "audit"),
                *boxplus,
            );
            let alg = FactorAlgebra::from_factors(&dec, &selected);
            let (lo, hi) = rho_log2_range.unwrap_or((-10, -4));
            let rho_grid: Vec<f64> = (lo..=hi).map(|k| 2f64.powi(k)).collect();
            let delta = (-f64::from(*n)).exp();
            let report = multconv::nc_audit(
                &measure,
                *epsilon,
                &rho_grid,
                delta,
                &HyperplaneSampler {
                    seed: rng::domain_seed(seed, "hyperplanes"),
                    ..HyperplaneSampler::default()
                },
                &alg,
            );
            json!({ "audit": report, "atoms": measure.len(), "boxplus": boxplus })
        }
        TaskConfig::Sumproduct {
            n,
            samples,
            operators,
        } => {
            let sys = cfg.system()?;
            let (dec, module, profile) = module_geometry(&sys, seed)?;
            let selected = noncompact_factors(&module);
            let map = RescalingMap::new(profile.exponents(), f64::from(*n));
            let measure = walk::rescaled_walk_measure(
                &sys,
                &dec,
                &map,
                &selected,
                *n,
                *samples,
                rng::domain_seed(seed, "sumproduct"),
                1,
            );
            let alg = FactorAlgebra::from_factors(&dec, &selected);
            let points: Vec<Vec<f64>> = measure.points_iter().map(<[f64]>::to_vec).collect();
            let ops: Vec<torlab_core::linalg::Mat> = (0..*operators)
                .map(|k| {
                    let i = (k * 7919 + 13) % points.len().max(1);
                    let j = (k * 104_729 + 41) % points.len().max(1);
                    alg.tensor_operator(&points[i], &points[j])
                })
                .collect();
            let delta = (-f64::from(*n) / 2.0).exp();
            let report = multconv::sumproduct_check(&points, &ops, delta, 40_000_000);
            json!({ "growth": report, "delta": delta })
        }
        TaskConfig::Flatten {
            delta_log2,
            steps,
            epsilon,
            kappa,
            tau,
        } => {
            let delta = 2f64.powi(*delta_log2);
            let net = ScaledMeasure::net_1d(1.0, 2.0, delta, delta);
            let alg = RealLine;
            let sampler = HyperplaneSampler {
                seed: rng::domain_seed(seed, "flatten"),
                ..HyperplaneSampler::default()
            };
            let opts = ConvOptions::for_scale(delta);
            let (_, first_step) =
                multconv::flatten_step(&net, *epsilon, *kappa, *tau, &alg, &sampler, &opts)?;
            let pipeline = multconv::flatten_pipeline(
                &net, *steps, *epsilon, *kappa, *tau, &alg, &sampler, &opts,
            )?;
            // power inequality on a coarse companion net (exact convolutions)
            let small = ScaledMeasure::net_1d(1.0, 2.0, 0.25, delta);
            let grid: Vec<Vec<f64>> = (0..64)
                .map(|k| vec![f64::from(k) * 0.37 / delta.sqrt()])
                .collect();
            let power_m1 = multconv::power_inequality_check(&small, 1, &grid, &alg, 1 << 22)?;
            let power_m2 = multconv::power_inequality_check(&small, 2, &grid, &alg, 1 << 22)?;
            json!({
                "first_step": first_step,
                "pipeline": pipeline,
                "power_m1": power_m1,
                "power_m2": power_m2,
            })
        }
        TaskConfig::Drift {
            alpha,
            lambda,
            q,
            n,
            samples,
            grid,
        } => {
            let sys = cfg.system()?;
            let (_, qn) = geometry(&sys, seed)?;
            let dcfg = DriftConfig::new(*alpha, *lambda, *q);
            let y_grid = drift::default_y_grid(sys.dim(), *grid);
            let table = drift::margulis_check(
                &sys,
                &qn,
                &dcfg,
                &y_grid,
                *n,
                *samples,
                rng::domain_seed(seed, "drift"),
            );
            json!({ "contraction": table })
        }
        TaskConfig::E2e {
            a0,
            t,
            n,
            lambda,
            samples,
        } => {
            let sys = cfg.system()?;
            let x0 = cfg.start_point(sys.dim())?;
            let (dec, qn) = geometry(&sys, seed)?;
            let e2e_cfg = E2EConfig {
                lambda: *lambda,
                samples: samples.unwrap_or(100_000),
                seed: rng::domain_seed(seed, "e2e"),
                ..E2EConfig::default()
            };
            let record = drift::theorem_e2e(&sys, &dec, &qn, &x0, a0, *t, *n, &e2e_cfg)?;
            json!({ "e2e": record })
        }
        TaskConfig::Fixtures {} => {
            let mut names = Vec::new();
            for name in ["F1", "F2", "F3", "F4"] {
                let cfg_text = fixture_config(name);
                names.push(json!({
                    "fixture": name,
                    "config_hash": config_hash(&cfg_text),
                }));
                artifacts.push(Artifact {
                    name: format!("{}.json", name.to_lowercase()),
                    bytes: cfg_text.into_bytes(),
                });
            }
            json!({ "fixtures": names })
        }
    };
    let report = RunReport {
        artifact_version: ARTIFACT_VERSION.to_string(),
        config_hash: config_hash(&cfg.canonical()),
        task: cfg.task.name().to_string(),
        seed,
        warnings,
        body,
    };
    Ok((report, artifacts))
}

fn decomposed(sys: &GeneratorSystem, tol: f64, seed: u64) -> Result<AlgebraDecomposition> {
    let mut dec = generate_algebra(sys);
    wedderburn_decompose(
        &mut dec,
        sys,
        WedderburnOptions {
            tol,
            ..WedderburnOptions::default()
        },
        rng::domain_seed(seed, "wedderburn"),
    )?;
    Ok(dec)
}

fn module_geometry(
    sys: &GeneratorSystem,
    seed: u64,
) -> Result<(
    AlgebraDecomposition,
    torlab_core::algebra::ModuleDecomposition,
    walk::LyapunovProfile,
)> {
    let dec = decomposed(sys, 1e-9, seed)?;
    let profile = walk::lyapunov_estimate(sys, &dec, 200, 10_000, rng::domain_seed(seed, "lyap"));
    let module = decompose_module(
        sys,
        &dec,
        &FactorExponents {
            estimates: profile.exponents(),
            ci_radii: profile.ci_radii(),
        },
        ModuleOptions {
            seed: rng::domain_seed(seed, "module"),
            ..ModuleOptions::default()
        },
    )?;
    Ok((dec, module, profile))
}

fn geometry(sys: &GeneratorSystem, seed: u64) -> Result<(AlgebraDecomposition, QuasiNorm)> {
    let (dec, module, _) = module_geometry(sys, seed)?;
    Ok((dec, QuasiNorm::from_module(&module)))
}

fn noncompact_factors(module: &torlab_core::algebra::ModuleDecomposition) -> Vec<usize> {
    let mut out: Vec<usize> = module
        .blocks
        .iter()
        .filter(|b| !b.compact)
        .flat_map(|b| b.factors.clone())
        .collect();
    out.sort_unstable();
    out
}

fn ensemble(
    sys: &GeneratorSystem,
    x0: &TorusPoint,
    n: u32,
    samples: usize,
    seed: u64,
    warnings: &mut Vec<String>,
) -> Result<walk::WalkEnsemble> {
    let words = (sys.generators().len() as u64)
        .checked_pow(n)
        .unwrap_or(u64::MAX);
    if words <= 1 << 20 {
        Ok(walk::enumerate_exact(sys, x0, n, &ExactOptions::default())?)
    } else {
        warnings.push(format!(
            "word count {words} over the exact budget; sampling {samples} paths"
        ));
        Ok(walk::sample_paths(
            sys,
            x0,
            n,
            samples,
            rng::domain_seed(seed, "walk"),
        )?)
    }
}

fn fixture_config(name: &str) -> String {
    let task = TaskConfig::Decompose { tol: None };
    let cfg = match name {
        "F2" => ExperimentConfig {
            system: SystemConfig::Explicit {
                dim: 4,
                generators: vec![
                    vec![0, 1, 0, 0, -1, 0, 0, 0, 0, 0, 1, 1, 0, 0, 0, 1],
                    vec![0, 1, 0, 0, -1, 0, 0, 0, 0, 0, 1, 0, 0, 0, 1, 1],
                    vec![0, -1, 0, 0, 1, 0, 0, 0, 0, 0, 1, -1, 0, 0, 0, 1],
                    vec![0, -1, 0, 0, 1, 0, 0, 0, 0, 0, 1, 0, 0, 0, -1, 1],
                ],
                weights: vec!["1/4".into(), "1/4".into(), "1/4".into(), "1/4".into()],
                labels: Some(crate::config::LabelConfig {
                    group: "cyclic:4".into(),
                    values: vec![1, 1, 3, 3],
                }),
            },
            start: None,
            seed: 0,
            task,
        },
        "F1" => ExperimentConfig {
            system: SystemConfig::Explicit {
                dim: 2,
                generators: vec![
                    vec![1, 2, 0, 1],
                    vec![1, 0, 2, 1],
                    vec![1, -2, 0, 1],
                    vec![1, 0, -2, 1],
                ],
                weights: vec!["1/4".into(), "1/4".into(), "1/4".into(), "1/4".into()],
                labels: None,
            },
            start: None,
            seed: 0,
            task,
        },
        "F3" => ExperimentConfig {
            system: SystemConfig::Explicit {
                dim: 2,
                generators: vec![vec![0, 1, -1, 0], vec![0, -1, 1, 0]],
                weights: vec!["1/2".into(), "1/2".into()],
                labels: None,
            },
            start: None,
            seed: 0,
            task,
        },
        _ => ExperimentConfig {
            system: SystemConfig::Explicit {
                dim: 2,
                generators: vec![vec![2, 1, 1, 1]],
                weights: vec!["1".into()],
                labels: None,
            },
            start: None,
            seed: 0,
            task,
        },
    };
    cfg.canonical()
}
