//! Experiment configuration: schema, validation, canonicalization.

use crate::{CliError, Result};
use num_rational::BigRational;
use serde::{Deserialize, Serialize};
use torlab_core::algebra::{CosetLabels, FiniteGroup, GeneratorSystem};
use torlab_core::exact::{parse_coordinate, parse_rational, IntMatrix, TorusPoint};
use torlab_core::fixtures;

/// System block: either a bundled fixture name or an explicit matrix list.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum SystemConfig {
    Fixture(String),
    Explicit {
        dim: usize,
        /// row-major integer entries, one row-major array per generator
        generators: Vec<Vec<i64>>,
        /// exact rationals as strings, e.g. `"1/4"`
        weights: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        labels: Option<LabelConfig>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LabelConfig {
    /// `"cyclic:m"` or `"trivial"`
    pub group: String,
    pub values: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskConfig {
    /// Algebra basis, center, Wedderburn factors.
    Decompose {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tol: Option<f64>,
    },
    /// Per-factor Lyapunov exponents.
    Lyapunov { n: u32, samples: usize },
    /// Walk law at time n (exact when the word budget allows, else
    /// sampled); optional return-time statistics.
    Walk {
        n: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        samples: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        return_times: Option<u32>,
    },
    /// Spectrum scan at one or more times, with an optional decay fit.
    Fourier {
        a_max: i64,
        n_grid: Vec<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        samples: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fit_frequency: Option<Vec<i64>>,
    },
    /// Wiener granulation of the walk law.
    Granulate {
        n: u32,
        a0: Vec<i64>,
        t: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tau: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        samples: Option<usize>,
    },
    /// Non-concentration audit of the rescaled walk law.
    AuditNc {
        n: u32,
        samples: usize,
        #[serde(default = "default_boxplus")]
        boxplus: usize,
        epsilon: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rho_log2_range: Option<(i32, i32)>,
    },
    /// Covering-number growth of the rescaled walk support.
    Sumproduct {
        n: u32,
        samples: usize,
        #[serde(default = "default_operators")]
        operators: usize,
    },
    /// L2-flattening trajectory of a 1D net (the bundled combinatorial
    /// experiment) with the power-inequality check.
    Flatten {
        delta_log2: i32,
        steps: usize,
        epsilon: f64,
        kappa: f64,
        tau: f64,
    },
    /// Drift contraction table.
    Drift {
        alpha: f64,
        lambda: f64,
        q: u64,
        n: u32,
        samples: usize,
        #[serde(default = "default_grid")]
        grid: usize,
    },
    /// End-to-end theorem harness.
    E2e {
        a0: Vec<i64>,
        t: f64,
        n: u32,
        lambda: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        samples: Option<usize>,
    },
    /// Materialize the bundled fixtures as config files.
    Fixtures {},
}

fn default_boxplus() -> usize {
    4
}

fn default_operators() -> usize {
    8
}

fn default_grid() -> usize {
    20
}

impl TaskConfig {
    pub fn name(&self) -> &'static str {
        match self {
            TaskConfig::Decompose { .. } => "decompose",
            TaskConfig::Lyapunov { .. } => "lyapunov",
            TaskConfig::Walk { .. } => "walk",
            TaskConfig::Fourier { .. } => "fourier",
            TaskConfig::Granulate { .. } => "granulate",
            TaskConfig::AuditNc { .. } => "audit-nc",
            TaskConfig::Sumproduct { .. } => "sumproduct",
            TaskConfig::Flatten { .. } => "flatten",
            TaskConfig::Drift { .. } => "drift",
            TaskConfig::E2e { .. } => "e2e",
            TaskConfig::Fixtures {} => "fixtures",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    /// starting point: exact coordinate strings
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<Vec<String>>,
    #[serde(default)]
    pub seed: u64,
    pub task: TaskConfig,
}

impl ExperimentConfig {
    /// Canonical re-emission; parsing this again is the identity.
    pub fn canonical(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Build the validated generator system.
    pub fn system(&self) -> Result<GeneratorSystem> {
        match &self.system {
            SystemConfig::Fixture(name) => fixtures::by_name(name).ok_or_else(|| {
                CliError::Config(format!("system: unknown fixture {name:?}"))
            }),
            SystemConfig::Explicit {
                dim,
                generators,
                weights,
                labels,
            } => {
                let gens: Vec<IntMatrix> = generators
                    .iter()
                    .enumerate()
                    .map(|(i, rows)| {
                        if rows.len() != dim * dim {
                            return Err(CliError::Config(format!(
                                "system.generators[{i}]: expected {} entries, got {}",
                                dim * dim,
                                rows.len()
                            )));
                        }
                        IntMatrix::new(*dim, rows.iter().map(|&v| v.into()).collect())
                            .map_err(|e| CliError::Config(format!("system.generators[{i}]: {e}")))
                    })
                    .collect::<Result<_>>()?;
                let w: Vec<BigRational> = weights
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        parse_rational(s).map_err(|e| {
                            CliError::Config(format!("system.weights[{i}]: {e}"))
                        })
                    })
                    .collect::<Result<_>>()?;
                let labels = labels
                    .as_ref()
                    .map(|lc| -> Result<CosetLabels> {
                        let group = if lc.group == "trivial" {
                            FiniteGroup::trivial()
                        } else if let Some(m) = lc.group.strip_prefix("cyclic:") {
                            let m: usize = m.parse().map_err(|_| {
                                CliError::Config(format!(
                                    "system.labels.group: bad order in {:?}",
                                    lc.group
                                ))
                            })?;
                            FiniteGroup::cyclic(m)
                        } else {
                            return Err(CliError::Config(format!(
                                "system.labels.group: unknown group {:?}",
                                lc.group
                            )));
                        };
                        Ok(CosetLabels {
                            group,
                            labels: lc.values.clone(),
                        })
                    })
                    .transpose()?;
                GeneratorSystem::new(gens, w, labels)
                    .map_err(|e| CliError::Config(format!("system: {e}")))
            }
        }
    }

    /// Parse the starting point, defaulting to the origin.
    pub fn start_point(&self, dim: usize) -> Result<TorusPoint> {
        match &self.start {
            None => Ok(TorusPoint::zero(dim)),
            Some(coords) => {
                if coords.len() != dim {
                    return Err(CliError::Config(format!(
                        "start: expected {dim} coordinates, got {}",
                        coords.len()
                    )));
                }
                let parsed = coords
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        parse_coordinate(s)
                            .map_err(|e| CliError::Config(format!("start[{i}]: {e}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(TorusPoint { coords: parsed })
            }
        }
    }
}

/// Parse and validate a config document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_str(text)
        .map_err(|e| CliError::Config(format!("at line {}: {e}", e.line())))?;
    // validate eagerly so schema violations surface with field context
    let sys = cfg.system()?;
    cfg.start_point(sys.dim())?;
    Ok(cfg)
}
