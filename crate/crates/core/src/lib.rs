//! Numerical laboratory for linear random walks on the torus whose acting
//! group generates a semisimple matrix algebra.
//!
//! The crate is organized around the stages of a quantitative
//! equidistribution experiment:
//!
//! - [`exact`] — arbitrary-precision integers, rationals, quadratic surds,
//!   and exact torus points, so that orbits of rational or surd starting
//!   points are computed with no rounding at all.
//! - [`algebra`] — the matrix algebra generated by the walk, its Wedderburn
//!   decomposition into simple ideals, central idempotents, and the
//!   per-factor rescaling maps.
//! - [`walk`] — exact enumeration and Monte Carlo simulation of the walk,
//!   Lyapunov exponent estimation, large deviations, induced return times,
//!   and rescaled laws on the non-compact part of the algebra.
//! - [`quasigeom`] — Lyapunov-weighted quasi-norms and quasi-distances,
//!   covering numbers, separated subsets, and distances to the invariant
//!   sets `Z_Q`.
//! - [`spectrum`] — Fourier coefficients of walk laws, spectrum scans,
//!   decay fits, and the quantitative Wiener granulation detector.
//! - [`multconv`] — δ-discretized measure combinatorics on algebras:
//!   regularized L2 norms, additive/multiplicative convolutions,
//!   non-concentration audits, sum-product growth probes, the flattening
//!   pipeline, and the convolution power inequality.
//! - [`drift`] — drift functions, Margulis-inequality contraction tables,
//!   the bootstrap concentration step, the Diophantine snap, and the
//!   end-to-end experiment harness.
//! - [`fixtures`] — the bundled generator systems F1–F4 used across tests
//!   and experiments.
//!
//! All randomized computations draw from counter-based per-path streams
//! derived from a single master seed (see [`rng`]), and all parallel
//! reductions run in a fixed order, so results are bit-reproducible across
//! thread counts.

pub mod algebra;
pub mod drift;
pub mod error;
pub mod exact;
pub mod fixtures;
pub mod linalg;
pub mod multconv;
pub mod quasigeom;
pub mod ratlinalg;
pub mod rng;
pub mod spectrum;
pub mod walk;

pub use error::CoreError;
pub use exact::{IntMatrix, RationalVector, TorusPoint};

/// Version tag embedded in reports and binary caches.
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
