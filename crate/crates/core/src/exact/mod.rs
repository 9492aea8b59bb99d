//! Exact and adaptive-precision arithmetic.
//!
//! Walk generators are integer matrices, so orbits of rational starting
//! points stay rational with a fixed denominator, and orbits of quadratic
//! surd points stay inside the Q-span of `1, √k₁, √k₂, …`. Both families
//! are represented exactly by [`SurdExpr`]; floating point only enters when
//! a value is finally evaluated (at a controlled number of guard bits).

mod fastwalk;
mod matrix;
mod parse;
mod precision;
mod surd;
mod torus;

pub use fastwalk::{FastCoord, FastWalk};
pub use matrix::IntMatrix;
pub use parse::{parse_coordinate, parse_rational};
pub use precision::{required_guard_bits, PrecisionBudget};
pub use surd::SurdExpr;
pub use torus::{act_on_torus, act_on_torus_budgeted, RationalVector, TorusCoord, TorusPoint};
