//! Exact torus points and rational vectors.

use crate::error::{CoreError, Result};
use crate::exact::matrix::IntMatrix;
use crate::exact::precision::PrecisionBudget;
use crate::exact::surd::SurdExpr;
use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use std::fmt;

/// Vector of rationals over a single positive common denominator,
/// canonically gcd-reduced.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RationalVector {
    numerators: Vec<BigInt>,
    denominator: BigInt,
}

impl RationalVector {
    pub fn new(numerators: Vec<BigInt>, denominator: BigInt) -> Result<Self> {
        if denominator.is_zero() {
            return Err(CoreError::Parse("zero denominator".into()));
        }
        let mut v = RationalVector {
            numerators,
            denominator,
        };
        v.normalize();
        Ok(v)
    }

    pub fn from_rationals(coords: &[BigRational]) -> Self {
        let mut den = BigInt::one();
        for c in coords {
            den = den.lcm(c.denom());
        }
        let numerators = coords
            .iter()
            .map(|c| c.numer() * (&den / c.denom()))
            .collect();
        let mut v = RationalVector {
            numerators,
            denominator: den,
        };
        v.normalize();
        v
    }

    fn normalize(&mut self) {
        if self.denominator.is_negative() {
            self.denominator = -self.denominator.clone();
            for n in &mut self.numerators {
                *n = -n.clone();
            }
        }
        let mut g = self.denominator.clone();
        for n in &self.numerators {
            g = g.gcd(n);
            if g.is_one() {
                break;
            }
        }
        if !g.is_one() && !g.is_zero() {
            self.denominator = &self.denominator / &g;
            for n in &mut self.numerators {
                *n = &*n / &g;
            }
        }
    }

    pub fn numerators(&self) -> &[BigInt] {
        &self.numerators
    }

    pub fn denominator(&self) -> &BigInt {
        &self.denominator
    }

    pub fn coord(&self, i: usize) -> BigRational {
        BigRational::new(self.numerators[i].clone(), self.denominator.clone())
    }

    pub fn dim(&self) -> usize {
        self.numerators.len()
    }
}

impl fmt::Display for RationalVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .numerators
            .iter()
            .map(|n| format!("{}/{}", n, self.denominator))
            .collect();
        write!(f, "({})", parts.join(", "))
    }
}

/// One torus coordinate: an exact value in `[0,1)` plus an absolute error
/// bound. Exact coordinates (rationals, surds) carry error `0`; coordinates
/// declared from decimal strings carry their declared input error, which
/// grows under the walk.
#[derive(Clone, Debug, PartialEq)]
pub struct TorusCoord {
    pub value: SurdExpr,
    pub err: f64,
}

impl TorusCoord {
    pub fn exact(value: SurdExpr) -> Self {
        TorusCoord {
            value: value.mod1(),
            err: 0.0,
        }
    }

    pub fn with_error(value: SurdExpr, err: f64) -> Self {
        TorusCoord {
            value: value.mod1(),
            err,
        }
    }

    pub fn is_exact(&self) -> bool {
        self.err == 0.0
    }
}

/// A point of `T^d = R^d/Z^d` with canonical representatives in `[0,1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TorusPoint {
    pub coords: Vec<TorusCoord>,
}

impl TorusPoint {
    pub fn from_surds(values: Vec<SurdExpr>) -> Self {
        TorusPoint {
            coords: values.into_iter().map(TorusCoord::exact).collect(),
        }
    }

    pub fn from_rationals(values: &[BigRational]) -> Self {
        Self::from_surds(
            values
                .iter()
                .map(|v| SurdExpr::from_rational(v.clone()))
                .collect(),
        )
    }

    pub fn from_rational_pairs(pairs: &[(i64, i64)]) -> Self {
        Self::from_rationals(
            &pairs
                .iter()
                .map(|&(p, q)| BigRational::new(BigInt::from(p), BigInt::from(q)))
                .collect::<Vec<_>>(),
        )
    }

    pub fn zero(dim: usize) -> Self {
        Self::from_surds(vec![SurdExpr::zero(); dim])
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn is_exact(&self) -> bool {
        self.coords.iter().all(|c| c.is_exact())
    }

    pub fn max_err(&self) -> f64 {
        self.coords.iter().map(|c| c.err).fold(0.0, f64::max)
    }

    pub fn is_rational(&self) -> bool {
        self.coords.iter().all(|c| c.value.is_rational())
    }

    /// Common denominator when all coordinates are rational.
    pub fn rational_denominator(&self) -> Option<BigInt> {
        if !self.is_rational() {
            return None;
        }
        let mut den = BigInt::one();
        for c in &self.coords {
            den = den.lcm(c.value.as_rational().unwrap().denom());
        }
        Some(den)
    }

    /// Coordinates as `f64` representatives in `[0,1)`.
    pub fn to_f64(&self) -> Vec<f64> {
        self.coords.iter().map(|c| c.value.to_f64()).collect()
    }

    /// Key for exact atom merging. Only valid for exact points.
    pub fn merge_key(&self) -> Vec<SurdExpr> {
        debug_assert!(self.is_exact());
        self.coords.iter().map(|c| c.value.clone()).collect()
    }
}

/// Apply a walk generator: `x ↦ gx mod 1`, exact on exact coordinates.
/// The error bound of inexact coordinates grows by the row-sum norm of `g`.
pub fn act_on_torus(g: &IntMatrix, x: &TorusPoint) -> TorusPoint {
    assert_eq!(g.dim(), x.dim(), "matrix/point dimension mismatch");
    let values: Vec<SurdExpr> = g.apply_surd(
        &x.coords
            .iter()
            .map(|c| c.value.clone())
            .collect::<Vec<_>>(),
    );
    let norm = g.row_sum_norm().to_f64().unwrap_or(f64::INFINITY);
    let coords = values
        .into_iter()
        .zip(x.coords.iter())
        .map(|(v, old)| TorusCoord::with_error(v, old.err * norm))
        .collect();
    TorusPoint { coords }
}

/// Budget-checked action: fails when the propagated error bound exceeds the
/// budget target, signalling the caller to raise precision and retry.
pub fn act_on_torus_budgeted(
    g: &IntMatrix,
    x: &TorusPoint,
    budget: &PrecisionBudget,
) -> Result<TorusPoint> {
    let out = act_on_torus(g, x);
    let err = out.max_err();
    if err > budget.target_error() {
        let needed = (-err.log2()).max(0.0) as u32;
        return Err(CoreError::BudgetExhausted {
            needed: budget.guard_bits().max(needed + 1),
            have: budget.guard_bits(),
        });
    }
    Ok(out)
}
