//! Fixed-denominator integer fast path for walk sampling.
//!
//! A coordinate `(c₀ + Σ c_k√r_k)/D` keeps its denominator `D` and its
//! radicand set under integer matrix action; only the integer coefficients
//! change. Steps are then plain `i128` matrix-vector products, and the
//! mod-1 reduction needs one certified fixed-point floor per coordinate
//! instead of rational-arithmetic interval refinement. Coefficient growth
//! is bounded up front so the `i128` lane cannot overflow mid-path; walks
//! that would overflow take the generic exact route instead.

use crate::exact::matrix::IntMatrix;
use crate::exact::surd::SurdExpr;
use crate::exact::torus::{TorusCoord, TorusPoint};
use num_bigint::{BigInt, BigUint};
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive};

const FIXED_BITS: u32 = 96;

/// One coordinate: `coeffs[0]` is the rational numerator, `coeffs[1..]`
/// the numerators of the radicand terms, all over the shared denominator.
#[derive(Clone, Debug)]
pub struct FastCoord {
    pub coeffs: Vec<i128>,
}

/// Shared context of a fast walk: radicand set, common denominator, and
/// fixed-point square roots for certified floors.
pub struct FastWalk {
    radicands: Vec<u64>,
    denom: BigInt,
    denom_i128: i128,
    /// `⌊√r · 2^96⌋` per radicand
    sqrt_fixed: Vec<BigInt>,
    scale: BigInt, // 2^96 · D
}

impl FastWalk {
    /// Set up the fast lane for an `n`-step walk, or `None` when the
    /// coefficients could outgrow `i128`.
    pub fn try_new(x0: &TorusPoint, gens: &[IntMatrix], n: u32) -> Option<(FastWalk, Vec<FastCoord>)> {
        if !x0.is_exact() {
            return None;
        }
        // radicand set and common denominator over all coordinates
        let mut radicands: Vec<u64> = Vec::new();
        let mut denom = BigInt::one();
        for c in &x0.coords {
            denom = denom.lcm(c.value.rational_part().denom());
            for (k, coeff) in c.value.surd_terms() {
                denom = denom.lcm(coeff.denom());
                if !radicands.contains(&k) {
                    radicands.push(k);
                }
            }
        }
        radicands.sort_unstable();
        let denom_i128 = denom.to_i128()?;
        // initial coefficients
        let coords: Option<Vec<FastCoord>> = x0
            .coords
            .iter()
            .map(|c| {
                let mut coeffs = vec![0i128; radicands.len() + 1];
                let r = c.value.rational_part();
                coeffs[0] = (r.numer() * (&denom / r.denom())).to_i128()?;
                for (k, coeff) in c.value.surd_terms() {
                    let slot = radicands.iter().position(|&x| x == k)? + 1;
                    coeffs[slot] = (coeff.numer() * (&denom / coeff.denom())).to_i128()?;
                }
                Some(FastCoord { coeffs })
            })
            .collect();
        let coords = coords?;
        // growth bound: |coeff| ≤ D · max|initial| · (max row sum)^n, plus
        // the mod-1 shifts which keep the rational part below D·(growth)
        let max_init: i128 = coords
            .iter()
            .flat_map(|c| c.coeffs.iter().map(|v| v.abs()))
            .max()
            .unwrap_or(1)
            .max(denom_i128.abs());
        let growth_bits: u32 = gens
            .iter()
            .map(|g| {
                let m = g.row_sum_norm().to_biguint().unwrap_or_default();
                if m.bits() <= 1 {
                    0
                } else {
                    (m - 1u32).bits() as u32
                }
            })
            .max()
            .unwrap_or(0);
        let init_bits = 128 - max_init.leading_zeros();
        if u64::from(init_bits) + u64::from(n) * u64::from(growth_bits) + 4 > 120 {
            return None;
        }
        let sqrt_fixed: Vec<BigInt> = radicands
            .iter()
            .map(|&k| {
                let v = BigUint::from(k) << (2 * FIXED_BITS);
                BigInt::from(v.sqrt())
            })
            .collect();
        let scale = (BigInt::one() << FIXED_BITS) * &denom;
        Some((
            FastWalk {
                radicands,
                denom,
                denom_i128,
                sqrt_fixed,
                scale,
            },
            coords,
        ))
    }

    /// Apply a generator. Coordinates stay unreduced — the integer parts
    /// commute with the action, so a single mod-1 reduction at conversion
    /// time yields the same torus point as stepwise reduction. The growth
    /// bound in `try_new` covers the unreduced coefficients.
    pub fn act(&self, g: &IntMatrix, x: &[FastCoord]) -> Vec<FastCoord> {
        let d = g.dim();
        let terms = self.radicands.len() + 1;
        let mut out = Vec::with_capacity(d);
        for i in 0..d {
            let mut coeffs = vec![0i128; terms];
            for j in 0..d {
                let e = g.entry(i, j).to_i128().expect("small generator entries");
                if e == 0 {
                    continue;
                }
                for (slot, c) in coeffs.iter_mut().zip(&x[j].coeffs) {
                    *slot += e * c;
                }
            }
            out.push(FastCoord { coeffs });
        }
        out
    }

    /// Reduce the rational part into `[0, D)` (used by tests; conversion
    /// through `to_torus` reduces anyway).
    pub fn reduce(&self, x: &mut [FastCoord]) {
        for c in x {
            let f = self.floor(&c.coeffs);
            c.coeffs[0] -= f * self.denom_i128;
        }
    }

    /// Certified floor of `(c₀ + Σ c_k√r_k)/D` via 96-bit fixed point,
    /// exact fallback at boundaries.
    fn floor(&self, coeffs: &[i128]) -> i128 {
        let mut acc = BigInt::from(coeffs[0]) << FIXED_BITS;
        let mut err = BigInt::one();
        for (c, s) in coeffs[1..].iter().zip(&self.sqrt_fixed) {
            if *c != 0 {
                acc += BigInt::from(*c) * s;
                err += BigInt::from(c.abs());
            }
        }
        let (q, r) = acc.div_mod_floor(&self.scale);
        // certified unless the remainder is within the error margin of a
        // cell boundary
        if r > err && (&self.scale - &r) > err {
            return q.to_i128().expect("bounded by growth check");
        }
        // exact fallback (rare: value extremely close to an integer)
        self.to_surd(coeffs).floor().to_i128().expect("bounded")
    }

    fn to_surd(&self, coeffs: &[i128]) -> SurdExpr {
        let mut e = SurdExpr::from_rational(BigRational::new(
            BigInt::from(coeffs[0]),
            self.denom.clone(),
        ));
        for (c, &k) in coeffs[1..].iter().zip(&self.radicands) {
            if *c != 0 {
                e += SurdExpr::surd(
                    BigRational::new(BigInt::from(*c), self.denom.clone()),
                    k,
                );
            }
        }
        e
    }

    /// Convert back to an exact torus point.
    pub fn to_torus(&self, coords: &[FastCoord]) -> TorusPoint {
        TorusPoint {
            coords: coords
                .iter()
                .map(|c| TorusCoord::exact(self.to_surd(&c.coeffs)))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{act_on_torus, parse_coordinate};

    #[test]
    fn fast_lane_agrees_with_exact_surd_walk() {
        let g1 = IntMatrix::from_i64(&[&[1, 2], &[0, 1]]);
        let g2 = IntMatrix::from_i64(&[&[1, 0], &[2, 1]]);
        let x0 = TorusPoint {
            coords: vec![
                parse_coordinate("sqrt(2)-1").unwrap(),
                parse_coordinate("(1+2*sqrt(3))/5").unwrap(),
            ],
        };
        let gens = [g1.clone(), g2.clone()];
        let (fw, mut fast) = FastWalk::try_new(&x0, &gens, 12).unwrap();
        let mut slow = x0.clone();
        for step in 0..12 {
            let g = if step % 3 == 0 { &g1 } else { &g2 };
            fast = fw.act(g, &fast);
            slow = act_on_torus(g, &slow);
            assert_eq!(fw.to_torus(&fast), slow, "diverged at step {step}");
        }
        // explicit reduction is idempotent with conversion
        let converted = fw.to_torus(&fast);
        fw.reduce(&mut fast);
        assert_eq!(fw.to_torus(&fast), converted);
    }

    #[test]
    fn rational_only_points_work() {
        let g = IntMatrix::from_i64(&[&[2, 1], &[1, 1]]);
        let x0 = TorusPoint::from_rational_pairs(&[(1, 5), (2, 5)]);
        let (fw, fast) = FastWalk::try_new(&x0, std::slice::from_ref(&g), 4).unwrap();
        let out = fw.act(&g, &fast);
        assert_eq!(
            fw.to_torus(&out),
            TorusPoint::from_rational_pairs(&[(4, 5), (3, 5)])
        );
    }

    #[test]
    fn overflow_risk_declines_the_fast_lane() {
        let g = IntMatrix::from_i64(&[&[2, 1], &[1, 1]]);
        let x0 = TorusPoint::from_rational_pairs(&[(1, 5), (2, 5)]);
        assert!(FastWalk::try_new(&x0, std::slice::from_ref(&g), 100_000).is_none());
    }
}
