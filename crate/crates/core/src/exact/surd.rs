//! Exact arithmetic in the Q-vector space spanned by `1` and square roots
//! of distinct square-free integers.
//!
//! Linear walk dynamics never multiplies two coordinates, so the span is
//! closed under everything we do to a torus coordinate: integer linear
//! combinations and subtraction of integers (mod-1 reduction). Comparisons
//! and floors are decided by certified rational interval evaluation at
//! increasing precision; this terminates because a nonzero combination
//! `Σ cᵢ√kᵢ` with distinct square-free `kᵢ ≥ 2` is irrational.

use num_bigint::{BigInt, BigUint};
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign, Neg, Sub};

/// Exact number of the form `r + Σ c_k √k` with rational `r`, `c_k`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct SurdExpr {
    rat: BigRational,
    /// Map square-free radicand `k ≥ 2` → nonzero rational coefficient.
    surds: BTreeMap<u64, BigRational>,
}

/// Largest square divisor factored out of user-supplied radicands.
fn squarefree_split(k: u64) -> (u64, u64) {
    // (square part s², square-free part m) with k = s²·m
    let mut s = 1u64;
    let mut m = k;
    let mut p = 2u64;
    while p * p <= m {
        while m % (p * p) == 0 {
            m /= p * p;
            s *= p;
        }
        p += 1;
    }
    (s, m)
}

impl SurdExpr {
    pub fn zero() -> Self {
        SurdExpr {
            rat: BigRational::zero(),
            surds: BTreeMap::new(),
        }
    }

    pub fn from_rational(r: BigRational) -> Self {
        SurdExpr {
            rat: r,
            surds: BTreeMap::new(),
        }
    }

    pub fn from_integer(n: i64) -> Self {
        Self::from_rational(BigRational::from_integer(BigInt::from(n)))
    }

    /// `c·√k`, with `k ≥ 0`. Square parts of `k` are absorbed into `c`.
    pub fn surd(c: BigRational, k: u64) -> Self {
        if k == 0 || c.is_zero() {
            return Self::zero();
        }
        let (s, m) = squarefree_split(k);
        let scaled = c * BigRational::from_integer(BigInt::from(s));
        if m == 1 {
            return Self::from_rational(scaled);
        }
        let mut surds = BTreeMap::new();
        surds.insert(m, scaled);
        SurdExpr {
            rat: BigRational::zero(),
            surds,
        }
    }

    pub fn is_rational(&self) -> bool {
        self.surds.is_empty()
    }

    pub fn as_rational(&self) -> Option<&BigRational> {
        if self.is_rational() {
            Some(&self.rat)
        } else {
            None
        }
    }

    pub fn rational_part(&self) -> &BigRational {
        &self.rat
    }

    pub fn is_zero(&self) -> bool {
        self.rat.is_zero() && self.surds.is_empty()
    }

    pub fn scale_int(&self, c: &BigInt) -> Self {
        self.scale_rational(&BigRational::from_integer(c.clone()))
    }

    pub fn scale_rational(&self, c: &BigRational) -> Self {
        if c.is_zero() {
            return Self::zero();
        }
        let mut surds = BTreeMap::new();
        for (k, v) in &self.surds {
            surds.insert(*k, v * c);
        }
        SurdExpr {
            rat: &self.rat * c,
            surds,
        }
    }

    /// Iterate over `(radicand, coefficient)` pairs of the surd part.
    pub fn surd_terms(&self) -> impl Iterator<Item = (u64, &BigRational)> + '_ {
        self.surds.iter().map(|(k, v)| (*k, v))
    }

    fn prune(&mut self) {
        self.surds.retain(|_, v| !v.is_zero());
    }

    /// Certified rational enclosure `[lo, hi]` at `bits` of sqrt precision.
    /// Square-root bounds are memoized per `(radicand, bits)` — walks call
    /// this once per step per coordinate, always with the same radicands.
    fn enclosure(&self, bits: u32) -> (BigRational, BigRational) {
        thread_local! {
            static SQRT_CACHE: std::cell::RefCell<
                std::collections::HashMap<(u64, u32), (BigRational, BigRational)>,
            > = std::cell::RefCell::new(std::collections::HashMap::new());
        }
        let mut lo = self.rat.clone();
        let mut hi = self.rat.clone();
        for (k, c) in &self.surds {
            let (sq_lo, sq_hi) = SQRT_CACHE.with(|cache| {
                cache
                    .borrow_mut()
                    .entry((*k, bits))
                    .or_insert_with(|| {
                        // s/2^bits ≤ √k < (s+1)/2^bits
                        let scale = BigUint::one() << bits;
                        let denom = BigInt::from(scale.clone());
                        let s = (BigUint::from(*k) * &scale * &scale).sqrt();
                        (
                            BigRational::new(BigInt::from(s.clone()), denom.clone()),
                            BigRational::new(BigInt::from(s + BigUint::one()), denom),
                        )
                    })
                    .clone()
            });
            if c.is_positive() {
                lo += c * &sq_lo;
                hi += c * &sq_hi;
            } else {
                lo += c * &sq_hi;
                hi += c * &sq_lo;
            }
        }
        (lo, hi)
    }

    /// Exact floor. Decided by interval refinement; the irrationality of
    /// nonzero surd combinations guarantees termination.
    pub fn floor(&self) -> BigInt {
        if self.is_rational() {
            return self.rat.floor().to_integer();
        }
        let mut bits = 64u32;
        loop {
            let (lo, hi) = self.enclosure(bits);
            let fl = lo.floor().to_integer();
            let fh = hi.floor().to_integer();
            if fl == fh {
                return fl;
            }
            bits *= 2;
            assert!(bits <= 1 << 20, "floor refinement failed to converge");
        }
    }

    /// Reduce into `[0,1)` by subtracting the floor.
    pub fn mod1(&self) -> Self {
        let f = self.floor();
        if f.is_zero() {
            return self.clone();
        }
        let mut out = self.clone();
        out.rat -= BigRational::from_integer(f);
        out
    }

    /// Rational approximation with certified absolute error `≤ 2^-bits`.
    pub fn approx(&self, bits: u32) -> BigRational {
        if self.is_rational() {
            return self.rat.clone();
        }
        // Enclosure width ≤ Σ|c|·2^-p; widen p until below target.
        let mut p = bits + 8;
        loop {
            let (lo, hi) = self.enclosure(p);
            let width = &hi - &lo;
            let target = BigRational::new(BigInt::one(), BigInt::one() << bits);
            if width <= target {
                return (lo + hi) / BigRational::from_integer(BigInt::from(2));
            }
            p *= 2;
        }
    }

    /// Evaluate to `f64` (absolute error far below one ulp for values of
    /// unit size). Goes through a 160-bit fixed-point integer dot product
    /// rather than rational arithmetic: the surd coefficients of reduced
    /// walk coordinates are huge and cancel almost completely, and gcd
    /// normalization on every rational operation dominates otherwise.
    pub fn to_f64(&self) -> f64 {
        if self.is_rational() {
            return self.rat.to_f64().unwrap_or(f64::NAN);
        }
        const K: u32 = 160;
        thread_local! {
            static SQRT_FIXED: std::cell::RefCell<std::collections::HashMap<u64, BigInt>> =
                std::cell::RefCell::new(std::collections::HashMap::new());
        }
        // N/2^K = value up to Σ(|c_i|+1)·2^-K
        let mut acc: BigInt = (self.rat.numer() << K).div_floor(self.rat.denom());
        for (k, c) in &self.surds {
            let fixed = SQRT_FIXED.with(|cache| {
                cache
                    .borrow_mut()
                    .entry(*k)
                    .or_insert_with(|| {
                        BigInt::from((BigUint::from(*k) << (2 * K)).sqrt())
                    })
                    .clone()
            });
            acc += (c.numer() * fixed).div_floor(c.denom());
        }
        acc.to_f64().unwrap_or(f64::NAN) / 2f64.powi(K as i32)
    }

    pub fn is_negative(&self) -> bool {
        if self.is_rational() {
            return self.rat.is_negative();
        }
        self.floor() < BigInt::zero()
    }
}

impl Add for SurdExpr {
    type Output = SurdExpr;
    fn add(self, rhs: SurdExpr) -> SurdExpr {
        let mut out = self;
        out += rhs;
        out
    }
}

impl AddAssign for SurdExpr {
    fn add_assign(&mut self, rhs: SurdExpr) {
        self.rat += rhs.rat;
        for (k, v) in rhs.surds {
            *self
                .surds
                .entry(k)
                .or_insert_with(BigRational::zero) += v;
        }
        self.prune();
    }
}

impl Sub for SurdExpr {
    type Output = SurdExpr;
    fn sub(self, rhs: SurdExpr) -> SurdExpr {
        self + (-rhs)
    }
}

impl Neg for SurdExpr {
    type Output = SurdExpr;
    fn neg(self) -> SurdExpr {
        let mut surds = BTreeMap::new();
        for (k, v) in self.surds {
            surds.insert(k, -v);
        }
        SurdExpr {
            rat: -self.rat,
            surds,
        }
    }
}

impl fmt::Debug for SurdExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.rat)?;
        for (k, c) in &self.surds {
            write!(f, " + ({c})*sqrt({k})")?;
        }
        Ok(())
    }
}

/// Display emits the same grammar `parse_coordinate` accepts:
/// `p/q ± a/b*sqrt(k) ± …`.
impl fmt::Display for SurdExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.rat)?;
        for (k, c) in &self.surds {
            if c.is_negative() {
                write!(f, "-{}*sqrt({k})", -c.clone())?;
            } else {
                write!(f, "+{c}*sqrt({k})")?;
            }
        }
        Ok(())
    }
}
