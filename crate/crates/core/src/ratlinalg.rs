//! Exact linear algebra over the rationals: reduced row echelon bases with
//! pivot bookkeeping, nullspaces, and characteristic polynomials. This is
//! what makes span closures and centers exact certificates rather than
//! numerical estimates.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

pub type RatVec = Vec<BigRational>;

/// A reduced-row-echelon basis of a subspace of `Q^n`, with pivot columns.
/// Rows are orthogonal in the "unit pivot, zeros above and below" sense, so
/// the coordinates of any vector of the span can be read off at the pivots.
#[derive(Clone, Debug)]
pub struct RrefBasis {
    pub ambient: usize,
    pub rows: Vec<RatVec>,
    pub pivots: Vec<usize>,
}

impl RrefBasis {
    pub fn empty(ambient: usize) -> Self {
        RrefBasis {
            ambient,
            rows: Vec::new(),
            pivots: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    /// Reduce `v` against the basis; returns the remainder.
    pub fn reduce(&self, mut v: RatVec) -> RatVec {
        for (row, &p) in self.rows.iter().zip(&self.pivots) {
            if !v[p].is_zero() {
                let f = v[p].clone();
                for (x, y) in v.iter_mut().zip(row) {
                    *x -= &f * y;
                }
            }
        }
        v
    }

    /// Insert `v` if independent; returns true when the dimension grew.
    pub fn insert(&mut self, v: RatVec) -> bool {
        let mut r = self.reduce(v);
        let Some(p) = r.iter().position(|x| !x.is_zero()) else {
            return false;
        };
        let lead = r[p].clone();
        for x in &mut r {
            *x /= &lead;
        }
        // eliminate the new pivot from existing rows
        for (row, _) in self.rows.iter_mut().zip(&self.pivots) {
            if !row[p].is_zero() {
                let f = row[p].clone();
                for (x, y) in row.iter_mut().zip(&r) {
                    *x -= &f * y;
                }
            }
        }
        // keep rows ordered by pivot column
        let at = self
            .pivots
            .iter()
            .position(|&q| q > p)
            .unwrap_or(self.pivots.len());
        self.rows.insert(at, r);
        self.pivots.insert(at, p);
        true
    }

    /// Membership test.
    pub fn contains(&self, v: &[BigRational]) -> bool {
        self.reduce(v.to_vec()).iter().all(Zero::is_zero)
    }

    /// Coordinates of `v` in this basis (exact), or `None` if outside.
    pub fn coordinates(&self, v: &[BigRational]) -> Option<RatVec> {
        let coords: RatVec = self.pivots.iter().map(|&p| v[p].clone()).collect();
        // verify membership
        let mut rem = v.to_vec();
        for (c, row) in coords.iter().zip(&self.rows) {
            for (x, y) in rem.iter_mut().zip(row) {
                *x -= c * y;
            }
        }
        if rem.iter().all(Zero::is_zero) {
            Some(coords)
        } else {
            None
        }
    }

    /// Approximate coordinates of an `f64` vector (exactness is impossible;
    /// valid when the vector lies near the span).
    pub fn coordinates_f64(&self, v: &[f64]) -> Vec<f64> {
        self.pivots.iter().map(|&p| v[p]).collect()
    }

    pub fn rows_f64(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect())
            .collect()
    }
}

/// Exact nullspace basis of the `rows × cols` rational matrix `a` (row-major):
/// all `x` with `a x = 0`.
pub fn nullspace(a: &[RatVec], cols: usize) -> Vec<RatVec> {
    // bring a to rref
    let mut basis = RrefBasis::empty(cols);
    for row in a {
        assert_eq!(row.len(), cols);
        basis.insert(row.clone());
    }
    let pivot_set: Vec<usize> = basis.pivots.clone();
    let mut out = Vec::new();
    for free in 0..cols {
        if pivot_set.contains(&free) {
            continue;
        }
        let mut v = vec![BigRational::zero(); cols];
        v[free] = BigRational::one();
        for (row, &p) in basis.rows.iter().zip(&basis.pivots) {
            // pivot var = -coefficient of free var
            v[p] = -row[free].clone();
        }
        out.push(v);
    }
    out
}

/// Characteristic polynomial of a square rational matrix by the
/// Faddeev–LeVerrier recursion. Returns monic coefficients low→high,
/// excluding the leading 1: `det(tI − A) = t^n + c[n-1]t^(n-1) + … + c[0]`.
pub fn char_poly(a: &[RatVec]) -> Vec<BigRational> {
    let n = a.len();
    for row in a {
        assert_eq!(row.len(), n);
    }
    let mut m: Vec<RatVec> = vec![vec![BigRational::zero(); n]; n]; // M_0 = 0
    let mut coeffs = vec![BigRational::zero(); n + 1];
    coeffs[n] = BigRational::one();
    let mut c = BigRational::one(); // c_n = 1
    for k in 1..=n {
        // M_k = A M_{k-1} + c_{n-k+1} I
        let mut mk = mat_mul(a, &m);
        for (i, row) in mk.iter_mut().enumerate() {
            row[i] += &c;
        }
        // c_{n-k} = -tr(A M_k)/k
        let am = mat_mul(a, &mk);
        let tr: BigRational = (0..n).map(|i| am[i][i].clone()).sum();
        c = -tr / BigRational::from_integer(BigInt::from(k));
        coeffs[n - k] = c.clone();
        m = mk;
    }
    coeffs.truncate(n);
    coeffs
}

pub fn mat_mul(a: &[RatVec], b: &[RatVec]) -> Vec<RatVec> {
    let n = a.len();
    let inner = b.len();
    let cols = if inner == 0 { 0 } else { b[0].len() };
    let mut out = vec![vec![BigRational::zero(); cols]; n];
    for i in 0..n {
        for k in 0..inner {
            if a[i][k].is_zero() {
                continue;
            }
            for j in 0..cols {
                if !b[k][j].is_zero() {
                    let t = &a[i][k] * &b[k][j];
                    out[i][j] += t;
                }
            }
        }
    }
    out
}

/// Continued-fraction rational reconstruction of an `f64` with bounded
/// denominator; returns `None` when no convergent approximates `x` to
/// `tol` within the bound.
pub fn reconstruct_rational(x: f64, max_den: u64, tol: f64) -> Option<BigRational> {
    if !x.is_finite() {
        return None;
    }
    let (mut p0, mut q0, mut p1, mut q1) = (1i128, 0i128, x.floor() as i128, 1i128);
    let mut frac = x - x.floor();
    for _ in 0..64 {
        let cand = BigRational::new(BigInt::from(p1), BigInt::from(q1));
        if (cand.to_f64().unwrap_or(f64::NAN) - x).abs() <= tol {
            return Some(cand);
        }
        if frac.abs() < 1e-18 {
            break;
        }
        let a = (1.0 / frac).floor();
        frac = 1.0 / frac - a;
        let ai = a as i128;
        let (p2, q2) = (ai * p1 + p0, ai * q1 + q0);
        if q2.unsigned_abs() > u128::from(max_den) {
            break;
        }
        (p0, q0, p1, q1) = (p1, q1, p2, q2);
    }
    let cand = BigRational::new(BigInt::from(p1), BigInt::from(q1));
    if (cand.to_f64().unwrap_or(f64::NAN) - x).abs() <= tol {
        Some(cand)
    } else {
        None
    }
}

/// Exact determinant of a rational matrix.
pub fn det(a: &[RatVec]) -> BigRational {
    let n = a.len();
    let mut m: Vec<RatVec> = a.to_vec();
    let mut out = BigRational::one();
    let mut sign = false;
    for k in 0..n {
        let piv = (k..n).find(|&r| !m[r][k].is_zero());
        let Some(piv) = piv else {
            return BigRational::zero();
        };
        if piv != k {
            m.swap(piv, k);
            sign = !sign;
        }
        let p = m[k][k].clone();
        out *= &p;
        for r in k + 1..n {
            if m[r][k].is_zero() {
                continue;
            }
            let f = &m[r][k] / &p;
            for c in k..n {
                let t = &f * &m[k][c];
                m[r][c] -= t;
            }
        }
    }
    if sign {
        -out
    } else {
        out
    }
}

pub fn to_f64_vec(v: &[BigRational]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
}

pub fn abs_max(v: &[BigRational]) -> BigRational {
    v.iter()
        .map(Signed::abs)
        .max()
        .unwrap_or_else(BigRational::zero)
}
