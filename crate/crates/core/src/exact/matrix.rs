//! Square integer matrices with arbitrary-precision entries.

use crate::error::{CoreError, Result};
use crate::exact::surd::SurdExpr;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use std::fmt;
use std::ops::Mul;

/// A `d×d` matrix over `Z`, stored row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct IntMatrix {
    dim: usize,
    entries: Vec<BigInt>,
}

impl IntMatrix {
    pub fn new(dim: usize, entries: Vec<BigInt>) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(CoreError::DimensionMismatch(format!(
                "expected {} entries for a {dim}x{dim} matrix, got {}",
                dim * dim,
                entries.len()
            )));
        }
        Ok(IntMatrix { dim, entries })
    }

    pub fn from_i64(rows: &[&[i64]]) -> Self {
        let dim = rows.len();
        let mut entries = Vec::with_capacity(dim * dim);
        for row in rows {
            assert_eq!(row.len(), dim, "rows must form a square matrix");
            entries.extend(row.iter().map(|&v| BigInt::from(v)));
        }
        IntMatrix { dim, entries }
    }

    pub fn identity(dim: usize) -> Self {
        let mut entries = vec![BigInt::zero(); dim * dim];
        for i in 0..dim {
            entries[i * dim + i] = BigInt::one();
        }
        IntMatrix { dim, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, r: usize, c: usize) -> &BigInt {
        &self.entries[r * self.dim + c]
    }

    pub fn entries(&self) -> &[BigInt] {
        &self.entries
    }

    pub fn mat_mul(&self, rhs: &IntMatrix) -> Result<IntMatrix> {
        if self.dim != rhs.dim {
            return Err(CoreError::DimensionMismatch(format!(
                "{}x{} * {}x{}",
                self.dim, self.dim, rhs.dim, rhs.dim
            )));
        }
        let d = self.dim;
        let mut entries = vec![BigInt::zero(); d * d];
        for i in 0..d {
            for k in 0..d {
                let a = self.entry(i, k);
                if a.is_zero() {
                    continue;
                }
                for j in 0..d {
                    let b = rhs.entry(k, j);
                    if !b.is_zero() {
                        entries[i * d + j] += a * b;
                    }
                }
            }
        }
        Ok(IntMatrix { dim: d, entries })
    }

    /// Exact determinant (fraction-free Bareiss elimination).
    pub fn det(&self) -> BigInt {
        let d = self.dim;
        if d == 0 {
            return BigInt::one();
        }
        let mut m = self.entries.clone();
        let mut sign = 1i32;
        let mut prev = BigInt::one();
        for k in 0..d - 1 {
            if m[k * d + k].is_zero() {
                // pivot search
                let mut found = None;
                for r in k + 1..d {
                    if !m[r * d + k].is_zero() {
                        found = Some(r);
                        break;
                    }
                }
                match found {
                    Some(r) => {
                        for c in 0..d {
                            m.swap(k * d + c, r * d + c);
                        }
                        sign = -sign;
                    }
                    None => return BigInt::zero(),
                }
            }
            for i in k + 1..d {
                for j in k + 1..d {
                    let v = (&m[i * d + j] * &m[k * d + k] - &m[i * d + k] * &m[k * d + j])
                        / &prev;
                    m[i * d + j] = v;
                }
                m[i * d + k] = BigInt::zero();
            }
            prev = m[k * d + k].clone();
        }
        let det = m[(d - 1) * d + (d - 1)].clone();
        if sign < 0 {
            -det
        } else {
            det
        }
    }

    /// Exact inverse; fails unless `det = ±1` (the walk only ever inverts
    /// unimodular generators).
    pub fn inverse_unimodular(&self) -> Result<IntMatrix> {
        let det = self.det();
        if det.magnitude() != BigInt::one().magnitude() {
            return Err(CoreError::NotUnimodular {
                index: usize::MAX,
                det: det.to_string(),
            });
        }
        let d = self.dim;
        // Gauss-Jordan over Q; entries of the result are integers.
        let mut a: Vec<BigRational> = self
            .entries
            .iter()
            .map(|v| BigRational::from_integer(v.clone()))
            .collect();
        let mut inv: Vec<BigRational> = IntMatrix::identity(d)
            .entries
            .iter()
            .map(|v| BigRational::from_integer(v.clone()))
            .collect();
        for col in 0..d {
            let pivot = (col..d)
                .find(|&r| !a[r * d + col].is_zero())
                .expect("unimodular matrix must have a pivot");
            if pivot != col {
                for c in 0..d {
                    a.swap(col * d + c, pivot * d + c);
                    inv.swap(col * d + c, pivot * d + c);
                }
            }
            let p = a[col * d + col].clone();
            for c in 0..d {
                a[col * d + c] /= &p;
                inv[col * d + c] /= &p;
            }
            for r in 0..d {
                if r != col && !a[r * d + col].is_zero() {
                    let f = a[r * d + col].clone();
                    for c in 0..d {
                        let v = &a[col * d + c] * &f;
                        a[r * d + c] -= v;
                        let w = &inv[col * d + c] * &f;
                        inv[r * d + c] -= w;
                    }
                }
            }
        }
        let entries = inv
            .into_iter()
            .map(|v| {
                debug_assert!(v.is_integer());
                v.to_integer()
            })
            .collect();
        Ok(IntMatrix {
            dim: d,
            entries,
        })
    }

    /// Maximum absolute row sum (the ∞-operator norm), exact.
    pub fn row_sum_norm(&self) -> BigInt {
        let d = self.dim;
        let mut best = BigInt::zero();
        for i in 0..d {
            let s: BigInt = (0..d).map(|j| self.entry(i, j).abs()).sum();
            if s > best {
                best = s;
            }
        }
        best
    }

    /// Matrix-vector product over the surd field (exact).
    pub fn apply_surd(&self, x: &[SurdExpr]) -> Vec<SurdExpr> {
        assert_eq!(x.len(), self.dim);
        let d = self.dim;
        (0..d)
            .map(|i| {
                let mut acc = SurdExpr::zero();
                for j in 0..d {
                    let g = self.entry(i, j);
                    if !g.is_zero() {
                        acc += x[j].scale_int(g);
                    }
                }
                acc
            })
            .collect()
    }

    /// Row-vector (frequency) times matrix: `a·g`, exact over `Z`.
    pub fn row_apply(&self, a: &[BigInt]) -> Vec<BigInt> {
        assert_eq!(a.len(), self.dim);
        let d = self.dim;
        (0..d)
            .map(|j| (0..d).map(|i| &a[i] * self.entry(i, j)).sum())
            .collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.entries
            .iter()
            .map(|v| v.to_f64().unwrap_or(f64::NAN))
            .collect()
    }
}

impl Mul for &IntMatrix {
    type Output = IntMatrix;
    fn mul(self, rhs: &IntMatrix) -> IntMatrix {
        self.mat_mul(rhs).expect("dimension mismatch")
    }
}

impl fmt::Debug for IntMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for r in 0..self.dim {
            if r > 0 {
                write!(f, "; ")?;
            }
            for c in 0..self.dim {
                if c > 0 {
                    write!(f, ",")?;
                }
                write!(f, "{}", self.entry(r, c))?;
            }
        }
        write!(f, "]")
    }
}
