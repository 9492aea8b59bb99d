//! Small dense `f64` linear algebra used by the decomposition and audit
//! engines. Dimensions here are tiny (at most `d² ≤ 36`), so simple
//! partial-pivot routines are accurate and fast enough.

use num_complex::Complex64;

/// Dense row-major `f64` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c);
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn matmul(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.cols, rhs.rows);
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..rhs.cols {
                    out[(i, j)] += a * rhs[(k, j)];
                }
            }
        }
        out
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len());
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self[(i, j)] * v[j]).sum())
            .collect()
    }

    pub fn scale(&self, c: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn add(&self, rhs: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, rhs: &Mat) -> Mat {
        self.add(&rhs.scale(-1.0))
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Determinant by partial-pivot LU.
pub fn det(m: &Mat) -> f64 {
    assert_eq!(m.rows, m.cols);
    let n = m.rows;
    let mut a = m.data.clone();
    let mut sign = 1.0;
    let mut out = 1.0;
    for k in 0..n {
        let (mut piv, mut best) = (k, a[k * n + k].abs());
        for r in k + 1..n {
            let v = a[r * n + k].abs();
            if v > best {
                piv = r;
                best = v;
            }
        }
        if best == 0.0 {
            return 0.0;
        }
        if piv != k {
            for c in 0..n {
                a.swap(k * n + c, piv * n + c);
            }
            sign = -sign;
        }
        let p = a[k * n + k];
        out *= p;
        for r in k + 1..n {
            let f = a[r * n + k] / p;
            if f == 0.0 {
                continue;
            }
            for c in k..n {
                a[r * n + c] -= f * a[k * n + c];
            }
        }
    }
    sign * out
}

/// Solve `A x = b` by partial-pivot Gaussian elimination.
/// Returns `None` when the pivot collapses (singular system).
pub fn solve(a: &Mat, b: &[f64]) -> Option<Vec<f64>> {
    assert_eq!(a.rows, a.cols);
    assert_eq!(a.rows, b.len());
    let n = a.rows;
    let mut m = a.data.clone();
    let mut rhs = b.to_vec();
    for k in 0..n {
        let (mut piv, mut best) = (k, m[k * n + k].abs());
        for r in k + 1..n {
            let v = m[r * n + k].abs();
            if v > best {
                piv = r;
                best = v;
            }
        }
        if best < 1e-300 {
            return None;
        }
        if piv != k {
            for c in 0..n {
                m.swap(k * n + c, piv * n + c);
            }
            rhs.swap(k, piv);
        }
        let p = m[k * n + k];
        for r in k + 1..n {
            let f = m[r * n + k] / p;
            if f == 0.0 {
                continue;
            }
            for c in k..n {
                m[r * n + c] -= f * m[k * n + c];
            }
            rhs[r] -= f * rhs[k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let mut s = rhs[k];
        for c in k + 1..n {
            s -= m[k * n + c] * x[c];
        }
        x[k] = s / m[k * n + k];
    }
    Some(x)
}

/// Numerical rank via row echelon with a relative tolerance.
pub fn rank(m: &Mat, tol: f64) -> usize {
    let mut a = m.data.clone();
    let (rows, cols) = (m.rows, m.cols);
    let scale = m.max_abs().max(1e-300);
    let threshold = tol * scale;
    let mut rank = 0usize;
    let mut row = 0usize;
    for col in 0..cols {
        let (mut piv, mut best) = (row, 0.0f64);
        for r in row..rows {
            let v = a[r * cols + col].abs();
            if v > best {
                piv = r;
                best = v;
            }
        }
        if best <= threshold {
            continue;
        }
        if piv != row {
            for c in 0..cols {
                a.swap(row * cols + c, piv * cols + c);
            }
        }
        let p = a[row * cols + col];
        for r in 0..rows {
            if r != row {
                let f = a[r * cols + col] / p;
                if f != 0.0 {
                    for c in 0..cols {
                        a[r * cols + c] -= f * a[row * cols + c];
                    }
                }
            }
        }
        rank += 1;
        row += 1;
        if row == rows {
            break;
        }
    }
    rank
}

/// Orthonormal basis of the row span (modified Gram-Schmidt, two passes).
pub fn orthonormal_rows(m: &Mat, tol: f64) -> Vec<Vec<f64>> {
    let scale = m.max_abs().max(1e-300);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for i in 0..m.rows {
        let mut v = m.row(i).to_vec();
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > tol * scale {
            for x in &mut v {
                *x /= norm;
            }
            basis.push(v);
        }
    }
    basis
}

/// Roots of a monic polynomial `t^n + c[n-1] t^(n-1) + … + c[0]` by the
/// Durand-Kerner iteration. Adequate for the well-separated spectra of
/// random central elements; callers must validate cluster gaps themselves.
pub fn monic_roots(coeffs_low_to_high: &[f64]) -> Vec<Complex64> {
    let n = coeffs_low_to_high.len();
    if n == 0 {
        return Vec::new();
    }
    let eval = |z: Complex64| -> Complex64 {
        let mut acc = Complex64::new(1.0, 0.0);
        for c in coeffs_low_to_high.iter().rev() {
            acc = acc * z + Complex64::new(*c, 0.0);
        }
        acc
    };
    let radius = 1.0
        + coeffs_low_to_high
            .iter()
            .fold(0.0f64, |m, c| m.max(c.abs()));
    // deterministic non-real seed angles
    let mut roots: Vec<Complex64> = (0..n)
        .map(|k| {
            let theta = 2.0 * std::f64::consts::PI * (k as f64 + 0.25) / n as f64 + 0.1;
            Complex64::from_polar(radius.max(1.0) * 0.7, theta)
        })
        .collect();
    for _ in 0..200 {
        let mut delta_max = 0.0f64;
        for i in 0..n {
            let mut denom = Complex64::new(1.0, 0.0);
            for j in 0..n {
                if j != i {
                    denom *= roots[i] - roots[j];
                }
            }
            if denom.norm() < 1e-300 {
                continue;
            }
            let step = eval(roots[i]) / denom;
            roots[i] -= step;
            delta_max = delta_max.max(step.norm());
        }
        if delta_max < 1e-14 * radius.max(1.0) {
            break;
        }
    }
    roots
}

/// Least squares fit `y ≈ a + b x`; returns `(a, b, r²)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return (my, 0.0, 0.0);
    }
    let b = sxy / sxx;
    let a = my - b * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (a, b, r2)
}
