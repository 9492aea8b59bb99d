//! The matrix algebra generated by a walk, its decomposition into simple
//! two-sided ideals, and the induced splitting of `R^d`.
//!
//! The span closure and the center are exact rational certificates. The
//! splitting into simple ideals goes through the spectrum of a random
//! central element; the resulting central idempotents are numeric first,
//! with small-denominator rational reconstruction attempted as an exact
//! certificate whenever it succeeds.

use crate::error::{CoreError, Result};
use crate::exact::{IntMatrix, SurdExpr, TorusPoint};
use crate::linalg::{self, Mat};
use crate::ratlinalg::{self, RatVec, RrefBasis};
use crate::rng;
use num_bigint::BigInt;
use num_complex::Complex64;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::Rng;
use serde::Serialize;

// ---------------------------------------------------------------------------
// Generator systems
// ---------------------------------------------------------------------------

/// A finite group presented by its multiplication table. Element `0` is the
/// identity. Only small groups appear as component groups at desk scale.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FiniteGroup {
    pub name: String,
    pub order: usize,
    /// `mul[a * order + b] = a·b`
    pub mul: Vec<usize>,
    pub inv: Vec<usize>,
}

impl FiniteGroup {
    pub fn trivial() -> Self {
        FiniteGroup {
            name: "trivial".into(),
            order: 1,
            mul: vec![0],
            inv: vec![0],
        }
    }

    pub fn cyclic(m: usize) -> Self {
        assert!(m >= 1);
        let mut mul = vec![0; m * m];
        for a in 0..m {
            for b in 0..m {
                mul[a * m + b] = (a + b) % m;
            }
        }
        let inv = (0..m).map(|a| (m - a) % m).collect();
        FiniteGroup {
            name: format!("cyclic:{m}"),
            order: m,
            mul,
            inv,
        }
    }

    pub fn mul(&self, a: usize, b: usize) -> usize {
        self.mul[a * self.order + b]
    }

    pub fn inv(&self, a: usize) -> usize {
        self.inv[a]
    }
}

/// Per-generator coset labels into a declared finite group.
#[derive(Clone, Debug, Serialize)]
pub struct CosetLabels {
    pub group: FiniteGroup,
    /// `labels[i]` is the coset of generator `i`.
    pub labels: Vec<usize>,
}

/// Finitely supported probability measure on integer matrices, with
/// optional coset labels into `F = G/G°`.
#[derive(Clone, Debug)]
pub struct GeneratorSystem {
    dim: usize,
    generators: Vec<IntMatrix>,
    weights: Vec<BigRational>,
    weights_f64: Vec<f64>,
    coset_labels: Option<CosetLabels>,
}

impl GeneratorSystem {
    pub fn new(
        generators: Vec<IntMatrix>,
        weights: Vec<BigRational>,
        coset_labels: Option<CosetLabels>,
    ) -> Result<Self> {
        if generators.is_empty() {
            return Err(CoreError::InvalidSystem("no generators".into()));
        }
        let dim = generators[0].dim();
        if generators.iter().any(|g| g.dim() != dim) {
            return Err(CoreError::InvalidSystem(
                "generators have mixed dimensions".into(),
            ));
        }
        if weights.len() != generators.len() {
            return Err(CoreError::InvalidSystem(format!(
                "{} generators but {} weights",
                generators.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_positive()) {
            return Err(CoreError::InvalidSystem("weights must be positive".into()));
        }
        let total: BigRational = weights.iter().cloned().sum();
        if !total.is_one() {
            return Err(CoreError::InvalidSystem(format!(
                "weights sum to {total}, not 1"
            )));
        }
        for (index, g) in generators.iter().enumerate() {
            let det = g.det();
            if det.magnitude() != BigInt::one().magnitude() {
                return Err(CoreError::NotUnimodular {
                    index,
                    det: det.to_string(),
                });
            }
        }
        if let Some(cl) = &coset_labels {
            if cl.labels.len() != generators.len() {
                return Err(CoreError::InconsistentLabels(
                    "one label per generator required".into(),
                ));
            }
            if cl.labels.iter().any(|&l| l >= cl.group.order) {
                return Err(CoreError::InconsistentLabels(
                    "label outside the group".into(),
                ));
            }
        }
        let weights_f64 = weights.iter().map(|w| w.to_f64().unwrap_or(0.0)).collect();
        let sys = GeneratorSystem {
            dim,
            generators,
            weights,
            weights_f64,
            coset_labels,
        };
        sys.spot_check_labels()?;
        Ok(sys)
    }

    /// Random-word consistency check: the label of a product must be a
    /// function of the product matrix alone. A wrong labeling silently
    /// changes the identity-component algebra, so conflicts are fatal.
    fn spot_check_labels(&self) -> Result<()> {
        let Some(cl) = &self.coset_labels else {
            return Ok(());
        };
        let mut seen: std::collections::HashMap<IntMatrix, usize> =
            std::collections::HashMap::new();
        seen.insert(IntMatrix::identity(self.dim), 0);
        let mut rng = rng::stream(0x1abe1, 0);
        for _ in 0..200 {
            let len = 1 + (rng.gen::<usize>() % 6);
            let mut m = IntMatrix::identity(self.dim);
            let mut label = 0usize;
            for _ in 0..len {
                let i = rng.gen::<usize>() % self.generators.len();
                m = self.generators[i].mat_mul(&m)?;
                label = cl.group.mul(cl.labels[i], label);
            }
            if let Some(&prev) = seen.get(&m) {
                if prev != label {
                    return Err(CoreError::InconsistentLabels(format!(
                        "word product reached with labels {prev} and {label}"
                    )));
                }
            } else {
                seen.insert(m, label);
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn generators(&self) -> &[IntMatrix] {
        &self.generators
    }

    pub fn weights(&self) -> &[BigRational] {
        &self.weights
    }

    pub fn weights_f64(&self) -> &[f64] {
        &self.weights_f64
    }

    pub fn coset_labels(&self) -> Option<&CosetLabels> {
        self.coset_labels.as_ref()
    }

    pub fn group_order(&self) -> usize {
        self.coset_labels.as_ref().map_or(1, |c| c.group.order)
    }

    pub fn label_of(&self, generator: usize) -> usize {
        self.coset_labels.as_ref().map_or(0, |c| c.labels[generator])
    }

    pub fn generators_f64(&self) -> Vec<Mat> {
        self.generators
            .iter()
            .map(|g| Mat {
                rows: self.dim,
                cols: self.dim,
                data: g.to_f64(),
            })
            .collect()
    }

    /// One representative word product per coset label, found by BFS over
    /// words; errors if some coset is unreachable within the length bound.
    pub fn coset_representatives(&self, max_len: usize) -> Result<Vec<IntMatrix>> {
        let order = self.group_order();
        let mut reps: Vec<Option<IntMatrix>> = vec![None; order];
        reps[0] = Some(IntMatrix::identity(self.dim));
        let mut frontier = vec![(IntMatrix::identity(self.dim), 0usize)];
        for _ in 0..max_len {
            if reps.iter().all(Option::is_some) {
                break;
            }
            let mut next = Vec::new();
            for (m, l) in &frontier {
                for (i, g) in self.generators.iter().enumerate() {
                    let nm = g.mat_mul(m)?;
                    let nl = self
                        .coset_labels
                        .as_ref()
                        .map_or(0, |c| c.group.mul(c.labels[i], *l));
                    if reps[nl].is_none() {
                        reps[nl] = Some(nm.clone());
                    }
                    next.push((nm, nl));
                }
            }
            frontier = next;
            if frontier.len() > 4096 {
                frontier.truncate(4096);
            }
        }
        reps.into_iter()
            .enumerate()
            .map(|(l, r)| {
                r.ok_or_else(|| {
                    CoreError::InconsistentLabels(format!("coset {l} unreachable by words"))
                })
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Algebra decomposition
// ---------------------------------------------------------------------------

/// One simple two-sided ideal of the algebra.
#[derive(Clone, Debug)]
pub struct Factor {
    /// Central idempotent as a `d×d` matrix, `f64`.
    pub idempotent: Mat,
    /// Exact rational idempotent when reconstruction succeeded.
    pub idempotent_exact: Option<Vec<RatVec>>,
    /// Dimension of the ideal `e_j·E`.
    pub dim: usize,
    /// Orthonormal basis of the ideal in vectorized coordinates.
    pub basis_vecs: Vec<Vec<f64>>,
    /// Eigenvalue cluster of the random central element that produced it.
    pub cluster: Vec<(f64, f64)>,
}

/// Quality metrics of a computed decomposition.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct Residuals {
    pub idempotency: f64,
    pub orthogonality: f64,
    pub sum_to_one: f64,
    pub commutation: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.idempotency
            .max(self.orthogonality)
            .max(self.sum_to_one)
            .max(self.commutation)
    }
}

/// Basis of the generated algebra with, once computed, its center and its
/// Wedderburn factors.
#[derive(Clone, Debug)]
pub struct AlgebraDecomposition {
    /// Matrix size `d` (the algebra lives inside `Mat_d`).
    pub ambient_dim: usize,
    /// Exact basis of `E` as vectors in `Q^{d²}` (row-major matrices).
    pub basis: RrefBasis,
    pub center: Option<RrefBasis>,
    pub factors: Option<Vec<Factor>>,
    pub residuals: Residuals,
    pub tol: f64,
}

fn vec_of_mat(m: &IntMatrix) -> RatVec {
    m.entries()
        .iter()
        .map(|e| BigRational::from_integer(e.clone()))
        .collect()
}

fn rat_mat_of_vec(v: &[BigRational], d: usize) -> Vec<RatVec> {
    (0..d).map(|i| v[i * d..(i + 1) * d].to_vec()).collect()
}

fn vec_of_rat_mat(m: &[RatVec]) -> RatVec {
    m.iter().flatten().cloned().collect()
}

/// Multiply two vectorized rational `d×d` matrices.
fn mul_vec(a: &[BigRational], b: &[BigRational], d: usize) -> RatVec {
    let am = rat_mat_of_vec(a, d);
    let bm = rat_mat_of_vec(b, d);
    vec_of_rat_mat(&ratlinalg::mat_mul(&am, &bm))
}

impl AlgebraDecomposition {
    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn factor_dims(&self) -> Vec<usize> {
        self.factors
            .as_ref()
            .map(|f| f.iter().map(|x| x.dim).collect())
            .unwrap_or_default()
    }

    pub fn factors(&self) -> &[Factor] {
        self.factors.as_deref().unwrap_or(&[])
    }

    /// Projection to factor `j`: `x ↦ e_j·x`.
    pub fn project_factor(&self, j: usize, x: &Mat) -> Mat {
        self.factors()[j].idempotent.matmul(x)
    }

    /// `f64` matrices of the exact basis rows.
    pub fn basis_f64(&self) -> Vec<Mat> {
        let d = self.ambient_dim;
        self.basis
            .rows_f64()
            .into_iter()
            .map(|data| Mat {
                rows: d,
                cols: d,
                data,
            })
            .collect()
    }
}

/// Exact rational basis of the smallest unital subalgebra of `Mat_d`
/// containing all generators: span closure under left multiplication by
/// the generators, starting from the identity. Terminates because the
/// dimension is bounded by `d²`; inverses are automatic by Cayley–Hamilton.
pub fn generate_algebra(sys: &GeneratorSystem) -> AlgebraDecomposition {
    let d = sys.dim();
    let gens: Vec<RatVec> = sys.generators().iter().map(vec_of_mat).collect();
    let mut basis = RrefBasis::empty(d * d);
    basis.insert(vec_of_mat(&IntMatrix::identity(d)));
    let mut frontier: Vec<RatVec> = basis.rows.clone();
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for b in &frontier {
            for g in &gens {
                let prod = mul_vec(g, b, d);
                if basis.insert(prod.clone()) {
                    next.push(prod);
                }
            }
        }
        frontier = next;
    }
    AlgebraDecomposition {
        ambient_dim: d,
        basis,
        center: None,
        factors: None,
        residuals: Residuals::default(),
        tol: 1e-9,
    }
}

/// Algebra generated by the identity component: span closure of
/// label-trivial words up to `max_len`, then closure under multiplication.
/// Requires user-declared labels; a wrong labeling silently changes the
/// result.
pub fn generate_identity_component_algebra(
    sys: &GeneratorSystem,
    max_len: usize,
) -> Result<AlgebraDecomposition> {
    if sys.coset_labels().is_none() {
        return Ok(generate_algebra(sys));
    }
    let d = sys.dim();
    let mut basis = RrefBasis::empty(d * d);
    basis.insert(vec_of_mat(&IntMatrix::identity(d)));
    let mut frontier: Vec<(IntMatrix, usize)> = vec![(IntMatrix::identity(d), 0)];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for (m, l) in &frontier {
            for (i, g) in sys.generators().iter().enumerate() {
                let nm = g.mat_mul(m)?;
                let nl = sys
                    .coset_labels()
                    .map_or(0, |c| c.group.mul(c.labels[i], *l));
                if nl == 0 {
                    basis.insert(vec_of_mat(&nm));
                }
                next.push((nm, nl));
            }
        }
        if next.len() > 8192 {
            next.truncate(8192);
        }
        frontier = next;
    }
    // close the found span under multiplication
    let mut grew = true;
    while grew {
        grew = false;
        let rows = basis.rows.clone();
        for a in &rows {
            for b in &rows {
                if basis.insert(mul_vec(a, b, d)) {
                    grew = true;
                }
            }
        }
    }
    Ok(AlgebraDecomposition {
        ambient_dim: d,
        basis,
        center: None,
        factors: None,
        residuals: Residuals::default(),
        tol: 1e-9,
    })
}

/// Exact center: `{z ∈ E : zb = bz for every b ∈ E}`. Commutation with the
/// generators suffices since they generate `E` as an algebra.
pub fn compute_center(dec: &mut AlgebraDecomposition, sys: &GeneratorSystem) -> usize {
    let d = dec.ambient_dim;
    let n = dec.basis.dim();
    let gens: Vec<RatVec> = sys.generators().iter().map(vec_of_mat).collect();
    let mut constraints: Vec<RatVec> = Vec::new();
    for g in &gens {
        let cols: Vec<RatVec> = dec
            .basis
            .rows
            .iter()
            .map(|b| {
                let bg = mul_vec(b, g, d);
                let gb = mul_vec(g, b, d);
                bg.iter().zip(&gb).map(|(x, y)| x - y).collect()
            })
            .collect();
        for pos in 0..d * d {
            let row: RatVec = cols.iter().map(|c| c[pos].clone()).collect();
            if row.iter().any(|x| !x.is_zero()) {
                constraints.push(row);
            }
        }
    }
    let null = ratlinalg::nullspace(&constraints, n);
    let mut center = RrefBasis::empty(d * d);
    for coeffs in null {
        let mut v = vec![BigRational::zero(); d * d];
        for (c, b) in coeffs.iter().zip(&dec.basis.rows) {
            if !c.is_zero() {
                for (x, y) in v.iter_mut().zip(b) {
                    *x += c * y;
                }
            }
        }
        center.insert(v);
    }
    let dim = center.dim();
    dec.center = Some(center);
    dim
}

/// Options controlling the spectral splitting.
#[derive(Clone, Copy, Debug)]
pub struct WedderburnOptions {
    pub tol: f64,
    pub max_retries: usize,
    /// Single-linkage merge threshold, as a multiple of `tol`.
    pub cluster_gap_factor: f64,
    pub reconstruct_max_den: u64,
}

impl Default for WedderburnOptions {
    fn default() -> Self {
        WedderburnOptions {
            tol: 1e-9,
            max_retries: 8,
            cluster_gap_factor: 1e3,
            reconstruct_max_den: 1_000_000,
        }
    }
}

/// Complete the decomposition: central idempotents from spectral projectors
/// of a random central element acting on the center, factor dimensions in
/// decreasing order, residual metrics, and exact rational idempotents when
/// small-denominator reconstruction succeeds.
pub fn wedderburn_decompose(
    dec: &mut AlgebraDecomposition,
    sys: &GeneratorSystem,
    opts: WedderburnOptions,
    seed: u64,
) -> Result<()> {
    if dec.center.is_none() {
        compute_center(dec, sys);
    }
    let d = dec.ambient_dim;
    let center = dec.center.clone().expect("center just computed");
    let c_dim = center.dim();
    let identity_coords = center
        .coordinates(&vec_of_mat(&IntMatrix::identity(d)))
        .expect("identity lies in the center");

    let mut last_gap = f64::INFINITY;
    for attempt in 0..opts.max_retries {
        let mut rng = rng::stream(seed, attempt as u64);
        let coeffs: Vec<BigRational> = (0..c_dim)
            .map(|_| BigRational::from_integer(BigInt::from(rng.gen_range(-9i64..=9))))
            .collect();
        let mut z = vec![BigRational::zero(); d * d];
        for (c, row) in coeffs.iter().zip(&center.rows) {
            for (x, y) in z.iter_mut().zip(row) {
                *x += c * y;
            }
        }
        // multiplication operator of z on the center, exact
        let mut op: Vec<RatVec> = vec![vec![BigRational::zero(); c_dim]; c_dim];
        let mut ok = true;
        for (j, basis_elem) in center.rows.iter().enumerate() {
            let prod = mul_vec(&z, basis_elem, d);
            match center.coordinates(&prod) {
                Some(col) => {
                    for i in 0..c_dim {
                        op[i][j] = col[i].clone();
                    }
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        let cp = ratlinalg::char_poly(&op);
        let cp_f64: Vec<f64> = cp.iter().map(|c| c.to_f64().unwrap_or(f64::NAN)).collect();
        let roots = linalg::monic_roots(&cp_f64);
        let scale = roots.iter().fold(1.0f64, |m, r| m.max(r.norm()));
        let merge_at = opts.cluster_gap_factor * opts.tol * scale;
        let clusters = cluster_roots(&roots, merge_at);
        let mut min_gap = f64::INFINITY;
        for (i, a) in clusters.iter().enumerate() {
            for b in clusters.iter().skip(i + 1) {
                for x in a {
                    for y in b {
                        min_gap = min_gap.min((x - y).norm());
                    }
                }
            }
        }
        last_gap = min_gap;
        if clusters.len() > 1 && min_gap <= 10.0 * opts.tol * scale {
            continue; // ambiguous, retry with a fresh central element
        }
        let op_f64 = Mat::from_rows(
            &op.iter()
                .map(|r| ratlinalg::to_f64_vec(r))
                .collect::<Vec<_>>(),
        );
        let id_f64 = ratlinalg::to_f64_vec(&identity_coords);
        let mut factors = Vec::new();
        let mut projector_failed = false;
        for cluster in &clusters {
            let proj = match lagrange_cluster_projector(&op_f64, &roots, cluster, opts.tol) {
                Ok(p) => p,
                Err(_) => {
                    projector_failed = true;
                    break;
                }
            };
            let e_center = proj.apply(&id_f64);
            let mut e_vec = vec![0.0f64; d * d];
            for (c, row) in e_center.iter().zip(&center.rows) {
                for (x, y) in e_vec.iter_mut().zip(row) {
                    *x += c * y.to_f64().unwrap_or(f64::NAN);
                }
            }
            let mut e = Mat {
                rows: d,
                cols: d,
                data: e_vec,
            };
            // Newton polish: e ← 3e² − 2e³
            for _ in 0..3 {
                let e2 = e.matmul(&e);
                let e3 = e2.matmul(&e);
                e = e2.scale(3.0).sub(&e3.scale(2.0));
            }
            factors.push(Factor {
                idempotent: e,
                idempotent_exact: None,
                dim: 0,
                basis_vecs: Vec::new(),
                cluster: cluster.iter().map(|z| (z.re, z.im)).collect(),
            });
        }
        if projector_failed {
            continue;
        }
        for f in &mut factors {
            f.idempotent_exact =
                try_reconstruct_idempotent(&f.idempotent, opts.reconstruct_max_den, opts.tol, d);
        }
        let basis_f64 = dec.basis_f64();
        for f in &mut factors {
            let rows: Vec<Vec<f64>> = basis_f64
                .iter()
                .map(|b| f.idempotent.matmul(b).data)
                .collect();
            let m = Mat::from_rows(&rows);
            f.basis_vecs = linalg::orthonormal_rows(&m, 1e-7);
            f.dim = f.basis_vecs.len();
        }
        factors.sort_by(|a, b| b.dim.cmp(&a.dim));
        let residuals = measure_residuals(&factors, sys, d);
        if residuals.max() > opts.tol {
            return Err(CoreError::ToleranceExceeded(format!(
                "idempotent residuals {:.3e} exceed tol {:.1e}",
                residuals.max(),
                opts.tol
            )));
        }
        let total: usize = factors.iter().map(|f| f.dim).sum();
        if total != dec.basis.dim() {
            continue; // degenerate split from an unlucky central element
        }
        dec.factors = Some(factors);
        dec.residuals = residuals;
        dec.tol = opts.tol;
        return Ok(());
    }
    Err(CoreError::AmbiguousClusters {
        retries: opts.max_retries,
        gap: last_gap,
    })
}

fn cluster_roots(roots: &[Complex64], merge_at: f64) -> Vec<Vec<Complex64>> {
    let n = roots.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let r = find(parent, parent[i]);
            parent[i] = r;
        }
        parent[i]
    }
    for i in 0..n {
        for j in i + 1..n {
            let close = (roots[i] - roots[j]).norm() <= merge_at;
            // conjugate pairs always travel together
            let conj =
                (roots[i].conj() - roots[j]).norm() <= merge_at && roots[i].im.abs() > merge_at;
            if close || conj {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a] = b;
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<Complex64>> =
        std::collections::BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(roots[i]);
    }
    let mut out: Vec<Vec<Complex64>> = groups.into_values().collect();
    for c in &mut out {
        c.sort_by(|a, b| (a.re, a.im).partial_cmp(&(b.re, b.im)).unwrap());
    }
    out.sort_by(|a, b| (a[0].re, a[0].im).partial_cmp(&(b[0].re, b[0].im)).unwrap());
    out
}

/// Spectral projector onto a cluster via Lagrange interpolation of its
/// indicator function at all roots. Real up to rounding when the cluster is
/// conjugation-stable.
fn lagrange_cluster_projector(
    op: &Mat,
    roots: &[Complex64],
    cluster: &[Complex64],
    tol: f64,
) -> Result<Mat> {
    let n = op.rows;
    let mut acc = vec![Complex64::new(0.0, 0.0); n * n];
    for (i, lam) in roots.iter().enumerate() {
        if !cluster.contains(lam) {
            continue;
        }
        // Π_{μ≠λ}(op − μI) / Π_{μ≠λ}(λ − μ)
        let mut m: Vec<Complex64> = (0..n * n)
            .map(|k| {
                if k / n == k % n {
                    Complex64::new(1.0, 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                }
            })
            .collect();
        let mut denom = Complex64::new(1.0, 0.0);
        for (j, mu) in roots.iter().enumerate() {
            if j == i {
                continue;
            }
            let mut next = vec![Complex64::new(0.0, 0.0); n * n];
            for r in 0..n {
                for c in 0..n {
                    let mut s = Complex64::new(0.0, 0.0);
                    for k in 0..n {
                        let a = Complex64::new(op[(r, k)], 0.0)
                            - if k == r { *mu } else { Complex64::new(0.0, 0.0) };
                        s += a * m[k * n + c];
                    }
                    next[r * n + c] = s;
                }
            }
            m = next;
            denom *= lam - mu;
        }
        if denom.norm() < 1e-250 {
            return Err(CoreError::ToleranceExceeded(
                "projector denominator underflow (clustered spectrum)".into(),
            ));
        }
        for (a, b) in acc.iter_mut().zip(&m) {
            *a += b / denom;
        }
    }
    let max_im = acc.iter().fold(0.0f64, |m, z| m.max(z.im.abs()));
    let scale = acc.iter().fold(1.0f64, |m, z| m.max(z.norm()));
    if max_im > 1e4 * tol * scale {
        return Err(CoreError::ToleranceExceeded(format!(
            "projector has imaginary residue {max_im:.3e}"
        )));
    }
    Ok(Mat {
        rows: n,
        cols: n,
        data: acc.iter().map(|z| z.re).collect(),
    })
}

fn try_reconstruct_idempotent(
    e: &Mat,
    max_den: u64,
    tol: f64,
    d: usize,
) -> Option<Vec<RatVec>> {
    let mut rows = Vec::with_capacity(d);
    for r in 0..d {
        let mut row = Vec::with_capacity(d);
        for c in 0..d {
            row.push(ratlinalg::reconstruct_rational(e[(r, c)], max_den, 10.0 * tol)?);
        }
        rows.push(row);
    }
    // exact certificate: e² = e
    let sq = ratlinalg::mat_mul(&rows, &rows);
    if sq == rows {
        Some(rows)
    } else {
        None
    }
}

fn measure_residuals(factors: &[Factor], sys: &GeneratorSystem, d: usize) -> Residuals {
    let mut res = Residuals::default();
    let mut sum = Mat::zeros(d, d);
    for f in factors {
        let e = &f.idempotent;
        let e2 = e.matmul(e);
        res.idempotency = res.idempotency.max(e2.sub(e).frobenius_norm());
        sum = sum.add(e);
    }
    for (i, a) in factors.iter().enumerate() {
        for b in factors.iter().skip(i + 1) {
            let p = a.idempotent.matmul(&b.idempotent);
            res.orthogonality = res.orthogonality.max(p.frobenius_norm());
        }
    }
    res.sum_to_one = sum.sub(&Mat::identity(d)).frobenius_norm();
    for g in sys.generators_f64() {
        for f in factors {
            let eg = f.idempotent.matmul(&g);
            let ge = g.matmul(&f.idempotent);
            res.commutation = res.commutation.max(eg.sub(&ge).frobenius_norm());
        }
    }
    res
}

/// Determinant of left multiplication `y ↦ xy` as an operator on `E`.
/// `x` is a `d×d` matrix that must lie in `E`.
pub fn det_on_algebra(dec: &AlgebraDecomposition, x: &Mat) -> f64 {
    let basis = dec.basis_f64();
    let n = basis.len();
    let mut op = Mat::zeros(n, n);
    for (j, b) in basis.iter().enumerate() {
        let prod = x.matmul(b);
        let coords = dec.basis.coordinates_f64(&prod.data);
        for i in 0..n {
            op[(i, j)] = coords[i];
        }
    }
    linalg::det(&op)
}

/// Determinant of `y ↦ xy` restricted to factor `j` (a two-sided ideal).
pub fn det_on_factor(dec: &AlgebraDecomposition, j: usize, x: &Mat) -> f64 {
    let f = &dec.factors()[j];
    let n = f.dim;
    let mut op = Mat::zeros(n, n);
    for (col, bv) in f.basis_vecs.iter().enumerate() {
        let b = Mat {
            rows: dec.ambient_dim,
            cols: dec.ambient_dim,
            data: bv.clone(),
        };
        let prod = x.matmul(&b);
        for (row, fv) in f.basis_vecs.iter().enumerate() {
            let dot: f64 = prod.data.iter().zip(fv).map(|(a, b)| a * b).sum();
            op[(row, col)] = dot;
        }
    }
    linalg::det(&op)
}

// ---------------------------------------------------------------------------
// Module decomposition and rescaling
// ---------------------------------------------------------------------------

/// One block of `R^d`: an invariant subspace with an assigned exponent.
#[derive(Clone, Debug)]
pub struct ModuleBlock {
    /// Orthonormal basis (rows) of the block in `R^d`.
    pub basis: Vec<Vec<f64>>,
    pub exponent: f64,
    pub exponent_ci: f64,
    pub compact: bool,
    /// Indices of the algebra factors grouped into this block.
    pub factors: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ModuleDecomposition {
    pub dim: usize,
    pub blocks: Vec<ModuleBlock>,
}

/// Per-factor Lyapunov summary handed to `decompose_module` (produced by
/// the walk module; kept minimal here to avoid a dependency cycle).
#[derive(Clone, Debug, Serialize)]
pub struct FactorExponents {
    pub estimates: Vec<f64>,
    pub ci_radii: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct ModuleOptions {
    pub grouping_tol: f64,
    pub probe_words: usize,
    pub probe_len: usize,
    pub bound_factor: f64,
    pub seed: u64,
}

impl Default for ModuleOptions {
    fn default() -> Self {
        ModuleOptions {
            grouping_tol: 0.05,
            probe_words: 1000,
            probe_len: 200,
            bound_factor: 10.0,
            seed: 0,
        }
    }
}

/// Split `R^d` into blocks `V_j = e_j·R^d`, grouped by matching Lyapunov
/// estimates. The compact flag is a two-sided empirical test: the exponent
/// CI contains zero and sampled orbit norms stay bounded.
pub fn decompose_module(
    sys: &GeneratorSystem,
    dec: &AlgebraDecomposition,
    exps: &FactorExponents,
    opts: ModuleOptions,
) -> Result<ModuleDecomposition> {
    let d = dec.ambient_dim;
    let factors = dec.factors();
    assert_eq!(exps.estimates.len(), factors.len());
    let mut order: Vec<usize> = (0..factors.len()).collect();
    order.sort_by(|&a, &b| {
        exps.estimates[b]
            .partial_cmp(&exps.estimates[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for idx in order {
        match groups.last_mut() {
            Some(g)
                if (exps.estimates[g[g.len() - 1]] - exps.estimates[idx]).abs()
                    <= opts.grouping_tol =>
            {
                let last = g[g.len() - 1];
                let gap = (exps.estimates[last] - exps.estimates[idx]).abs();
                let ci = exps.ci_radii[last] + exps.ci_radii[idx];
                if gap > ci && gap > 1e-12 {
                    return Err(CoreError::GroupingAmbiguous(format!(
                        "factors {last} and {idx}: gap {gap:.3e} below grouping tol but CIs disjoint"
                    )));
                }
                g.push(idx);
            }
            _ => groups.push(vec![idx]),
        }
    }
    let gens = sys.generators_f64();
    let mut blocks = Vec::new();
    for group in groups {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for &j in &group {
            let e = &factors[j].idempotent;
            for c in 0..d {
                rows.push((0..d).map(|r| e[(r, c)]).collect());
            }
        }
        let basis = linalg::orthonormal_rows(&Mat::from_rows(&rows), 1e-7);
        let exponent =
            group.iter().map(|&j| exps.estimates[j]).sum::<f64>() / group.len() as f64;
        let ci = group
            .iter()
            .map(|&j| exps.ci_radii[j])
            .fold(0.0f64, f64::max);
        let ci_contains_zero = exponent.abs() <= ci || exponent == 0.0;
        let compact =
            ci_contains_zero && orbit_stays_bounded(&gens, sys.weights_f64(), &basis, &opts);
        blocks.push(ModuleBlock {
            basis,
            exponent,
            exponent_ci: ci,
            compact,
            factors: group,
        });
    }
    let span: Vec<Vec<f64>> = blocks.iter().flat_map(|b| b.basis.clone()).collect();
    if linalg::rank(&Mat::from_rows(&span), 1e-7) != d {
        return Err(CoreError::ToleranceExceeded(
            "module blocks do not span R^d".into(),
        ));
    }
    Ok(ModuleDecomposition { dim: d, blocks })
}

fn orbit_stays_bounded(
    gens: &[Mat],
    weights: &[f64],
    basis: &[Vec<f64>],
    opts: &ModuleOptions,
) -> bool {
    if basis.is_empty() {
        return true;
    }
    let k = basis.len();
    let b = Mat::from_rows(basis);
    let bt = b.transpose();
    let restricted: Vec<Mat> = gens.iter().map(|g| b.matmul(g).matmul(&bt)).collect();
    let id_norm = (k as f64).sqrt();
    let mut rng = rng::stream(opts.seed, 0xb0cd);
    for _ in 0..opts.probe_words {
        let mut m = Mat::identity(k);
        let len = 1 + rng.gen::<usize>() % opts.probe_len;
        for _ in 0..len {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut idx = weights.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    idx = i;
                    break;
                }
            }
            m = restricted[idx].matmul(&m);
            if m.frobenius_norm() > opts.bound_factor * id_norm {
                return false;
            }
        }
    }
    true
}

/// The per-factor rescaling map `x ↦ Σ_j e^{−nλ_j} π_j(x)`.
#[derive(Clone, Debug)]
pub struct RescalingMap {
    pub exponents: Vec<f64>,
    pub n: f64,
}

impl RescalingMap {
    pub fn new(exponents: Vec<f64>, n: f64) -> Self {
        RescalingMap { exponents, n }
    }
}

/// Apply the rescaling automorphism to an element of `E`.
pub fn rescale(dec: &AlgebraDecomposition, map: &RescalingMap, x: &Mat) -> Mat {
    let d = dec.ambient_dim;
    let mut out = Mat::zeros(d, d);
    for (j, f) in dec.factors().iter().enumerate() {
        let scale = (-map.n * map.exponents[j]).exp();
        let proj = f.idempotent.matmul(x);
        out = out.add(&proj.scale(scale));
    }
    out
}

// ---------------------------------------------------------------------------
// Serializable report
// ---------------------------------------------------------------------------

/// JSON-facing summary of a decomposition.
#[derive(Clone, Debug, Serialize)]
pub struct DecompositionReport {
    pub ambient_dim: usize,
    pub algebra_dim: usize,
    pub center_dim: Option<usize>,
    pub factor_dims: Vec<usize>,
    pub residuals: Residuals,
    pub idempotents: Vec<IdempotentReport>,
}

#[derive(Clone, Debug, Serialize)]
pub struct IdempotentReport {
    pub dim: usize,
    pub exact: bool,
    /// Row-major entries; exact rationals as strings when available,
    /// otherwise decimal strings.
    pub entries: Vec<String>,
}

pub fn decomposition_report(dec: &AlgebraDecomposition) -> DecompositionReport {
    let idempotents = dec
        .factors()
        .iter()
        .map(|f| {
            let entries = match &f.idempotent_exact {
                Some(rows) => rows.iter().flatten().map(ToString::to_string).collect(),
                None => f
                    .idempotent
                    .data
                    .iter()
                    .map(|v| format!("{v:.17e}"))
                    .collect(),
            };
            IdempotentReport {
                dim: f.dim,
                exact: f.idempotent_exact.is_some(),
                entries,
            }
        })
        .collect();
    DecompositionReport {
        ambient_dim: dec.ambient_dim,
        algebra_dim: dec.dim(),
        center_dim: dec.center.as_ref().map(RrefBasis::dim),
        factor_dims: dec.factor_dims(),
        residuals: dec.residuals,
        idempotents,
    }
}

// ---------------------------------------------------------------------------
// Shared helpers for other modules
// ---------------------------------------------------------------------------

/// Exact phase `⟨a, x⟩ mod 1` as a surd expression.
pub fn frequency_phase(a: &[BigInt], x: &TorusPoint) -> SurdExpr {
    assert_eq!(a.len(), x.dim());
    let mut acc = SurdExpr::zero();
    for (ai, c) in a.iter().zip(&x.coords) {
        if !ai.is_zero() {
            acc += c.value.scale_int(ai);
        }
    }
    acc.mod1()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn trivial_system_generates_dim_one() {
        let sys =
            GeneratorSystem::new(vec![IntMatrix::identity(2)], vec![BigRational::one()], None)
                .unwrap();
        let dec = generate_algebra(&sys);
        assert_eq!(dec.dim(), 1);
    }

    #[test]
    fn free_pair_generates_full_matrix_algebra() {
        let sys = fixtures::f1();
        let dec = generate_algebra(&sys);
        assert_eq!(dec.dim(), 4);
    }

    #[test]
    fn block_example_generates_dim_six() {
        let sys = fixtures::f2();
        let dec = generate_algebra(&sys);
        assert_eq!(dec.dim(), 6);
    }

    #[test]
    fn identity_component_algebra_is_proper_for_f2() {
        let sys = fixtures::f2();
        let dec = generate_identity_component_algebra(&sys, 4).unwrap();
        assert_eq!(dec.dim(), 5);
    }

    #[test]
    fn span_closure_is_idempotent() {
        for sys in [fixtures::f1(), fixtures::f2(), fixtures::f4()] {
            let dec = generate_algebra(&sys);
            let before = dec.dim();
            let d = dec.ambient_dim;
            let mut basis = dec.basis.clone();
            let rows = basis.rows.clone();
            let mut grew = false;
            for a in &rows {
                for b in &rows {
                    grew |= basis.insert(mul_vec(a, b, d));
                }
            }
            assert!(!grew);
            assert_eq!(basis.dim(), before);
        }
    }

    #[test]
    fn centers_of_fixtures() {
        // full Mat₂ → scalars only
        let sys = fixtures::f1();
        let mut dec = generate_algebra(&sys);
        assert_eq!(compute_center(&mut dec, &sys), 1);

        // C × M₂(R) → C × R·1, dimension 3
        let sys2 = fixtures::f2();
        let mut dec2 = generate_algebra(&sys2);
        assert_eq!(compute_center(&mut dec2, &sys2), 3);

        // commutative algebra equals its center
        let sys4 = fixtures::f4();
        let mut dec4 = generate_algebra(&sys4);
        assert_eq!(compute_center(&mut dec4, &sys4), dec4.dim());
    }

    #[test]
    fn wedderburn_factor_dims() {
        let sys = fixtures::f2();
        let mut dec = generate_algebra(&sys);
        wedderburn_decompose(&mut dec, &sys, WedderburnOptions::default(), 1).unwrap();
        assert_eq!(dec.factor_dims(), vec![4, 2]);
        assert!(dec.residuals.max() < 1e-9);

        let sys1 = fixtures::f1();
        let mut dec1 = generate_algebra(&sys1);
        wedderburn_decompose(&mut dec1, &sys1, WedderburnOptions::default(), 1).unwrap();
        assert_eq!(dec1.factor_dims(), vec![4]);

        let sys4 = fixtures::f4();
        let mut dec4 = generate_algebra(&sys4);
        wedderburn_decompose(&mut dec4, &sys4, WedderburnOptions::default(), 1).unwrap();
        assert_eq!(dec4.factor_dims(), vec![1, 1]);
    }

    #[test]
    fn idempotent_residual_properties_across_fixtures() {
        for sys in [fixtures::f1(), fixtures::f2(), fixtures::f3(), fixtures::f4()] {
            let mut dec = generate_algebra(&sys);
            wedderburn_decompose(&mut dec, &sys, WedderburnOptions::default(), 3).unwrap();
            assert!(
                dec.residuals.max() < 1e-9,
                "residuals {:?} too large",
                dec.residuals
            );
        }
    }

    #[test]
    fn determinant_examples() {
        let sys = fixtures::f1();
        let mut dec = generate_algebra(&sys);
        wedderburn_decompose(&mut dec, &sys, WedderburnOptions::default(), 1).unwrap();
        let id = Mat::identity(2);
        assert!((det_on_algebra(&dec, &id) - 1.0).abs() < 1e-9);
        // diag(2,3) on Mat₂: left multiplication is x ⊕ x, det = det(x)² = 36
        let x = Mat::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]);
        assert!((det_on_algebra(&dec, &x) - 36.0).abs() < 1e-6);
        // idempotent of a non-simple algebra kills the complementary ideal
        let sys2 = fixtures::f2();
        let mut dec2 = generate_algebra(&sys2);
        wedderburn_decompose(&mut dec2, &sys2, WedderburnOptions::default(), 1).unwrap();
        let e0 = dec2.factors()[0].idempotent.clone();
        assert!(det_on_algebra(&dec2, &e0).abs() < 1e-6);
    }

    #[test]
    fn det_is_multiplicative_on_random_pairs() {
        let sys = fixtures::f1();
        let mut dec = generate_algebra(&sys);
        wedderburn_decompose(&mut dec, &sys, WedderburnOptions::default(), 1).unwrap();
        let mut rng = rng::stream(42, 0);
        for _ in 0..100 {
            let a = Mat {
                rows: 2,
                cols: 2,
                data: (0..4).map(|_| f64::from(rng.gen_range(-5i32..=5))).collect(),
            };
            let b = Mat {
                rows: 2,
                cols: 2,
                data: (0..4).map(|_| f64::from(rng.gen_range(-5i32..=5))).collect(),
            };
            let ab = a.matmul(&b);
            let lhs = det_on_algebra(&dec, &ab);
            let rhs = det_on_algebra(&dec, &a) * det_on_algebra(&dec, &b);
            let scale = lhs.abs().max(rhs.abs()).max(1.0);
            assert!(
                (lhs - rhs).abs() <= 1e-9 * scale,
                "multiplicativity violated: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn rescale_properties() {
        let sys = fixtures::f2();
        let mut dec = generate_algebra(&sys);
        wedderburn_decompose(&mut dec, &sys, WedderburnOptions::default(), 1).unwrap();
        let lambdas = vec![0.7, 0.0];
        let x = Mat {
            rows: 4,
            cols: 4,
            data: (0..16).map(|i| (i as f64 * 0.37).sin()).collect(),
        };
        // project into E first (rescale is only defined on E)
        let mut xe = Mat::zeros(4, 4);
        for f in dec.factors() {
            xe = xe.add(&f.idempotent.matmul(&x));
        }
        let r0 = rescale(&dec, &RescalingMap::new(lambdas.clone(), 0.0), &xe);
        assert!(r0.sub(&xe).frobenius_norm() < 1e-8);
        let r1 = rescale(
            &dec,
            &RescalingMap::new(lambdas.clone(), 2.0),
            &rescale(&dec, &RescalingMap::new(lambdas.clone(), 3.0), &xe),
        );
        let r2 = rescale(&dec, &RescalingMap::new(lambdas, 5.0), &xe);
        assert!(r1.sub(&r2).frobenius_norm() < 1e-8);
    }

    #[test]
    fn factor_projectors_commute_with_generators() {
        for sys in [fixtures::f1(), fixtures::f2(), fixtures::f4()] {
            let mut dec = generate_algebra(&sys);
            wedderburn_decompose(&mut dec, &sys, WedderburnOptions::default(), 1).unwrap();
            assert!(dec.residuals.commutation < 1e-9);
        }
    }

    #[test]
    fn label_consistency_is_spot_checked() {
        // deliberately wrong: a and a⁻¹ both labeled 1 in Z/4
        let a = IntMatrix::from_i64(&[&[0, 1], &[-1, 0]]);
        let b = a.inverse_unimodular().unwrap();
        let half = BigRational::new(BigInt::one(), BigInt::from(2));
        let labels = CosetLabels {
            group: FiniteGroup::cyclic(4),
            labels: vec![1, 1],
        };
        let sys = GeneratorSystem::new(vec![a, b], vec![half.clone(), half], Some(labels));
        assert!(matches!(sys, Err(CoreError::InconsistentLabels(_))));
    }

    #[test]
    fn coset_representatives_cover_the_group() {
        let sys = fixtures::f2();
        let reps = sys.coset_representatives(6).unwrap();
        assert_eq!(reps.len(), 4);
    }
}
