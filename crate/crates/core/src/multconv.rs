//! δ-discretized measure combinatorics on normed algebras.
//!
//! Measures are finite atomic: `f64` points with exact rational weights
//! (numerators over a shared denominator, escalating to per-atom rationals
//! only if the compact form would overflow). Mass is therefore conserved
//! *exactly* under additive and multiplicative convolutions, restrictions,
//! and grid coarsening; floating point enters only through atom positions
//! and through evaluated norms.

use crate::algebra::{self, AlgebraDecomposition};
use crate::error::{CoreError, Result};
use crate::linalg::{self, Mat};
use crate::rng;
use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::Rng;
use serde::Serialize;
use std::collections::BTreeMap;

// ---------------------------------------------------------------------------
// Ambient algebra abstraction
// ---------------------------------------------------------------------------

/// Multiplication and regular-representation determinant of the ambient
/// algebra, in the coordinate system the measure lives in.
pub trait AlgebraOps: Sync {
    fn dim(&self) -> usize;
    fn one(&self) -> Vec<f64>;
    fn mul(&self, a: &[f64], b: &[f64]) -> Vec<f64>;
    /// Determinant of left multiplication `y ↦ xy` on the algebra.
    fn det(&self, x: &[f64]) -> f64;
}

/// The real line as a one-dimensional algebra.
pub struct RealLine;

impl AlgebraOps for RealLine {
    fn dim(&self) -> usize {
        1
    }
    fn one(&self) -> Vec<f64> {
        vec![1.0]
    }
    fn mul(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        vec![a[0] * b[0]]
    }
    fn det(&self, x: &[f64]) -> f64 {
        x[0]
    }
}

/// `R ⊕ … ⊕ R` with componentwise multiplication.
pub struct SplitLines(pub usize);

impl AlgebraOps for SplitLines {
    fn dim(&self) -> usize {
        self.0
    }
    fn one(&self) -> Vec<f64> {
        vec![1.0; self.0]
    }
    fn mul(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x * y).collect()
    }
    fn det(&self, x: &[f64]) -> f64 {
        // left multiplication is diagonal with each coordinate repeated once
        x.iter().product()
    }
}

/// A direct sum of matrix-algebra factors taken from a Wedderburn
/// decomposition, in concatenated orthonormal factor coordinates. Structure
/// constants are precomputed so products cost `O(dim³)` flops.
pub struct FactorAlgebra {
    dims: Vec<usize>,
    /// structure[j][k*dim_j + l] = coords of F_k·F_l within factor j
    structure: Vec<Vec<Vec<f64>>>,
    one_coords: Vec<f64>,
    total: usize,
}

impl FactorAlgebra {
    /// Build from selected factors of a decomposition (e.g. the non-compact
    /// part `E'`).
    pub fn from_factors(dec: &AlgebraDecomposition, selected: &[usize]) -> Self {
        let d = dec.ambient_dim;
        let mut dims = Vec::new();
        let mut structure = Vec::new();
        let mut one_coords = Vec::new();
        for &j in selected {
            let f = &dec.factors()[j];
            let k = f.dim;
            dims.push(k);
            let basis = &f.basis_vecs;
            let mut table = vec![vec![0.0; k]; k * k];
            for a in 0..k {
                let am = Mat {
                    rows: d,
                    cols: d,
                    data: basis[a].clone(),
                };
                for b in 0..k {
                    let bm = Mat {
                        rows: d,
                        cols: d,
                        data: basis[b].clone(),
                    };
                    let prod = am.matmul(&bm);
                    for (l, fv) in basis.iter().enumerate() {
                        table[a * k + b][l] =
                            prod.data.iter().zip(fv).map(|(x, y)| x * y).sum();
                    }
                }
            }
            structure.push(table);
            // unit of the factor is the idempotent e_j, projected to coords
            let e = &f.idempotent;
            for fv in basis {
                one_coords.push(e.data.iter().zip(fv).map(|(x, y)| x * y).sum());
            }
        }
        let total = dims.iter().sum();
        FactorAlgebra {
            dims,
            structure,
            one_coords,
            total,
        }
    }

    fn factor_ranges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut off = 0;
        for &k in &self.dims {
            out.push((off, off + k));
            off += k;
        }
        out
    }

    /// Operator `x ↦ a·x·b` on the algebra, as a dim×dim matrix in
    /// coordinates (an element of `E ⊗ E^op` in its defining action).
    pub fn tensor_operator(&self, a: &[f64], b: &[f64]) -> Mat {
        let n = self.total;
        let mut op = Mat::zeros(n, n);
        for col in 0..n {
            let mut unit = vec![0.0; n];
            unit[col] = 1.0;
            let out = self.mul(&self.mul(a, &unit), b);
            for row in 0..n {
                op[(row, col)] = out[row];
            }
        }
        op
    }
}

impl AlgebraOps for FactorAlgebra {
    fn dim(&self) -> usize {
        self.total
    }

    fn one(&self) -> Vec<f64> {
        self.one_coords.clone()
    }

    fn mul(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.total];
        let mut off = 0;
        for (j, &k) in self.dims.iter().enumerate() {
            let table = &self.structure[j];
            for x in 0..k {
                let ax = a[off + x];
                if ax == 0.0 {
                    continue;
                }
                for y in 0..k {
                    let by = b[off + y];
                    if by == 0.0 {
                        continue;
                    }
                    let coeffs = &table[x * k + y];
                    for l in 0..k {
                        out[off + l] += ax * by * coeffs[l];
                    }
                }
            }
            off += k;
        }
        out
    }

    fn det(&self, x: &[f64]) -> f64 {
        // det of left multiplication = product over factors
        let mut out = 1.0;
        for ((j, &k), (lo, hi)) in self.dims.iter().enumerate().zip(self.factor_ranges()) {
            let table = &self.structure[j];
            let mut op = Mat::zeros(k, k);
            for col in 0..k {
                for a in 0..k {
                    let xa = x[lo + a];
                    if xa == 0.0 {
                        continue;
                    }
                    let coeffs = &table[a * k + col];
                    for row in 0..k {
                        op[(row, col)] += xa * coeffs[row];
                    }
                }
            }
            let _ = hi;
            out *= linalg::det(&op);
        }
        out
    }
}

/// Coordinates of a walk product inside a `FactorAlgebra` built from the
/// same selected factors: concatenated projections onto factor bases.
pub fn factor_coords(dec: &AlgebraDecomposition, selected: &[usize], x: &Mat) -> Vec<f64> {
    let mut out = Vec::new();
    for &j in selected {
        let f = &dec.factors()[j];
        let proj = f.idempotent.matmul(x);
        for fv in &f.basis_vecs {
            out.push(proj.data.iter().zip(fv).map(|(a, b)| a * b).sum());
        }
    }
    out
}

pub use algebra::det_on_algebra as det_on_matrix_algebra;

// ---------------------------------------------------------------------------
// Scaled measures
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
enum WeightStore {
    /// Numerators over one shared denominator.
    Compact { num: Vec<u128>, denom: BigUint },
    /// Per-atom exact rationals (escalation path).
    Exact(Vec<BigRational>),
}

/// A weighted atomic measure on a Euclidean space or algebra, together
/// with a working scale δ. Total mass is at most 1 and exactly conserved.
#[derive(Clone, Debug)]
pub struct ScaledMeasure {
    pub dim: usize,
    pub scale: f64,
    points: Vec<f64>,
    weights: WeightStore,
}

impl ScaledMeasure {
    pub fn from_rational_atoms(
        dim: usize,
        scale: f64,
        atoms: Vec<(Vec<f64>, BigRational)>,
    ) -> Self {
        assert!(atoms.iter().all(|(p, w)| p.len() == dim && w.is_positive()));
        // common denominator
        let mut denom = BigInt::one();
        for (_, w) in &atoms {
            denom = num_integer::Integer::lcm(&denom, w.denom());
        }
        let mut points = Vec::with_capacity(atoms.len() * dim);
        let mut num = Vec::with_capacity(atoms.len());
        let mut compact = true;
        for (p, w) in &atoms {
            points.extend_from_slice(p);
            let n = w.numer() * (&denom / w.denom());
            match n.to_biguint().and_then(|b| b.to_u128()) {
                Some(v) => num.push(v),
                None => {
                    compact = false;
                    break;
                }
            }
        }
        let weights = if compact {
            WeightStore::Compact {
                num,
                denom: denom.to_biguint().expect("positive lcm"),
            }
        } else {
            WeightStore::Exact(atoms.iter().map(|(_, w)| w.clone()).collect())
        };
        ScaledMeasure {
            dim,
            scale,
            points,
            weights,
        }
    }

    /// Uniform weights `mass/n` on the given points.
    pub fn uniform(dim: usize, scale: f64, pts: &[Vec<f64>]) -> Self {
        let n = pts.len();
        let mut points = Vec::with_capacity(n * dim);
        for p in pts {
            assert_eq!(p.len(), dim);
            points.extend_from_slice(p);
        }
        ScaledMeasure {
            dim,
            scale,
            points,
            weights: WeightStore::Compact {
                num: vec![1u128; n],
                denom: BigUint::from(n as u64),
            },
        }
    }

    pub fn dirac(dim: usize, scale: f64, point: Vec<f64>) -> Self {
        ScaledMeasure::uniform(dim, scale, &[point])
    }

    /// δ-spaced net of `[a, b]` in one dimension, uniform weights.
    pub fn net_1d(a: f64, b: f64, step: f64, scale: f64) -> Self {
        let n = ((b - a) / step).round() as usize + 1;
        let pts: Vec<Vec<f64>> = (0..n).map(|i| vec![a + step * i as f64]).collect();
        ScaledMeasure::uniform(1, scale, &pts)
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.points.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points_iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.points.chunks(self.dim)
    }

    pub fn weight_f64(&self, i: usize) -> f64 {
        match &self.weights {
            WeightStore::Compact { num, denom } => {
                let d = denom.to_f64().unwrap_or(f64::INFINITY);
                num[i] as f64 / d
            }
            WeightStore::Exact(w) => w[i].to_f64().unwrap_or(0.0),
        }
    }

    pub fn weight_rational(&self, i: usize) -> BigRational {
        match &self.weights {
            WeightStore::Compact { num, denom } => BigRational::new(
                BigInt::from(num[i]),
                BigInt::from(denom.clone()),
            ),
            WeightStore::Exact(w) => w[i].clone(),
        }
    }

    pub fn weights_f64(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.weight_f64(i)).collect()
    }

    /// Exact total mass.
    pub fn mass(&self) -> BigRational {
        match &self.weights {
            WeightStore::Compact { num, denom } => {
                let mut total = BigUint::zero();
                for &n in num {
                    total += BigUint::from(n);
                }
                BigRational::new(BigInt::from(total), BigInt::from(denom.clone()))
            }
            WeightStore::Exact(w) => w.iter().cloned().sum(),
        }
    }

    pub fn mass_f64(&self) -> f64 {
        self.mass().to_f64().unwrap_or(f64::NAN)
    }

    /// Keep atoms satisfying the predicate; returns the removed mass.
    pub fn restrict(&self, keep: impl Fn(&[f64]) -> bool) -> (ScaledMeasure, BigRational) {
        let mut atoms = Vec::new();
        let mut removed = BigRational::zero();
        for i in 0..self.len() {
            if keep(self.point(i)) {
                atoms.push((self.point(i).to_vec(), self.weight_rational(i)));
            } else {
                removed += self.weight_rational(i);
            }
        }
        let out = if atoms.is_empty() {
            ScaledMeasure {
                dim: self.dim,
                scale: self.scale,
                points: Vec::new(),
                weights: WeightStore::Compact {
                    num: Vec::new(),
                    denom: BigUint::one(),
                },
            }
        } else {
            ScaledMeasure::from_rational_atoms(self.dim, self.scale, atoms)
        };
        (out, removed)
    }

    /// Snap points to a grid of pitch `g` (cell centers), merging weights
    /// exactly. Deterministic output order (sorted by cell index).
    pub fn coarsen(&self, g: f64) -> ScaledMeasure {
        let dim = self.dim;
        let mut cells: BTreeMap<Vec<i64>, BigRational> = BTreeMap::new();
        for i in 0..self.len() {
            let key: Vec<i64> = self.point(i).iter().map(|&x| (x / g).round() as i64).collect();
            *cells.entry(key).or_insert_with(BigRational::zero) += self.weight_rational(i);
        }
        let atoms: Vec<(Vec<f64>, BigRational)> = cells
            .into_iter()
            .map(|(k, w)| (k.iter().map(|&i| i as f64 * g).collect(), w))
            .collect();
        ScaledMeasure::from_rational_atoms(dim, self.scale, atoms)
    }

    /// Halve every weight (used in tests for linearity checks).
    pub fn scale_mass_half(&self) -> ScaledMeasure {
        let atoms = (0..self.len())
            .map(|i| {
                (
                    self.point(i).to_vec(),
                    self.weight_rational(i) / BigRational::from_integer(BigInt::from(2)),
                )
            })
            .collect();
        ScaledMeasure::from_rational_atoms(self.dim, self.scale, atoms)
    }

    fn sorted_by_points(mut atoms: Vec<(Vec<f64>, BigRational)>, dim: usize, scale: f64) -> ScaledMeasure {
        atoms.sort_by(|a, b| {
            for (x, y) in a.0.iter().zip(&b.0) {
                match x.total_cmp(y) {
                    std::cmp::Ordering::Equal => continue,
                    o => return o,
                }
            }
            std::cmp::Ordering::Equal
        });
        ScaledMeasure::from_rational_atoms(dim, scale, atoms)
    }
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

/// How to combine points under `convolve`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    /// additive convolution ⊞
    Add,
    /// difference convolution ⊟ (pushforward of (x,y) ↦ x−y)
    Sub,
    /// multiplicative convolution * in the ambient algebra
    Mul,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvOptions {
    /// Maximum number of atom pairs evaluated; inputs are pre-coarsened
    /// until under this bound (or an error in exact mode).
    pub pair_budget: usize,
    /// Maximum atoms in the output; beyond it the output snaps to the grid.
    pub atom_budget: usize,
    /// Coarsening grid, typically δ/4.
    pub grid: f64,
    /// Exact mode: never coarsen, error out instead.
    pub exact: bool,
}

impl ConvOptions {
    pub fn for_scale(scale: f64) -> Self {
        ConvOptions {
            pair_budget: 40_000_000,
            atom_budget: 1_000_000,
            grid: scale / 4.0,
            exact: false,
        }
    }

    pub fn exact_mode(atom_budget: usize) -> Self {
        ConvOptions {
            pair_budget: atom_budget.saturating_mul(atom_budget.min(4096)),
            atom_budget,
            grid: 0.0,
            exact: true,
        }
    }
}

/// Pushforward of the product measure under +, −, or algebra multiplication.
/// Weights multiply exactly; equal output points merge exactly.
pub fn convolve(
    a: &ScaledMeasure,
    b: &ScaledMeasure,
    mode: ConvMode,
    alg: Option<&dyn AlgebraOps>,
    opts: &ConvOptions,
) -> Result<ScaledMeasure> {
    assert_eq!(a.dim, b.dim, "ambient dimensions differ");
    if mode == ConvMode::Mul {
        assert!(alg.is_some(), "multiplicative convolution needs an algebra");
    }
    // dense 1D ⊞/⊟ handles huge pair counts directly; try it first
    if a.dim == 1 && mode != ConvMode::Mul && !opts.exact {
        if let Some(out) = conv1d_grid(a, b, mode, opts) {
            return Ok(out);
        }
    }
    let mut ax = a.clone();
    let mut bx = b.clone();
    let mut grid = opts.grid;
    while ax.len().saturating_mul(bx.len()) > opts.pair_budget {
        if opts.exact || grid <= 0.0 {
            return Err(CoreError::BudgetExceeded(format!(
                "{} × {} atom pairs exceed the budget {}",
                ax.len(),
                bx.len(),
                opts.pair_budget
            )));
        }
        ax = ax.coarsen(grid);
        bx = bx.coarsen(grid);
        grid *= 2.0;
        if a.dim == 1 && mode != ConvMode::Mul {
            if let Some(out) = conv1d_grid(&ax, &bx, mode, opts) {
                return Ok(out);
            }
        }
    }
    match compact_product_weights(&ax, &bx) {
        Some(denom) => {
            let pairs = ax.len().saturating_mul(bx.len());
            let result = if pairs <= 24_000_000 / a.dim.max(1) {
                convolve_compact(&ax, &bx, mode, alg, &denom)
            } else {
                convolve_compact_streaming(&ax, &bx, mode, alg, &denom)
            };
            match result {
                Some(atoms) => finish_budget(
                    ScaledMeasure::from_rational_atoms(a.dim, a.scale, atoms),
                    opts,
                ),
                None => convolve_exact_weights(&ax, &bx, mode, alg, opts),
            }
        }
        None => convolve_exact_weights(&ax, &bx, mode, alg, opts),
    }
}

/// Streaming variant for very large pair counts: accumulates into a hash
/// map (exact integer adds are order-independent) and sorts the output.
fn convolve_compact_streaming(
    a: &ScaledMeasure,
    b: &ScaledMeasure,
    mode: ConvMode,
    alg: Option<&dyn AlgebraOps>,
    denom: &BigUint,
) -> Option<Vec<(Vec<f64>, BigRational)>> {
    let mut acc: std::collections::HashMap<Vec<u64>, u128> = std::collections::HashMap::new();
    for i in 0..a.len() {
        let wa = compact_weight(a, i);
        for j in 0..b.len() {
            let w = wa.checked_mul(compact_weight(b, j))?;
            let p = combine_points(a.point(i), b.point(j), mode, alg);
            let key: Vec<u64> = p.iter().map(|v| v.to_bits()).collect();
            match acc.get_mut(&key) {
                Some(slot) => *slot = slot.checked_add(w)?,
                None => {
                    acc.insert(key, w);
                }
            }
        }
    }
    let mut atoms: Vec<(Vec<f64>, BigRational)> = acc
        .into_iter()
        .map(|(k, w)| {
            (
                k.iter().map(|&bits| f64::from_bits(bits)).collect(),
                BigRational::new(BigInt::from(w), BigInt::from(denom.clone())),
            )
        })
        .collect();
    atoms.sort_by(|x, y| {
        for (u, v) in x.0.iter().zip(&y.0) {
            match u.total_cmp(v) {
                std::cmp::Ordering::Equal => continue,
                o => return o,
            }
        }
        std::cmp::Ordering::Equal
    });
    Some(atoms)
}

/// Materialize-sort-merge convolution with u128 weight numerators.
/// Returns `None` on arithmetic overflow (caller falls back to exact).
fn convolve_compact(
    a: &ScaledMeasure,
    b: &ScaledMeasure,
    mode: ConvMode,
    alg: Option<&dyn AlgebraOps>,
    denom: &BigUint,
) -> Option<Vec<(Vec<f64>, BigRational)>> {
    let dim = a.dim;
    let (na, nb) = (a.len(), b.len());
    let pairs = na.checked_mul(nb)?;
    let mut keys: Vec<u64> = Vec::with_capacity(pairs * dim);
    let mut weights: Vec<u128> = Vec::with_capacity(pairs);
    for i in 0..na {
        let wa = compact_weight(a, i);
        for j in 0..nb {
            let wb = compact_weight(b, j);
            let w = wa.checked_mul(wb)?;
            let p = combine_points(a.point(i), b.point(j), mode, alg);
            keys.extend(p.iter().map(|v| v.to_bits()));
            weights.push(w);
        }
    }
    // sort pair indices by point key, then merge runs of equal keys
    let mut order: Vec<u32> = (0..pairs as u32).collect();
    order.sort_unstable_by(|&x, &y| {
        let kx = &keys[x as usize * dim..(x as usize + 1) * dim];
        let ky = &keys[y as usize * dim..(y as usize + 1) * dim];
        kx.cmp(ky)
    });
    let mut atoms: Vec<(Vec<f64>, BigRational)> = Vec::new();
    let mut idx = 0usize;
    while idx < order.len() {
        let start = order[idx] as usize;
        let key = &keys[start * dim..(start + 1) * dim];
        let mut w = weights[start];
        let mut j = idx + 1;
        while j < order.len() {
            let cand = order[j] as usize;
            if &keys[cand * dim..(cand + 1) * dim] != key {
                break;
            }
            w = w.checked_add(weights[cand])?;
            j += 1;
        }
        atoms.push((
            key.iter().map(|&b| f64::from_bits(b)).collect(),
            BigRational::new(BigInt::from(w), BigInt::from(denom.clone())),
        ));
        idx = j;
    }
    Some(atoms)
}

fn combine_points(x: &[f64], y: &[f64], mode: ConvMode, alg: Option<&dyn AlgebraOps>) -> Vec<f64> {
    match mode {
        ConvMode::Add => x.iter().zip(y).map(|(a, b)| a + b).collect(),
        ConvMode::Sub => x.iter().zip(y).map(|(a, b)| a - b).collect(),
        ConvMode::Mul => alg.expect("algebra required").mul(x, y),
    }
}

fn compact_product_weights<'a>(a: &'a ScaledMeasure, b: &'a ScaledMeasure) -> Option<BigUint> {
    match (&a.weights, &b.weights) {
        (WeightStore::Compact { denom: da, .. }, WeightStore::Compact { denom: db, .. }) => {
            let denom = da * db;
            if denom.bits() <= 126 {
                Some(denom)
            } else {
                None
            }
        }
        _ => None,
    }
}

fn compact_weight(m: &ScaledMeasure, i: usize) -> u128 {
    match &m.weights {
        WeightStore::Compact { num, .. } => num[i],
        WeightStore::Exact(_) => unreachable!("compact path requires compact store"),
    }
}

fn convolve_exact_weights(
    a: &ScaledMeasure,
    b: &ScaledMeasure,
    mode: ConvMode,
    alg: Option<&dyn AlgebraOps>,
    opts: &ConvOptions,
) -> Result<ScaledMeasure> {
    let mut out: BTreeMap<Vec<u64>, BigRational> = BTreeMap::new();
    for i in 0..a.len() {
        for j in 0..b.len() {
            let p = combine_points(a.point(i), b.point(j), mode, alg);
            let key: Vec<u64> = p.iter().map(|v| v.to_bits()).collect();
            let w = a.weight_rational(i) * b.weight_rational(j);
            *out.entry(key).or_insert_with(BigRational::zero) += w;
        }
    }
    let atoms: Vec<(Vec<f64>, BigRational)> = out
        .into_iter()
        .map(|(k, w)| (k.iter().map(|&bits| f64::from_bits(bits)).collect(), w))
        .collect();
    finish_budget(
        ScaledMeasure::from_rational_atoms(a.dim, a.scale, atoms),
        opts,
    )
}

fn finish_budget(m: ScaledMeasure, opts: &ConvOptions) -> Result<ScaledMeasure> {
    if m.len() <= opts.atom_budget {
        return Ok(m);
    }
    if opts.exact || opts.grid <= 0.0 {
        return Err(CoreError::BudgetExceeded(format!(
            "{} output atoms exceed the budget {}",
            m.len(),
            opts.atom_budget
        )));
    }
    let mut g = opts.grid;
    let mut cur = m;
    loop {
        cur = cur.coarsen(g);
        if cur.len() <= opts.atom_budget {
            return Ok(cur);
        }
        g *= 2.0;
    }
}

/// Dense array convolution for 1D measures whose points sit on a common
/// arithmetic grid; exact integer weight arithmetic throughout.
fn conv1d_grid(
    a: &ScaledMeasure,
    b: &ScaledMeasure,
    mode: ConvMode,
    opts: &ConvOptions,
) -> Option<ScaledMeasure> {
    let denom = compact_product_weights(a, b)?;
    let g = common_grid(a, b)?;
    let idx = |m: &ScaledMeasure| -> Option<Vec<i64>> {
        m.points_iter()
            .map(|p| {
                let k = (p[0] / g).round();
                if (p[0] - k * g).abs() <= g * 1e-9 {
                    Some(k as i64)
                } else {
                    None
                }
            })
            .collect()
    };
    let ia = idx(a)?;
    let ib = idx(b)?;
    let (amin, amax) = (ia.iter().min()?, ia.iter().max()?);
    let (bmin, bmax) = (ib.iter().min()?, ib.iter().max()?);
    let (lo, hi) = match mode {
        ConvMode::Add => (amin + bmin, amax + bmax),
        ConvMode::Sub => (amin - bmax, amax - bmin),
        ConvMode::Mul => return None,
    };
    let width = usize::try_from(hi - lo + 1).ok()?;
    if width > 64_000_000 {
        return None;
    }
    let mut acc = vec![0u128; width];
    for (i, &ka) in ia.iter().enumerate() {
        let wa = compact_weight(a, i);
        for (j, &kb) in ib.iter().enumerate() {
            let wb = compact_weight(b, j);
            let k = match mode {
                ConvMode::Add => ka + kb,
                ConvMode::Sub => ka - kb,
                ConvMode::Mul => unreachable!(),
            };
            let slot = &mut acc[usize::try_from(k - lo).ok()?];
            *slot = slot.checked_add(wa.checked_mul(wb)?)?;
        }
    }
    let atoms: Vec<(Vec<f64>, BigRational)> = acc
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0)
        .map(|(off, &w)| {
            (
                vec![(lo + off as i64) as f64 * g],
                BigRational::new(BigInt::from(w), BigInt::from(denom.clone())),
            )
        })
        .collect();
    finish_budget(
        ScaledMeasure::from_rational_atoms(1, a.scale, atoms),
        opts,
    )
    .ok()
}

fn common_grid(a: &ScaledMeasure, b: &ScaledMeasure) -> Option<f64> {
    // candidate: smallest positive gap between sorted distinct points,
    // rounded to a power of two; must fit both measures
    let mut pts: Vec<f64> = a
        .points_iter()
        .chain(b.points_iter())
        .map(|p| p[0])
        .collect();
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    if pts.len() < 2 {
        return Some(1.0);
    }
    let mut gap = f64::INFINITY;
    for w in pts.windows(2) {
        let d = w[1] - w[0];
        if d > 0.0 {
            gap = gap.min(d);
        }
    }
    if !gap.is_finite() || gap <= 0.0 {
        return None;
    }
    let g = 2f64.powi(gap.log2().round() as i32);
    let fits = pts.iter().all(|&p| {
        let k = (p / g).round();
        (p - k * g).abs() <= g * 1e-9 && k.abs() < 9e15
    });
    if fits {
        Some(g)
    } else {
        None
    }
}

/// `k`-fold additive self-convolution.
pub fn boxplus_power(
    m: &ScaledMeasure,
    k: usize,
    opts: &ConvOptions,
) -> Result<ScaledMeasure> {
    assert!(k >= 1);
    let mut acc = m.clone();
    for _ in 1..k {
        acc = convolve(&acc, m, ConvMode::Add, None, opts)?;
    }
    Ok(acc)
}

/// `k`-fold multiplicative self-convolution.
pub fn star_power(
    m: &ScaledMeasure,
    k: usize,
    alg: &dyn AlgebraOps,
    opts: &ConvOptions,
) -> Result<ScaledMeasure> {
    assert!(k >= 1);
    let mut acc = m.clone();
    for _ in 1..k {
        acc = convolve(&acc, m, ConvMode::Mul, Some(alg), opts)?;
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// Regularized L2 norm
// ---------------------------------------------------------------------------

fn unit_ball_volume(dim: usize) -> f64 {
    // v_k = π^{k/2} / Γ(k/2 + 1)
    match dim {
        0 => 1.0,
        1 => 2.0,
        2 => std::f64::consts::PI,
        3 => 4.0 * std::f64::consts::PI / 3.0,
        k => {
            let kf = k as f64;
            std::f64::consts::PI.powf(kf / 2.0) / gamma_half_int(k + 2)
        }
    }
}

/// Γ(m/2) for integer m ≥ 1.
fn gamma_half_int(m: usize) -> f64 {
    if m % 2 == 0 {
        // Γ(k) = (k−1)!
        (1..m / 2).map(|i| i as f64).product()
    } else {
        // Γ(k + 1/2) = (2k)!/(4^k k!) √π
        let k = (m - 1) / 2;
        let mut acc = std::f64::consts::PI.sqrt();
        for i in 0..k {
            acc *= i as f64 + 0.5;
        }
        acc
    }
}

/// `‖η‖_{2,δ}`: L2 norm of the density of `η ⊞ P_δ` where `P_δ` is the
/// normalized indicator of the δ-ball. Computed on a δ/2 grid: exact
/// interval overlaps in one dimension, center sampling in higher ones.
pub fn l2_norm_at_scale(m: &ScaledMeasure, delta: f64) -> f64 {
    assert!(delta > 0.0);
    let h = delta / 2.0;
    if m.is_empty() {
        return 0.0;
    }
    if m.dim == 1 {
        let mut cells: BTreeMap<i64, f64> = BTreeMap::new();
        for i in 0..m.len() {
            let x = m.point(i)[0];
            let w = m.weight_f64(i);
            let lo = x - delta;
            let hi = x + delta;
            let c0 = (lo / h).floor() as i64;
            let c1 = ((hi / h).ceil() as i64) - 1;
            for c in c0..=c1 {
                let cell_lo = c as f64 * h;
                let cell_hi = cell_lo + h;
                let overlap = (hi.min(cell_hi) - lo.max(cell_lo)).max(0.0);
                if overlap > 0.0 {
                    *cells.entry(c).or_insert(0.0) += w * overlap / (2.0 * delta);
                }
            }
        }
        let sum_sq: f64 = cells.values().map(|mass| mass * mass).sum();
        (sum_sq / h).sqrt()
    } else {
        let dim = m.dim;
        let vol = unit_ball_volume(dim) * delta.powi(dim as i32);
        // bucket atoms by cell for neighbor scans
        let mut buckets: BTreeMap<Vec<i64>, Vec<usize>> = BTreeMap::new();
        for i in 0..m.len() {
            let key: Vec<i64> = m.point(i).iter().map(|&x| (x / h).floor() as i64).collect();
            buckets.entry(key).or_default().push(i);
        }
        let reach = (delta / h).ceil() as i64 + 1;
        let mut sum_sq = 0.0;
        // density sampled at the center of every cell near an atom
        let mut seen: std::collections::BTreeSet<Vec<i64>> = std::collections::BTreeSet::new();
        for key in buckets.keys() {
            for offset in neighbor_offsets(dim, reach) {
                let cell: Vec<i64> = key.iter().zip(&offset).map(|(a, b)| a + b).collect();
                if !seen.insert(cell.clone()) {
                    continue;
                }
                let center: Vec<f64> = cell.iter().map(|&c| (c as f64 + 0.5) * h).collect();
                let mut dens = 0.0;
                for off2 in neighbor_offsets(dim, reach) {
                    let nb: Vec<i64> = cell.iter().zip(&off2).map(|(a, b)| a + b).collect();
                    if let Some(idx) = buckets.get(&nb) {
                        for &i in idx {
                            let d2: f64 = m
                                .point(i)
                                .iter()
                                .zip(&center)
                                .map(|(a, b)| (a - b) * (a - b))
                                .sum();
                            if d2 <= delta * delta {
                                dens += m.weight_f64(i);
                            }
                        }
                    }
                }
                dens /= vol;
                sum_sq += dens * dens * h.powi(dim as i32);
            }
        }
        sum_sq.sqrt()
    }
}

fn neighbor_offsets(dim: usize, reach: i64) -> Vec<Vec<i64>> {
    let mut out = vec![Vec::new()];
    for _ in 0..dim {
        let mut next = Vec::new();
        for prefix in &out {
            for o in -reach..=reach {
                let mut p = prefix.clone();
                p.push(o);
                next.push(p);
            }
        }
        out = next;
    }
    out
}

// ---------------------------------------------------------------------------
// Fourier transform of a measure
// ---------------------------------------------------------------------------

/// `η̂(ξ) = Σ w e^{2πi⟨ξ,x⟩}` with fixed-order compensated summation.
pub fn fourier_at(m: &ScaledMeasure, xi: &[f64]) -> (f64, f64) {
    assert_eq!(xi.len(), m.dim);
    let mut re = 0.0f64;
    let mut im = 0.0f64;
    let mut cre = 0.0f64;
    let mut cim = 0.0f64;
    for i in 0..m.len() {
        let phase: f64 = m.point(i).iter().zip(xi).map(|(x, f)| x * f).sum();
        let ang = 2.0 * std::f64::consts::PI * phase.fract();
        let w = m.weight_f64(i);
        kahan_add(&mut re, &mut cre, w * ang.cos());
        kahan_add(&mut im, &mut cim, w * ang.sin());
    }
    (re, im)
}

pub(crate) fn kahan_add(sum: &mut f64, comp: &mut f64, v: f64) {
    let y = v - *comp;
    let t = *sum + y;
    *comp = (t - *sum) - y;
    *sum = t;
}

// ---------------------------------------------------------------------------
// Essential part and non-concentration audits
// ---------------------------------------------------------------------------

/// Hyperplane sampling strategy shared by audits and the essential part.
#[derive(Clone, Copy, Debug)]
pub struct HyperplaneSampler {
    pub random_functionals: usize,
    pub heavy_atoms: usize,
    pub tuple_cap: usize,
    pub seed: u64,
}

impl Default for HyperplaneSampler {
    fn default() -> Self {
        HyperplaneSampler {
            random_functionals: 64,
            heavy_atoms: 32,
            tuple_cap: 256,
            seed: 0,
        }
    }
}

/// An affine hyperplane `{x : ⟨normal, x⟩ = offset}` with unit normal.
#[derive(Clone, Debug)]
pub struct Hyperplane {
    pub normal: Vec<f64>,
    pub offset: f64,
}

/// Sampled hyperplanes: uniformly random unit functionals (offsets through
/// heavy atoms), plus hyperplanes through dim-subsets of the heaviest
/// atoms. The number of atom tuples is capped; when the full set is larger
/// a deterministic seeded sample is taken.
pub fn sample_hyperplanes(m: &ScaledMeasure, s: &HyperplaneSampler) -> Vec<Hyperplane> {
    let dim = m.dim;
    let mut out = Vec::new();
    if m.is_empty() {
        return out;
    }
    // heaviest atoms
    let mut order: Vec<usize> = (0..m.len()).collect();
    order.sort_by(|&a, &b| {
        m.weight_f64(b)
            .partial_cmp(&m.weight_f64(a))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let heavy: Vec<usize> = order.iter().copied().take(s.heavy_atoms).collect();
    let mut rng = rng::stream(s.seed, 0x4e43);
    for k in 0..s.random_functionals {
        let mut normal: Vec<f64> = (0..dim)
            .map(|_| {
                // Box–Muller from two uniforms
                let u1: f64 = rng.gen::<f64>().max(1e-12);
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        let norm: f64 = normal.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue;
        }
        for v in &mut normal {
            *v /= norm;
        }
        // offsets: through a heavy atom (cycled) and a random point of the support
        let anchor = heavy[k % heavy.len()];
        let dot: f64 = m.point(anchor).iter().zip(&normal).map(|(a, b)| a * b).sum();
        out.push(Hyperplane {
            normal: normal.clone(),
            offset: dot,
        });
        let rand_atom = rng.gen::<usize>() % m.len();
        let dot2: f64 = m
            .point(rand_atom)
            .iter()
            .zip(&normal)
            .map(|(a, b)| a * b)
            .sum();
        out.push(Hyperplane {
            normal,
            offset: dot2,
        });
    }
    // hyperplanes through dim-tuples of heavy atoms
    if heavy.len() >= dim && dim >= 1 {
        let mut tuples: Vec<Vec<usize>> = Vec::new();
        let total = binomial(heavy.len(), dim);
        if total <= s.tuple_cap as u128 {
            enumerate_subsets(&heavy, dim, &mut tuples);
        } else {
            let mut trng = rng::stream(s.seed, 0x7091);
            while tuples.len() < s.tuple_cap {
                let mut pick: Vec<usize> = Vec::with_capacity(dim);
                while pick.len() < dim {
                    let c = heavy[trng.gen::<usize>() % heavy.len()];
                    if !pick.contains(&c) {
                        pick.push(c);
                    }
                }
                pick.sort_unstable();
                tuples.push(pick);
            }
            tuples.sort();
            tuples.dedup();
        }
        for t in tuples {
            if let Some(h) = hyperplane_through(m, &t) {
                out.push(h);
            }
        }
    }
    out
}

fn binomial(n: usize, k: usize) -> u128 {
    let mut acc: u128 = 1;
    for i in 0..k.min(n) {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

fn enumerate_subsets(items: &[usize], k: usize, out: &mut Vec<Vec<usize>>) {
    fn rec(items: &[usize], k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..items.len() {
            cur.push(items[i]);
            rec(items, k, i + 1, cur, out);
            cur.pop();
        }
    }
    rec(items, k, 0, &mut Vec::new(), out);
}

/// Affine hyperplane through `dim` atoms (best-fit normal from the
/// nullspace of the difference matrix); `None` when degenerate.
fn hyperplane_through(m: &ScaledMeasure, tuple: &[usize]) -> Option<Hyperplane> {
    let dim = m.dim;
    if tuple.len() != dim {
        return None;
    }
    if dim == 1 {
        return Some(Hyperplane {
            normal: vec![1.0],
            offset: m.point(tuple[0])[0],
        });
    }
    let base = m.point(tuple[0]);
    let rows: Vec<Vec<f64>> = tuple[1..]
        .iter()
        .map(|&i| {
            m.point(i)
                .iter()
                .zip(base)
                .map(|(a, b)| a - b)
                .collect()
        })
        .collect();
    // normal spans the orthogonal complement of the differences
    let basis = linalg::orthonormal_rows(&Mat::from_rows(&rows), 1e-10);
    if basis.len() != dim - 1 {
        return None;
    }
    // complete to a full basis: any unit vector orthogonal to all rows
    let mut normal = vec![0.0; dim];
    'outer: for axis in 0..dim {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            for x in &mut v {
                *x /= norm;
            }
            normal = v;
            break 'outer;
        }
    }
    if normal.iter().all(|&x| x == 0.0) {
        return None;
    }
    let offset: f64 = base.iter().zip(&normal).map(|(a, b)| a * b).sum();
    Some(Hyperplane { normal, offset })
}

/// Worst neighborhood mass over the sampled hyperplanes at each radius.
fn affine_neighborhood_masses(
    m: &ScaledMeasure,
    planes: &[Hyperplane],
    rho_grid: &[f64],
) -> Vec<f64> {
    let mut worst = vec![0.0f64; rho_grid.len()];
    let weights = m.weights_f64();
    for h in planes {
        // distances of atoms to the hyperplane, sorted with weight prefix sums
        let mut pairs: Vec<(f64, f64)> = (0..m.len())
            .map(|i| {
                let dot: f64 = m.point(i).iter().zip(&h.normal).map(|(a, b)| a * b).sum();
                ((dot - h.offset).abs(), weights[i])
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut acc = 0.0;
        let cumulative: Vec<(f64, f64)> = pairs
            .iter()
            .map(|&(d, w)| {
                acc += w;
                (d, acc)
            })
            .collect();
        for (k, &rho) in rho_grid.iter().enumerate() {
            // mass of atoms with distance ≤ rho
            let mass = match cumulative.binary_search_by(|&(d, _)| d.total_cmp(&rho)) {
                Ok(mut i) => {
                    while i + 1 < cumulative.len() && cumulative[i + 1].0 <= rho {
                        i += 1;
                    }
                    cumulative[i].1
                }
                Err(0) => 0.0,
                Err(i) => cumulative[i - 1].1,
            };
            worst[k] = worst[k].max(mass);
        }
    }
    worst
}

/// Outcome of a non-concentration audit.
#[derive(Clone, Debug, Serialize)]
pub struct NCAuditReport {
    pub epsilon: f64,
    pub delta: f64,
    /// mass outside Ball(0, δ^{−ε}) — the `η₁` part of the decomposition
    pub mass_outside_ball: f64,
    pub det_threshold: f64,
    /// sup over sampled `y` of `η(y + S_E(δ^ε))`
    pub worst_det_mass: f64,
    /// per radius: worst mass of a ρ-neighborhood of a sampled hyperplane
    pub affine: Vec<(f64, f64)>,
    pub kappa_hat: f64,
    pub r_squared: f64,
}

/// Measure the three non-concentration clauses at scale δ: support radius,
/// mass near small-determinant elements, and mass near sampled affine
/// hyperplanes with a fitted exponent.
pub fn nc_audit(
    m: &ScaledMeasure,
    epsilon: f64,
    rho_grid: &[f64],
    delta: f64,
    sampler: &HyperplaneSampler,
    alg: &dyn AlgebraOps,
) -> NCAuditReport {
    let ball = delta.powf(-epsilon);
    let (_, outside) = m.restrict(|p| {
        p.iter().map(|v| v * v).sum::<f64>().sqrt() <= ball
    });
    let det_threshold = delta.powf(epsilon);
    // sup over sampled y of the mass of {x : |det(x − y)| ≤ δ^ε}
    let mut ys: Vec<Vec<f64>> = vec![vec![0.0; m.dim]];
    let mut order: Vec<usize> = (0..m.len()).collect();
    order.sort_by(|&a, &b| {
        m.weight_f64(b)
            .partial_cmp(&m.weight_f64(a))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for &i in order.iter().take(8) {
        ys.push(m.point(i).to_vec());
    }
    let mut yrng = rng::stream(sampler.seed, 0xdef0);
    for _ in 0..16 {
        let i = yrng.gen::<usize>() % m.len();
        let j = yrng.gen::<usize>() % m.len();
        let mid: Vec<f64> = m
            .point(i)
            .iter()
            .zip(m.point(j))
            .map(|(a, b)| (a + b) / 2.0)
            .collect();
        ys.push(mid);
    }
    let mut worst_det_mass = 0.0f64;
    for y in &ys {
        let mut mass = 0.0;
        for i in 0..m.len() {
            let diff: Vec<f64> = m.point(i).iter().zip(y).map(|(a, b)| a - b).collect();
            if alg.det(&diff).abs() <= det_threshold {
                mass += m.weight_f64(i);
            }
        }
        worst_det_mass = worst_det_mass.max(mass);
    }
    // affine clause
    let planes = sample_hyperplanes(m, sampler);
    let worst = affine_neighborhood_masses(m, &planes, rho_grid);
    let affine: Vec<(f64, f64)> = rho_grid.iter().copied().zip(worst.iter().copied()).collect();
    let pts: Vec<(f64, f64)> = affine
        .iter()
        .filter(|&&(_, mass)| mass > 0.0)
        .map(|&(rho, mass)| (rho.ln(), mass.ln()))
        .collect();
    let (kappa_hat, r_squared) = if pts.len() >= 2 {
        let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let ys2: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let (_, slope, r2) = linalg::linear_fit(&xs, &ys2);
        (slope, r2)
    } else {
        (f64::NAN, f64::NAN)
    };
    NCAuditReport {
        epsilon,
        delta,
        mass_outside_ball: outside.to_f64().unwrap_or(0.0),
        det_threshold,
        worst_det_mass,
        affine,
        kappa_hat,
        r_squared,
    }
}

/// Pushforward of `η₁ ⊗ η₂` under the bilinear map into the tensor square,
/// sampled when the full product is over budget (Monte Carlo estimator with
/// uniform pair weights).
pub fn tensor_pushforward(
    a: &ScaledMeasure,
    b: &ScaledMeasure,
    pair_budget: usize,
    seed: u64,
) -> ScaledMeasure {
    let dim = a.dim * b.dim;
    let total = a.len().saturating_mul(b.len());
    let mut atoms: Vec<(Vec<f64>, BigRational)> = Vec::new();
    if total <= pair_budget {
        for i in 0..a.len() {
            for j in 0..b.len() {
                let mut p = Vec::with_capacity(dim);
                for x in a.point(i) {
                    for y in b.point(j) {
                        p.push(x * y);
                    }
                }
                atoms.push((p, a.weight_rational(i) * b.weight_rational(j)));
            }
        }
    } else {
        let n = pair_budget;
        let mut rng = rng::stream(seed, 0x7e4e);
        let wa = cumulative(a);
        let wb = cumulative(b);
        let unit = BigRational::new(BigInt::one(), BigInt::from(n as u64));
        for _ in 0..n {
            let i = pick(&wa, rng.gen());
            let j = pick(&wb, rng.gen());
            let mut p = Vec::with_capacity(dim);
            for x in a.point(i) {
                for y in b.point(j) {
                    p.push(x * y);
                }
            }
            atoms.push((p, unit.clone()));
        }
    }
    ScaledMeasure::sorted_by_points(atoms, dim, a.scale)
}

pub(crate) fn cumulative(m: &ScaledMeasure) -> Vec<f64> {
    let mut acc = 0.0;
    (0..m.len())
        .map(|i| {
            acc += m.weight_f64(i);
            acc
        })
        .collect()
}

pub(crate) fn pick(cum: &[f64], u: f64) -> usize {
    let target = u * cum.last().copied().unwrap_or(1.0);
    match cum.binary_search_by(|x| x.total_cmp(&target)) {
        Ok(i) => (i + 1).min(cum.len() - 1),
        Err(i) => i.min(cum.len() - 1),
    }
}

/// Result of taking the essential part of a measure.
#[derive(Clone, Debug)]
pub struct EssentialPart {
    pub measure: ScaledMeasure,
    pub removed_ball: f64,
    pub removed_det: f64,
    pub removed_affine: f64,
    /// true when total removed mass ≤ 3·δ^τ
    pub within_budget: bool,
}

/// Restrict to `Ball(0, δ^{−ε}) ∖ S_E(δ^ε)`, then strip mass near affine
/// hyperplanes that violate the `δ^{−ε}ρ^κ` bound (found by the sampler).
/// Affine removals stop before the cumulative removed mass would exceed the
/// `3·δ^τ` budget: beyond that point the measure is concentrated rather
/// than trimmable, which the flag records.
pub fn essential_part(
    m: &ScaledMeasure,
    epsilon: f64,
    kappa: f64,
    tau: f64,
    alg: &dyn AlgebraOps,
    sampler: &HyperplaneSampler,
) -> EssentialPart {
    let delta = m.scale;
    let budget = 3.0 * delta.powf(tau);
    let ball = delta.powf(-epsilon);
    let (kept, removed_ball) = m.restrict(|p| {
        p.iter().map(|v| v * v).sum::<f64>().sqrt() <= ball
    });
    let det_threshold = delta.powf(epsilon);
    let (mut kept, removed_det) = kept.restrict(|p| alg.det(p).abs() > det_threshold);
    let mut removed_affine = BigRational::zero();
    let rho_grid: Vec<f64> = {
        let mut g = Vec::new();
        let mut rho = delta;
        while rho < 1.0 {
            g.push(rho);
            rho *= 4.0;
        }
        g
    };
    for _ in 0..32 {
        if kept.is_empty() {
            break;
        }
        let already = (removed_ball.clone() + removed_det.clone() + removed_affine.clone())
            .to_f64()
            .unwrap_or(1.0);
        if already >= budget {
            break;
        }
        let planes = sample_hyperplanes(&kept, sampler);
        let worst = affine_neighborhood_masses(&kept, &planes, &rho_grid);
        let mut offender: Option<f64> = None;
        for (k, &mass) in worst.iter().enumerate() {
            let bound = delta.powf(-epsilon) * rho_grid[k].powf(kappa);
            if mass > bound {
                offender = Some(rho_grid[k]);
                break;
            }
        }
        let Some(rho) = offender else {
            break;
        };
        let mut worst_plane: Option<(&Hyperplane, f64)> = None;
        for h in &planes {
            let mass = affine_neighborhood_masses(&kept, std::slice::from_ref(h), &[rho])[0];
            if worst_plane.map_or(true, |(_, m0)| mass > m0) {
                worst_plane = Some((h, mass));
            }
        }
        let Some((h, offender_mass)) = worst_plane else {
            break;
        };
        if already + offender_mass > budget {
            break; // removing it would blow the budget: report instead
        }
        let normal = h.normal.clone();
        let offset = h.offset;
        let (next, removed) = kept.restrict(|p| {
            let dot: f64 = p.iter().zip(&normal).map(|(a, b)| a * b).sum();
            (dot - offset).abs() > rho
        });
        removed_affine += removed;
        kept = next;
    }
    let total_removed = removed_ball.clone() + removed_det.clone() + removed_affine.clone();
    let within = total_removed.to_f64().unwrap_or(1.0) <= budget;
    EssentialPart {
        measure: kept,
        removed_ball: removed_ball.to_f64().unwrap_or(0.0),
        removed_det: removed_det.to_f64().unwrap_or(0.0),
        removed_affine: removed_affine.to_f64().unwrap_or(0.0),
        within_budget: within,
    }
}

// ---------------------------------------------------------------------------
// Covering numbers, sum-product growth, bounded generation
// ---------------------------------------------------------------------------

/// Number of occupied δ-cells: a covering-number proxy within a universal
/// factor of the ball-covering optimum, cheap enough for million-atom sets.
pub fn occupied_cells(points: &[Vec<f64>], delta: f64) -> usize {
    let mut cells: std::collections::BTreeSet<Vec<i64>> = std::collections::BTreeSet::new();
    for p in points {
        cells.insert(p.iter().map(|&x| (x / delta).floor() as i64).collect());
    }
    cells.len()
}

#[derive(Clone, Debug, Serialize)]
pub struct GrowthReport {
    pub n_a: usize,
    pub n_sum: usize,
    /// best (largest) covering number of `A + fA` over the sampled `f`
    pub n_mixed_best: usize,
    pub growth_add: f64,
    pub growth_mixed: f64,
    /// δ-scale additive energy of `(x,y) ↦ x + fy` for each sampled `f`
    pub energies: Vec<f64>,
}

/// Covering numbers `N(A,δ)`, `N(A+A,δ)`, and the best `N(A+fA,δ)` over
/// operators `f` (elements of the tensor square in their defining action).
pub fn sumproduct_check(
    a: &[Vec<f64>],
    operators: &[Mat],
    delta: f64,
    pair_budget: usize,
) -> GrowthReport {
    let n_a = occupied_cells(a, delta);
    let a_eff: Vec<Vec<f64>> = if a.len() * a.len() > pair_budget {
        // thin to a δ/2-grid representative set
        let mut cells: BTreeMap<Vec<i64>, Vec<f64>> = BTreeMap::new();
        for p in a {
            let key: Vec<i64> = p.iter().map(|&x| (x / (delta / 2.0)).floor() as i64).collect();
            cells.entry(key).or_insert_with(|| p.clone());
        }
        cells.into_values().collect()
    } else {
        a.to_vec()
    };
    let mut sums = Vec::with_capacity(a_eff.len() * a_eff.len());
    for x in &a_eff {
        for y in &a_eff {
            sums.push(x.iter().zip(y).map(|(u, v)| u + v).collect());
        }
    }
    let n_sum = occupied_cells(&sums, delta);
    let mut n_mixed_best = 0;
    let mut energies = Vec::new();
    for f in operators {
        let mut mixed = Vec::with_capacity(a_eff.len() * a_eff.len());
        let mut cell_counts: BTreeMap<Vec<i64>, u64> = BTreeMap::new();
        for x in &a_eff {
            for y in &a_eff {
                let fy = f.apply(y);
                let p: Vec<f64> = x.iter().zip(&fy).map(|(u, v)| u + v).collect();
                let key: Vec<i64> = p.iter().map(|&v| (v / delta).floor() as i64).collect();
                *cell_counts.entry(key).or_insert(0) += 1;
                mixed.push(p);
            }
        }
        let n_mixed = cell_counts.len();
        n_mixed_best = n_mixed_best.max(n_mixed);
        // additive energy at scale δ: pairs mapping to the same cell
        let energy: f64 = cell_counts.values().map(|&c| (c as f64) * (c as f64)).sum();
        energies.push(energy);
    }
    GrowthReport {
        n_a,
        n_sum,
        n_mixed_best,
        growth_add: n_sum as f64 / n_a.max(1) as f64,
        growth_mixed: n_mixed_best as f64 / n_a.max(1) as f64,
        energies,
    }
}

/// Fraction of a δ-grid of `Ball(0, δ^{ε₀})` lying within δ of the set of
/// sums of at most `s` products of at most `s` elements of `A ∪ (−A)`.
pub fn generation_probe(
    a: &[Vec<f64>],
    s: usize,
    delta: f64,
    eps0: f64,
    alg: &dyn AlgebraOps,
    budget: usize,
) -> Result<f64> {
    let dim = alg.dim();
    assert!(a.iter().all(|p| p.len() == dim));
    if s > 3 {
        return Err(CoreError::BudgetExceeded(
            "generation probe limited to s ≤ 3".into(),
        ));
    }
    if dim > 4 {
        return Err(CoreError::BudgetExceeded(
            "generation probe limited to ambient dim ≤ 4".into(),
        ));
    }
    let snap = delta / 2.0;
    let key_of = |p: &[f64]| -> Vec<i64> { p.iter().map(|&x| (x / snap).round() as i64).collect() };
    let dedupe_into = |pts: &mut dyn Iterator<Item = Vec<f64>>,
                       cells: &mut BTreeMap<Vec<i64>, Vec<f64>>,
                       budget: usize|
     -> Result<()> {
        for p in pts {
            if cells.len() > budget {
                return Err(CoreError::BudgetExceeded(
                    "generation enumeration over budget".into(),
                ));
            }
            cells.entry(key_of(&p)).or_insert(p);
        }
        Ok(())
    };
    // signed generators
    let mut signed_cells: BTreeMap<Vec<i64>, Vec<f64>> = BTreeMap::new();
    dedupe_into(
        &mut a
            .iter()
            .cloned()
            .chain(a.iter().map(|p| p.iter().map(|x| -x).collect())),
        &mut signed_cells,
        budget,
    )?;
    let signed: Vec<Vec<f64>> = signed_cells.into_values().collect();
    // products of length ≤ s
    let mut product_cells: BTreeMap<Vec<i64>, Vec<f64>> = BTreeMap::new();
    dedupe_into(&mut signed.iter().cloned(), &mut product_cells, budget)?;
    let mut level = signed.clone();
    for _ in 1..s {
        let mut next_cells: BTreeMap<Vec<i64>, Vec<f64>> = BTreeMap::new();
        for x in &level {
            for g in &signed {
                let p = alg.mul(x, g);
                if next_cells.len() > budget || product_cells.len() > budget {
                    return Err(CoreError::BudgetExceeded(
                        "product enumeration over budget".into(),
                    ));
                }
                next_cells.entry(key_of(&p)).or_insert(p);
            }
        }
        level = next_cells.values().cloned().collect();
        for (k, v) in next_cells {
            product_cells.entry(k).or_insert(v);
        }
    }
    let products: Vec<Vec<f64>> = product_cells.into_values().collect();
    // sums of ≤ s products
    let mut sum_cells: BTreeMap<Vec<i64>, Vec<f64>> = BTreeMap::new();
    dedupe_into(&mut products.iter().cloned(), &mut sum_cells, budget)?;
    let mut sum_level = products.clone();
    for _ in 1..s {
        let mut next_cells: BTreeMap<Vec<i64>, Vec<f64>> = BTreeMap::new();
        for x in &sum_level {
            for p in &products {
                let q: Vec<f64> = x.iter().zip(p).map(|(u, v)| u + v).collect();
                if next_cells.len() > budget || sum_cells.len() > budget {
                    return Err(CoreError::BudgetExceeded(
                        "sum enumeration over budget".into(),
                    ));
                }
                next_cells.entry(key_of(&q)).or_insert(q);
            }
        }
        sum_level = next_cells.values().cloned().collect();
        for (k, v) in next_cells {
            sum_cells.entry(k).or_insert(v);
        }
    }
    let sums: Vec<Vec<f64>> = sum_cells.into_values().collect();
    // coverage of the δ-grid of Ball(0, δ^{ε₀})
    let radius = delta.powf(eps0);
    if radius <= delta {
        return Ok(1.0); // target fits inside a single δ-ball around 0 ∈ ⟨A⟩_s − A·0… trivially covered
    }
    let cells: std::collections::BTreeSet<Vec<i64>> = sums
        .iter()
        .map(|p| p.iter().map(|&x| (x / delta).floor() as i64).collect())
        .collect();
    let steps = (radius / delta).floor() as i64;
    let mut total = 0u64;
    let mut covered = 0u64;
    let mut grid_point = vec![-steps; dim];
    loop {
        let p: Vec<f64> = grid_point.iter().map(|&k| k as f64 * delta).collect();
        let norm: f64 = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= radius {
            total += 1;
            // covered when some ⟨A⟩_s point shares a δ-cell neighborhood
            let base: Vec<i64> = p.iter().map(|&x| (x / delta).floor() as i64).collect();
            let mut hit = false;
            'scan: for off in neighbor_offsets(dim, 1) {
                let cell: Vec<i64> = base.iter().zip(&off).map(|(a, b)| a + b).collect();
                if cells.contains(&cell) {
                    hit = true;
                    break 'scan;
                }
            }
            if hit {
                covered += 1;
            }
        }
        // advance odometer
        let mut c = 0;
        loop {
            grid_point[c] += 1;
            if grid_point[c] <= steps {
                break;
            }
            grid_point[c] = -steps;
            c += 1;
            if c == dim {
                let frac = if total == 0 {
                    1.0
                } else {
                    covered as f64 / total as f64
                };
                return Ok(frac);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Flattening pipeline and the power inequality
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct FlattenStep {
    pub norm_before: f64,
    pub norm_after: f64,
    pub ratio: f64,
    pub removed_mass: f64,
    pub ess_within_budget: bool,
    pub fitted_exponent: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FlattenTrajectory {
    pub steps: Vec<FlattenStep>,
    pub floor_reached: bool,
    pub floor_norm_sq: f64,
}

/// One unconditional flattening step: `ess(η*η*η ⊟ η*η*η)` with the norm
/// ratio. Returns the new measure alongside the step record.
pub fn flatten_step(
    m: &ScaledMeasure,
    epsilon: f64,
    kappa: f64,
    tau: f64,
    alg: &dyn AlgebraOps,
    sampler: &HyperplaneSampler,
    opts: &ConvOptions,
) -> Result<(ScaledMeasure, FlattenStep)> {
    let delta = m.scale;
    let norm_before = l2_norm_at_scale(m, delta);
    let c3 = star_power(m, 3, alg, opts)?;
    let diff = convolve(&c3, &c3, ConvMode::Sub, None, opts)?;
    let ess = essential_part(&diff, epsilon, kappa, tau, alg, sampler);
    let norm_after = l2_norm_at_scale(&ess.measure, delta);
    let ratio = norm_after / norm_before;
    let step = FlattenStep {
        norm_before,
        norm_after,
        ratio,
        removed_mass: ess.removed_ball + ess.removed_det + ess.removed_affine,
        ess_within_budget: ess.within_budget,
        fitted_exponent: ratio.ln() / delta.ln(),
    };
    Ok((ess.measure, step))
}

/// Iterate `η ← ess(η*η*η ⊟ η*η*η)`, recording the `‖·‖_{2,δ}` trajectory.
/// Stops when the flattening target `‖η‖²_{2,δ} ≤ δ^{−κ}` is reached (the
/// norm starts near `δ^{−dim+κ}` for concentrated measures and only needs
/// to be driven down to `δ^{−κ}`).
pub fn flatten_pipeline(
    m: &ScaledMeasure,
    steps: usize,
    epsilon: f64,
    kappa: f64,
    tau: f64,
    alg: &dyn AlgebraOps,
    sampler: &HyperplaneSampler,
    opts: &ConvOptions,
) -> Result<FlattenTrajectory> {
    let delta = m.scale;
    let floor = delta.powf(-kappa);
    let mut current = m.clone();
    let mut out = FlattenTrajectory {
        steps: Vec::new(),
        floor_reached: false,
        floor_norm_sq: floor,
    };
    for _ in 0..steps {
        let norm_before = l2_norm_at_scale(&current, delta);
        if norm_before * norm_before <= floor {
            out.floor_reached = true;
            break;
        }
        let (next, step) = flatten_step(&current, epsilon, kappa, tau, alg, sampler, opts)?;
        out.steps.push(step);
        current = next;
        if current.is_empty() {
            break;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct PowerInequalityCheck {
    pub min_slack: f64,
    pub worst_xi: Vec<f64>,
    pub grid_size: usize,
}

/// Verify `|η̂^{*3m}(ξ)|^{2^m} ≤ |μ̂^{*m}(ξ)|` with `μ = η*³ ⊟ η*³`,
/// exactly on atoms (no coarsening). Returns the minimal slack over the
/// frequency grid, which must only be negative by rounding.
pub fn power_inequality_check(
    m: &ScaledMeasure,
    order: usize,
    xi_grid: &[Vec<f64>],
    alg: &dyn AlgebraOps,
    atom_budget: usize,
) -> Result<PowerInequalityCheck> {
    assert!(order >= 1);
    let opts = ConvOptions::exact_mode(atom_budget);
    let c3 = star_power(m, 3, alg, &opts)?;
    let mu = convolve(&c3, &c3, ConvMode::Sub, None, &opts)?;
    let mu_m = {
        let mut acc = mu.clone();
        for _ in 1..order {
            acc = convolve(&acc, &mu, ConvMode::Mul, Some(alg), &opts)?;
        }
        acc
    };
    let eta_3m = star_power(m, 3 * order, alg, &opts)?;
    let mut min_slack = f64::INFINITY;
    let mut worst = vec![0.0; m.dim];
    for xi in xi_grid {
        let (lr, li) = fourier_at(&eta_3m, xi);
        let lhs = (lr.hypot(li)).powi(1 << order);
        let (rr, ri) = fourier_at(&mu_m, xi);
        let rhs = rr.hypot(ri);
        let slack = rhs - lhs;
        if slack < min_slack {
            min_slack = slack;
            worst = xi.clone();
        }
    }
    Ok(PowerInequalityCheck {
        min_slack,
        worst_xi: worst,
        grid_size: xi_grid.len(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct MultiplicativeDecayReport {
    /// max |(η₁*…*η_k)^(ξ)| over the grid, for k = 1..s
    pub per_prefix_max: Vec<f64>,
    pub grid_size: usize,
}

/// Fourier coefficients of multiplicative convolutions across a frequency
/// grid, reporting the maximal modulus after each further convolution.
pub fn multiplicative_fourier_decay(
    etas: &[ScaledMeasure],
    xi_grid: &[Vec<f64>],
    alg: &dyn AlgebraOps,
    opts: &ConvOptions,
) -> Result<MultiplicativeDecayReport> {
    assert!(!etas.is_empty());
    let mut per_prefix_max = Vec::new();
    let mut acc = etas[0].clone();
    for k in 0..etas.len() {
        if k > 0 {
            acc = convolve(&acc, &etas[k], ConvMode::Mul, Some(alg), opts)?;
        }
        let mut best = 0.0f64;
        for xi in xi_grid {
            let (re, im) = fourier_at(&acc, xi);
            best = best.max(re.hypot(im));
        }
        per_prefix_max.push(best);
    }
    Ok(MultiplicativeDecayReport {
        per_prefix_max,
        grid_size: xi_grid.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(p: i64, q: i64) -> BigRational {
        BigRational::new(BigInt::from(p), BigInt::from(q))
    }

    #[test]
    fn dirac_l2_norm_matches_closed_form() {
        for delta in [2f64.powi(-4), 2f64.powi(-8)] {
            let m = ScaledMeasure::dirac(1, delta, vec![0.0]);
            let got = l2_norm_at_scale(&m, delta);
            let want = 1.0 / (2.0 * delta).sqrt();
            assert!(
                (got - want).abs() < 1e-12 * want,
                "delta={delta}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn uniform_density_has_unit_l2_norm() {
        // δ ≪ 1: the regularization of a fine net of [0,1] is ≈ the uniform
        // density, whose L2 norm is 1
        let delta = 2f64.powi(-8);
        let m = ScaledMeasure::net_1d(0.0, 1.0, delta, delta);
        let got = l2_norm_at_scale(&m, delta);
        assert!((got - 1.0).abs() < 0.05, "got {got}");
    }

    #[test]
    fn halving_mass_halves_the_norm() {
        let delta = 2f64.powi(-6);
        let m = ScaledMeasure::net_1d(1.0, 2.0, delta, delta);
        let h = m.scale_mass_half();
        let a = l2_norm_at_scale(&m, delta);
        let b = l2_norm_at_scale(&h, delta);
        assert!((b - a / 2.0).abs() < 1e-12 * a);
        assert_eq!(h.mass(), r(1, 2));
    }

    #[test]
    fn convolution_identities() {
        let delta = 2f64.powi(-6);
        let alg = RealLine;
        let opts = ConvOptions::for_scale(delta);
        let da = ScaledMeasure::dirac(1, delta, vec![3.0]);
        let db = ScaledMeasure::dirac(1, delta, vec![5.0]);
        let prod = convolve(&da, &db, ConvMode::Mul, Some(&alg), &opts).unwrap();
        assert_eq!(prod.len(), 1);
        assert_eq!(prod.point(0), &[15.0]);
        let diff = convolve(&da, &da, ConvMode::Sub, None, &opts).unwrap();
        assert_eq!(diff.len(), 1);
        assert_eq!(diff.point(0), &[0.0]);
        assert!(diff.mass().is_one());
    }

    #[test]
    fn net_boxplus_self_lands_in_expected_interval() {
        let delta = 2f64.powi(-5);
        let opts = ConvOptions::for_scale(delta);
        let m = ScaledMeasure::net_1d(1.0, 2.0, delta, delta);
        let s = convolve(&m, &m, ConvMode::Add, None, &opts).unwrap();
        assert!(s.mass().is_one());
        for p in s.points_iter() {
            assert!(p[0] >= 2.0 - 1e-9 && p[0] <= 4.0 + 1e-9);
        }
    }

    #[test]
    fn mass_is_conserved_exactly_under_convolutions() {
        let delta = 2f64.powi(-7);
        let opts = ConvOptions::for_scale(delta);
        let m = ScaledMeasure::from_rational_atoms(
            1,
            delta,
            vec![
                (vec![0.1], r(1, 3)),
                (vec![0.7], r(1, 2)),
                (vec![1.3], r(1, 6)),
            ],
        );
        let s = convolve(&m, &m, ConvMode::Add, None, &opts).unwrap();
        assert!(s.mass().is_one());
        let d = convolve(&s, &m, ConvMode::Sub, None, &opts).unwrap();
        assert!(d.mass().is_one());
        let c = d.coarsen(delta / 4.0);
        assert!(c.mass().is_one());
    }

    #[test]
    fn young_style_bound_on_regularized_norms() {
        // ‖η⊞ν‖_{2,δ} ≤ ‖η‖_{2,δ}·mass(ν) for probability ν — here both
        // are probabilities so the convolution cannot grow the norm much;
        // verify the documented inequality numerically
        let delta = 2f64.powi(-7);
        let opts = ConvOptions::for_scale(delta);
        let eta = ScaledMeasure::net_1d(0.0, 1.0, delta, delta);
        let nu = ScaledMeasure::net_1d(0.0, 0.5, delta, delta);
        let conv = convolve(&eta, &nu, ConvMode::Add, None, &opts).unwrap();
        let lhs = l2_norm_at_scale(&conv, delta);
        let rhs = l2_norm_at_scale(&eta, delta) * nu.mass_f64();
        assert!(lhs <= rhs * 1.05, "{lhs} vs {rhs}");
    }

    #[test]
    fn essential_part_examples() {
        let delta = 2f64.powi(-10);
        let alg = RealLine;
        let sampler = HyperplaneSampler::default();
        // supported well inside the ball and away from 0 → unchanged
        let m = ScaledMeasure::net_1d(1.0, 2.0, delta, delta);
        let e = essential_part(&m, 0.5, 0.8, 0.5, &alg, &sampler);
        assert_eq!(e.measure.len(), m.len());
        assert!(e.within_budget);
        // 10% of the mass at a singular atom (0) is removed
        let m2 = ScaledMeasure::from_rational_atoms(
            1,
            delta,
            vec![(vec![0.0], r(1, 10)), (vec![1.5], r(9, 10))],
        );
        let e2 = essential_part(&m2, 0.5, 0.8, 0.5, &alg, &sampler);
        assert_eq!(e2.measure.len(), 1);
        assert!((e2.removed_det - 0.1).abs() < 1e-12);
        assert_eq!(e2.measure.mass(), r(9, 10));
        // idempotence
        let e3 = essential_part(&e2.measure, 0.5, 0.8, 0.5, &alg, &sampler);
        assert_eq!(e3.measure.len(), e2.measure.len());
        assert!((e3.measure.mass_f64() - e2.measure.mass_f64()).abs() < 1e-15);
    }

    #[test]
    fn audit_of_uniform_net_has_unit_exponent() {
        let delta = 2f64.powi(-10);
        let m = ScaledMeasure::net_1d(1.0, 2.0, delta, delta);
        let rho_grid: Vec<f64> = (2..=7).map(|k| 2f64.powi(-(k as i32))).collect();
        let report = nc_audit(
            &m,
            0.1,
            &rho_grid,
            delta,
            &HyperplaneSampler::default(),
            &RealLine,
        );
        // neighborhood mass of a point in 1D is ≈ 2ρ → exponent ≈ 1
        assert!(
            (report.kappa_hat - 1.0).abs() < 0.15,
            "kappa_hat = {}",
            report.kappa_hat
        );
        assert!(report.r_squared > 0.95);
        assert!(report.mass_outside_ball == 0.0);
    }

    #[test]
    fn audit_flags_a_point_mass() {
        let delta = 2f64.powi(-10);
        let m = ScaledMeasure::dirac(1, delta, vec![1.0]);
        let rho_grid: Vec<f64> = (2..=7).map(|k| 2f64.powi(-(k as i32))).collect();
        let report = nc_audit(
            &m,
            0.1,
            &rho_grid,
            delta,
            &HyperplaneSampler::default(),
            &RealLine,
        );
        // all the mass sits in every neighborhood of the atom: exponent 0
        for &(_, mass) in &report.affine {
            assert!((mass - 1.0).abs() < 1e-12);
        }
        assert!(report.kappa_hat.abs() < 1e-9);
    }

    #[test]
    fn tensor_pushforward_halves_the_exponent_roughly() {
        let delta = 2f64.powi(-10);
        let m = ScaledMeasure::net_1d(1.0, 2.0, 2f64.powi(-7), delta);
        let t = tensor_pushforward(&m, &m, 1 << 20, 7);
        assert_eq!(t.dim, 1);
        let rho_grid: Vec<f64> = (2..=7).map(|k| 2f64.powi(-(k as i32))).collect();
        let base = nc_audit(&m, 0.1, &rho_grid, delta, &HyperplaneSampler::default(), &RealLine);
        let tens = nc_audit(&t, 0.1, &rho_grid, delta, &HyperplaneSampler::default(), &RealLine);
        // products of two [1,2] nets concentrate like κ/2 near hyperplanes
        assert!(tens.kappa_hat > 0.3 * base.kappa_hat);
        assert!(tens.kappa_hat < base.kappa_hat * 1.1);
    }

    #[test]
    fn growth_of_arithmetic_vs_geometric_progressions() {
        // dyadic spacing keeps cell indices exact
        let delta = 2f64.powi(-10);
        let step = 2f64.powi(-7);
        let ap: Vec<Vec<f64>> = (0..200).map(|k| vec![1.0 + k as f64 * step]).collect();
        let gp: Vec<Vec<f64>> = (0..200).map(|k| vec![1.01f64.powi(k)]).collect();
        let rep_ap = sumproduct_check(&ap, &[], delta, 1 << 22);
        let rep_gp = sumproduct_check(&gp, &[], delta, 1 << 22);
        // arithmetic progressions barely grow; geometric ones grow a lot
        assert!(rep_ap.growth_add < 2.5, "AP growth {}", rep_ap.growth_add);
        assert!(rep_gp.growth_add > 10.0, "GP growth {}", rep_gp.growth_add);
        // singleton
        let single = sumproduct_check(&[vec![1.0]], &[], delta, 1 << 20);
        assert_eq!(single.n_a, 1);
        assert_eq!(single.n_sum, 1);
    }

    #[test]
    fn generation_probe_examples() {
        let alg = RealLine;
        let delta = 2f64.powi(-8);
        // net of [1,2]: differences of products at s = 2 fill an interval
        let net: Vec<Vec<f64>> = (0..=256).map(|k| vec![1.0 + k as f64 * delta]).collect();
        let cov = generation_probe(&net, 2, delta, 0.5, &alg, 10_000_000).unwrap();
        assert!(cov > 0.999, "coverage {cov}");
        // A = {1}, s = 2: ⟨A⟩₂ = {−2,−1,0,1,2}: sparse coverage
        let cov2 = generation_probe(&[vec![1.0]], 2, delta, 0.5, &alg, 1 << 20).unwrap();
        assert!(cov2 < 0.5, "coverage {cov2}");
        // target radius below δ → trivially covered
        let cov3 = generation_probe(&[vec![1.0]], 2, delta, 1.5, &alg, 1 << 20).unwrap();
        assert_eq!(cov3, 1.0);
    }

    #[test]
    fn power_inequality_on_small_measures() {
        let alg = RealLine;
        // point mass at 1: both sides are 1, slack 0
        let m = ScaledMeasure::dirac(1, 1e-3, vec![1.0]);
        let grid: Vec<Vec<f64>> = (0..32).map(|k| vec![k as f64 * 0.37]).collect();
        let chk = power_inequality_check(&m, 1, &grid, &alg, 1 << 20).unwrap();
        assert!(chk.min_slack.abs() < 1e-12);
        // random 5-atom measures, m = 1
        let mut rng = rng::stream(5, 0);
        for _ in 0..5 {
            let atoms: Vec<(Vec<f64>, BigRational)> = (0..5)
                .map(|_| (vec![rng.gen::<f64>() * 4.0 - 2.0], r(1, 5)))
                .collect();
            let eta = ScaledMeasure::from_rational_atoms(1, 1e-3, atoms);
            let chk = power_inequality_check(&eta, 1, &grid, &alg, 1 << 22).unwrap();
            assert!(chk.min_slack >= -1e-12, "slack {}", chk.min_slack);
        }
        // 3-atom measure, m = 2
        let eta = ScaledMeasure::from_rational_atoms(
            1,
            1e-3,
            vec![
                (vec![0.5], r(1, 3)),
                (vec![-1.25], r(1, 3)),
                (vec![2.0], r(1, 3)),
            ],
        );
        let chk = power_inequality_check(&eta, 2, &grid, &alg, 1 << 22).unwrap();
        assert!(chk.min_slack >= -1e-12, "slack {}", chk.min_slack);
    }

    #[test]
    fn flatten_step_decreases_the_norm_for_a_net() {
        let delta = 2f64.powi(-8);
        let alg = RealLine;
        let m = ScaledMeasure::net_1d(1.0, 2.0, delta, delta);
        let opts = ConvOptions::for_scale(delta);
        let (_, step) = flatten_step(
            &m,
            0.6,
            0.9,
            0.5,
            &alg,
            &HyperplaneSampler::default(),
            &opts,
        )
        .unwrap();
        assert!(step.ratio < 1.0, "ratio {}", step.ratio);
        assert!(step.ess_within_budget);
    }

    #[test]
    fn flatten_stops_at_the_floor() {
        let delta = 2f64.powi(-8);
        let alg = RealLine;
        // an extremely spread measure is already at the κ floor
        let m = ScaledMeasure::net_1d(0.0, 1.0, delta, delta);
        let opts = ConvOptions::for_scale(delta);
        // κ = 0: floor is ‖η‖² ≤ 1, satisfied by the near-uniform density
        let traj = flatten_pipeline(
            &m,
            3,
            0.6,
            0.0,
            0.5,
            &alg,
            &HyperplaneSampler::default(),
            &opts,
        )
        .unwrap();
        assert!(traj.floor_reached);
        assert!(traj.steps.is_empty());
    }

    #[test]
    fn degenerate_point_mass_does_not_flatten() {
        let delta = 2f64.powi(-8);
        let alg = RealLine;
        let m = ScaledMeasure::dirac(1, delta, vec![1.0]);
        let opts = ConvOptions::for_scale(delta);
        // η*³ ⊟ η*³ = δ₀ sits inside the small-determinant set, so the
        // essential part strips it and the degenerate case is reported
        // through the removed mass, not through a flattening gain
        let (next, step) = flatten_step(
            &m,
            0.6,
            0.9,
            0.5,
            &alg,
            &HyperplaneSampler::default(),
            &opts,
        )
        .unwrap();
        assert!(step.removed_mass > 0.99 || step.ratio >= 1.0);
        assert!(!step.ess_within_budget || step.ratio >= 1.0);
        assert!(next.is_empty() || next.len() == 1);
    }

    #[test]
    fn multiplicative_decay_of_net_powers() {
        let delta = 2f64.powi(-8);
        let alg = RealLine;
        let m = ScaledMeasure::net_1d(1.0, 2.0, delta, delta);
        let etas = vec![m.clone(), m.clone(), m.clone(), m.clone(), m];
        let xi = vec![vec![1.0 / delta]];
        let opts = ConvOptions::for_scale(delta);
        let rep = multiplicative_fourier_decay(&etas, &xi, &alg, &opts).unwrap();
        assert_eq!(rep.per_prefix_max.len(), 5);
        for w in rep.per_prefix_max.windows(2) {
            assert!(w[1] <= w[0] + 0.05, "not decaying: {:?}", rep.per_prefix_max);
        }
        // ξ = 0 → coefficient = mass
        let rep0 =
            multiplicative_fourier_decay(&etas[..1], &[vec![0.0]], &alg, &opts).unwrap();
        assert!((rep0.per_prefix_max[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn factor_algebra_matches_matrix_arithmetic() {
        use crate::algebra::{generate_algebra, wedderburn_decompose, WedderburnOptions};
        use crate::fixtures;
        let sys = fixtures::f1();
        let mut dec = generate_algebra(&sys);
        wedderburn_decompose(&mut dec, &sys, WedderburnOptions::default(), 1).unwrap();
        let alg = FactorAlgebra::from_factors(&dec, &[0]);
        assert_eq!(alg.dim(), 4);
        // product in coordinates agrees with matrix product
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]);
        let b = Mat::from_rows(&[vec![1.0, 0.0], vec![2.0, 1.0]]);
        let ca = factor_coords(&dec, &[0], &a);
        let cb = factor_coords(&dec, &[0], &b);
        let cab = alg.mul(&ca, &cb);
        let expect = factor_coords(&dec, &[0], &a.matmul(&b));
        for (x, y) in cab.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-9);
        }
        // determinant of left multiplication on Mat₂ is det(x)²
        let x = Mat::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]);
        let cx = factor_coords(&dec, &[0], &x);
        assert!((alg.det(&cx) - 36.0).abs() < 1e-6);
        // unit element
        let one = alg.one();
        let cy = alg.mul(&one, &ca);
        for (u, v) in cy.iter().zip(&ca) {
            assert!((u - v).abs() < 1e-9);
        }
    }
}
