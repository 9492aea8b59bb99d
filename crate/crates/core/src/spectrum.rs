//! Fourier coefficients of walk laws, spectrum scans, decay fits,
//! large-coefficient additive structure, and the quantitative Wiener
//! granulation detector.
//!
//! Exact-mode coefficients group atoms by their exact phase `⟨a,x⟩ mod 1`
//! before any floating arithmetic happens, so rational obstructions come
//! out exactly (`ν̂(a) = 1` bit-for-bit). The granulation detector replaces
//! the existence proof's bump functions with deterministic greedy peak
//! selection subject to a separation body.

use crate::algebra::{self, AlgebraDecomposition, GeneratorSystem};
use crate::error::{CoreError, Result};
use crate::exact::{IntMatrix, SurdExpr, TorusPoint};
use crate::linalg;
use crate::multconv::kahan_add;
use crate::quasigeom::{ConvexBody, QuasiNorm};
use crate::walk::{self, WalkEnsemble, WalkMode};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::HashMap;
use std::io::Write;

// ---------------------------------------------------------------------------
// Fourier coefficients
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize)]
pub struct FourierCoef {
    pub re: f64,
    pub im: f64,
    pub stderr: f64,
}

impl FourierCoef {
    pub fn abs(&self) -> f64 {
        self.re.hypot(self.im)
    }
}

/// `ν̂(a) = Σ w·e(⟨a,x⟩)` over the atoms. Exact points are grouped by
/// their exact phase first; the reported standard error is `1/√N` in
/// Monte Carlo mode and 0 in exact mode.
pub fn fourier_coefficient(ens: &WalkEnsemble, a: &[i64]) -> FourierCoef {
    assert_eq!(a.len(), ens.dim);
    let stderr = match ens.mode {
        WalkMode::Exact => 0.0,
        WalkMode::MonteCarlo => 1.0 / (ens.samples.unwrap_or(ens.len()) as f64).sqrt(),
    };
    let a_big: Vec<BigInt> = a.iter().map(|&v| BigInt::from(v)).collect();
    // group by exact phase
    let mut groups: HashMap<SurdExpr, BigRational> = HashMap::new();
    for atom in &ens.atoms {
        let phase = algebra::frequency_phase(&a_big, &atom.point);
        match groups.get_mut(&phase) {
            Some(w) => *w += &atom.weight,
            None => {
                groups.insert(phase, atom.weight.clone());
            }
        }
    }
    // all mass at phase 0 → exactly the total mass (e.g. ν̂(0) = 1)
    if groups.len() == 1 {
        let (phase, w) = groups.iter().next().expect("one group");
        if phase.is_zero() {
            return FourierCoef {
                re: w.to_f64().unwrap_or(f64::NAN),
                im: 0.0,
                stderr,
            };
        }
    }
    let mut terms: Vec<((f64, f64), f64)> = groups
        .into_iter()
        .map(|(phase, w)| (unit_phase(&phase), w.to_f64().unwrap_or(0.0)))
        .collect();
    // order by (cos, |sin|, weight) so conjugate phase sets sum in the same
    // order and the imaginary parts negate exactly
    terms.sort_by(|x, y| {
        (x.0 .0, x.0 .1.abs(), x.1, x.0 .1)
            .partial_cmp(&(y.0 .0, y.0 .1.abs(), y.1, y.0 .1))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let (mut re, mut im, mut cre, mut cim) = (0.0, 0.0, 0.0, 0.0);
    for ((c, s), w) in terms {
        kahan_add(&mut re, &mut cre, w * c);
        kahan_add(&mut im, &mut cim, w * s);
    }
    FourierCoef { re, im, stderr }
}

/// `(cos, sin)` of `2π·phase` for an exact phase in `[0,1)`, with exact
/// argument reduction into `[0, 1/4]`; phases `p` and `1−p` produce
/// bit-identical real parts and exactly negated imaginary parts, which
/// makes conjugate symmetry exact.
fn unit_phase(phase: &SurdExpr) -> (f64, f64) {
    let half = SurdExpr::from_rational(BigRational::new(BigInt::one(), BigInt::from(2)));
    let quarter = SurdExpr::from_rational(BigRational::new(BigInt::one(), BigInt::from(4)));
    // center into [−1/2, 1/2)
    let centered = if (phase.clone() - half.clone()).is_negative() {
        phase.clone()
    } else {
        phase.clone() - SurdExpr::from_integer(1)
    };
    let (abs, im_sign) = if centered.is_negative() {
        (-centered, -1.0)
    } else {
        (centered, 1.0)
    };
    // fold [1/4, 1/2] onto [0, 1/4]
    let (reduced, cos_sign) = if (abs.clone() - quarter).is_negative() {
        (abs, 1.0)
    } else {
        (half - abs, -1.0)
    };
    let ang = 2.0 * std::f64::consts::PI * reduced.to_f64();
    (cos_sign * ang.cos(), im_sign * ang.sin())
}

/// Fast path for scans over Monte Carlo ensembles: coordinates are reduced
/// to `f64` once per atom, phases via dot products mod 1.
fn coefficient_from_f64(
    points: &[Vec<f64>],
    weights: &[f64],
    a: &[i64],
    stderr: f64,
) -> FourierCoef {
    let (mut re, mut im, mut cre, mut cim) = (0.0, 0.0, 0.0, 0.0);
    for (p, w) in points.iter().zip(weights) {
        let phase: f64 = p.iter().zip(a).map(|(x, &k)| x * k as f64).sum();
        let ang = 2.0 * std::f64::consts::PI * phase.fract();
        kahan_add(&mut re, &mut cre, w * ang.cos());
        kahan_add(&mut im, &mut cim, w * ang.sin());
    }
    FourierCoef { re, im, stderr }
}

#[derive(Clone, Debug, Serialize)]
pub struct FourierReport {
    pub n: u32,
    pub mode: WalkMode,
    pub frequencies: Vec<Vec<i64>>,
    pub coefficients: Vec<FourierCoef>,
}

impl FourierReport {
    pub fn max_nonzero_abs(&self) -> f64 {
        self.frequencies
            .iter()
            .zip(&self.coefficients)
            .filter(|(a, _)| a.iter().any(|&v| v != 0))
            .map(|(_, c)| c.abs())
            .fold(0.0, f64::max)
    }

    pub fn coefficient_at(&self, a: &[i64]) -> Option<&FourierCoef> {
        self.frequencies
            .iter()
            .position(|f| f == a)
            .map(|i| &self.coefficients[i])
    }

    /// CSV columns `a1..ad, re, im, abs, stderr`.
    pub fn to_csv(&self, out: &mut dyn Write) -> std::io::Result<()> {
        let d = self.frequencies.first().map_or(0, Vec::len);
        let headers: Vec<String> = (1..=d)
            .map(|i| format!("a{i}"))
            .chain(["re".into(), "im".into(), "abs".into(), "stderr".into()])
            .collect();
        writeln!(out, "{}", headers.join(","))?;
        for (a, c) in self.frequencies.iter().zip(&self.coefficients) {
            let freq: Vec<String> = a.iter().map(ToString::to_string).collect();
            writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e},{:.16e}",
                freq.join(","),
                c.re,
                c.im,
                c.abs(),
                c.stderr
            )?;
        }
        Ok(())
    }
}

/// All coefficients with `‖a‖∞ ≤ a_max` (the zero frequency included on
/// request). Parallel over frequencies with order-preserving collection.
pub fn spectrum_scan(ens: &WalkEnsemble, a_max: i64, include_zero: bool) -> FourierReport {
    assert!(a_max >= 1);
    let d = ens.dim;
    let mut freqs: Vec<Vec<i64>> = Vec::new();
    let mut cursor = vec![-a_max; d];
    loop {
        if include_zero || cursor.iter().any(|&v| v != 0) {
            freqs.push(cursor.clone());
        }
        let mut i = 0;
        loop {
            cursor[i] += 1;
            if cursor[i] <= a_max {
                break;
            }
            cursor[i] = -a_max;
            i += 1;
            if i == d {
                let coefficients = scan_coefficients(ens, &freqs);
                return FourierReport {
                    n: ens.n,
                    mode: ens.mode,
                    frequencies: freqs,
                    coefficients,
                };
            }
        }
    }
}

fn scan_coefficients(ens: &WalkEnsemble, freqs: &[Vec<i64>]) -> Vec<FourierCoef> {
    match ens.mode {
        WalkMode::Exact => freqs
            .par_iter()
            .map(|a| fourier_coefficient(ens, a))
            .collect(),
        WalkMode::MonteCarlo => {
            let points = ens.points_f64();
            let weights = ens.weights_f64();
            let stderr = 1.0 / (ens.samples.unwrap_or(ens.len()) as f64).sqrt();
            freqs
                .par_iter()
                .map(|a| coefficient_from_f64(&points, &weights, a, stderr))
                .collect()
        }
    }
}

// ---------------------------------------------------------------------------
// Decay fits
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct DecayFit {
    pub rate: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub used_points: usize,
    /// index of the first grid point at or below the noise floor, if any
    pub floor_cut: Option<usize>,
}

/// Least-squares fit of `log|ν̂_n(a)|` against `n`, truncated at the noise
/// floor. Requires at least 4 grid points and 2 usable ones.
pub fn decay_fit(ns: &[u32], values: &[f64], floor: f64) -> Result<DecayFit> {
    assert_eq!(ns.len(), values.len());
    if ns.len() < 4 {
        return Err(CoreError::InsufficientDecade(format!(
            "{} grid points, need at least 4",
            ns.len()
        )));
    }
    let mut cut = None;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, (&n, &v)) in ns.iter().zip(values).enumerate() {
        if v <= floor {
            cut = Some(i);
            break;
        }
        xs.push(f64::from(n));
        ys.push(v.ln());
    }
    if xs.len() < 2 {
        return Err(CoreError::InsufficientDecade(
            "signal reaches the noise floor immediately".into(),
        ));
    }
    let (intercept, rate, r2) = linalg::linear_fit(&xs, &ys);
    Ok(DecayFit {
        rate,
        intercept,
        r_squared: r2,
        used_points: xs.len(),
        floor_cut: cut,
    })
}

// ---------------------------------------------------------------------------
// Additive structure of large coefficients
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct AddstructOutcome {
    /// measured `|ν̂_n(a₀)|` where `ν_n = μ * ν_{n−1}`
    pub coefficient: f64,
    /// the hypothesis `|ν̂_n(a₀)| ≥ t₀` held, so the claim applies
    pub applicable: bool,
    /// mass of `A = {g : |ν̂_{n−1}(a₀g)| ≥ t₀^{2k}/2}` under `μ^{⊞k}⊟μ^{⊞k}`
    pub mass: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Check the additive-structure inequality for large Fourier coefficients
/// on the exact support of `μ^{⊞k} ⊟ μ^{⊞k}` (one-step measure `μ`).
pub fn addstruct_check(
    sys: &GeneratorSystem,
    ens_prev: &WalkEnsemble,
    a0: &[i64],
    t0: f64,
    k: u32,
) -> Result<AddstructOutcome> {
    if ens_prev.mode != WalkMode::Exact {
        return Err(CoreError::BudgetExceeded(
            "additive-structure check requires an exact ensemble".into(),
        ));
    }
    // ν̂_n(a₀) with one more exact step
    let coefficient = {
        let mut acc_re = 0.0f64;
        let mut acc_im = 0.0f64;
        for (i, g) in sys.generators().iter().enumerate() {
            // ν̂ at frequency a₀·g equals the coefficient of g_*ν at a₀
            let ag = g.row_apply(&a0.iter().map(|&v| BigInt::from(v)).collect::<Vec<_>>());
            let ag_i64: Vec<i64> = ag.iter().map(|v| v.to_i64().expect("small freq")).collect();
            let c = fourier_coefficient(ens_prev, &ag_i64);
            let w = sys.weights_f64()[i];
            acc_re += w * c.re;
            acc_im += w * c.im;
        }
        acc_re.hypot(acc_im)
    };
    if coefficient < t0 {
        return Ok(AddstructOutcome {
            coefficient,
            applicable: false,
            mass: f64::NAN,
            bound: t0.powi(2 * k as i32) / 2.0,
            holds: false,
        });
    }
    // support of μ^{⊞k} with exact weights
    let mut sums: HashMap<IntMatrix, BigRational> = HashMap::new();
    sums.insert(
        IntMatrix::new(sys.dim(), vec![BigInt::zero(); sys.dim() * sys.dim()])?,
        BigRational::one(),
    );
    for _ in 0..k {
        let mut next: HashMap<IntMatrix, BigRational> = HashMap::new();
        for (m, w) in &sums {
            for (i, g) in sys.generators().iter().enumerate() {
                let sum_entries: Vec<BigInt> = m
                    .entries()
                    .iter()
                    .zip(g.entries())
                    .map(|(a, b)| a + b)
                    .collect();
                let key = IntMatrix::new(sys.dim(), sum_entries)?;
                let ww = w * &sys.weights()[i];
                *next.entry(key).or_insert_with(BigRational::zero) += ww;
            }
        }
        sums = next;
    }
    // differences μ^{⊞k} ⊟ μ^{⊞k}
    let list: Vec<(IntMatrix, BigRational)> = sums.into_iter().collect();
    let threshold = t0.powi(2 * k as i32) / 2.0;
    let a_big: Vec<BigInt> = a0.iter().map(|&v| BigInt::from(v)).collect();
    let mut mass = BigRational::zero();
    let mut coef_cache: HashMap<Vec<BigInt>, f64> = HashMap::new();
    for (m1, w1) in &list {
        for (m2, w2) in &list {
            let diff_entries: Vec<BigInt> = m1
                .entries()
                .iter()
                .zip(m2.entries())
                .map(|(a, b)| a - b)
                .collect();
            let g = IntMatrix::new(sys.dim(), diff_entries)?;
            let ag = g.row_apply(&a_big);
            let c_abs = match coef_cache.get(&ag) {
                Some(&v) => v,
                None => {
                    let ag_i64: Vec<i64> =
                        ag.iter().map(|v| v.to_i64().expect("small freq")).collect();
                    let v = fourier_coefficient(ens_prev, &ag_i64).abs();
                    coef_cache.insert(ag.clone(), v);
                    v
                }
            };
            if c_abs >= threshold {
                mass += w1 * w2;
            }
        }
    }
    let mass_f = mass.to_f64().unwrap_or(0.0);
    Ok(AddstructOutcome {
        coefficient,
        applicable: true,
        mass: mass_f,
        bound: threshold,
        holds: mass_f >= threshold - 1e-12,
    })
}

// ---------------------------------------------------------------------------
// Torus measures and separation bodies
// ---------------------------------------------------------------------------

/// A weighted atomic measure on the torus in `f64` (detector input).
#[derive(Clone, Debug)]
pub struct TorusMeasure {
    pub dim: usize,
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl TorusMeasure {
    pub fn from_ensemble(ens: &WalkEnsemble) -> Self {
        TorusMeasure {
            dim: ens.dim,
            points: ens.points_f64(),
            weights: ens.weights_f64(),
        }
    }

    pub fn dirac(point: Vec<f64>) -> Self {
        TorusMeasure {
            dim: point.len(),
            points: vec![point],
            weights: vec![1.0],
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Membership test for symmetric neighborhoods of 0 on the torus, applied
/// to centered lift differences.
pub trait SeparationBody: Sync {
    fn contains_diff(&self, centered: &[f64]) -> bool;
    /// Euclidean bound used for cell bucketing (≥ the true extent).
    fn outer_radius(&self) -> f64;
    fn volume(&self) -> Option<f64>;
}

impl SeparationBody for ConvexBody {
    fn contains_diff(&self, centered: &[f64]) -> bool {
        self.contains(centered)
    }
    fn outer_radius(&self) -> f64 {
        ConvexBody::outer_radius(self)
    }
    fn volume(&self) -> Option<f64> {
        ConvexBody::volume(self)
    }
}

/// Quasi-metric neighborhood of a subtorus `W mod Z^d`:
/// `{v : d̃(v, W) ≤ radius}` blockwise, the compact block being absorbed.
#[derive(Clone, Debug)]
pub struct QuasiSubspaceNbd {
    /// per block: (orthonormal block basis, α exponent or compact,
    /// orthonormal basis of W ∩ block inside ambient coordinates)
    pub blocks: Vec<(Vec<Vec<f64>>, Option<f64>, Vec<Vec<f64>>)>,
    pub radius: f64,
}

impl QuasiSubspaceNbd {
    /// Build from a quasi-norm and an orthonormal basis of the invariant
    /// subspace `W` (its blockwise projections are the intersections).
    pub fn new(qn: &QuasiNorm, w_basis: &[Vec<f64>], radius: f64) -> Self {
        let blocks = qn
            .blocks
            .iter()
            .map(|b| {
                // project W into the block and orthonormalize
                let mut rows = Vec::new();
                for w in w_basis {
                    let mut proj = vec![0.0; qn.dim];
                    for u in &b.basis {
                        let dot: f64 = u.iter().zip(w).map(|(a, c)| a * c).sum();
                        for (p, uu) in proj.iter_mut().zip(u) {
                            *p += dot * uu;
                        }
                    }
                    rows.push(proj);
                }
                let w_in_block =
                    linalg::orthonormal_rows(&linalg::Mat::from_rows(&rows), 1e-9);
                (b.basis.clone(), b.alpha, w_in_block)
            })
            .collect();
        QuasiSubspaceNbd { blocks, radius }
    }

    fn is_subspace_free(&self) -> bool {
        self.blocks.iter().all(|(_, _, w)| w.is_empty())
    }
}

impl SeparationBody for QuasiSubspaceNbd {
    fn contains_diff(&self, centered: &[f64]) -> bool {
        for (basis, alpha, w_in_block) in &self.blocks {
            // component within the block
            let mut comp = vec![0.0; centered.len()];
            for u in basis {
                let dot: f64 = u.iter().zip(centered).map(|(a, c)| a * c).sum();
                for (p, uu) in comp.iter_mut().zip(u) {
                    *p += dot * uu;
                }
            }
            // defect orthogonal to W within the block
            for w in w_in_block {
                let dot: f64 = comp.iter().zip(w).map(|(a, c)| a * c).sum();
                for (p, ww) in comp.iter_mut().zip(w) {
                    *p -= dot * ww;
                }
            }
            let defect: f64 = comp.iter().map(|v| v * v).sum::<f64>().sqrt();
            match alpha {
                Some(a) => {
                    // ‖defect‖^α ≤ r ⟺ ‖defect‖ ≤ r^{1/α}
                    if defect > self.radius.powf(1.0 / a) {
                        return false;
                    }
                }
                None => {
                    // compact block: absorbed within the half-lift
                    if defect > 0.5 + 1e-12 {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn outer_radius(&self) -> f64 {
        if !self.is_subspace_free() {
            // the neighborhood stretches along W across the torus
            return 0.75;
        }
        let mut r: f64 = 0.0;
        for (_, alpha, _) in &self.blocks {
            match alpha {
                Some(a) => r = r.max(self.radius.powf(1.0 / a)),
                None => r = r.max(0.5),
            }
        }
        r.min(0.75)
    }

    fn volume(&self) -> Option<f64> {
        None
    }
}

// ---------------------------------------------------------------------------
// Wiener granulation detector
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct GranulationReport {
    /// selected granule centers
    pub centers: Vec<Vec<f64>>,
    /// mass captured by each center's neighborhood at selection time
    pub center_masses: Vec<f64>,
    /// mass of the union of the neighborhoods of the selected centers
    pub captured_mass: f64,
    /// `|X|·vol(C*)`: what a structureless cloud would capture
    pub volume_heuristic: Option<f64>,
    pub separation_radius: f64,
    pub neighborhood_radius: f64,
    /// sheet the detector ran on (walk detector only)
    pub sheet: Option<usize>,
    /// measured hypothesis coefficient (walk detector only)
    pub coefficient: Option<f64>,
}

/// Flat torus cell index with wraparound; atoms are stored cell-sorted and
/// flattened so neighbor scans read contiguous memory.
struct TorusBuckets {
    grid: usize,
    dim: usize,
    cell_start: Vec<u32>,
    /// original atom index, cell-sorted
    atom_idx: Vec<u32>,
    /// coordinates in `atom_idx` order, stride `dim`
    coords: Vec<f64>,
    /// weights in `atom_idx` order
    weights: Vec<f64>,
}

impl TorusBuckets {
    fn grid_for(dim: usize, cell: f64) -> usize {
        let raw = (1.0 / cell).floor().max(1.0) as usize;
        // cap the dense table at ~4M cells
        let cap = match dim {
            1 => 1 << 22,
            2 => 2048,
            3 => 160,
            _ => 40,
        };
        raw.min(cap).max(1)
    }

    fn build(m: &TorusMeasure, cell: f64) -> Self {
        let dim = m.dim;
        let grid = Self::grid_for(dim, cell);
        let n_cells = grid.pow(dim as u32);
        let mut counts = vec![0u32; n_cells + 1];
        let cells: Vec<usize> = m
            .points
            .iter()
            .map(|p| {
                let mut idx = 0usize;
                for &x in p {
                    let c = ((x.rem_euclid(1.0)) * grid as f64).floor() as usize % grid;
                    idx = idx * grid + c;
                }
                idx
            })
            .collect();
        for &c in &cells {
            counts[c + 1] += 1;
        }
        for i in 0..n_cells {
            counts[i + 1] += counts[i];
        }
        let mut atom_idx = vec![0u32; m.len()];
        let mut coords = vec![0.0f64; m.len() * dim];
        let mut weights = vec![0.0f64; m.len()];
        let mut cursor = counts.clone();
        for (i, &c) in cells.iter().enumerate() {
            let at = cursor[c] as usize;
            atom_idx[at] = i as u32;
            coords[at * dim..(at + 1) * dim].copy_from_slice(&m.points[i]);
            weights[at] = m.weights[i];
            cursor[c] += 1;
        }
        TorusBuckets {
            grid,
            dim,
            cell_start: counts,
            atom_idx,
            coords,
            weights,
        }
    }

    /// Visit atoms (by slot) in cells within `reach` of the cell containing
    /// `center`; each cell at most once even when the reach wraps around.
    #[inline]
    fn for_neighbor_slots(&self, center: &[f64], reach: i64, mut f: impl FnMut(usize)) {
        let g = self.grid as i64;
        let base: Vec<i64> = center
            .iter()
            .map(|&x| ((x.rem_euclid(1.0)) * self.grid as f64).floor() as i64 % g)
            .collect();
        let span = usize::try_from(2 * reach + 1).unwrap().min(self.grid);
        let total = span.pow(self.dim as u32);
        for code in 0..total {
            let mut c = code;
            let mut idx = 0usize;
            for b in &base {
                let off = (c % span) as i64 - (span as i64 - 1) / 2;
                c /= span;
                idx = idx * self.grid + usize::try_from((b + off).rem_euclid(g)).unwrap();
            }
            let (lo, hi) = (
                self.cell_start[idx] as usize,
                self.cell_start[idx + 1] as usize,
            );
            for slot in lo..hi {
                f(slot);
            }
        }
    }

    #[inline]
    fn slot_coords(&self, slot: usize) -> &[f64] {
        &self.coords[slot * self.dim..(slot + 1) * self.dim]
    }
}

fn centered(diff: f64) -> f64 {
    let f = diff - diff.floor();
    if f > 0.5 {
        f - 1.0
    } else {
        f
    }
}

/// Stack buffer for centered lift differences (detector hot loops must not
/// allocate per membership test).
const MAX_DETECTOR_DIM: usize = 8;

#[inline]
fn centered_into(buf: &mut [f64; MAX_DETECTOR_DIM], x: &[f64], y: &[f64]) {
    for ((b, a), c) in buf.iter_mut().zip(x).zip(y) {
        *b = centered(a - c);
    }
}

/// Mass captured by the `body`-neighborhood of `center`.
fn neighborhood_mass<B: SeparationBody + ?Sized>(
    buckets: &TorusBuckets,
    reach: i64,
    center: &[f64],
    body: &B,
) -> f64 {
    let dim = buckets.dim;
    let mut buf = [0.0f64; MAX_DETECTOR_DIM];
    let mut mass = 0.0;
    buckets.for_neighbor_slots(center, reach, |slot| {
        centered_into(&mut buf, buckets.slot_coords(slot), center);
        if body.contains_diff(&buf[..dim]) {
            mass += buckets.weights[slot];
        }
    });
    mass
}

/// Greedy peak selection: candidate centers (the atoms) ranked by the mass
/// of their neighborhood, selected subject to separation. Returns the
/// selected set, per-center masses, and the exact union mass.
pub fn wiener_granulate_with<S: SeparationBody + ?Sized, N: SeparationBody + ?Sized>(
    m: &TorusMeasure,
    separation: &S,
    neighborhood: &N,
) -> GranulationReport {
    let nbd_radius = neighborhood.outer_radius();
    let cell = nbd_radius.clamp(1e-3, 0.25);
    let buckets = TorusBuckets::build(m, cell);
    let reach = (nbd_radius * buckets.grid as f64).ceil() as i64;
    // rank all atoms by captured mass
    let masses: Vec<f64> = (0..m.len())
        .into_par_iter()
        .map(|i| neighborhood_mass(&buckets, reach, &m.points[i], neighborhood))
        .collect();
    let mut order: Vec<usize> = (0..m.len()).collect();
    order.sort_by(|&a, &b| {
        masses[b]
            .partial_cmp(&masses[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    // greedy selection subject to separation; selected centers live in a
    // flat-indexed cell map so candidate checks stay local
    let sep_radius = separation.outer_radius();
    let sep_cell = sep_radius.clamp(1e-3, 0.25);
    let sep_grid = TorusBuckets::grid_for(m.dim, sep_cell);
    let sep_reach = (sep_radius * sep_grid as f64).ceil() as i64;
    let sep_span = usize::try_from(2 * sep_reach + 1).unwrap().min(sep_grid);
    let flat_cell = |p: &[f64]| -> usize {
        let mut idx = 0usize;
        for &x in p {
            let c = ((x.rem_euclid(1.0)) * sep_grid as f64).floor() as usize % sep_grid;
            idx = idx * sep_grid + c;
        }
        idx
    };
    let mut selected: Vec<usize> = Vec::new();
    let mut sel_cells: HashMap<usize, Vec<u32>> = HashMap::new();
    let sep_total = sep_span.pow(m.dim as u32);
    'cand: for &i in &order {
        let p = &m.points[i];
        let base: Vec<i64> = p
            .iter()
            .map(|&x| {
                ((x.rem_euclid(1.0)) * sep_grid as f64).floor() as i64 % sep_grid as i64
            })
            .collect();
        for code in 0..sep_total {
            let mut c = code;
            let mut idx = 0usize;
            for b in &base {
                let off = (c % sep_span) as i64 - (sep_span as i64 - 1) / 2;
                c /= sep_span;
                idx = idx * sep_grid
                    + usize::try_from((b + off).rem_euclid(sep_grid as i64)).unwrap();
            }
            if let Some(list) = sel_cells.get(&idx) {
                let mut buf = [0.0f64; MAX_DETECTOR_DIM];
                for &s in list {
                    centered_into(&mut buf, p, &m.points[s as usize]);
                    if separation.contains_diff(&buf[..m.dim]) {
                        continue 'cand;
                    }
                }
            }
        }
        sel_cells.entry(flat_cell(p)).or_default().push(i as u32);
        selected.push(i);
    }
    // union mass: every atom within the neighborhood of some center
    let mut captured = vec![false; m.len()];
    let mut buf = [0.0f64; MAX_DETECTOR_DIM];
    for &s in &selected {
        let center = &m.points[s];
        buckets.for_neighbor_slots(center, reach, |slot| {
            let i = buckets.atom_idx[slot] as usize;
            if !captured[i] {
                centered_into(&mut buf, buckets.slot_coords(slot), center);
                if neighborhood.contains_diff(&buf[..m.dim]) {
                    captured[i] = true;
                }
            }
        });
    }
    let captured_mass: f64 = captured
        .iter()
        .zip(&m.weights)
        .filter(|(c, _)| **c)
        .map(|(_, w)| w)
        .sum();
    // separation invariant (exact assertion on the output)
    #[cfg(debug_assertions)]
    for (k, &a) in selected.iter().enumerate() {
        let mut dbuf = [0.0f64; MAX_DETECTOR_DIM];
        for &b in &selected[k + 1..] {
            centered_into(&mut dbuf, &m.points[a], &m.points[b]);
            debug_assert!(
                !separation.contains_diff(&dbuf[..m.dim]),
                "selected centers are not separated"
            );
        }
    }
    let volume_heuristic = neighborhood.volume().map(|v| v * selected.len() as f64);
    GranulationReport {
        centers: selected.iter().map(|&i| m.points[i].clone()).collect(),
        center_masses: selected.iter().map(|&i| masses[i]).collect(),
        captured_mass,
        volume_heuristic,
        separation_radius: separation.outer_radius(),
        neighborhood_radius: nbd_radius,
        sheet: None,
        coefficient: None,
    }
}

/// Spec-shaped detector: frequency-side bodies `B ⊆ C`; the detector works
/// with their polars (`B*` separates, `C*` captures).
pub fn wiener_granulate(
    m: &TorusMeasure,
    b_body: &ConvexBody,
    c_body: &ConvexBody,
) -> GranulationReport {
    let b_star = b_body.polar();
    let c_star = c_body.polar();
    wiener_granulate_with(m, &b_star, &c_star)
}

// ---------------------------------------------------------------------------
// Walk granulation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct WalkGranulateOptions {
    pub tau: f64,
    pub samples: usize,
    pub seed: u64,
    pub word_budget: u64,
}

impl Default for WalkGranulateOptions {
    fn default() -> Self {
        WalkGranulateOptions {
            tau: 0.1,
            samples: 100_000,
            seed: 0,
            word_budget: 1 << 20,
        }
    }
}

/// Run the quantitative Wiener detector on the walk law at time `n`, with
/// the quasi-metric neighborhoods of `W = (a₀γE)^⊥` at radii
/// `e^{−(1−2τ)n}` (separation) and `e^{−(1−τ)n}` (capture), per coset
/// sheet, returning the best sheet.
pub fn walk_granulate(
    sys: &GeneratorSystem,
    dec: &AlgebraDecomposition,
    qn: &QuasiNorm,
    x0: &TorusPoint,
    a0: &[i64],
    t: f64,
    n: u32,
    opts: &WalkGranulateOptions,
) -> Result<GranulationReport> {
    let ens = ensemble_for(sys, x0, n, opts)?;
    let coef = fourier_coefficient(&ens, a0).abs();
    if coef < t {
        return Err(CoreError::HypothesisFailed {
            measured: coef,
            threshold: t,
        });
    }
    if n == 0 {
        return Ok(GranulationReport {
            centers: vec![x0.to_f64()],
            center_masses: vec![1.0],
            captured_mass: 1.0,
            volume_heuristic: None,
            separation_radius: 0.0,
            neighborhood_radius: 0.0,
            sheet: Some(0),
            coefficient: Some(coef),
        });
    }
    let r_sep = (-(1.0 - 2.0 * opts.tau) * f64::from(n)).exp();
    let r_nbd = (-(1.0 - opts.tau) * f64::from(n)).exp();
    let reps = sys.coset_representatives(8)?;
    let group = sys.coset_labels().map(|c| c.group.clone());
    let basis = dec.basis_f64();
    let mut best: Option<GranulationReport> = None;
    for (label, rep) in reps.iter().enumerate() {
        // W = (a₀·γ·E)^⊥ in R^d
        let a_big: Vec<BigInt> = a0.iter().map(|&v| BigInt::from(v)).collect();
        let a_gamma = rep.row_apply(&a_big);
        let a_gamma_f64: Vec<f64> = a_gamma
            .iter()
            .map(|v| v.to_f64().unwrap_or(f64::NAN))
            .collect();
        let rows: Vec<Vec<f64>> = basis
            .iter()
            .map(|b| {
                // row vector a₀γ times basis matrix
                (0..dec.ambient_dim)
                    .map(|j| {
                        (0..dec.ambient_dim)
                            .map(|i| a_gamma_f64[i] * b[(i, j)])
                            .sum()
                    })
                    .collect()
            })
            .collect();
        let row_span = linalg::orthonormal_rows(&linalg::Mat::from_rows(&rows), 1e-9);
        // W = orthogonal complement of the row span
        let mut w_basis: Vec<Vec<f64>> = Vec::new();
        for axis in 0..dec.ambient_dim {
            let mut v = vec![0.0; dec.ambient_dim];
            v[axis] = 1.0;
            for u in row_span.iter().chain(&w_basis) {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(u) {
                    *x -= dot * y;
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for x in &mut v {
                    *x /= norm;
                }
                w_basis.push(v);
            }
        }
        let sep = QuasiSubspaceNbd::new(qn, &w_basis, r_sep);
        let nbd = QuasiSubspaceNbd::new(qn, &w_basis, r_nbd);
        // the detector runs on the sheet γ⁻¹
        let sheet = group.as_ref().map_or(0, |g| g.inv(label));
        let sheet_measure = TorusMeasure::from_ensemble(&ens.sheet(sheet));
        if sheet_measure.is_empty() {
            continue;
        }
        let mut report = wiener_granulate_with(&sheet_measure, &sep, &nbd);
        report.sheet = Some(sheet);
        report.coefficient = Some(coef);
        report.separation_radius = r_sep;
        report.neighborhood_radius = r_nbd;
        if best
            .as_ref()
            .map_or(true, |b| report.captured_mass > b.captured_mass)
        {
            best = Some(report);
        }
    }
    best.ok_or_else(|| CoreError::InvalidSystem("no sheet carried any mass".into()))
}

fn ensemble_for(
    sys: &GeneratorSystem,
    x0: &TorusPoint,
    n: u32,
    opts: &WalkGranulateOptions,
) -> Result<WalkEnsemble> {
    let words = (sys.generators().len() as u64)
        .checked_pow(n)
        .unwrap_or(u64::MAX);
    if words <= opts.word_budget {
        walk::enumerate_exact(
            sys,
            x0,
            n,
            &walk::ExactOptions {
                word_budget: opts.word_budget,
                ..walk::ExactOptions::default()
            },
        )
    } else {
        walk::sample_paths(sys, x0, n, opts.samples, opts.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::rng;
    use crate::walk::{enumerate_exact, sample_paths, ExactOptions};
    use rand::Rng;

    #[test]
    fn dirac_coefficients_have_unit_modulus() {
        let sys = fixtures::f1();
        let x0 = TorusPoint::from_rational_pairs(&[(1, 7), (2, 7)]);
        let ens = enumerate_exact(&sys, &x0, 0, &ExactOptions::default()).unwrap();
        for a in [[0i64, 0], [1, 0], [3, -2]] {
            let c = fourier_coefficient(&ens, &a);
            assert!((c.abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_grid_measure_has_exact_obstructions() {
        // uniform on (1/3)Z/Z embedded in d = 1: â(3) = 1 exactly, â(1) = 0
        let m = IntMatrix::from_i64(&[&[1]]);
        let sys = crate::algebra::GeneratorSystem::new(
            vec![m],
            vec![BigRational::one()],
            None,
        );
        // 1×1 identity is unimodular
        let sys = sys.unwrap();
        let ens = WalkEnsemble {
            mode: WalkMode::Exact,
            dim: 1,
            n: 0,
            seed: None,
            samples: None,
            atoms: (0..3)
                .map(|k| walk::WalkAtom {
                    point: TorusPoint::from_rational_pairs(&[(k, 3)]),
                    label: 0,
                    weight: BigRational::new(BigInt::one(), BigInt::from(3)),
                    word: None,
                })
                .collect(),
        };
        let _ = sys;
        let c3 = fourier_coefficient(&ens, &[3]);
        assert_eq!(c3.re, 1.0);
        assert_eq!(c3.im, 0.0);
        let c1 = fourier_coefficient(&ens, &[1]);
        assert!(c1.abs() < 1e-15);
        let c0 = fourier_coefficient(&ens, &[0]);
        assert_eq!(c0.re, 1.0);
    }

    #[test]
    fn conjugate_symmetry_is_exact() {
        let sys = fixtures::f1();
        let x0 = TorusPoint::from_rational_pairs(&[(1, 5), (3, 5)]);
        let ens = enumerate_exact(&sys, &x0, 3, &ExactOptions::default()).unwrap();
        for a in [[1i64, 2], [2, -1], [0, 3]] {
            let neg = [-a[0], -a[1]];
            let c = fourier_coefficient(&ens, &a);
            let cc = fourier_coefficient(&ens, &neg);
            assert_eq!(c.re, cc.re);
            assert_eq!(c.im, -cc.im);
        }
    }

    #[test]
    fn exact_and_monte_carlo_agree_within_clt() {
        let sys = fixtures::f1();
        let x0 = TorusPoint::from_rational_pairs(&[(1, 3), (0, 1)]);
        let n = 6;
        let exact = enumerate_exact(&sys, &x0, n, &ExactOptions::default()).unwrap();
        let mc = sample_paths(&sys, &x0, n, 20_000, 11).unwrap();
        let bound = 3.0 / (20_000f64).sqrt();
        for a in [[1i64, 0], [0, 1], [2, 2], [3, 0], [-1, 2]] {
            let ce = fourier_coefficient(&exact, &a);
            let cm = fourier_coefficient(&mc, &a);
            let d = ((ce.re - cm.re).powi(2) + (ce.im - cm.im).powi(2)).sqrt();
            assert!(d <= bound, "freq {a:?}: |Δ| = {d} > {bound}");
        }
    }

    #[test]
    fn scan_at_time_zero_has_unit_moduli() {
        let sys = fixtures::f1();
        let x0 = TorusPoint::from_rational_pairs(&[(2, 7), (3, 7)]);
        let ens = enumerate_exact(&sys, &x0, 0, &ExactOptions::default()).unwrap();
        let report = spectrum_scan(&ens, 2, false);
        assert_eq!(report.frequencies.len(), 24);
        for c in &report.coefficients {
            assert!((c.abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn haar_like_grid_spectrum_is_supported_on_multiples() {
        // uniform on (1/3)Z² in T²: nonzero only when both frequencies are
        // multiples of 3
        let atoms: Vec<walk::WalkAtom> = (0..3)
            .flat_map(|i| {
                (0..3).map(move |j| walk::WalkAtom {
                    point: TorusPoint::from_rational_pairs(&[(i, 3), (j, 3)]),
                    label: 0,
                    weight: BigRational::new(BigInt::one(), BigInt::from(9)),
                    word: None,
                })
            })
            .collect();
        let ens = WalkEnsemble {
            mode: WalkMode::Exact,
            dim: 2,
            n: 0,
            seed: None,
            samples: None,
            atoms,
        };
        let report = spectrum_scan(&ens, 4, true);
        for (a, c) in report.frequencies.iter().zip(&report.coefficients) {
            if a.iter().all(|v| v % 3 == 0) {
                assert!((c.abs() - 1.0).abs() < 1e-12, "freq {a:?}");
            } else {
                assert!(c.abs() < 1e-12, "freq {a:?} has |c| = {}", c.abs());
            }
        }
    }

    #[test]
    fn decay_fit_examples() {
        let ns: Vec<u32> = (1..=6).map(|k| 5 * k).collect();
        // identically 1 → rate 0
        let ones = vec![1.0; 6];
        let fit = decay_fit(&ns, &ones, 1e-6).unwrap();
        assert!(fit.rate.abs() < 1e-12);
        // synthetic e^{−0.2n} → rate −0.2
        let vals: Vec<f64> = ns.iter().map(|&n| (-0.2 * f64::from(n)).exp()).collect();
        let fit2 = decay_fit(&ns, &vals, 1e-9).unwrap();
        assert!((fit2.rate + 0.2).abs() < 0.01, "rate {}", fit2.rate);
        // floor truncation
        let mut noisy = vals;
        noisy[4] = 1e-12;
        noisy[5] = 1e-12;
        let fit3 = decay_fit(&ns, &noisy, 1e-9).unwrap();
        assert_eq!(fit3.floor_cut, Some(4));
        assert_eq!(fit3.used_points, 4);
        // immediate floor
        let flat = vec![1e-12; 6];
        assert!(matches!(
            decay_fit(&ns, &flat, 1e-9),
            Err(CoreError::InsufficientDecade(_))
        ));
        // too few points
        assert!(matches!(
            decay_fit(&[1, 2, 3], &[1.0, 0.5, 0.2], 1e-9),
            Err(CoreError::InsufficientDecade(_))
        ));
    }

    #[test]
    fn addstruct_identity_and_fixture() {
        // μ = δ_I surrogate: a one-generator identity-like system is not
        // unimodular-free, so use F4 at k = 1 with a point start: ν = δ₀,
        // all coefficients 1, A contains every difference, mass 1
        let sys = fixtures::f4();
        let x0 = TorusPoint::zero(2);
        let ens = enumerate_exact(&sys, &x0, 0, &ExactOptions::default()).unwrap();
        let out = addstruct_check(&sys, &ens, &[1, 0], 0.5, 1).unwrap();
        assert!(out.applicable);
        assert!((out.mass - 1.0).abs() < 1e-12);
        assert!(out.holds);

        // fixture F1 at n = 4: measure the coefficient, then use a t₀ just
        // below it so the hypothesis holds
        let sys1 = fixtures::f1();
        let x1 = TorusPoint::from_rational_pairs(&[(1, 3), (0, 1)]);
        let prev = enumerate_exact(&sys1, &x1, 3, &ExactOptions::default()).unwrap();
        let cur = enumerate_exact(&sys1, &x1, 4, &ExactOptions::default()).unwrap();
        let t0 = fourier_coefficient(&cur, &[3, 0]).abs() * 0.9;
        let out1 = addstruct_check(&sys1, &prev, &[3, 0], t0, 1).unwrap();
        assert!(out1.applicable);
        assert!(out1.holds, "mass {} < bound {}", out1.mass, out1.bound);

        // vacuous case: t₀ above the measured coefficient
        let out2 = addstruct_check(&sys1, &prev, &[1, 1], 1.5, 1).unwrap();
        assert!(!out2.applicable);
    }

    #[test]
    fn wiener_detects_a_point_mass() {
        let m = TorusMeasure::dirac(vec![0.25, 0.75]);
        let b = ConvexBody::ball(2, 20.0);
        let c = ConvexBody::ball(2, 100.0);
        let report = wiener_granulate(&m, &b, &c);
        assert_eq!(report.centers.len(), 1);
        assert!((report.captured_mass - 1.0).abs() < 1e-12);
        assert_eq!(report.centers[0], vec![0.25, 0.75]);
    }

    #[test]
    fn wiener_finds_grid_granules() {
        // uniform on (1/5)Z² plus small noise: exactly 25 granules
        let mut rng = rng::stream(3, 0);
        let mut points = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                for _ in 0..40 {
                    points.push(vec![
                        (i as f64 / 5.0 + (rng.gen::<f64>() - 0.5) * 2e-4).rem_euclid(1.0),
                        (j as f64 / 5.0 + (rng.gen::<f64>() - 0.5) * 2e-4).rem_euclid(1.0),
                    ]);
                }
            }
        }
        let w = 1.0 / points.len() as f64;
        let m = TorusMeasure {
            dim: 2,
            points,
            weights: vec![w; 1000],
        };
        let b = ConvexBody::ball(2, 10.0); // B* radius 1/10 separates the grid
        let c = ConvexBody::ball(2, 100.0); // C* radius 1/100 captures a cluster
        let report = wiener_granulate(&m, &b, &c);
        assert_eq!(report.centers.len(), 25);
        assert!(report.captured_mass >= 0.99, "mass {}", report.captured_mass);
    }

    #[test]
    fn wiener_reports_no_granulation_on_a_quasirandom_cloud() {
        // low-discrepancy cloud (rationally independent Kronecker pair):
        // captured mass ≈ |X|·vol(C*)
        let n = 60_000usize;
        let (a1, a2) = (2f64.sqrt(), 3f64.sqrt());
        let points: Vec<Vec<f64>> = (0..n)
            .map(|k| {
                vec![
                    (0.5 + a1 * k as f64).rem_euclid(1.0),
                    (0.5 + a2 * k as f64).rem_euclid(1.0),
                ]
            })
            .collect();
        let m = TorusMeasure {
            dim: 2,
            points,
            weights: vec![1.0 / n as f64; n],
        };
        let b = ConvexBody::ball(2, 20.0);
        let c = ConvexBody::ball(2, 50.0);
        let report = wiener_granulate(&m, &b, &c);
        let heuristic = report.volume_heuristic.unwrap();
        assert!(
            report.captured_mass <= 2.0 * heuristic
                && report.captured_mass >= heuristic / 2.0,
            "captured {} vs heuristic {heuristic}",
            report.captured_mass
        );
    }

    #[test]
    fn walk_granulate_rational_orbit() {
        let sys = fixtures::f1();
        let mut dec = crate::algebra::generate_algebra(&sys);
        crate::algebra::wedderburn_decompose(
            &mut dec,
            &sys,
            crate::algebra::WedderburnOptions::default(),
            1,
        )
        .unwrap();
        let qn = QuasiNorm::single_exponent(2, 0.96);
        let x0 = TorusPoint::from_rational_pairs(&[(1, 3), (0, 1)]);
        let report = walk_granulate(
            &sys,
            &dec,
            &qn,
            &x0,
            &[3, 0],
            0.9,
            6,
            &WalkGranulateOptions::default(),
        )
        .unwrap();
        // the orbit lives on (1/3)Z²: granules capture everything
        assert!(report.captured_mass > 0.999);
        assert!(report.coefficient.unwrap() > 0.999);
        // granule centers lie on the (1/3) grid
        for c in &report.centers {
            for &x in c {
                let snapped = (x * 3.0).round() / 3.0;
                assert!((x - snapped).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn walk_granulate_rejects_low_coefficients() {
        let sys = fixtures::f1();
        let mut dec = crate::algebra::generate_algebra(&sys);
        crate::algebra::wedderburn_decompose(
            &mut dec,
            &sys,
            crate::algebra::WedderburnOptions::default(),
            1,
        )
        .unwrap();
        let qn = QuasiNorm::single_exponent(2, 0.96);
        let x0 = TorusPoint {
            coords: vec![
                crate::exact::parse_coordinate("sqrt(2)-1").unwrap(),
                crate::exact::parse_coordinate("sqrt(3)-1").unwrap(),
            ],
        };
        let opts = WalkGranulateOptions {
            samples: 20_000,
            ..WalkGranulateOptions::default()
        };
        let res = walk_granulate(&sys, &dec, &qn, &x0, &[1, 0], 0.5, 18, &opts);
        assert!(matches!(res, Err(CoreError::HypothesisFailed { .. })));
    }

    #[test]
    fn walk_granulate_time_zero_is_one_granule() {
        let sys = fixtures::f1();
        let mut dec = crate::algebra::generate_algebra(&sys);
        crate::algebra::wedderburn_decompose(
            &mut dec,
            &sys,
            crate::algebra::WedderburnOptions::default(),
            1,
        )
        .unwrap();
        let qn = QuasiNorm::single_exponent(2, 0.96);
        let x0 = TorusPoint::from_rational_pairs(&[(1, 3), (0, 1)]);
        let report = walk_granulate(
            &sys,
            &dec,
            &qn,
            &x0,
            &[3, 0],
            0.5,
            0,
            &WalkGranulateOptions::default(),
        )
        .unwrap();
        assert_eq!(report.centers.len(), 1);
        assert!((report.captured_mass - 1.0).abs() < 1e-15);
    }
}
