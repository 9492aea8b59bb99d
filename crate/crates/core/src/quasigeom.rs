//! Lyapunov-adapted quasi-norms and quasi-distances, convex bodies and
//! their polars, covering numbers, separated subsets, and distances to the
//! invariant sets `Z_Q`.
//!
//! The quasi-norm weights each block of the module decomposition by the
//! inverse of its exponent, `|v| = max_i ‖v_i‖^{1/λ_i}`, with the compact
//! block contributing `0` when its component has norm at most 1 and `+∞`
//! otherwise. Distances to affine hyperplanes use the min-formula over an
//! orthonormal block basis, adopted here as the definition (the comparison
//! constants of the two-sided estimate are normalized to 1 so tests are
//! deterministic).

use crate::algebra::ModuleDecomposition;
use crate::error::{CoreError, Result};
use crate::exact::TorusPoint;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive};
use serde::Serialize;

// ---------------------------------------------------------------------------
// Quasi-norms
// ---------------------------------------------------------------------------

/// One block of a quasi-norm: an orthonormal basis of the block subspace
/// and the exponent applied to the block norm (`None` marks the compact
/// block handled by the 0/∞ convention).
#[derive(Clone, Debug)]
pub struct QuasiBlock {
    pub basis: Vec<Vec<f64>>,
    pub alpha: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct QuasiNorm {
    pub dim: usize,
    pub blocks: Vec<QuasiBlock>,
}

impl QuasiNorm {
    /// Plain Euclidean norm as a single-block quasi-norm.
    pub fn euclidean(dim: usize) -> Self {
        let basis = (0..dim)
            .map(|i| {
                let mut v = vec![0.0; dim];
                v[i] = 1.0;
                v
            })
            .collect();
        QuasiNorm {
            dim,
            blocks: vec![QuasiBlock {
                basis,
                alpha: Some(1.0),
            }],
        }
    }

    /// Single block with exponent `1/λ`.
    pub fn single_exponent(dim: usize, lambda: f64) -> Self {
        let mut qn = Self::euclidean(dim);
        qn.blocks[0].alpha = Some(1.0 / lambda);
        qn
    }

    /// Built from a module decomposition: non-compact blocks carry
    /// `α = 1/λ`, compact blocks the 0/∞ convention.
    pub fn from_module(module: &ModuleDecomposition) -> Self {
        QuasiNorm {
            dim: module.dim,
            blocks: module
                .blocks
                .iter()
                .map(|b| QuasiBlock {
                    basis: b.basis.clone(),
                    alpha: (!b.compact).then(|| 1.0 / b.exponent),
                })
                .collect(),
        }
    }

    /// Per-block norms `‖P_i v‖`.
    pub fn block_norms(&self, v: &[f64]) -> Vec<f64> {
        self.blocks
            .iter()
            .map(|b| {
                b.basis
                    .iter()
                    .map(|u| {
                        let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
                        dot * dot
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }

    /// The quasi-norm value (an extended real).
    pub fn qnorm(&self, v: &[f64]) -> f64 {
        assert_eq!(v.len(), self.dim);
        let mut out = 0.0f64;
        for (b, norm) in self.blocks.iter().zip(self.block_norms(v)) {
            match b.alpha {
                Some(alpha) => out = out.max(norm.powf(alpha)),
                None => {
                    if norm > 1.0 {
                        return f64::INFINITY;
                    }
                    // compact block within the unit ball contributes 0
                }
            }
        }
        out
    }

    pub fn qdist(&self, u: &[f64], v: &[f64]) -> f64 {
        let diff: Vec<f64> = u.iter().zip(v).map(|(a, b)| a - b).collect();
        self.qnorm(&diff)
    }

    /// Constant in the weak triangle inequality
    /// `d̃(u,w) ≤ K·(d̃(u,v) + d̃(v,w))` on the non-compact part.
    pub fn triangle_constant(&self) -> f64 {
        self.blocks
            .iter()
            .filter_map(|b| b.alpha)
            .map(|a| 2f64.powf(a))
            .fold(1.0, f64::max)
    }
}

/// Minimal (centered) lift difference of two exact torus points, as `f64`.
pub fn centered_lift_diff(x: &TorusPoint, y: &TorusPoint) -> Vec<f64> {
    x.coords
        .iter()
        .zip(&y.coords)
        .map(|(a, b)| {
            let d = (a.value.clone() - b.value.clone()).mod1().to_f64();
            if d > 0.5 {
                d - 1.0
            } else {
                d
            }
        })
        .collect()
}

fn centered_f64(diff: &[f64]) -> Vec<f64> {
    diff.iter()
        .map(|&d| {
            let f = d - d.floor();
            if f > 0.5 {
                f - 1.0
            } else {
                f
            }
        })
        .collect()
}

/// Quasi-distance on the torus: the quasi-norm of the minimal lift when
/// some lift difference has Euclidean norm at most ½, and the constant 1
/// otherwise. Points on different coset sheets are infinitely far apart.
pub fn qdist_torus(
    qn: &QuasiNorm,
    x: &TorusPoint,
    y: &TorusPoint,
    sheet_x: usize,
    sheet_y: usize,
) -> f64 {
    if sheet_x != sheet_y {
        return f64::INFINITY;
    }
    let diff = centered_lift_diff(x, y);
    qdist_torus_diff(qn, &diff)
}

/// Same cutoff rule applied to an already-lifted difference vector.
pub fn qdist_torus_diff(qn: &QuasiNorm, diff: &[f64]) -> f64 {
    let centered = centered_f64(diff);
    let euclid: f64 = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
    if euclid <= 0.5 {
        qn.qnorm(&centered)
    } else {
        1.0
    }
}

// ---------------------------------------------------------------------------
// Distance to affine hyperplanes
// ---------------------------------------------------------------------------

/// Affine functional `φ(x) = ⟨linear, x⟩ + constant`; its kernel is the
/// hyperplane.
#[derive(Clone, Debug)]
pub struct AffineFunctional {
    pub linear: Vec<f64>,
    pub constant: f64,
}

impl AffineFunctional {
    pub fn eval(&self, v: &[f64]) -> f64 {
        self.linear.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() + self.constant
    }
}

/// Quasi-distance from `v` to the hyperplane `{φ = 0}`:
/// `min_i |φ(v)/l(u_i)|^{α_{j(i)}}` over the orthonormal block basis, where
/// the minimum runs over basis directions with `l(u_i) ≠ 0`. Requires the
/// hyperplane to contain the compact directions.
pub fn dist_affine(qn: &QuasiNorm, v: &[f64], functional: &AffineFunctional) -> Result<f64> {
    let l_norm: f64 = functional
        .linear
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if l_norm == 0.0 {
        return Err(CoreError::DegenerateHyperplane);
    }
    let tol = 1e-12 * l_norm;
    let phi_v = functional.eval(v);
    let mut best: Option<f64> = None;
    for block in &qn.blocks {
        for u in &block.basis {
            let lu: f64 = functional.linear.iter().zip(u).map(|(a, b)| a * b).sum();
            match block.alpha {
                None => {
                    if lu.abs() > 1e-9 * l_norm {
                        // functional does not vanish on the compact block:
                        // W − W does not contain V₀
                        return Err(CoreError::InvalidHyperplane);
                    }
                }
                Some(alpha) => {
                    if lu.abs() > tol {
                        let val = (phi_v / lu).abs().powf(alpha);
                        best = Some(best.map_or(val, |b| b.min(val)));
                    }
                }
            }
        }
    }
    best.ok_or(CoreError::DegenerateHyperplane)
}

// ---------------------------------------------------------------------------
// Convex bodies and polars
// ---------------------------------------------------------------------------

/// A block of a convex body: orthonormal basis rows and a radius.
#[derive(Clone, Debug)]
pub struct BodyBlock {
    pub basis: Vec<Vec<f64>>,
    pub radius: f64,
}

/// A symmetric convex body: a product of Euclidean balls over orthogonal
/// blocks (`polar = false`, membership `∀i ‖P_i x‖ ≤ r_i`), or the polar of
/// such a product (`polar = true`, membership `Σ_i r_i ‖P_i x‖ ≤ 1`).
#[derive(Clone, Debug)]
pub struct ConvexBody {
    pub dim: usize,
    pub blocks: Vec<BodyBlock>,
    pub polar: bool,
}

impl ConvexBody {
    /// Euclidean ball of radius `r`.
    pub fn ball(dim: usize, r: f64) -> Self {
        let basis = (0..dim)
            .map(|i| {
                let mut v = vec![0.0; dim];
                v[i] = 1.0;
                v
            })
            .collect();
        ConvexBody {
            dim,
            blocks: vec![BodyBlock { basis, radius: r }],
            polar: false,
        }
    }

    pub fn from_blocks(dim: usize, blocks: Vec<BodyBlock>) -> Self {
        ConvexBody {
            dim,
            blocks,
            polar: false,
        }
    }

    /// Polar body (blockwise closed form; the bipolar is the original).
    pub fn polar(&self) -> ConvexBody {
        ConvexBody {
            dim: self.dim,
            blocks: self.blocks.clone(),
            polar: !self.polar,
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        let norms: Vec<f64> = self
            .blocks
            .iter()
            .map(|b| {
                b.basis
                    .iter()
                    .map(|u| {
                        let dot: f64 = u.iter().zip(x).map(|(a, c)| a * c).sum();
                        dot * dot
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        if self.polar {
            self.blocks
                .iter()
                .zip(&norms)
                .map(|(b, n)| b.radius * n)
                .sum::<f64>()
                <= 1.0
        } else {
            self.blocks
                .iter()
                .zip(&norms)
                .all(|(b, n)| *n <= b.radius)
        }
    }

    /// Euclidean radius of the smallest ball containing the body.
    pub fn outer_radius(&self) -> f64 {
        if self.polar {
            self.blocks
                .iter()
                .map(|b| 1.0 / b.radius)
                .fold(0.0, f64::max)
        } else {
            self.blocks
                .iter()
                .map(|b| b.radius * b.radius)
                .sum::<f64>()
                .sqrt()
        }
    }

    /// Volume in closed form when available (products of balls, or the
    /// polar of a single-block body, which is again a ball).
    pub fn volume(&self) -> Option<f64> {
        fn vball(d: usize) -> f64 {
            // π^{d/2} / Γ(d/2 + 1)
            let gamma = if d % 2 == 0 {
                (1..=d / 2).map(|i| i as f64).product::<f64>()
            } else {
                let k = d / 2; // d = 2k + 1, Γ(k + 3/2) = √π·Π_{i=0}^{k}(i + ½)
                let mut acc = std::f64::consts::PI.sqrt();
                for i in 0..=k {
                    acc *= i as f64 + 0.5;
                }
                acc
            };
            std::f64::consts::PI.powf(d as f64 / 2.0) / gamma
        }
        if !self.polar {
            let mut v = 1.0;
            for b in &self.blocks {
                v *= vball(b.basis.len()) * b.radius.powi(b.basis.len() as i32);
            }
            Some(v)
        } else if self.blocks.len() == 1 {
            let d = self.blocks[0].basis.len();
            Some(vball(d) * (1.0 / self.blocks[0].radius).powi(d as i32))
        } else {
            None
        }
    }
}

// ---------------------------------------------------------------------------
// Covering numbers and separated subsets
// ---------------------------------------------------------------------------

/// Shape used for covering: a Euclidean radius or a convex body.
pub enum CoverShape<'a> {
    Radius(f64),
    Body(&'a ConvexBody),
}

impl CoverShape<'_> {
    fn covers(&self, center: &[f64], p: &[f64]) -> bool {
        match self {
            CoverShape::Radius(r) => {
                let d2: f64 = center
                    .iter()
                    .zip(p)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                d2.sqrt() <= *r
            }
            CoverShape::Body(b) => {
                let diff: Vec<f64> = p.iter().zip(center).map(|(a, c)| a - c).collect();
                b.contains(&diff)
            }
        }
    }
}

/// Greedy cover size with centers drawn from the set itself, exact optimum
/// by subset DP when the set has at most 16 points. The greedy value is
/// within the doubling constant of the optimal covering number.
pub fn covering_number(points: &[Vec<f64>], shape: &CoverShape) -> usize {
    let n = points.len();
    if n == 0 {
        return 0;
    }
    let masks: Vec<u64> = (0..n)
        .map(|i| {
            let mut m = 0u64;
            for (j, p) in points.iter().enumerate() {
                if shape.covers(&points[i], p) {
                    m |= 1 << j;
                }
            }
            m
        })
        .collect();
    if n <= 16 {
        return exact_set_cover(&masks, n);
    }
    let full: u64 = if n == 64 { !0 } else { (1 << n) - 1 };
    let mut covered = 0u64;
    let mut count = 0;
    while covered != full {
        let (best, gain) = masks
            .iter()
            .enumerate()
            .map(|(i, &m)| (i, (m & !covered).count_ones()))
            .max_by_key(|&(i, g)| (g, usize::MAX - i))
            .expect("nonempty");
        if gain == 0 {
            // every point is covered by its own ball, so this cannot happen
            unreachable!("greedy cover stalled");
        }
        covered |= masks[best];
        count += 1;
    }
    count
}

fn exact_set_cover(masks: &[u64], n: usize) -> usize {
    let full: usize = (1usize << n) - 1;
    let mut dp = vec![u32::MAX; full + 1];
    dp[0] = 0;
    for state in 0..=full {
        if dp[state] == u32::MAX {
            continue;
        }
        if state == full {
            break;
        }
        // cover the lowest uncovered point
        let lowest = (!state & full).trailing_zeros() as usize;
        for m in masks {
            if m & (1 << lowest) != 0 {
                let next = state | (*m as usize & full);
                dp[next] = dp[next].min(dp[state] + 1);
            }
        }
    }
    dp[full] as usize
}

/// Greedy weight-descending selection of a body-separated subset: returns
/// selected indices. Every rejected point lies in some selected point plus
/// the body.
pub fn separated_subset(points: &[Vec<f64>], weights: &[f64], body: &ConvexBody) -> Vec<usize> {
    assert_eq!(points.len(), weights.len());
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        weights[b]
            .partial_cmp(&weights[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut selected: Vec<usize> = Vec::new();
    'candidates: for &i in &order {
        for &s in &selected {
            let diff: Vec<f64> = points[i]
                .iter()
                .zip(&points[s])
                .map(|(a, b)| a - b)
                .collect();
            if body.contains(&diff) {
                continue 'candidates;
            }
        }
        selected.push(i);
    }
    selected
}

// ---------------------------------------------------------------------------
// Distance to the invariant sets Z_Q
// ---------------------------------------------------------------------------

/// The Γ-invariant set `Z_Q`: rational points of denominator at most `Q`
/// thickened by the compact-factor ball of radius `Q`, on every coset
/// sheet, optionally modulo a sheet subspace `W₀`.
#[derive(Clone, Debug)]
pub struct InvariantSetZq {
    pub q_max: u64,
    /// Orthonormal basis rows of `γW₀` per sheet (empty = no quotient).
    pub sheet_subspaces: Vec<Vec<Vec<f64>>>,
}

impl InvariantSetZq {
    pub fn new(q_max: u64, sheets: usize) -> Self {
        InvariantSetZq {
            q_max,
            sheet_subspaces: vec![Vec::new(); sheets],
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ZqWitness {
    pub q: u64,
    pub numerators: Vec<i64>,
    pub distance: f64,
    /// norm of the compact component beyond the absorbed `Ball(0,Q)`
    pub compact_excess: f64,
}

/// Quasi-distance from `y` (an exact torus point on a sheet) to `Z_Q`:
/// minimum over `q ≤ Q` of the quasi-norm of the minimal lift of
/// `y − p/q` (per-coordinate rounding), with the compact component
/// absorbed into `Ball(0,Q)` and any excess fed through the 0/∞
/// convention. Also returns the minimizing witness.
pub fn dist_to_zq(
    qn: &QuasiNorm,
    y: &TorusPoint,
    sheet_w0: &[Vec<f64>],
    q_max: u64,
) -> ZqWitness {
    assert!(q_max >= 1);
    let mut best: Option<ZqWitness> = None;
    for q in 1..=q_max {
        let qb = BigInt::from(q);
        // per-coordinate nearest point of (1/q)Z^d on the torus
        let mut nums: Vec<i64> = Vec::with_capacity(y.dim());
        let mut diff: Vec<f64> = Vec::with_capacity(y.dim());
        for c in &y.coords {
            // round(x·q) exactly for rational coordinates; via f64 for surds
            let (p_int, d) = match c.value.as_rational() {
                Some(r) => {
                    let scaled = r * BigRational::from_integer(qb.clone());
                    let p = round_rational(&scaled);
                    let frac = (&scaled - BigRational::from_integer(p.clone()))
                        / BigRational::from_integer(qb.clone());
                    (
                        p.to_i64().unwrap_or(0),
                        frac.to_f64().unwrap_or(f64::NAN),
                    )
                }
                None => {
                    let x = c.value.to_f64();
                    let p = (x * q as f64).round();
                    (p as i64, x - p / q as f64)
                }
            };
            nums.push(p_int.rem_euclid(q as i64));
            diff.push(d);
        }
        // quotient by the sheet subspace, blockwise-safe because W₀ is
        // invariant (projection is plain orthogonal projection here)
        let mut reduced = diff.clone();
        for w in sheet_w0 {
            let dot: f64 = reduced.iter().zip(w).map(|(a, b)| a * b).sum();
            for (r, ww) in reduced.iter_mut().zip(w) {
                *r -= dot * ww;
            }
        }
        // split into compact and non-compact parts
        let mut value = 0.0f64;
        let mut compact_norm = 0.0f64;
        for block in &qn.blocks {
            let norm: f64 = block
                .basis
                .iter()
                .map(|u| {
                    let dot: f64 = u.iter().zip(&reduced).map(|(a, b)| a * b).sum();
                    dot * dot
                })
                .sum::<f64>()
                .sqrt();
            match block.alpha {
                Some(alpha) => value = value.max(norm.powf(alpha)),
                None => compact_norm = norm,
            }
        }
        let excess = (compact_norm - q_max as f64).max(0.0);
        if excess > 1.0 {
            value = f64::INFINITY;
        }
        let cand = ZqWitness {
            q,
            numerators: nums,
            distance: value,
            compact_excess: excess,
        };
        match &best {
            Some(b) if b.distance <= cand.distance => {}
            _ => best = Some(cand),
        }
    }
    best.expect("q_max >= 1")
}

fn round_rational(r: &BigRational) -> BigInt {
    let half = BigRational::new(BigInt::from(1), BigInt::from(2));
    if r.is_negative() {
        -(((-r) + half).floor().to_integer())
    } else {
        (r + half).floor().to_integer()
    }
}
