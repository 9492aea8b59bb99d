//! Property suites for the structural invariants: exactness of the torus
//! arithmetic, the weak triangle inequality of quasi-norms, monotonicity
//! of the set-cover and Z_Q machinery, and exact mass conservation under
//! measure convolutions.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use proptest::prelude::*;
use torlab_core::exact::{act_on_torus, parse_coordinate, IntMatrix, SurdExpr, TorusPoint};
use torlab_core::multconv::{convolve, ConvMode, ConvOptions, ScaledMeasure};
use torlab_core::quasigeom::{covering_number, dist_to_zq, CoverShape, QuasiBlock, QuasiNorm};

fn rational(p: i64, q: i64) -> BigRational {
    BigRational::new(BigInt::from(p), BigInt::from(q))
}

fn unimodular_strategy() -> impl Strategy<Value = IntMatrix> {
    // products of elementary shears are unimodular by construction
    proptest::collection::vec((any::<bool>(), -3i64..=3), 1..5).prop_map(|word| {
        let mut m = IntMatrix::identity(2);
        for (upper, k) in word {
            let g = if upper {
                IntMatrix::from_i64(&[&[1, k], &[0, 1]])
            } else {
                IntMatrix::from_i64(&[&[1, 0], &[k, 1]])
            };
            m = g.mat_mul(&m).unwrap();
        }
        m
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Rational starting points keep a denominator dividing the original
    /// under every unimodular action, and coordinates stay in [0,1).
    #[test]
    fn walk_preserves_denominators(
        g in unimodular_strategy(),
        p1 in 0i64..30, p2 in 0i64..30, q in 1i64..31,
    ) {
        let x = TorusPoint::from_rational_pairs(&[(p1, q), (p2, q)]);
        let y = act_on_torus(&g, &x);
        let den = y.rational_denominator().unwrap();
        prop_assert!((BigInt::from(q) % &den).is_zero());
        for c in &y.coords {
            let v = c.value.as_rational().unwrap();
            prop_assert!(!v.is_negative() && v < &BigRational::one());
        }
    }

    /// mod-1 reduction of surd expressions lands in [0,1) and is a shift
    /// by an integer.
    #[test]
    fn surd_mod1_is_an_integer_shift(
        a in -50i64..50, b in -50i64..50, c in 1i64..20, k in 2u64..20,
    ) {
        let e = SurdExpr::surd(rational(b, c), k)
            + SurdExpr::from_rational(rational(a, c));
        let m = e.mod1();
        let shift = e.clone() - m.clone();
        prop_assert!(shift.is_rational());
        prop_assert!(shift.as_rational().unwrap().is_integer());
        let v = m.to_f64();
        prop_assert!((0.0..1.0).contains(&v));
    }

    /// Display output of exact coordinates reparses to the same value.
    #[test]
    fn coordinate_display_roundtrips(
        a in -9i64..9, b in -9i64..9, c in 1i64..9, k in 2u64..12,
    ) {
        let e = (SurdExpr::surd(rational(b, c), k)
            + SurdExpr::from_rational(rational(a, c))).mod1();
        let parsed = parse_coordinate(&e.to_string()).unwrap();
        prop_assert_eq!(parsed.value, e);
    }

    /// Weak triangle inequality with the computed constant, on random
    /// triples in a two-block quasi-geometry.
    #[test]
    fn quasi_triangle_inequality(
        u in proptest::collection::vec(-1.0f64..1.0, 3),
        v in proptest::collection::vec(-1.0f64..1.0, 3),
        w in proptest::collection::vec(-1.0f64..1.0, 3),
        alpha1 in 0.4f64..2.5, alpha2 in 0.4f64..2.5,
    ) {
        let qn = QuasiNorm {
            dim: 3,
            blocks: vec![
                QuasiBlock {
                    basis: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
                    alpha: Some(alpha1),
                },
                QuasiBlock {
                    basis: vec![vec![0.0, 0.0, 1.0]],
                    alpha: Some(alpha2),
                },
            ],
        };
        let k = qn.triangle_constant();
        let lhs = qn.qdist(&u, &w);
        let rhs = k * (qn.qdist(&u, &v) + qn.qdist(&v, &w));
        prop_assert!(lhs <= rhs + 1e-9);
    }

    /// Point-centered covers: adding a point grows the cover by at most
    /// one ball, and the count is antitone in the radius. (Strict
    /// monotonicity under subsets fails for point-centered covers, since
    /// removing a point can remove the best center.)
    #[test]
    fn covering_monotonicity(
        pts in proptest::collection::vec(
            proptest::collection::vec(0.0f64..1.0, 2), 2..12),
        r in 0.05f64..0.5,
    ) {
        let full = covering_number(&pts, &CoverShape::Radius(r));
        let sub = covering_number(&pts[..pts.len() - 1], &CoverShape::Radius(r));
        prop_assert!(full <= sub + 1);
        let bigger = covering_number(&pts, &CoverShape::Radius(2.0 * r));
        prop_assert!(bigger <= full);
    }

    /// d̃(y, Z_Q) is nonincreasing in Q.
    #[test]
    fn zq_distance_monotone(
        p1 in 0i64..97, p2 in 0i64..97, q_max in 2u64..9,
    ) {
        let qn = QuasiNorm::euclidean(2);
        let y = TorusPoint::from_rational_pairs(&[(p1, 97), (p2, 97)]);
        let small = dist_to_zq(&qn, &y, &[], q_max - 1);
        let large = dist_to_zq(&qn, &y, &[], q_max);
        prop_assert!(large.distance <= small.distance + 1e-12);
    }

    /// Mass is conserved exactly under ⊞ and ⊟ of random rational-weight
    /// measures, including after grid coarsening.
    #[test]
    fn convolution_mass_conservation(
        weights in proptest::collection::vec(1u32..20, 2..6),
        points in proptest::collection::vec(-4.0f64..4.0, 2..6),
        sub in any::<bool>(),
    ) {
        let n = weights.len().min(points.len());
        let total: u32 = weights[..n].iter().sum();
        let atoms: Vec<(Vec<f64>, BigRational)> = (0..n)
            .map(|i| {
                (
                    vec![points[i]],
                    BigRational::new(BigInt::from(weights[i]), BigInt::from(total)),
                )
            })
            .collect();
        let m = ScaledMeasure::from_rational_atoms(1, 2f64.powi(-6), atoms);
        prop_assert!(m.mass().is_one());
        let mode = if sub { ConvMode::Sub } else { ConvMode::Add };
        let opts = ConvOptions::for_scale(2f64.powi(-6));
        let out = convolve(&m, &m, mode, None, &opts).unwrap();
        prop_assert!(out.mass().is_one());
        let coarse = out.coarsen(2f64.powi(-4));
        prop_assert!(coarse.mass().is_one());
    }
}
