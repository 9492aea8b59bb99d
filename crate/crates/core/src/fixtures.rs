//! Bundled generator systems used across tests and experiments.
//!
//! - `F1`: the free pair `[[1,2],[0,1]]`, `[[1,0],[2,1]]` together with the
//!   inverses, uniform weights. Generates all of `Mat₂(R)`, strongly
//!   irreducible action, positive exponent.
//! - `F2`: two `4×4` block matrices pairing a quarter-turn rotation with the
//!   shears of `F1`, plus inverses, uniform weights, labeled into `Z/4` by
//!   signed word length. The generated algebra is `C × M₂(R)`; the group has
//!   a compact `Z/4` part and an `SL₂(R)` part.
//! - `F3`: the quarter-turn rotation and its inverse, weights `1/2`. A
//!   purely compact system: exponent zero, bounded orbits.
//! - `F4`: the single deterministic generator `[[2,1],[1,1]]`. A hyperbolic
//!   toral automorphism with top eigenvalue `(3+√5)/2`.

use crate::algebra::{CosetLabels, FiniteGroup, GeneratorSystem};
use crate::exact::IntMatrix;
use num_bigint::BigInt;
use num_rational::BigRational;

fn w(p: i64, q: i64) -> BigRational {
    BigRational::new(BigInt::from(p), BigInt::from(q))
}

/// Free pair with inverses, uniform weights. Algebra `Mat₂(R)`, dim 4.
pub fn f1() -> GeneratorSystem {
    let a = IntMatrix::from_i64(&[&[1, 2], &[0, 1]]);
    let b = IntMatrix::from_i64(&[&[1, 0], &[2, 1]]);
    let ai = a.inverse_unimodular().unwrap();
    let bi = b.inverse_unimodular().unwrap();
    GeneratorSystem::new(
        vec![a, b, ai, bi],
        vec![w(1, 4), w(1, 4), w(1, 4), w(1, 4)],
        None,
    )
    .unwrap()
}

/// Block pairs (quarter turn ⊕ shear) with inverses, labels into `Z/4`.
/// Algebra `C × M₂(R)`, dim 6; identity-component algebra `R × M₂(R)`, dim 5.
pub fn f2() -> GeneratorSystem {
    let a0 = IntMatrix::from_i64(&[
        &[0, 1, 0, 0],
        &[-1, 0, 0, 0],
        &[0, 0, 1, 1],
        &[0, 0, 0, 1],
    ]);
    let a1 = IntMatrix::from_i64(&[
        &[0, 1, 0, 0],
        &[-1, 0, 0, 0],
        &[0, 0, 1, 0],
        &[0, 0, 1, 1],
    ]);
    let a0i = a0.inverse_unimodular().unwrap();
    let a1i = a1.inverse_unimodular().unwrap();
    let labels = CosetLabels {
        group: FiniteGroup::cyclic(4),
        labels: vec![1, 1, 3, 3],
    };
    GeneratorSystem::new(
        vec![a0, a1, a0i, a1i],
        vec![w(1, 4), w(1, 4), w(1, 4), w(1, 4)],
        Some(labels),
    )
    .unwrap()
}

/// Quarter turn and its inverse: compact image, exponent zero.
pub fn f3() -> GeneratorSystem {
    let r = IntMatrix::from_i64(&[&[0, 1], &[-1, 0]]);
    let ri = r.inverse_unimodular().unwrap();
    GeneratorSystem::new(vec![r, ri], vec![w(1, 2), w(1, 2)], None).unwrap()
}

/// Deterministic hyperbolic automorphism `[[2,1],[1,1]]`.
pub fn f4() -> GeneratorSystem {
    let m = IntMatrix::from_i64(&[&[2, 1], &[1, 1]]);
    GeneratorSystem::new(vec![m], vec![w(1, 1)], None).unwrap()
}

/// Resolve a fixture by name (`"F1"`-`"F4"`, case-insensitive).
pub fn by_name(name: &str) -> Option<GeneratorSystem> {
    match name.to_ascii_uppercase().as_str() {
        "F1" => Some(f1()),
        "F2" => Some(f2()),
        "F3" => Some(f3()),
        "F4" => Some(f4()),
        _ => None,
    }
}
