//! Guard-bit budgeting for inexact coordinates.

use crate::exact::matrix::IntMatrix;

/// Tracks how many guard bits are available and how fast error grows.
#[derive(Clone, Copy, Debug)]
pub struct PrecisionBudget {
    guard_bits: u32,
    /// Upper bound on bits of error growth per walk step.
    growth_per_step: u32,
}

impl PrecisionBudget {
    pub fn new(guard_bits: u32, growth_per_step: u32) -> Self {
        PrecisionBudget {
            guard_bits,
            growth_per_step,
        }
    }

    /// Budget sized so that an `n`-step walk stays within `target_error`.
    pub fn for_walk(n: u32, gens: &[IntMatrix], target_error: f64) -> Self {
        let growth = growth_bits(gens);
        PrecisionBudget {
            guard_bits: required_guard_bits(n, gens, target_error),
            growth_per_step: growth,
        }
    }

    pub fn guard_bits(&self) -> u32 {
        self.guard_bits
    }

    pub fn growth_per_step(&self) -> u32 {
        self.growth_per_step
    }

    pub fn target_error(&self) -> f64 {
        2f64.powi(-(self.guard_bits as i32))
    }

    /// Retry policy: double the guard bits.
    pub fn escalate(&self) -> Self {
        PrecisionBudget {
            guard_bits: self.guard_bits * 2,
            growth_per_step: self.growth_per_step,
        }
    }
}

/// `ceil(log2(max row-sum norm))` over the generators: an upper bound on the
/// error amplification per step, in bits.
fn growth_bits(gens: &[IntMatrix]) -> u32 {
    gens.iter()
        .map(|g| {
            let m = g.row_sum_norm();
            let m = m.to_biguint().unwrap_or_default();
            if m.bits() <= 1 {
                0
            } else {
                // ceil(log2 m) = bits(m-1) for m ≥ 2
                (m - 1u32).bits() as u32
            }
        })
        .max()
        .unwrap_or(0)
}

/// Guard bits such that any `n`-step product applied to an error-free start
/// stays within `target_error`:
/// `ceil(-log2 target) + n·ceil(log2 max-row-sum)`.
pub fn required_guard_bits(n: u32, gens: &[IntMatrix], target_error: f64) -> u32 {
    assert!(target_error > 0.0 && target_error.is_finite());
    let base = (-target_error.log2()).ceil().max(0.0) as u32;
    base + n * growth_bits(gens)
}
