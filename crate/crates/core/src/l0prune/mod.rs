//! Hard-Concrete L0 gates over heads and FFN neurons, their expected-size surrogates, and the
//! Lagrangian controllers that hold the expected size at a target.

mod gates;
mod lagrangian;

use numcore::{uniform, Rng};

pub use gates::{
    DensityReport, GateSet, UnitGroup, DEFAULT_INIT_LOGIT, DEFAULT_STRETCH, DEFAULT_THRESHOLD,
};
pub use lagrangian::{
    controller_step, lagrangian_loss, manual_sparsity_schedule, Constraints, Controller,
    LagrangianState, DEFAULT_ASCENT_RATE,
};

/// One Hard-Concrete draw from uniform noise `u ∈ (0,1)`.
pub fn hard_concrete(logit: f64, u: f64, lo: f64, hi: f64) -> f64 {
    let s = 1.0 / (1.0 + (-(u.ln() - (1.0 - u).ln() + logit)).exp());
    (s * (hi - lo) + lo).clamp(0.0, 1.0)
}

/// Value-level gate samples, one vector per group, drawn in group order.
pub fn sample_gates(gates: &GateSet, rng: &mut Rng) -> Vec<Vec<f64>> {
    gates
        .groups
        .iter()
        .map(|grp| {
            let u = uniform(rng, &[grp.logits.len()]);
            grp.logits
                .iter()
                .zip(u.data())
                .map(|(&a, &u)| hard_concrete(a, u, gates.stretch_lo, gates.stretch_hi))
                .collect()
        })
        .collect()
}

pub fn deterministic_gates(gates: &GateSet) -> Vec<Vec<f64>> {
    gates.deterministic()
}

pub fn modal_density_report(gates: &GateSet) -> DensityReport {
    gates.modal_density_report()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midpoint_and_saturation() {
        assert!((hard_concrete(0.0, 0.5, -0.1, 1.1) - 0.5).abs() < 1e-15);
        for u in [0.01, 0.3, 0.7, 0.99] {
            assert_eq!(hard_concrete(20.0, u, -0.1, 1.1), 1.0);
            assert_eq!(hard_concrete(-20.0, u, -0.1, 1.1), 0.0);
        }
    }
}
