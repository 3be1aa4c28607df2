use numcore::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VlpError};
use crate::trimodel::Encoder;

pub const DEFAULT_ASCENT_RATE: f64 = 0.01;

/// Multipliers of the equality constraint `s(α) = t` on the retained fraction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagrangianState {
    pub lam1: f64,
    pub lam2: f64,
    /// Target retained fraction of gated parameters.
    pub target: f64,
}

impl LagrangianState {
    pub fn new(target: f64) -> Self {
        Self {
            lam1: 0.0,
            lam2: 0.0,
            target,
        }
    }

    /// `λ1·(s − t) + λ2·(s − t)²`. The multipliers enter as named leaves `lagr.lam1` and
    /// `lagr.lam2` so their gradients can be inspected; training never applies them.
    pub fn loss(&self, g: &mut Graph, size: Var) -> Result<Var> {
        let lam1 = g.param("lagr.lam1", Tensor::scalar(self.lam1));
        let lam2 = g.param("lagr.lam2", Tensor::scalar(self.lam2));
        self.loss_with(g, size, lam1, lam2)
    }

    pub fn loss_with(&self, g: &mut Graph, size: Var, lam1: Var, lam2: Var) -> Result<Var> {
        let gap = g.add_scalar(size, -self.target);
        let sq = g.square(gap);
        let a = g.mul(lam1, gap)?;
        let b = g.mul(lam2, sq)?;
        Ok(g.add(a, b)?)
    }

    pub fn loss_value(&self, size: f64) -> f64 {
        let gap = size - self.target;
        self.lam1 * gap + self.lam2 * gap * gap
    }

    /// One projected ascent step: `λ1 += η·(s − t)`, `λ2 += η·(s − t)²`, `λ2 ≥ 0`.
    pub fn step(&self, size: f64, rate: f64) -> Result<Self> {
        if !(rate > 0.0) {
            return Err(VlpError::InvalidArgument(format!(
                "ascent rate {rate} must be positive"
            )));
        }
        let gap = size - self.target;
        Ok(Self {
            lam1: self.lam1 + rate * gap,
            lam2: (self.lam2 + rate * gap * gap).max(0.0),
            target: self.target,
        })
    }
}

pub fn lagrangian_loss(g: &mut Graph, state: &LagrangianState, size: Var) -> Result<Var> {
    state.loss(g, size)
}

pub fn controller_step(state: &LagrangianState, size: f64, rate: f64) -> Result<LagrangianState> {
    state.step(size, rate)
}

/// One sparsity constraint over a set of encoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Controller {
    /// Encoders whose gated parameters form this controller's size.
    pub scope: Vec<Encoder>,
    pub state: LagrangianState,
    /// Inert controllers contribute no loss and never step.
    pub active: bool,
}

/// The set of sparsity controllers driving one fine-tuning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constraints {
    pub controllers: Vec<Controller>,
    pub ascent_rate: f64,
}

impl Constraints {
    /// A single controller over all gated parameters, targeting `1 − removed` retained.
    pub fn global(removed: f64) -> Result<Self> {
        check_removed(removed)?;
        Ok(Self {
            controllers: vec![Controller {
                scope: Encoder::ALL.to_vec(),
                state: LagrangianState::new(1.0 - removed),
                active: removed > 0.0,
            }],
            ascent_rate: DEFAULT_ASCENT_RATE,
        })
    }

    pub fn any_active(&self) -> bool {
        self.controllers.iter().any(|c| c.active)
    }
}

fn check_removed(removed: f64) -> Result<()> {
    if !(0.0..1.0).contains(&removed) {
        return Err(VlpError::Config(format!(
            "removed fraction {removed} outside [0, 1)"
        )));
    }
    Ok(())
}

/// Three independent controllers, one per encoder, each targeting `1 − removed[e]` retained.
/// A zero target leaves that encoder's controller inert.
pub fn manual_sparsity_schedule(removed: [f64; 3]) -> Result<Constraints> {
    let mut controllers = Vec::new();
    for (e, r) in Encoder::ALL.into_iter().zip(removed) {
        check_removed(r)?;
        controllers.push(Controller {
            scope: vec![e],
            state: LagrangianState::new(1.0 - r),
            active: r > 0.0,
        });
    }
    Ok(Constraints {
        controllers,
        ascent_rate: DEFAULT_ASCENT_RATE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic_example() {
        let s = LagrangianState {
            lam1: 1.0,
            lam2: 2.0,
            target: 0.25,
        };
        assert!((s.loss_value(0.3) - 0.055).abs() < 1e-12);
        let mut g = Graph::new();
        let size = g.param("size", Tensor::scalar(0.3));
        let l = s.loss(&mut g, size).unwrap();
        assert!((g.value(l).item() - 0.055).abs() < 1e-12);
        let grads = g.backward(l).unwrap();
        assert!((grads.get_named("lagr.lam1").unwrap().item() - 0.05).abs() < 1e-12);
        assert!((grads.get_named("lagr.lam2").unwrap().item() - 0.0025).abs() < 1e-12);
    }

    #[test]
    fn satisfied_constraint_is_free_and_stable() {
        let s = LagrangianState {
            lam1: 3.0,
            lam2: 5.0,
            target: 0.6,
        };
        assert_eq!(s.loss_value(0.6), 0.0);
        assert_eq!(s.step(0.6, 0.01).unwrap(), s);
    }

    #[test]
    fn lam1_grows_linearly_above_target() {
        let mut s = LagrangianState::new(0.75);
        for _ in 0..10 {
            s = s.step(0.95, 0.01).unwrap();
        }
        assert!((s.lam1 - 10.0 * 0.01 * 0.2).abs() < 1e-12);
        assert!(s.lam2 > 0.0);
        assert!(s.step(0.9, 0.0).is_err());
    }

    #[test]
    fn table_rows() {
        let c = manual_sparsity_schedule([0.3, 0.3, 0.3]).unwrap();
        assert!(c
            .controllers
            .iter()
            .all(|c| c.active && (c.state.target - 0.7).abs() < 1e-12));
        let c = manual_sparsity_schedule([0.1, 0.1, 0.6]).unwrap();
        assert!((c.controllers[2].state.target - 0.4).abs() < 1e-12);
        assert_eq!(c.controllers[2].scope, vec![Encoder::Fusion]);
        let c = manual_sparsity_schedule([0.0; 3]).unwrap();
        assert!(!c.any_active());
        assert!(manual_sparsity_schedule([1.0, 0.0, 0.0]).is_err());
    }
}
