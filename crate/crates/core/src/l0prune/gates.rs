use std::collections::BTreeMap;

use numcore::{uniform, Graph, Rng, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VlpError};
use crate::trimodel::{unit_param_count, Encoder, GateValues, GateVars, UnitKind, VlmModel};

pub const DEFAULT_STRETCH: (f64, f64) = (-0.1, 1.1);
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_INIT_LOGIT: f64 = 2.5;

/// Gates of one unit kind in one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitGroup {
    pub encoder: Encoder,
    pub layer: usize,
    pub kind: UnitKind,
    /// Parameters governed by each unit of this group (w_j).
    pub params_per_unit: usize,
    /// Hard-Concrete location parameters, one per unit.
    pub logits: Vec<f64>,
}

impl UnitGroup {
    /// Graph parameter name of this group's logits.
    pub fn param_name(&self) -> String {
        format!("gate.{}.{}.{}", self.encoder, self.layer, self.kind.name())
    }

    pub fn key(&self) -> (Encoder, usize, UnitKind) {
        (self.encoder, self.layer, self.kind)
    }
}

/// Hard-Concrete gates over every prunable unit of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateSet {
    pub stretch_lo: f64,
    pub stretch_hi: f64,
    pub threshold: f64,
    pub groups: Vec<UnitGroup>,
}

/// Per-encoder retained fraction of gated parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub vision: f64,
    pub text: f64,
    pub fusion: f64,
}

impl DensityReport {
    pub fn get(&self, e: Encoder) -> f64 {
        match e {
            Encoder::Vision => self.vision,
            Encoder::Text => self.text,
            Encoder::Fusion => self.fusion,
        }
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl GateSet {
    /// One gate per head, cross-attention head and FFN neuron of `model`, all at `init_logit`.
    pub fn for_model(model: &VlmModel, init_logit: f64) -> Self {
        let mut groups = Vec::new();
        for e in Encoder::ALL {
            let enc = model.config.encoder(e);
            for layer in 0..enc.num_layers {
                let shape = enc.layer_shape(layer);
                for (kind, n) in [
                    (UnitKind::Head, shape.heads),
                    (UnitKind::CrossHead, shape.cross_heads),
                    (UnitKind::FfnNeuron, shape.ffn),
                ] {
                    if n == 0 {
                        continue;
                    }
                    groups.push(UnitGroup {
                        encoder: e,
                        layer,
                        kind,
                        params_per_unit: unit_param_count(&model.config, e, kind),
                        logits: vec![init_logit; n],
                    });
                }
            }
        }
        Self {
            stretch_lo: DEFAULT_STRETCH.0,
            stretch_hi: DEFAULT_STRETCH.1,
            threshold: DEFAULT_THRESHOLD,
            groups,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stretch_lo < 0.0 && self.stretch_hi > 1.0) {
            return Err(VlpError::Config(format!(
                "stretch interval ({}, {}) must satisfy l < 0 < 1 < r",
                self.stretch_lo, self.stretch_hi
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(VlpError::Config(format!(
                "gate threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        if self
            .groups
            .iter()
            .flat_map(|g| &g.logits)
            .any(|v| !v.is_finite())
        {
            return Err(VlpError::Config("non-finite gate logit".into()));
        }
        Ok(())
    }

    /// Checks that every prunable unit of `model` has exactly one gate.
    pub fn check_bound(&self, model: &VlmModel) -> Result<()> {
        let fresh = GateSet::for_model(model, 0.0);
        let want: Vec<_> = fresh
            .groups
            .iter()
            .map(|g| (g.key(), g.logits.len()))
            .collect();
        let have: Vec<_> = self
            .groups
            .iter()
            .map(|g| (g.key(), g.logits.len()))
            .collect();
        if want != have {
            return Err(VlpError::InvalidArgument(
                "gate set does not match the model's prunable units".into(),
            ));
        }
        Ok(())
    }

    pub fn num_units(&self) -> usize {
        self.groups.iter().map(|g| g.logits.len()).sum()
    }

    /// `ln(−l/r)`, the shift between a gate logit and its log-odds of being non-zero.
    pub fn log_ratio(&self) -> f64 {
        (-self.stretch_lo / self.stretch_hi).ln()
    }

    /// Registers every group's logits as trainable graph parameters.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.groups
            .iter()
            .map(|grp| g.param(grp.param_name(), Tensor::vector(grp.logits.clone())))
            .collect()
    }

    /// Stretched, clamped gate from a pre-activation `x`: `clamp01(sigmoid(x)·(r−l) + l)`.
    fn stretch(&self, g: &mut Graph, x: Var) -> Var {
        let s = g.sigmoid(x);
        let s = g.scale(s, self.stretch_hi - self.stretch_lo);
        let s = g.add_scalar(s, self.stretch_lo);
        g.clamp01(s)
    }

    /// Draws `z = clamp01(sigmoid(ln u − ln(1−u) + logit)·(r−l) + l)` for every unit.
    /// Gradients reach the logits through `s` wherever the clamp is inactive.
    pub fn sample(&self, g: &mut Graph, bound: &[Var], rng: &mut Rng) -> Result<GateVars> {
        let mut out = GateVars::new();
        for (grp, &logit) in self.groups.iter().zip(bound) {
            let u = uniform(rng, &[grp.logits.len()]);
            let noise = u.map(|u| u.ln() - (1.0 - u).ln());
            let noise = g.constant(noise);
            let x = g.add(logit, noise)?;
            out.insert(grp.key(), self.stretch(g, x));
        }
        Ok(out)
    }

    /// Inference gates: `clamp01(sigmoid(logit)·(r−l) + l)`, zeroed where below the threshold.
    pub fn deterministic(&self) -> Vec<Vec<f64>> {
        self.groups
            .iter()
            .map(|grp| {
                grp.logits
                    .iter()
                    .map(|&a| self.deterministic_one(a))
                    .collect()
            })
            .collect()
    }

    pub fn deterministic_one(&self, logit: f64) -> f64 {
        let z = (logistic(logit) * (self.stretch_hi - self.stretch_lo) + self.stretch_lo)
            .clamp(0.0, 1.0);
        if z < self.threshold {
            0.0
        } else {
            z
        }
    }

    pub fn deterministic_map(&self) -> GateValues {
        self.groups
            .iter()
            .zip(self.deterministic())
            .map(|(grp, z)| (grp.key(), z))
            .collect()
    }

    /// Deterministic gates as graph constants, ready for a masked forward pass.
    pub fn deterministic_vars(&self, g: &mut Graph) -> GateVars {
        self.groups
            .iter()
            .zip(self.deterministic())
            .map(|(grp, z)| (grp.key(), g.constant(Tensor::vector(z))))
            .collect()
    }

    /// `P(z > 0)` per unit, `sigmoid(logit − ln(−l/r))`.
    pub fn open_probabilities(&self) -> Vec<Vec<f64>> {
        let shift = self.log_ratio();
        self.groups
            .iter()
            .map(|grp| grp.logits.iter().map(|&a| logistic(a - shift)).collect())
            .collect()
    }

    /// Closed-form expected L0 norm, `Σ_j sigmoid(logit_j − ln(−l/r))`.
    pub fn expected_l0(&self, g: &mut Graph, bound: &[Var]) -> Result<Var> {
        let shift = self.log_ratio();
        let mut total: Option<Var> = None;
        for &logit in bound {
            let x = g.add_scalar(logit, -shift);
            let p = g.sigmoid(x);
            let s = g.sum(p);
            total = Some(match total {
                Some(t) => g.add(t, s)?,
                None => s,
            });
        }
        Ok(total.unwrap_or_else(|| g.constant(Tensor::scalar(0.0))))
    }

    pub fn expected_l0_value(&self) -> f64 {
        self.open_probabilities().iter().flatten().sum()
    }

    fn member(&self, scope: Option<&[Encoder]>, grp: &UnitGroup) -> bool {
        scope.is_none_or(|s| s.contains(&grp.encoder))
    }

    fn scope_weight(&self, scope: Option<&[Encoder]>) -> Result<f64> {
        let total: f64 = self
            .groups
            .iter()
            .filter(|grp| self.member(scope, grp))
            .map(|grp| (grp.params_per_unit * grp.logits.len()) as f64)
            .sum();
        if total <= 0.0 {
            return Err(VlpError::InvalidArgument(
                "model size over zero gated parameters".into(),
            ));
        }
        Ok(total)
    }

    /// Expected retained fraction of gated parameters,
    /// `Σ_j w_j·sigmoid(logit_j − ln(−l/r)) / Σ_j w_j`, over the encoders in `scope`
    /// (all encoders when `None`).
    pub fn model_size(
        &self,
        g: &mut Graph,
        bound: &[Var],
        scope: Option<&[Encoder]>,
    ) -> Result<Var> {
        let total = self.scope_weight(scope)?;
        let shift = self.log_ratio();
        let mut acc: Option<Var> = None;
        for (grp, &logit) in self.groups.iter().zip(bound) {
            if !self.member(scope, grp) {
                continue;
            }
            let x = g.add_scalar(logit, -shift);
            let p = g.sigmoid(x);
            let s = g.sum(p);
            let s = g.scale(s, grp.params_per_unit as f64 / total);
            acc = Some(match acc {
                Some(a) => g.add(a, s)?,
                None => s,
            });
        }
        Ok(acc.expect("scope weight is positive, so some group is in scope"))
    }

    pub fn model_size_value(&self, scope: Option<&[Encoder]>) -> Result<f64> {
        let total = self.scope_weight(scope)?;
        let probs = self.open_probabilities();
        Ok(self
            .groups
            .iter()
            .zip(&probs)
            .filter(|(grp, _)| self.member(scope, grp))
            .map(|(grp, p)| grp.params_per_unit as f64 * p.iter().sum::<f64>())
            .sum::<f64>()
            / total)
    }

    /// Retained fraction of gated parameters per encoder under deterministic gates.
    /// An encoder without gates reports 1.
    pub fn modal_density_report(&self) -> DensityReport {
        let det = self.deterministic();
        let mut kept = [0.0f64; 3];
        let mut total = [0.0f64; 3];
        for (grp, z) in self.groups.iter().zip(&det) {
            let i = grp.encoder.index();
            total[i] += (grp.params_per_unit * z.len()) as f64;
            kept[i] += (grp.params_per_unit * z.iter().filter(|&&v| v > 0.0).count()) as f64;
        }
        let frac = |i: usize| {
            if total[i] > 0.0 {
                kept[i] / total[i]
            } else {
                1.0
            }
        };
        DensityReport {
            vision: frac(0),
            text: frac(1),
            fusion: frac(2),
        }
    }

    /// Retained fraction of all gated parameters under deterministic gates.
    pub fn retained_fraction(&self) -> f64 {
        let det = self.deterministic();
        let (mut kept, mut total) = (0.0, 0.0);
        for (grp, z) in self.groups.iter().zip(&det) {
            total += (grp.params_per_unit * z.len()) as f64;
            kept += (grp.params_per_unit * z.iter().filter(|&&v| v > 0.0).count()) as f64;
        }
        if total > 0.0 {
            kept / total
        } else {
            1.0
        }
    }

    /// Copies trained logits back from a name → tensor map (e.g. an optimizer's state).
    pub fn set_logits(&mut self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for grp in &mut self.groups {
            let name = grp.param_name();
            let t = values
                .get(&name)
                .ok_or_else(|| VlpError::InvalidArgument(format!("missing gate logits {name}")))?;
            if t.numel() != grp.logits.len() {
                return Err(VlpError::InvalidArgument(format!(
                    "gate logits {name} have the wrong length"
                )));
            }
            grp.logits.copy_from_slice(t.data());
        }
        Ok(())
    }

    /// Gate logits keyed by graph parameter name.
    pub fn logit_tensors(&self) -> BTreeMap<String, Tensor> {
        self.groups
            .iter()
            .map(|grp| (grp.param_name(), Tensor::vector(grp.logits.clone())))
            .collect()
    }

    pub fn group(&self, encoder: Encoder, layer: usize, kind: UnitKind) -> Option<&UnitGroup> {
        self.groups
            .iter()
            .find(|g| g.key() == (encoder, layer, kind))
    }

    pub fn group_mut(
        &mut self,
        encoder: Encoder,
        layer: usize,
        kind: UnitKind,
    ) -> Option<&mut UnitGroup> {
        self.groups
            .iter_mut()
            .find(|g| g.key() == (encoder, layer, kind))
    }

    /// Sets every logit of one encoder.
    pub fn fill_encoder(&mut self, encoder: Encoder, logit: f64) {
        for grp in self.groups.iter_mut().filter(|g| g.encoder == encoder) {
            grp.logits.iter_mut().for_each(|v| *v = logit);
        }
    }
}
