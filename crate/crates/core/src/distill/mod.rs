//! Distillation losses (attention maps, hidden states, logits), the toy pre-training losses,
//! and their combination into the pre-training and fine-tuning objectives.

mod kd;

use numcore::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use kd::{attn_loss, hidden_loss, logits_kd, logits_loss, mse, LayerMap};

use crate::error::{Result, VlpError};
use crate::trimodel::ForwardTrace;

/// Weights of the combined objectives: `α`, `β`, `γ` inside the KD term and the mix `λ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillWeights {
    pub w_attn: f64,
    pub w_hid: f64,
    pub w_logits: f64,
    pub mix: f64,
}

impl Default for DistillWeights {
    fn default() -> Self {
        Self {
            w_attn: 1.0,
            w_hid: 1.0,
            w_logits: 1.0,
            mix: 0.5,
        }
    }
}

impl DistillWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mix) {
            return Err(VlpError::Config(format!("mix {} outside [0, 1]", self.mix)));
        }
        if [self.w_attn, self.w_hid, self.w_logits]
            .iter()
            .any(|w| !(*w >= 0.0) || !w.is_finite())
        {
            return Err(VlpError::Config(
                "KD weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Rescales each KD part to order one: its weight becomes `1 / value` on the first batch
    /// (left at 1 when the part is zero there). Parts whose weight is already zero stay off.
    pub fn calibrated(&self, first: &KdValues) -> Self {
        let scale = |w: f64, v: f64| {
            if w == 0.0 {
                0.0
            } else if v > 0.0 {
                w / v
            } else {
                w
            }
        };
        Self {
            w_attn: scale(self.w_attn, first.attn),
            w_hid: scale(self.w_hid, first.hid),
            w_logits: scale(self.w_logits, first.logits),
            mix: self.mix,
        }
    }
}

/// Which distillation terms are computed, and how.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdOptions {
    pub temperature: f64,
    /// Whether fusion cross-attention maps join the attention loss.
    pub include_cross_attn: bool,
}

impl Default for KdOptions {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            include_cross_attn: true,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct KdParts {
    pub attn: Var,
    pub hid: Var,
    pub logits: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KdValues {
    pub attn: f64,
    pub hid: f64,
    pub logits: f64,
}

impl KdParts {
    pub fn values(&self, g: &Graph) -> KdValues {
        KdValues {
            attn: g.value(self.attn).item(),
            hid: g.value(self.hid).item(),
            logits: g.value(self.logits).item(),
        }
    }
}

impl KdValues {
    pub fn weighted(&self, w: &DistillWeights) -> f64 {
        w.w_attn * self.attn + w.w_hid * self.hid + w.w_logits * self.logits
    }
}

pub fn kd_parts(
    g: &mut Graph,
    student: &ForwardTrace,
    teacher: &ForwardTrace,
    map: &LayerMap,
    opts: &KdOptions,
) -> Result<KdParts> {
    Ok(KdParts {
        attn: attn_loss(g, student, teacher, map, opts.include_cross_attn)?,
        hid: hidden_loss(g, student, teacher, map, None)?,
        logits: logits_kd(g, &student.logits, &teacher.logits, opts.temperature)?,
    })
}

/// `L_KD = α·L_attn + β·L_hid + γ·L_logits`.
pub fn kd_loss(g: &mut Graph, parts: &KdParts, w: &DistillWeights) -> Result<Var> {
    let a = g.scale(parts.attn, w.w_attn);
    let h = g.scale(parts.hid, w.w_hid);
    let l = g.scale(parts.logits, w.w_logits);
    let ah = g.add(a, h)?;
    Ok(g.add(ah, l)?)
}

/// `λ·L_VLP + (1 − λ)·(α·L_attn + β·L_hid + γ·L_logits)`.
pub fn pretrain_loss(g: &mut Graph, vlp: Var, parts: &KdParts, w: &DistillWeights) -> Result<Var> {
    let kd = kd_loss(g, parts, w)?;
    mix(g, vlp, kd, w.mix)
}

pub fn pretrain_loss_value(vlp: f64, parts: &KdValues, w: &DistillWeights) -> f64 {
    w.mix * vlp + (1.0 - w.mix) * parts.weighted(w)
}

/// `λ·L_VL + (1 − λ)·L_KD + L_Lgr`; the Lagrangian term is not weighted.
pub fn finetune_loss(
    g: &mut Graph,
    task: Var,
    kd: Var,
    lagrangian: Var,
    mix_weight: f64,
) -> Result<Var> {
    let m = mix(g, task, kd, mix_weight)?;
    Ok(g.add(m, lagrangian)?)
}

pub fn finetune_loss_value(task: f64, kd: f64, lagrangian: f64, mix_weight: f64) -> f64 {
    mix_weight * task + (1.0 - mix_weight) * kd + lagrangian
}

fn mix(g: &mut Graph, a: Var, b: Var, lambda: f64) -> Result<Var> {
    let a = g.scale(a, lambda);
    let b = g.scale(b, 1.0 - lambda);
    Ok(g.add(a, b)?)
}

/// Mean cross-entropy of row-wise logits against class labels.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = g.log_softmax_rows(logits)?;
    let picked = g.pick(lp, labels)?;
    let m = g.mean(picked);
    Ok(g.neg(m))
}

/// Supervision for the toy pre-training losses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VlpTargets {
    /// 1 for a matched pair, 0 otherwise; one per fused pair.
    pub itm_labels: Vec<usize>,
    /// Original token at each masked position, aligned with the requested MLM positions.
    pub mlm_targets: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct VlpParts {
    pub itc: Var,
    pub itm: Var,
    pub mlm: Var,
}

impl VlpParts {
    pub fn total(&self, g: &mut Graph) -> Result<Var> {
        let a = g.add(self.itc, self.itm)?;
        Ok(g.add(a, self.mlm)?)
    }
}

/// Contrastive, matching and masked-token losses.
///
/// * itc: symmetric cross-entropy over the scaled in-batch similarity matrix, positives on
///   the diagonal.
/// * itm: two-way cross-entropy on the fusion pooled output, i.e. binary cross-entropy on the
///   logit difference.
/// * mlm: cross-entropy at the masked positions; zero when nothing is masked.
pub fn vlp_losses(g: &mut Graph, trace: &ForwardTrace, targets: &VlpTargets) -> Result<VlpParts> {
    let sim = trace
        .logits
        .itc_t2i
        .ok_or_else(|| VlpError::InvalidArgument("trace has no contrastive similarities".into()))?;
    let b = g.value(sim).rows();
    if b < 2 {
        return Err(VlpError::InvalidArgument(format!(
            "contrastive loss needs a batch of at least 2, got {b}"
        )));
    }
    let diag: Vec<usize> = (0..b).collect();
    let t2i = cross_entropy(g, sim, &diag)?;
    let i2t_logits = g.transpose(sim)?;
    let i2t = cross_entropy(g, i2t_logits, &diag)?;
    let both = g.add(t2i, i2t)?;
    let itc = g.scale(both, 0.5);

    let itm = match trace.logits.itm {
        Some(l) => cross_entropy(g, l, &targets.itm_labels)?,
        None => g.constant(Tensor::scalar(0.0)),
    };
    let mlm = match trace.logits.mlm {
        Some(l) if !targets.mlm_targets.is_empty() => cross_entropy(g, l, &targets.mlm_targets)?,
        _ => g.constant(Tensor::scalar(0.0)),
    };
    Ok(VlpParts { itc, itm, mlm })
}
