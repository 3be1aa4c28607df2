use numcore::{Graph, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VlpError};
use crate::trimodel::{Encoder, EncoderTrace, ForwardTrace, Logits, VlmConfig};

/// Student layer → teacher layer pairs, per encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMap {
    pub pairs: [Vec<(usize, usize)>; 3],
}

impl LayerMap {
    /// Student layer `j` (1-indexed) learns from teacher layer `2j`; 0-based that is `j → 2j + 1`.
    /// Equal depths map each layer to itself.
    pub fn new(student: &VlmConfig, teacher: &VlmConfig) -> Result<Self> {
        let mut pairs: [Vec<(usize, usize)>; 3] = Default::default();
        for e in Encoder::ALL {
            let s = student.encoder(e).num_layers;
            let t = teacher.encoder(e).num_layers;
            pairs[e.index()] = if t == 2 * s {
                (0..s).map(|j| (j, 2 * j + 1)).collect()
            } else if t == s {
                (0..s).map(|j| (j, j)).collect()
            } else {
                return Err(VlpError::Config(format!(
                    "{e}: no layer map from a {t}-layer teacher to a {s}-layer student"
                )));
            };
        }
        Ok(Self { pairs })
    }

    pub fn encoder(&self, e: Encoder) -> &[(usize, usize)] {
        &self.pairs[e.index()]
    }
}

/// Mean squared difference over all elements of two equally shaped nodes.
pub fn mse(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

fn sum_all(g: &mut Graph, terms: Vec<Var>) -> Result<Var> {
    let mut it = terms.into_iter();
    let Some(mut acc) = it.next() else {
        return Ok(g.constant(numcore::Tensor::scalar(0.0)));
    };
    for t in it {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

fn paired(
    g: &mut Graph,
    e: Encoder,
    what: &str,
    s: &[Var],
    t: &[Var],
    map: &[(usize, usize)],
    out: &mut Vec<Var>,
) -> Result<()> {
    for &(j, tj) in map {
        let (Some(&a), Some(&b)) = (s.get(j), t.get(tj)) else {
            return Err(VlpError::InvalidArgument(format!(
                "{e}: trace lacks {what} for student layer {j} or teacher layer {tj}"
            )));
        };
        if g.shape(a) != g.shape(b) {
            return Err(VlpError::Shape {
                encoder: e.name().into(),
                layer: j.to_string(),
                detail: format!("{what} shapes {:?} vs teacher {:?}", g.shape(a), g.shape(b)),
            });
        }
        out.push(mse(g, a, b)?);
    }
    Ok(())
}

/// Attention distillation, `(1/h)·Σ_j Σ_i MSE(A^S_{i,j}, A^T_{i,map(j)})` over every encoder.
///
/// With equal head counts, averaging each head's MSE and dividing by `h` is the mean over the
/// whole `[rows·h, q, k]` stack, which is what is computed. Fusion layers add the same term for
/// their cross-attention matrices when `include_cross` is set. Layers are summed, not averaged.
pub fn attn_loss(
    g: &mut Graph,
    student: &ForwardTrace,
    teacher: &ForwardTrace,
    map: &LayerMap,
    include_cross: bool,
) -> Result<Var> {
    let mut terms = Vec::new();
    for e in Encoder::ALL {
        let (s, t): (&EncoderTrace, &EncoderTrace) = (student.encoder(e), teacher.encoder(e));
        paired(
            g,
            e,
            "attention",
            &s.attn,
            &t.attn,
            map.encoder(e),
            &mut terms,
        )?;
        if include_cross && !s.cross_attn.is_empty() {
            paired(
                g,
                e,
                "cross-attention",
                &s.cross_attn,
                &t.cross_attn,
                map.encoder(e),
                &mut terms,
            )?;
        }
    }
    sum_all(g, terms)
}

/// Hidden-state distillation, `Σ_i MSE(H^S_i, H^T_{map(i)})` summed over the three encoders.
/// `projection` (`[d_S, d_T]`) maps student states to teacher width when the two differ.
pub fn hidden_loss(
    g: &mut Graph,
    student: &ForwardTrace,
    teacher: &ForwardTrace,
    map: &LayerMap,
    projection: Option<Var>,
) -> Result<Var> {
    let mut terms = Vec::new();
    for e in Encoder::ALL {
        let s = &student.encoder(e).hidden;
        let projected: Vec<Var> = match projection {
            Some(w) => s
                .iter()
                .map(|&h| g.matmul(h, w))
                .collect::<std::result::Result<_, _>>()?,
            None => s.clone(),
        };
        paired(
            g,
            e,
            "hidden states",
            &projected,
            &teacher.encoder(e).hidden,
            map.encoder(e),
            &mut terms,
        )?;
    }
    sum_all(g, terms)
}

/// `KL(softmax(t/T) ‖ softmax(s/T))`, averaged over rows.
pub fn logits_loss(g: &mut Graph, student: Var, teacher: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(VlpError::InvalidArgument(format!(
            "temperature {temperature} must be positive"
        )));
    }
    if g.shape(student) != g.shape(teacher) {
        return Err(VlpError::InvalidArgument(format!(
            "logit shapes {:?} vs teacher {:?}",
            g.shape(student),
            g.shape(teacher)
        )));
    }
    let rows = g.value(student).rows() as f64;
    let s = g.scale(student, 1.0 / temperature);
    let t = g.scale(teacher, 1.0 / temperature);
    let log_ps = g.log_softmax_rows(s)?;
    let log_pt = g.log_softmax_rows(t)?;
    let pt = g.exp(log_pt);
    let diff = g.sub(log_pt, log_ps)?;
    let kl = g.mul(pt, diff)?;
    let total = g.sum(kl);
    Ok(g.scale(total, 1.0 / rows))
}

/// Logit distillation summed over every task head both traces produced. The contrastive
/// similarity matrix contributes in both directions.
pub fn logits_kd(
    g: &mut Graph,
    student: &Logits,
    teacher: &Logits,
    temperature: f64,
) -> Result<Var> {
    let mut terms = Vec::new();
    if let (Some(s), Some(t)) = (student.itc_t2i, teacher.itc_t2i) {
        terms.push(logits_loss(g, s, t, temperature)?);
        let (st, tt) = (g.transpose(s)?, g.transpose(t)?);
        terms.push(logits_loss(g, st, tt, temperature)?);
    }
    for (s, t) in [
        (student.itm, teacher.itm),
        (student.mlm, teacher.mlm),
        (student.cls, teacher.cls),
    ] {
        match (s, t) {
            (Some(s), Some(t)) => terms.push(logits_loss(g, s, t, temperature)?),
            (None, None) => {}
            _ => {
                return Err(VlpError::InvalidArgument(
                    "student and teacher computed different task heads".into(),
                ))
            }
        }
    }
    sum_all(g, terms)
}
