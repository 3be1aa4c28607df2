use numcore::Tensor;

use super::config::{Encoder, LayerShape};
use super::model::{param_name, VlmModel};
use super::UnitKind;
use crate::error::{Result, VlpError};
use crate::l0prune::GateSet;

fn scale_rows(t: &Tensor, row_scale: &[f64]) -> Tensor {
    let cols = t.cols();
    let mut out = t.clone();
    for (r, &s) in row_scale.iter().enumerate() {
        for v in &mut out.data_mut()[r * cols..(r + 1) * cols] {
            *v *= s;
        }
    }
    out
}

/// Columns (and row indices) `[u·width, (u+1)·width)` for each kept unit `u`.
fn expand(kept: &[usize], width: usize) -> Vec<usize> {
    kept.iter()
        .flat_map(|&u| u * width..(u + 1) * width)
        .collect()
}

/// Slices one attention sublayer down to the kept heads and folds their gate values into the
/// output projection.
fn slice_attention(
    model: &mut VlmModel,
    scope: &str,
    slot: &str,
    sub: &str,
    kept: &[usize],
    z: &[f64],
    dk: usize,
) {
    let cols = expand(kept, dk);
    for m in ["q_w", "k_w", "v_w"] {
        let name = param_name(scope, slot, sub, m);
        let t = model.params[&name].select_cols(&cols);
        model.params.insert(name, t);
    }
    for m in ["q_b", "k_b", "v_b"] {
        let name = param_name(scope, slot, sub, m);
        let t = model.params[&name].select_cols(&cols);
        model.params.insert(name, t);
    }
    let scale: Vec<f64> = kept
        .iter()
        .flat_map(|&u| std::iter::repeat_n(z[u], dk))
        .collect();
    let name = param_name(scope, slot, sub, "o_w");
    let t = scale_rows(&model.params[&name].select_rows(&cols), &scale);
    model.params.insert(name, t);
}

fn slice_ffn(model: &mut VlmModel, scope: &str, slot: &str, kept: &[usize], z: &[f64]) {
    for m in ["w1", "b1"] {
        let name = param_name(scope, slot, "ffn", m);
        let t = model.params[&name].select_cols(kept);
        model.params.insert(name, t);
    }
    let scale: Vec<f64> = kept.iter().map(|&u| z[u]).collect();
    let name = param_name(scope, slot, "ffn", "w2");
    let t = scale_rows(&model.params[&name].select_rows(kept), &scale);
    model.params.insert(name, t);
}

/// Physically deletes every head and FFN neuron whose deterministic gate is below `threshold`.
///
/// Retained units keep their gate value folded into the output-projection rows they feed, so
/// the sliced model computes what the gate-masked model computes. A layer left with no
/// self-attention heads, no cross-attention heads, or no FFN neurons is rejected.
pub fn structurally_remove(model: &VlmModel, gates: &GateSet, threshold: f64) -> Result<VlmModel> {
    gates.check_bound(model)?;
    let mut gates = gates.clone();
    gates.threshold = threshold;
    let det = gates.deterministic();
    let mut out = model.clone();
    for e in Encoder::ALL {
        let enc = model.config.encoder(e);
        let dk = enc.head_dim();
        let mut shapes = Vec::with_capacity(enc.num_layers);
        for layer in 0..enc.num_layers {
            let mut shape = enc.layer_shape(layer);
            let slot = layer.to_string();
            for (kind, sub) in [
                (UnitKind::Head, "attn"),
                (UnitKind::CrossHead, "xattn"),
                (UnitKind::FfnNeuron, "ffn"),
            ] {
                let Some(i) = gates
                    .groups
                    .iter()
                    .position(|g| g.key() == (e, layer, kind))
                else {
                    continue;
                };
                let z = &det[i];
                let kept: Vec<usize> = (0..z.len()).filter(|&u| z[u] > 0.0).collect();
                if kept.is_empty() {
                    return Err(VlpError::DegenerateLayer {
                        layer: format!("{e}.{layer}.{sub}"),
                        what: kind.name(),
                    });
                }
                match kind {
                    UnitKind::Head => {
                        slice_attention(&mut out, e.name(), &slot, sub, &kept, z, dk);
                        shape.heads = kept.len();
                    }
                    UnitKind::CrossHead => {
                        slice_attention(&mut out, e.name(), &slot, sub, &kept, z, dk);
                        shape.cross_heads = kept.len();
                    }
                    UnitKind::FfnNeuron => {
                        slice_ffn(&mut out, e.name(), &slot, &kept, z);
                        shape.ffn = kept.len();
                    }
                }
            }
            shapes.push(shape);
        }
        let default = (0..enc.num_layers).all(|l| {
            shapes[l]
                == LayerShape {
                    heads: enc.num_heads,
                    cross_heads: if enc.is_cross_modal { enc.num_heads } else { 0 },
                    ffn: enc.ffn_dim,
                }
        });
        out.config.encoder_mut(e).layer_shapes = if default { Vec::new() } else { shapes };
    }
    VlmModel::from_parts(out.config, out.params)
}
