use std::collections::BTreeMap;

use numcore::{Graph, Rng, Tensor, Var};

use super::config::{Encoder, VlmConfig};
use super::UnitKind;
use crate::error::{Result, VlpError};

/// Canonical parameter name `{scope}.{slot}.{sublayer}.{matrix}`.
///
/// `scope` is `vision`, `text`, `fusion` or `head`. For encoder layers `slot` is the 0-based
/// layer index; otherwise it is `embed`, `final`, or the task head (`itc`, `itm`, `mlm`, `cls`).
pub fn param_name(
    scope: &str,
    slot: impl std::fmt::Display,
    sublayer: &str,
    matrix: &str,
) -> String {
    format!("{scope}.{slot}.{sublayer}.{matrix}")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation.
    Normal(f64),
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn linear(
    out: &mut Vec<ParamSpec>,
    scope: &str,
    slot: &str,
    sub: &str,
    w: &str,
    b: &str,
    fan_in: usize,
    fan_out: usize,
) {
    out.push(ParamSpec {
        name: param_name(scope, slot, sub, w),
        shape: vec![fan_in, fan_out],
        init: Init::Normal(1.0 / (fan_in.max(1) as f64).sqrt()),
    });
    out.push(ParamSpec {
        name: param_name(scope, slot, sub, b),
        shape: vec![fan_out],
        init: Init::Zeros,
    });
}

fn norm(out: &mut Vec<ParamSpec>, scope: &str, slot: &str, sub: &str, d: usize) {
    out.push(ParamSpec {
        name: param_name(scope, slot, sub, "gamma"),
        shape: vec![d],
        init: Init::Ones,
    });
    out.push(ParamSpec {
        name: param_name(scope, slot, sub, "beta"),
        shape: vec![d],
        init: Init::Zeros,
    });
}

fn attention_specs(
    out: &mut Vec<ParamSpec>,
    scope: &str,
    slot: &str,
    sub: &str,
    d: usize,
    width: usize,
) {
    for (w, b) in [("q_w", "q_b"), ("k_w", "k_b"), ("v_w", "v_b")] {
        linear(out, scope, slot, sub, w, b, d, width);
    }
    linear(out, scope, slot, sub, "o_w", "o_b", width, d);
}

/// Every parameter of a model with this config, in canonical order.
pub fn param_specs(config: &VlmConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let d = config.model_dim();
    out.push(ParamSpec {
        name: param_name("vision", "embed", "patch", "w"),
        shape: vec![config.patch_dim(), d],
        init: Init::Normal(1.0 / (config.patch_dim() as f64).sqrt()),
    });
    out.push(ParamSpec {
        name: param_name("vision", "embed", "patch", "b"),
        shape: vec![d],
        init: Init::Zeros,
    });
    out.push(ParamSpec {
        name: param_name("vision", "embed", "pos", "table"),
        shape: vec![config.num_patches(), d],
        init: Init::Normal(0.1),
    });
    out.push(ParamSpec {
        name: param_name("text", "embed", "token", "table"),
        shape: vec![config.vocab_size, d],
        init: Init::Normal(1.0),
    });
    out.push(ParamSpec {
        name: param_name("text", "embed", "pos", "table"),
        shape: vec![config.max_text_len, d],
        init: Init::Normal(0.1),
    });
    for e in Encoder::ALL {
        let enc = config.encoder(e);
        let dk = enc.head_dim();
        for layer in 0..enc.num_layers {
            let shape = enc.layer_shape(layer);
            let slot = layer.to_string();
            norm(&mut out, e.name(), &slot, "ln1", d);
            attention_specs(&mut out, e.name(), &slot, "attn", d, shape.heads * dk);
            if enc.is_cross_modal {
                norm(&mut out, e.name(), &slot, "ln_x", d);
                attention_specs(
                    &mut out,
                    e.name(),
                    &slot,
                    "xattn",
                    d,
                    shape.cross_heads * dk,
                );
            }
            norm(&mut out, e.name(), &slot, "ln2", d);
            linear(&mut out, e.name(), &slot, "ffn", "w1", "b1", d, shape.ffn);
            linear(&mut out, e.name(), &slot, "ffn", "w2", "b2", shape.ffn, d);
        }
        norm(&mut out, e.name(), "final", "ln", d);
    }
    let e = config.embed_dim;
    out.push(ParamSpec {
        name: param_name("head", "itc", "proj", "vision_w"),
        shape: vec![d, e],
        init: Init::Normal(1.0 / (d as f64).sqrt()),
    });
    out.push(ParamSpec {
        name: param_name("head", "itc", "proj", "text_w"),
        shape: vec![d, e],
        init: Init::Normal(1.0 / (d as f64).sqrt()),
    });
    out.push(ParamSpec {
        name: param_name("head", "itc", "temp", "log_scale"),
        shape: vec![1],
        init: Init::Const((1.0f64 / 0.07).ln()),
    });
    linear(&mut out, "head", "itm", "out", "w", "b", d, 2);
    linear(
        &mut out,
        "head",
        "mlm",
        "out",
        "w",
        "b",
        d,
        config.vocab_size,
    );
    linear(
        &mut out,
        "head",
        "cls",
        "out",
        "w",
        "b",
        d,
        config.num_classes,
    );
    out
}

/// Parameters governed by one prunable unit (w_j).
pub fn unit_param_count(config: &VlmConfig, encoder: Encoder, kind: UnitKind) -> usize {
    let d = config.model_dim();
    let dk = config.encoder(encoder).head_dim();
    match kind {
        // q, k, v columns with their biases plus the matching output-projection rows
        UnitKind::Head | UnitKind::CrossHead => 4 * d * dk + 3 * dk,
        // first-layer column and bias plus second-layer row
        UnitKind::FfnNeuron => 2 * d + 1,
    }
}

/// The tri-encoder vision-language model: a config plus a flat name → tensor map.
#[derive(Clone, Debug, PartialEq)]
pub struct VlmModel {
    pub config: VlmConfig,
    pub params: BTreeMap<String, Tensor>,
}

/// Graph handles for every parameter of a model, keyed by canonical name.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter {name} not bound"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl VlmModel {
    pub fn init(config: VlmConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let params = param_specs(&config)
            .into_iter()
            .map(|spec| {
                let t = match spec.init {
                    Init::Zeros => Tensor::zeros(&spec.shape),
                    Init::Ones => Tensor::ones(&spec.shape),
                    Init::Const(c) => Tensor::full(&spec.shape, c),
                    Init::Normal(std) => rng.normal_tensor(&spec.shape, std),
                };
                (spec.name, t)
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Checks that the parameter map matches the config exactly.
    pub fn from_parts(config: VlmConfig, params: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(VlpError::Config(format!(
                "config defines {} parameters, got {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            match params.get(&spec.name) {
                None => return Err(VlpError::Config(format!("missing parameter {}", spec.name))),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(VlpError::Config(format!(
                        "{} has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(Self { config, params })
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    /// Registers all parameters on `g`: as named trainable leaves, or as constants for a
    /// frozen model such as a teacher.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    g.param(k.clone(), t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Parameter count of everything under `{encoder}.` (layers, embeddings, final norm).
    pub fn encoder_params(&self, encoder: Encoder) -> usize {
        let prefix = format!("{}.", encoder.name());
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(&prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Parameters that belong to prunable units, counted from tensor shapes.
    pub fn gated_params(&self, encoder: Encoder) -> usize {
        let enc = self.config.encoder(encoder);
        let d = enc.model_dim;
        let dk = enc.head_dim();
        (0..enc.num_layers)
            .map(|l| {
                let slot = l.to_string();
                let width = |sub: &str| {
                    self.param(&param_name(encoder.name(), &slot, sub, "q_w"))
                        .shape()[1]
                };
                let heads = width("attn") / dk;
                let cross = if enc.is_cross_modal {
                    width("xattn") / dk
                } else {
                    0
                };
                let ffn = self
                    .param(&param_name(encoder.name(), &slot, "ffn", "w1"))
                    .shape()[1];
                (heads + cross) * (4 * d * dk + 3 * dk) + ffn * (2 * d + 1)
            })
            .sum()
    }

    pub fn total_gated_params(&self) -> usize {
        Encoder::ALL.iter().map(|&e| self.gated_params(e)).sum()
    }

    /// Parameter bytes in canonical order, for bit-exact comparisons.
    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (k, t) in &self.params {
            out.extend_from_slice(k.as_bytes());
            out.extend(t.to_le_bytes());
        }
        out
    }
}

/// Builds a half-depth student by keeping the teacher's even-numbered layers (1-indexed
/// 2, 4, 6, …; 0-based 1, 3, 5, …). Embeddings, final norms and task heads are copied.
pub fn shrink_from_teacher(teacher: &VlmModel) -> Result<VlmModel> {
    let mut config = teacher.config.clone();
    for e in Encoder::ALL {
        let enc = config.encoder_mut(e);
        if !enc.num_layers.is_multiple_of(2) || enc.num_layers == 0 {
            return Err(VlpError::Config(format!(
                "{e}: teacher depth {} cannot be halved",
                enc.num_layers
            )));
        }
        if enc.is_pruned() {
            return Err(VlpError::Config(format!(
                "{e}: cannot shrink a pruned teacher"
            )));
        }
        enc.num_layers /= 2;
    }
    let mut params = BTreeMap::new();
    for (name, t) in &teacher.params {
        let mut parts = name.splitn(3, '.');
        let (scope, slot, rest) = (
            parts.next().unwrap(),
            parts.next().unwrap(),
            parts.next().unwrap(),
        );
        match slot.parse::<usize>() {
            Ok(layer) if layer % 2 == 1 => {
                params.insert(format!("{scope}.{}.{rest}", layer / 2), t.clone());
            }
            Ok(_) => {}
            Err(_) => {
                params.insert(name.clone(), t.clone());
            }
        }
    }
    VlmModel::from_parts(config, params)
}
