//! Tri-encoder vision-language transformer: a vision encoder over patch embeddings, a text
//! encoder over token embeddings, and a fusion encoder that self-attends over text states and
//! cross-attends into the final vision states.

mod config;
mod forward;
mod model;
mod slice;

use serde::{Deserialize, Serialize};

pub use config::{Encoder, EncoderConfig, LayerShape, Preset, VlmConfig};
pub use forward::{
    attention, encode, forward, fuse, gate_constants, reencode_text, Encoded, EncoderTrace,
    ForwardTrace, GateValues, GateVars, HeadRequest, ItcOutput, Logits, Mode, ModelInput,
};
pub use model::{
    param_name, param_specs, shrink_from_teacher, unit_param_count, BoundParams, Init, ParamSpec,
    VlmModel,
};
pub use slice::structurally_remove;

/// Granularity of a prunable unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    /// A self-attention head.
    Head,
    /// A cross-attention head of a fusion layer, gated separately from its self-attention heads.
    CrossHead,
    /// One intermediate neuron of a feed-forward block.
    FfnNeuron,
}

impl UnitKind {
    pub const ALL: [UnitKind; 3] = [UnitKind::Head, UnitKind::CrossHead, UnitKind::FfnNeuron];

    pub fn name(self) -> &'static str {
        match self {
            UnitKind::Head => "head",
            UnitKind::CrossHead => "cross_head",
            UnitKind::FfnNeuron => "ffn_neuron",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}
