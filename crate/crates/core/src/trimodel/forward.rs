use std::collections::BTreeMap;

use numcore::{Graph, Tensor, Var};

use super::config::{Encoder, EncoderConfig, VlmConfig};
use super::model::{param_name, BoundParams};
use super::UnitKind;
use crate::error::{Result, VlpError};

const LN_EPS: f64 = 1e-5;
/// Additive score for padded keys; `exp` of it underflows to exactly zero.
const MASKED: f64 = -1e9;

/// Gate values applied during a forward pass, one vector per (encoder, layer, unit kind).
pub type GateVars = BTreeMap<(Encoder, usize, UnitKind), Var>;

/// Fixed gate values, keyed like [`GateVars`].
pub type GateValues = BTreeMap<(Encoder, usize, UnitKind), Vec<f64>>;

/// Registers fixed gate values as graph constants.
pub fn gate_constants(g: &mut Graph, values: &GateValues) -> GateVars {
    values
        .iter()
        .map(|(k, v)| (*k, g.constant(Tensor::vector(v.clone()))))
        .collect()
}

/// Raw model inputs for a batch of image-text pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub batch: usize,
    /// `[batch · patches, patch_dim]`, patches of each image in row-major grid order.
    pub images: Tensor,
    /// `batch · text_len` token ids, row-major; position 0 of every text is the CLS token.
    pub tokens: Vec<usize>,
    pub text_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Record attention matrices and hidden states.
    Trace,
    Plain,
}

/// Per-layer observables of one encoder stack.
#[derive(Clone, Debug, Default)]
pub struct EncoderTrace {
    /// Self-attention matrices, `[rows·heads, q_len, k_len]` per layer.
    pub attn: Vec<Var>,
    /// Cross-attention matrices (fusion only), `[rows·heads, q_len, patches]` per layer.
    pub cross_attn: Vec<Var>,
    /// Layer outputs, `[rows·seq, d]` per layer.
    pub hidden: Vec<Var>,
    /// Gated per-head attention outputs before the output projection, `[rows·seq, heads·d_k]`.
    pub context: Vec<Var>,
    pub cross_context: Vec<Var>,
}

/// Contrastive two-tower outputs.
#[derive(Clone, Copy, Debug)]
pub struct ItcOutput {
    pub vision_emb: Var,
    pub text_emb: Var,
    /// Scaled text-to-image similarities `[batch, batch]`; its transpose is image-to-text.
    pub sim_t2i: Var,
}

/// Unimodal encoder outputs, before fusion.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub batch: usize,
    pub text_len: usize,
    /// Final vision states `[batch · patches, d]`.
    pub vision: Var,
    /// Final text states `[batch · text_len, d]`.
    pub text: Var,
    pub vision_trace: EncoderTrace,
    pub text_trace: EncoderTrace,
    pub itc: ItcOutput,
    text_bias: Option<Tensor>,
}

/// Which task heads to evaluate on the fused pairs.
#[derive(Clone, Debug, Default)]
pub struct HeadRequest {
    pub itm: bool,
    pub cls: bool,
    /// Flat row indices `pair · text_len + position` whose tokens are predicted.
    pub mlm_positions: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Logits {
    pub itc_t2i: Option<Var>,
    pub itm: Option<Var>,
    pub cls: Option<Var>,
    pub mlm: Option<Var>,
}

/// Everything a forward pass exposes for losses and distillation.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub vision: EncoderTrace,
    pub text: EncoderTrace,
    pub fusion: EncoderTrace,
    pub logits: Logits,
    /// `(text index, image index)` of every fused pair.
    pub pairs: Vec<(usize, usize)>,
    pub itc: ItcOutput,
    /// Fusion CLS states `[pairs, d]`.
    pub pooled: Var,
}

impl ForwardTrace {
    pub fn encoder(&self, e: Encoder) -> &EncoderTrace {
        match e {
            Encoder::Vision => &self.vision,
            Encoder::Text => &self.text,
            Encoder::Fusion => &self.fusion,
        }
    }
}

/// Attributes a layer failure to its layer; non-finite values pass through unchanged so that
/// training can report them as divergence.
fn layer_err(encoder: Encoder, layer: usize, e: VlpError) -> VlpError {
    match e {
        VlpError::Num(numcore::NumError::NonFinite { .. }) => e,
        other => shape_err(encoder, layer, other.to_string()),
    }
}

fn shape_err(encoder: Encoder, layer: impl ToString, detail: String) -> VlpError {
    VlpError::Shape {
        encoder: encoder.name().into(),
        layer: layer.to_string(),
        detail,
    }
}

/// Multi-head scaled dot-product attention, `A = softmax(Q·Kᵀ/√d_k)` per head.
///
/// `q` is `[batch·l, heads·d_k]`, `k` and `v` are `[batch·p, heads·d_k]`. Returns the merged
/// context `[batch·l, heads·d_k]` and the attention matrices `[batch·heads, l, p]`. When
/// `head_gates` (`[heads]`) is given, each head's context is scaled by its gate.
pub fn attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    heads: usize,
    key_bias: Option<&Tensor>,
    head_gates: Option<Var>,
) -> Result<(Var, Var)> {
    let qw = g.value(q).cols();
    let kw = g.value(k).cols();
    if qw != kw || g.value(v).cols() != kw {
        return Err(VlpError::InvalidArgument(format!(
            "attention: query width {qw} vs key width {kw}"
        )));
    }
    if heads == 0 || !qw.is_multiple_of(heads) {
        return Err(VlpError::InvalidArgument(format!(
            "attention: width {qw} not divisible into {heads} heads"
        )));
    }
    let dk = qw / heads;
    let qh = g.split_heads(q, batch, heads)?;
    let kh = g.split_heads(k, batch, heads)?;
    let vh = g.split_heads(v, batch, heads)?;
    let raw = g.bmm_nt(qh, kh)?;
    let mut scores = g.scale(raw, 1.0 / (dk as f64).sqrt());
    if let Some(bias) = key_bias {
        scores = g.add_key_bias(scores, bias, heads)?;
    }
    let a = g.softmax_rows(scores)?;
    let ctx = g.bmm(a, vh)?;
    let mut merged = g.merge_heads(ctx, batch)?;
    if let Some(gates) = head_gates {
        let cols = g.repeat_each(gates, dk)?;
        merged = g.mul_cols(merged, cols)?;
    }
    Ok((merged, a))
}

fn linear(
    g: &mut Graph,
    p: &BoundParams,
    x: Var,
    scope: &str,
    slot: &str,
    sub: &str,
    w: &str,
    b: &str,
) -> Result<Var> {
    let y = g.matmul(x, p.get(&param_name(scope, slot, sub, w)))?;
    Ok(g.add_bias(y, p.get(&param_name(scope, slot, sub, b)))?)
}

fn layer_norm(
    g: &mut Graph,
    p: &BoundParams,
    x: Var,
    scope: &str,
    slot: &str,
    sub: &str,
) -> Result<Var> {
    Ok(g.layer_norm(
        x,
        p.get(&param_name(scope, slot, sub, "gamma")),
        p.get(&param_name(scope, slot, sub, "beta")),
        LN_EPS,
    )?)
}

#[allow(clippy::too_many_arguments)]
fn attention_block(
    g: &mut Graph,
    p: &BoundParams,
    scope: &str,
    slot: &str,
    sub: &str,
    queries: Var,
    keys: Var,
    batch: usize,
    heads: usize,
    key_bias: Option<&Tensor>,
    gates: Option<Var>,
    key_rows: Option<&[usize]>,
) -> Result<(Var, Var, Var)> {
    let q = linear(g, p, queries, scope, slot, sub, "q_w", "q_b")?;
    let mut k = linear(g, p, keys, scope, slot, sub, "k_w", "k_b")?;
    let mut v = linear(g, p, keys, scope, slot, sub, "v_w", "v_b")?;
    // Keys shared by several queries' items are projected once, then gathered per item.
    if let Some(rows) = key_rows {
        k = g.gather_rows(k, rows)?;
        v = g.gather_rows(v, rows)?;
    }
    let (ctx, a) = attention(g, q, k, v, batch, heads, key_bias, gates)?;
    let out = linear(g, p, ctx, scope, slot, sub, "o_w", "o_b")?;
    Ok((out, a, ctx))
}

/// Runs one pre-norm encoder stack and its final norm.
#[allow(clippy::too_many_arguments)]
fn run_encoder(
    g: &mut Graph,
    cfg: &EncoderConfig,
    p: &BoundParams,
    encoder: Encoder,
    mut x: Var,
    batch: usize,
    key_bias: Option<&Tensor>,
    cross_kv: Option<(Var, &[usize])>,
    gates: Option<&GateVars>,
    mode: Mode,
) -> Result<(Var, EncoderTrace)> {
    let scope = encoder.name();
    let mut trace = EncoderTrace::default();
    for layer in 0..cfg.num_layers {
        let shape = cfg.layer_shape(layer);
        let slot = layer.to_string();
        let gate = |kind| gates.and_then(|m| m.get(&(encoder, layer, kind)).copied());

        let h = layer_norm(g, p, x, scope, &slot, "ln1")?;
        let (o, a, ctx) = attention_block(
            g,
            p,
            scope,
            &slot,
            "attn",
            h,
            h,
            batch,
            shape.heads,
            key_bias,
            gate(UnitKind::Head),
            None,
        )
        .map_err(|e| layer_err(encoder, layer, e))?;
        x = g.add(x, o)?;
        if mode == Mode::Trace {
            trace.attn.push(a);
            trace.context.push(ctx);
        }

        if cfg.is_cross_modal {
            let (kv, rows) = cross_kv.ok_or_else(|| {
                shape_err(encoder, layer, "cross-attention needs vision states".into())
            })?;
            let h = layer_norm(g, p, x, scope, &slot, "ln_x")?;
            let (o, a, ctx) = attention_block(
                g,
                p,
                scope,
                &slot,
                "xattn",
                h,
                kv,
                batch,
                shape.cross_heads,
                None,
                gate(UnitKind::CrossHead),
                Some(rows),
            )
            .map_err(|e| layer_err(encoder, layer, e))?;
            x = g.add(x, o)?;
            if mode == Mode::Trace {
                trace.cross_attn.push(a);
                trace.cross_context.push(ctx);
            }
        }

        let h = layer_norm(g, p, x, scope, &slot, "ln2")?;
        let mut f = linear(g, p, h, scope, &slot, "ffn", "w1", "b1")?;
        f = g.gelu(f);
        if let Some(z) = gate(UnitKind::FfnNeuron) {
            f = g.mul_cols(f, z)?;
        }
        let f = linear(g, p, f, scope, &slot, "ffn", "w2", "b2")?;
        x = g.add(x, f)?;
        if mode == Mode::Trace {
            trace.hidden.push(x);
        }
    }
    let out = layer_norm(g, p, x, scope, "final", "ln")?;
    Ok((out, trace))
}

fn tiled_rows(n: usize, len: usize) -> Vec<usize> {
    (0..n).flat_map(|_| 0..len).collect()
}

/// Row indices `[i·block, (i+1)·block)` for every `i` in `which`, concatenated.
fn block_rows(block: usize, which: &[usize]) -> Vec<usize> {
    which
        .iter()
        .flat_map(|&i| i * block..(i + 1) * block)
        .collect()
}

impl ModelInput {
    fn validate(&self, config: &VlmConfig) -> Result<()> {
        let patches = config.num_patches();
        if self.images.shape() != [self.batch * patches, config.patch_dim()] {
            return Err(shape_err(
                Encoder::Vision,
                "input",
                format!(
                    "images {:?}, expected [{}, {}]",
                    self.images.shape(),
                    self.batch * patches,
                    config.patch_dim()
                ),
            ));
        }
        if self.text_len == 0
            || self.text_len > config.max_text_len
            || self.tokens.len() != self.batch * self.text_len
        {
            return Err(shape_err(
                Encoder::Text,
                "input",
                format!(
                    "{} tokens for batch {} × length {} (max {})",
                    self.tokens.len(),
                    self.batch,
                    self.text_len,
                    config.max_text_len
                ),
            ));
        }
        if let Some(&bad) = self.tokens.iter().find(|&&t| t >= config.vocab_size) {
            return Err(shape_err(
                Encoder::Text,
                "input",
                format!("token id {bad} outside vocabulary"),
            ));
        }
        Ok(())
    }

    /// Per-key additive mask for padded text positions, if any position is padded.
    fn text_bias(&self, pad: usize) -> Option<Tensor> {
        if !self.tokens.contains(&pad) {
            return None;
        }
        let data = self
            .tokens
            .iter()
            .map(|&t| if t == pad { MASKED } else { 0.0 })
            .collect();
        Some(Tensor::new(vec![self.batch, self.text_len], data).expect("token count checked"))
    }
}

fn encode_text(
    g: &mut Graph,
    config: &VlmConfig,
    p: &BoundParams,
    input: &ModelInput,
    gates: Option<&GateVars>,
    mode: Mode,
) -> Result<(Var, EncoderTrace, Option<Tensor>)> {
    let b = input.batch;
    let tok = g.gather_rows(p.get("text.embed.token.table"), &input.tokens)?;
    let pos = g.gather_rows(
        p.get("text.embed.pos.table"),
        &tiled_rows(b, input.text_len),
    )?;
    let xt = g.add(tok, pos)?;
    let bias = input.text_bias(config.pad_token);
    let (text, trace) = run_encoder(
        g,
        &config.text,
        p,
        Encoder::Text,
        xt,
        b,
        bias.as_ref(),
        None,
        gates,
        mode,
    )?;
    Ok((text, trace, bias))
}

/// Re-runs only the text encoder on `tokens` (same batch layout), keeping the vision states
/// and contrastive outputs of `enc`. Used for the masked-token pass.
pub fn reencode_text(
    g: &mut Graph,
    config: &VlmConfig,
    p: &BoundParams,
    enc: &Encoded,
    tokens: &[usize],
    gates: Option<&GateVars>,
    mode: Mode,
) -> Result<Encoded> {
    let input = ModelInput {
        batch: enc.batch,
        images: Tensor::zeros(&[enc.batch * config.num_patches(), config.patch_dim()]),
        tokens: tokens.to_vec(),
        text_len: enc.text_len,
    };
    input.validate(config)?;
    let (text, text_trace, text_bias) = encode_text(g, config, p, &input, gates, mode)?;
    Ok(Encoded {
        text,
        text_trace,
        text_bias,
        ..enc.clone()
    })
}

/// Runs the vision and text encoders and the contrastive heads.
pub fn encode(
    g: &mut Graph,
    config: &VlmConfig,
    p: &BoundParams,
    input: &ModelInput,
    gates: Option<&GateVars>,
    mode: Mode,
) -> Result<Encoded> {
    input.validate(config)?;
    let b = input.batch;
    let patches = config.num_patches();

    let img = g.constant(input.images.clone());
    let mut xv = linear(g, p, img, "vision", "embed", "patch", "w", "b")?;
    let pos = g.gather_rows(p.get("vision.embed.pos.table"), &tiled_rows(b, patches))?;
    xv = g.add(xv, pos)?;
    let (vision, vision_trace) = run_encoder(
        g,
        &config.vision,
        p,
        Encoder::Vision,
        xv,
        b,
        None,
        None,
        gates,
        mode,
    )?;

    let (text, text_trace, text_bias) = encode_text(g, config, p, input, gates, mode)?;

    let pooled_v = g.mean_pool(vision, patches)?;
    let pv = g.matmul(pooled_v, p.get("head.itc.proj.vision_w"))?;
    let vision_emb = g.normalize_rows(pv);
    let cls_rows: Vec<usize> = (0..b).map(|i| i * input.text_len).collect();
    let cls = g.gather_rows(text, &cls_rows)?;
    let pt = g.matmul(cls, p.get("head.itc.proj.text_w"))?;
    let text_emb = g.normalize_rows(pt);
    let vt = g.transpose(vision_emb)?;
    let sim = g.matmul(text_emb, vt)?;
    let scale = g.exp(p.get("head.itc.temp.log_scale"));
    let sim_t2i = g.scale_by(sim, scale)?;

    Ok(Encoded {
        batch: b,
        text_len: input.text_len,
        vision,
        text,
        vision_trace,
        text_trace,
        itc: ItcOutput {
            vision_emb,
            text_emb,
            sim_t2i,
        },
        text_bias,
    })
}

/// Runs the fusion encoder on `(text, image)` pairs and the requested heads.
#[allow(clippy::too_many_arguments)]
pub fn fuse(
    g: &mut Graph,
    config: &VlmConfig,
    p: &BoundParams,
    enc: &Encoded,
    pairs: &[(usize, usize)],
    heads: &HeadRequest,
    gates: Option<&GateVars>,
    mode: Mode,
) -> Result<ForwardTrace> {
    if pairs.is_empty() {
        return Err(shape_err(
            Encoder::Fusion,
            "input",
            "no pairs to fuse".into(),
        ));
    }
    if let Some(&(t, i)) = pairs
        .iter()
        .find(|&&(t, i)| t >= enc.batch || i >= enc.batch)
    {
        return Err(shape_err(
            Encoder::Fusion,
            "input",
            format!("pair ({t}, {i}) outside batch {}", enc.batch),
        ));
    }
    let n = pairs.len();
    let tl = enc.text_len;
    let text_idx: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let img_idx: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let xt = g.gather_rows(enc.text, &block_rows(tl, &text_idx))?;
    let kv_rows = block_rows(config.num_patches(), &img_idx);
    let bias = enc.text_bias.as_ref().map(|b| b.select_rows(&text_idx));
    let (fused, fusion_trace) = run_encoder(
        g,
        &config.fusion,
        p,
        Encoder::Fusion,
        xt,
        n,
        bias.as_ref(),
        Some((enc.vision, &kv_rows)),
        gates,
        mode,
    )?;

    let cls_rows: Vec<usize> = (0..n).map(|i| i * tl).collect();
    let pooled = g.gather_rows(fused, &cls_rows)?;
    let mut logits = Logits {
        itc_t2i: Some(enc.itc.sim_t2i),
        ..Logits::default()
    };
    if heads.itm {
        logits.itm = Some(linear(g, p, pooled, "head", "itm", "out", "w", "b")?);
    }
    if heads.cls {
        logits.cls = Some(linear(g, p, pooled, "head", "cls", "out", "w", "b")?);
    }
    if !heads.mlm_positions.is_empty() {
        let rows = g.gather_rows(fused, &heads.mlm_positions)?;
        logits.mlm = Some(linear(g, p, rows, "head", "mlm", "out", "w", "b")?);
    }
    Ok(ForwardTrace {
        vision: enc.vision_trace.clone(),
        text: enc.text_trace.clone(),
        fusion: fusion_trace,
        logits,
        pairs: pairs.to_vec(),
        itc: enc.itc,
        pooled,
    })
}

/// Full forward pass over the positive pairs `(i, i)` of a batch.
pub fn forward(
    g: &mut Graph,
    config: &VlmConfig,
    p: &BoundParams,
    input: &ModelInput,
    heads: &HeadRequest,
    gates: Option<&GateVars>,
    mode: Mode,
) -> Result<ForwardTrace> {
    let enc = encode(g, config, p, input, gates, mode)?;
    let pairs: Vec<(usize, usize)> = (0..input.batch).map(|i| (i, i)).collect();
    fuse(g, config, p, &enc, &pairs, heads, gates, mode)
}
