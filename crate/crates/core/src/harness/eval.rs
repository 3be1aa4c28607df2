use std::collections::BTreeMap;

use numcore::{Graph, Rng, Tensor};
use serde::{Deserialize, Serialize};

use super::data::{Batch, SynthSpec, TaskKind};
use super::metrics::EvalMetrics;
use crate::error::{Result, VlpError};
use crate::l0prune::GateSet;
use crate::trimodel::{
    encode, fuse, gate_constants, param_name, reencode_text, Encoder, GateValues, HeadRequest,
    Mode, UnitKind, VlmModel,
};

const MLM_EVAL_SALT: u64 = 0x0E7A_1D00;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub batches: usize,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            batches: 8,
            batch_size: 32,
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn accuracy(logits: &Tensor, labels: &[usize], classes: usize) -> usize {
    (0..logits.rows())
        .filter(|&r| argmax(&logits.row(r)[..classes]) == labels[r])
        .count()
}

/// Held-out metrics of `model` on the first `opts.batches` batches of `spec`.
///
/// Retrieval reports recall@1 in both directions within each batch plus masked-token accuracy;
/// match reports matching-head accuracy; the classification tasks report head accuracy.
pub fn evaluate(
    model: &VlmModel,
    spec: &SynthSpec,
    opts: &EvalOptions,
    gates: Option<&GateValues>,
) -> Result<EvalMetrics> {
    spec.check_config(&model.config)?;
    let mut m = EvalMetrics::default();
    let (mut t2i, mut i2t, mut hits, mut mlm_hits, mut mlm_total) = (0, 0, 0, 0, 0);
    for b in 0..opts.batches {
        let batch = Batch::from_samples(&spec.samples(b * opts.batch_size, opts.batch_size));
        let n = batch.len();
        let mut g = Graph::new();
        let p = model.bind(&mut g, false);
        let gv = gates.map(|v| gate_constants(&mut g, v));
        let enc = encode(
            &mut g,
            &model.config,
            &p,
            &batch.input,
            gv.as_ref(),
            Mode::Plain,
        )?;
        let pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
        match spec.task {
            TaskKind::Retrieval => {
                let sim = g.value(enc.itc.sim_t2i).clone();
                t2i += (0..n).filter(|&i| argmax(sim.row(i)) == i).count();
                let col = |j: usize| (0..n).map(|i| sim.at2(i, j)).collect::<Vec<_>>();
                i2t += (0..n).filter(|&j| argmax(&col(j)) == j).count();
                let mut rng = Rng::stream(spec.seed ^ MLM_EVAL_SALT, b as u64);
                let (masked, positions, targets) = batch.mask_tokens(0.15, &mut rng);
                let menc = reencode_text(
                    &mut g,
                    &model.config,
                    &p,
                    &enc,
                    &masked,
                    gv.as_ref(),
                    Mode::Plain,
                )?;
                let heads = HeadRequest {
                    mlm_positions: positions,
                    ..HeadRequest::default()
                };
                let tr = fuse(
                    &mut g,
                    &model.config,
                    &p,
                    &menc,
                    &pairs,
                    &heads,
                    gv.as_ref(),
                    Mode::Plain,
                )?;
                let logits = g.value(tr.logits.mlm.expect("positions requested"));
                mlm_hits += accuracy(logits, &targets, model.config.vocab_size);
                mlm_total += targets.len();
            }
            TaskKind::Match => {
                let heads = HeadRequest {
                    itm: true,
                    ..HeadRequest::default()
                };
                let tr = fuse(
                    &mut g,
                    &model.config,
                    &p,
                    &enc,
                    &pairs,
                    &heads,
                    gv.as_ref(),
                    Mode::Plain,
                )?;
                hits += accuracy(g.value(tr.logits.itm.expect("requested")), &batch.labels, 2);
            }
            task => {
                let classes = task.num_classes().expect("classification task");
                let heads = HeadRequest {
                    cls: true,
                    ..HeadRequest::default()
                };
                let tr = fuse(
                    &mut g,
                    &model.config,
                    &p,
                    &enc,
                    &pairs,
                    &heads,
                    gv.as_ref(),
                    Mode::Plain,
                )?;
                hits += accuracy(
                    g.value(tr.logits.cls.expect("requested")),
                    &batch.labels,
                    classes,
                );
            }
        }
        m.samples += n;
    }
    let frac = |k: usize| k as f64 / m.samples.max(1) as f64;
    match spec.task {
        TaskKind::Retrieval => {
            m.recall_t2i = Some(frac(t2i));
            m.recall_i2t = Some(frac(i2t));
            m.mlm_acc = Some(mlm_hits as f64 / mlm_total.max(1) as f64);
        }
        TaskKind::Match => m.match_acc = Some(frac(hits)),
        _ => m.cls_acc = Some(frac(hits)),
    }
    Ok(m)
}

/// Mean L2 norm of each head's contribution to the attention output, `‖ctx_h · W_o[h]‖`,
/// over the rows of `opts` held-out batches. Keyed like gate values.
pub fn head_output_norms(
    model: &VlmModel,
    spec: &SynthSpec,
    opts: &EvalOptions,
) -> Result<GateValues> {
    let mut sums: GateValues = BTreeMap::new();
    let mut rows_seen: BTreeMap<(Encoder, usize, UnitKind), usize> = BTreeMap::new();
    for b in 0..opts.batches {
        let batch = Batch::from_samples(&spec.samples(b * opts.batch_size, opts.batch_size));
        let mut g = Graph::new();
        let p = model.bind(&mut g, false);
        let pairs: Vec<(usize, usize)> = (0..batch.len()).map(|i| (i, i)).collect();
        let enc = encode(&mut g, &model.config, &p, &batch.input, None, Mode::Trace)?;
        let tr = fuse(
            &mut g,
            &model.config,
            &p,
            &enc,
            &pairs,
            &HeadRequest::default(),
            None,
            Mode::Trace,
        )?;
        for e in Encoder::ALL {
            let et = tr.encoder(e);
            let dk = model.config.encoder(e).head_dim();
            for (kind, sub, ctxs) in [
                (UnitKind::Head, "attn", &et.context),
                (UnitKind::CrossHead, "xattn", &et.cross_context),
            ] {
                for (layer, &ctx) in ctxs.iter().enumerate() {
                    let ctx = g.value(ctx);
                    let ow = model.param(&param_name(e.name(), layer, sub, "o_w"));
                    let heads = ctx.cols() / dk;
                    let d = ow.cols();
                    let acc = sums
                        .entry((e, layer, kind))
                        .or_insert_with(|| vec![0.0; heads]);
                    for r in 0..ctx.rows() {
                        let row = ctx.row(r);
                        for (h, a) in acc.iter_mut().enumerate() {
                            let mut out = vec![0.0; d];
                            for c in h * dk..(h + 1) * dk {
                                let x = row[c];
                                for (o, w) in out.iter_mut().zip(ow.row(c)) {
                                    *o += x * w;
                                }
                            }
                            *a += out.iter().map(|v| v * v).sum::<f64>().sqrt();
                        }
                    }
                    *rows_seen.entry((e, layer, kind)).or_default() += ctx.rows();
                }
            }
        }
    }
    for (k, v) in sums.iter_mut() {
        let n = rows_seen[k] as f64;
        v.iter_mut().for_each(|x| *x /= n);
    }
    Ok(sums)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub pruned_heads: usize,
    pub total_heads: usize,
    pub metric: f64,
}

/// For each fraction, zeroes that share of the named encoder's heads (self- and, for fusion,
/// cross-attention), least important first, and evaluates the task metric. Importance is the
/// unthresholded deterministic gate value when `gates` is given, else the head output norm.
/// Other encoders are untouched.
pub fn sweep_heads(
    model: &VlmModel,
    spec: &SynthSpec,
    fractions: &[f64],
    encoder: Encoder,
    opts: &EvalOptions,
    gates: Option<&GateSet>,
) -> Result<Vec<SweepRow>> {
    if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(VlpError::InvalidArgument(format!(
            "sweep fraction {f} outside [0, 1]"
        )));
    }
    let importance: GateValues = match gates {
        Some(gs) => {
            let mut open = gs.clone();
            open.threshold = 0.0;
            open.deterministic_map()
        }
        None => head_output_norms(model, spec, opts)?,
    };
    let mut units: Vec<((Encoder, usize, UnitKind), usize, f64)> = importance
        .iter()
        .filter(|(k, _)| k.0 == encoder && k.2 != UnitKind::FfnNeuron)
        .flat_map(|(k, v)| v.iter().enumerate().map(move |(h, &s)| (*k, h, s)))
        .collect();
    units.sort_by(|a, b| a.2.total_cmp(&b.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    let total = units.len();
    let mut rows = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let k = (f * total as f64).round() as usize;
        let mut values: GateValues = BTreeMap::new();
        for e in Encoder::ALL {
            let enc = model.config.encoder(e);
            for layer in 0..enc.num_layers {
                let s = enc.layer_shape(layer);
                values.insert((e, layer, UnitKind::Head), vec![1.0; s.heads]);
                if s.cross_heads > 0 {
                    values.insert((e, layer, UnitKind::CrossHead), vec![1.0; s.cross_heads]);
                }
            }
        }
        for (key, h, _) in units.iter().take(k) {
            values.get_mut(key).expect("unit of this model")[*h] = 0.0;
        }
        let metric = if k == 0 {
            evaluate(model, spec, opts, None)?.primary()
        } else {
            evaluate(model, spec, opts, Some(&values))?.primary()
        };
        rows.push(SweepRow {
            fraction: f,
            pruned_heads: k,
            total_heads: total,
            metric,
        });
    }
    Ok(rows)
}
