use std::cell::Cell;
use std::time::Instant;

use numcore::{Graph, NumError, Rng, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::data::{Batch, Latent, SynthSpec, TaskKind};
use super::eval::{evaluate, EvalOptions};
use super::metrics::{EvalMetrics, Record, RunMetrics, StepRecord};
use super::optim::{warmup_scale, AdamW, AdamWConfig};
use crate::distill::{
    cross_entropy, finetune_loss, kd_loss, kd_parts, pretrain_loss, vlp_losses, DistillWeights,
    KdOptions, KdValues, LayerMap, VlpTargets,
};
use crate::error::{Result, VlpError};
use crate::l0prune::{Constraints, GateSet, DEFAULT_INIT_LOGIT};
use crate::trimodel::{
    encode, fuse, reencode_text, structurally_remove, BoundParams, ForwardTrace, GateVars,
    HeadRequest, Mode, VlmConfig, VlmModel,
};

const INIT_SALT: u64 = 0x1217_0000;
const STEP_SALT: u64 = 0x57E9_0000;
const GATE_PREFIX: &str = "gate.";

/// Optimization settings of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageBudget {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub gate_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    /// Held-out evaluation period in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub eval: EvalOptions,
}

impl StageBudget {
    pub fn new(steps: usize) -> Self {
        Self {
            steps,
            batch_size: 32,
            lr: 1e-3,
            gate_lr: 0.1,
            warmup_frac: 0.05,
            weight_decay: 0.01,
            eval_every: 0,
            eval: EvalOptions::default(),
        }
    }

    fn due(&self, step: usize) -> bool {
        self.eval_every > 0 && (step + 1).is_multiple_of(self.eval_every) && step + 1 < self.steps
    }
}

/// What identifies a run in its metrics.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunContext {
    pub seed: u64,
    pub config_hash: String,
}

impl RunContext {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            config_hash: String::new(),
        }
    }

    fn step_rng(&self, stage: &str, step: usize) -> Rng {
        let salt = stage
            .bytes()
            .fold(STEP_SALT, |h, b| h.rotate_left(7) ^ b as u64);
        Rng::stream(self.seed ^ salt, step as u64)
    }
}

/// Settings of a contrastive/matching/masked-token training stage, with optional distillation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub budget: StageBudget,
    pub weights: DistillWeights,
    /// Rescale each KD weight by the inverse of its part's value on the first batch.
    pub calibrate: bool,
    pub kd: KdOptions,
    pub mlm_prob: f64,
    /// Stop early once held-out match accuracy reaches this value.
    pub stop_at_match_acc: Option<f64>,
}

impl PretrainOptions {
    pub fn new(steps: usize) -> Self {
        Self {
            budget: StageBudget::new(steps),
            weights: DistillWeights::default(),
            calibrate: true,
            kd: KdOptions::default(),
            mlm_prob: 0.15,
            stop_at_match_acc: None,
        }
    }
}

/// Settings of a task fine-tuning stage, with optional distillation and pruning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOptions {
    pub budget: StageBudget,
    pub weights: DistillWeights,
    pub calibrate: bool,
    pub kd: KdOptions,
    /// Deterministic-gate threshold used for masking and slicing.
    pub threshold: f64,
}

impl FinetuneOptions {
    pub fn new(steps: usize) -> Self {
        Self {
            budget: StageBudget::new(steps),
            weights: DistillWeights::default(),
            calibrate: true,
            kd: KdOptions::default(),
            threshold: crate::l0prune::DEFAULT_THRESHOLD,
        }
    }
}

fn check_finite(v: f64, stage: &str, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(VlpError::Divergence {
            stage: stage.into(),
            step,
        })
    }
}

/// Mixed positive and hardest-negative pairs. Even items pair their caption with the most
/// similar non-matching image, odd items their image with the most similar non-matching
/// caption. Returns the pairs and their matching labels.
pub fn itm_pairs(
    sim: &Tensor,
    image_latents: &[Latent],
    caption_latents: &[Latent],
) -> (Vec<(usize, usize)>, Vec<usize>) {
    let n = sim.rows();
    let mut pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    let mut labels = vec![1; n];
    for i in 0..n {
        let best = if i % 2 == 0 {
            (0..n)
                .filter(|&j| image_latents[j] != caption_latents[i])
                .max_by(|&a, &b| sim.at2(i, a).total_cmp(&sim.at2(i, b)).then(b.cmp(&a)))
                .map(|j| (i, j))
        } else {
            (0..n)
                .filter(|&j| caption_latents[j] != image_latents[i])
                .max_by(|&a, &b| sim.at2(a, i).total_cmp(&sim.at2(b, i)).then(b.cmp(&a)))
                .map(|j| (j, i))
        };
        if let Some(p) = best {
            pairs.push(p);
            labels.push(0);
        }
    }
    (pairs, labels)
}

struct Masked {
    tokens: Vec<usize>,
    positions: Vec<usize>,
    targets: Vec<usize>,
}

/// Contrastive encoding, matching over positives and negatives, and a masked-token pass.
/// The masked-token logits are merged into the returned trace.
#[allow(clippy::too_many_arguments)]
fn vlp_pass(
    g: &mut Graph,
    config: &VlmConfig,
    p: &BoundParams,
    batch: &Batch,
    masked: &Masked,
    pairs: Option<&(Vec<(usize, usize)>, Vec<usize>)>,
    mode: Mode,
) -> Result<(ForwardTrace, (Vec<(usize, usize)>, Vec<usize>))> {
    let enc = encode(g, config, p, &batch.input, None, mode)?;
    let pairs = match pairs {
        Some(p) => p.clone(),
        None => itm_pairs(
            g.value(enc.itc.sim_t2i),
            &batch.image_latents,
            &batch.caption_latents,
        ),
    };
    let itm = HeadRequest {
        itm: true,
        ..HeadRequest::default()
    };
    let mut trace = fuse(g, config, p, &enc, &pairs.0, &itm, None, mode)?;
    let menc = reencode_text(g, config, p, &enc, &masked.tokens, None, Mode::Plain)?;
    let positives: Vec<(usize, usize)> = (0..batch.len()).map(|i| (i, i)).collect();
    let mlm = HeadRequest {
        mlm_positions: masked.positions.clone(),
        ..HeadRequest::default()
    };
    let mtrace = fuse(g, config, p, &menc, &positives, &mlm, None, Mode::Plain)?;
    trace.logits.mlm = mtrace.logits.mlm;
    Ok((trace, pairs))
}

fn split_grads(
    grads: std::collections::BTreeMap<String, Tensor>,
) -> (
    std::collections::BTreeMap<String, Tensor>,
    std::collections::BTreeMap<String, Tensor>,
) {
    grads
        .into_iter()
        .partition(|(k, _)| !k.starts_with(GATE_PREFIX))
}

fn weight_optimizer(b: &StageBudget) -> AdamW {
    AdamW::new(AdamWConfig {
        weight_decay: b.weight_decay,
        ..AdamWConfig::with_lr(b.lr)
    })
}

fn eval_record(stage: &str, step: usize, metrics: EvalMetrics) -> Record {
    Record::Eval {
        stage: stage.into(),
        step,
        metrics,
    }
}

/// Trains `model` with `L_VLP = L_ITC + L_ITM + L_MLM`, mixed with distillation from `teacher`
/// when one is given and `mix < 1`. With `mix = 1` the teacher is never evaluated.
pub fn train_vlp(
    model: VlmModel,
    teacher: Option<&VlmModel>,
    spec: &SynthSpec,
    opts: &PretrainOptions,
    ctx: &RunContext,
    stage: &str,
) -> Result<(VlmModel, RunMetrics)> {
    let at = Cell::new(0);
    train_vlp_at(model, teacher, spec, opts, ctx, stage, &at)
        .map_err(|e| diverged(e, stage, at.get()))
}

/// Non-finite values met anywhere inside a training step mean the run diverged.
fn diverged(e: VlpError, stage: &str, step: usize) -> VlpError {
    match e {
        VlpError::Num(NumError::NonFinite { .. }) => VlpError::Divergence {
            stage: stage.into(),
            step,
        },
        other => other,
    }
}

fn train_vlp_at(
    mut model: VlmModel,
    teacher: Option<&VlmModel>,
    spec: &SynthSpec,
    opts: &PretrainOptions,
    ctx: &RunContext,
    stage: &str,
    at: &Cell<usize>,
) -> Result<(VlmModel, RunMetrics)> {
    spec.check_config(&model.config)?;
    opts.weights.validate()?;
    let started = Instant::now();
    let b = &opts.budget;
    let use_kd = teacher.is_some() && opts.weights.mix < 1.0;
    let map = match teacher {
        Some(t) if use_kd => Some(LayerMap::new(&model.config, &t.config)?),
        _ => None,
    };
    let held_out_match = SynthSpec::new(TaskKind::Match, spec.seed).held_out();
    let mut weights = opts.weights;
    let mut opt = weight_optimizer(b);
    let mut metrics = RunMetrics::default();
    let header = |w: &DistillWeights| Record::Stage {
        stage: stage.into(),
        seed: ctx.seed,
        config_hash: ctx.config_hash.clone(),
        steps: b.steps,
        weights: Some(serde_json::to_value(w).expect("weights serialize")),
    };
    if b.steps == 0 {
        metrics.push(header(&weights));
    }
    for step in 0..b.steps {
        at.set(step);
        let batch = Batch::from_samples(&spec.samples(step * b.batch_size, b.batch_size));
        let mut rng = ctx.step_rng(stage, step);
        let (tokens, positions, targets) = batch.mask_tokens(opts.mlm_prob, &mut rng);
        let masked = Masked {
            tokens,
            positions,
            targets,
        };
        let mut g = Graph::new();
        let p = model.bind(&mut g, true);
        let mode = if use_kd { Mode::Trace } else { Mode::Plain };
        let (trace, pairs) = vlp_pass(&mut g, &model.config, &p, &batch, &masked, None, mode)?;
        let vt = VlpTargets {
            itm_labels: pairs.1.clone(),
            mlm_targets: masked.targets.clone(),
        };
        let parts = vlp_losses(&mut g, &trace, &vt)?;
        let vlp = parts.total(&mut g)?;
        let mut kd_values = None;
        let loss = match (teacher, &map) {
            (Some(t), Some(map)) => {
                let tp = t.bind(&mut g, false);
                let (ttrace, _) = vlp_pass(
                    &mut g,
                    &t.config,
                    &tp,
                    &batch,
                    &masked,
                    Some(&pairs),
                    Mode::Trace,
                )?;
                let kd = kd_parts(&mut g, &trace, &ttrace, map, &opts.kd)?;
                let values = kd.values(&g);
                if step == 0 && opts.calibrate {
                    weights = weights.calibrated(&values);
                }
                kd_values = Some(values);
                pretrain_loss(&mut g, vlp, &kd, &weights)?
            }
            _ => vlp,
        };
        if step == 0 {
            metrics.push(header(&weights));
        }
        let total = g.value(loss).item();
        check_finite(total, stage, step)?;
        let grads = g.backward(loss)?;
        let lr_scale = warmup_scale(step, b.steps, b.warmup_frac);
        opt.step(&mut model.params, &grads.by_name(), lr_scale);
        let kd = kd_values.unwrap_or_default();
        metrics.push(Record::Step(StepRecord {
            stage: stage.into(),
            step,
            total,
            itc: Some(g.value(parts.itc).item()),
            itm: Some(g.value(parts.itm).item()),
            mlm: Some(g.value(parts.mlm).item()),
            kd_attn: Some(kd.attn),
            kd_hid: Some(kd.hid),
            kd_logits: Some(kd.logits),
            lr_scale,
            ..Default::default()
        }));
        if b.due(step) {
            let m = evaluate(&model, &held_out_match, &b.eval, None)?;
            let acc = m.match_acc.unwrap_or(0.0);
            metrics.push(eval_record(stage, step + 1, m));
            if opts.stop_at_match_acc.is_some_and(|target| acc >= target) {
                metrics.push(eval_record(
                    stage,
                    step + 1,
                    evaluate(&model, &spec.held_out(), &b.eval, None)?,
                ));
                metrics
                    .timings
                    .push((stage.into(), started.elapsed().as_secs_f64()));
                return Ok((model, metrics));
            }
        }
    }
    metrics.push(eval_record(
        stage,
        b.steps,
        evaluate(&model, &held_out_match, &b.eval, None)?,
    ));
    metrics.push(eval_record(
        stage,
        b.steps,
        evaluate(&model, &spec.held_out(), &b.eval, None)?,
    ));
    metrics
        .timings
        .push((stage.into(), started.elapsed().as_secs_f64()));
    Ok((model, metrics))
}

/// Initializes a model from `ctx.seed` and trains it on image-caption pairs until held-out
/// match accuracy reaches `opts.stop_at_match_acc` or the budget runs out.
pub fn train_teacher(
    config: &VlmConfig,
    spec: &SynthSpec,
    opts: &PretrainOptions,
    ctx: &RunContext,
) -> Result<(VlmModel, RunMetrics)> {
    config.validate()?;
    let model = VlmModel::init(config.clone(), &mut Rng::stream(ctx.seed, INIT_SALT))?;
    train_vlp(model, None, spec, opts, ctx, "teacher")
}

/// Trains a student (normally from `shrink_from_teacher`) with
/// `λ·L_VLP + (1 − λ)·(α·L_attn + β·L_hid + γ·L_logits)`; the teacher stays frozen.
pub fn pretrain_distill(
    student: VlmModel,
    teacher: &VlmModel,
    spec: &SynthSpec,
    opts: &PretrainOptions,
    ctx: &RunContext,
) -> Result<(VlmModel, RunMetrics)> {
    train_vlp(student, Some(teacher), spec, opts, ctx, "pretrain")
}

/// Forward pass for a downstream task: positives only, with the head the task scores.
fn task_pass(
    g: &mut Graph,
    config: &VlmConfig,
    p: &BoundParams,
    batch: &Batch,
    task: TaskKind,
    gates: Option<&GateVars>,
    mode: Mode,
) -> Result<ForwardTrace> {
    let enc = encode(g, config, p, &batch.input, gates, mode)?;
    let pairs: Vec<(usize, usize)> = (0..batch.len()).map(|i| (i, i)).collect();
    let heads = HeadRequest {
        itm: task == TaskKind::Match,
        cls: task.num_classes().is_some(),
        mlm_positions: Vec::new(),
    };
    fuse(g, config, p, &enc, &pairs, &heads, gates, mode)
}

fn task_loss(g: &mut Graph, trace: &ForwardTrace, batch: &Batch, task: TaskKind) -> Result<Var> {
    match task {
        TaskKind::Retrieval => Ok(vlp_losses(g, trace, &VlpTargets::default())?.itc),
        TaskKind::Match => cross_entropy(g, trace.logits.itm.expect("match head"), &batch.labels),
        _ => cross_entropy(
            g,
            trace.logits.cls.expect("classification head"),
            &batch.labels,
        ),
    }
}

/// Outcome of gated fine-tuning before any slicing.
#[derive(Clone, Debug)]
pub struct PruneTrained {
    pub model: VlmModel,
    pub gates: GateSet,
    pub constraints: Constraints,
    pub metrics: RunMetrics,
}

/// Fine-tunes on a task with `λ·L_task + (1 − λ)·L_KD + L_Lgr`.
///
/// Gates are sampled and trained only while some controller is active; otherwise they stay
/// at their initial (open) values and the forward pass is unmasked. Multipliers take one
/// ascent step after every optimizer step.
#[allow(clippy::too_many_arguments)]
pub fn prune_train(
    model: VlmModel,
    teacher: Option<&VlmModel>,
    spec: &SynthSpec,
    opts: &FinetuneOptions,
    gates: Option<GateSet>,
    constraints: Constraints,
    ctx: &RunContext,
    stage: &str,
) -> Result<PruneTrained> {
    let at = Cell::new(0);
    prune_train_at(
        model,
        teacher,
        spec,
        opts,
        gates,
        constraints,
        ctx,
        stage,
        &at,
    )
    .map_err(|e| diverged(e, stage, at.get()))
}

#[allow(clippy::too_many_arguments)]
fn prune_train_at(
    mut model: VlmModel,
    teacher: Option<&VlmModel>,
    spec: &SynthSpec,
    opts: &FinetuneOptions,
    gates: Option<GateSet>,
    mut constraints: Constraints,
    ctx: &RunContext,
    stage: &str,
    at: &Cell<usize>,
) -> Result<PruneTrained> {
    spec.check_config(&model.config)?;
    opts.weights.validate()?;
    let started = Instant::now();
    let b = &opts.budget;
    let mut gates = gates.unwrap_or_else(|| GateSet::for_model(&model, DEFAULT_INIT_LOGIT));
    gates.threshold = opts.threshold;
    gates.validate()?;
    gates.check_bound(&model)?;
    let pruning = constraints.any_active();
    let use_kd = teacher.is_some() && opts.weights.mix < 1.0;
    let map = match teacher {
        Some(t) if use_kd => Some(LayerMap::new(&model.config, &t.config)?),
        _ => None,
    };
    let held_out = spec.held_out();
    let mut weights = opts.weights;
    let mut opt = weight_optimizer(b);
    let mut gate_opt = AdamW::new(AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::with_lr(b.gate_lr)
    });
    let mut metrics = RunMetrics::default();
    let header = |w: &DistillWeights| Record::Stage {
        stage: stage.into(),
        seed: ctx.seed,
        config_hash: ctx.config_hash.clone(),
        steps: b.steps,
        weights: Some(serde_json::to_value(w).expect("weights serialize")),
    };
    if b.steps == 0 {
        metrics.push(header(&weights));
    }
    let masked_eval = |model: &VlmModel, gates: &GateSet| -> Result<EvalMetrics> {
        let values = pruning.then(|| gates.deterministic_map());
        evaluate(model, &held_out, &b.eval, values.as_ref())
    };
    for step in 0..b.steps {
        at.set(step);
        let batch = Batch::from_samples(&spec.samples(step * b.batch_size, b.batch_size));
        let mut rng = ctx.step_rng(stage, step);
        let mut g = Graph::new();
        let p = model.bind(&mut g, true);
        let bound = pruning.then(|| gates.bind(&mut g));
        let gate_vars = match &bound {
            Some(bv) => Some(gates.sample(&mut g, bv, &mut rng)?),
            None => None,
        };
        let mode = if use_kd { Mode::Trace } else { Mode::Plain };
        let trace = task_pass(
            &mut g,
            &model.config,
            &p,
            &batch,
            spec.task,
            gate_vars.as_ref(),
            mode,
        )?;
        let task = task_loss(&mut g, &trace, &batch, spec.task)?;

        let mut kd_values = None;
        let kd = match (teacher, &map) {
            (Some(t), Some(map)) => {
                let tp = t.bind(&mut g, false);
                let ttrace =
                    task_pass(&mut g, &t.config, &tp, &batch, spec.task, None, Mode::Trace)?;
                let parts = kd_parts(&mut g, &trace, &ttrace, map, &opts.kd)?;
                let values = parts.values(&g);
                if step == 0 && opts.calibrate {
                    weights = weights.calibrated(&values);
                }
                kd_values = Some(values);
                kd_loss(&mut g, &parts, &weights)?
            }
            _ => g.constant(Tensor::scalar(0.0)),
        };
        if step == 0 {
            metrics.push(header(&weights));
        }

        let mut sizes = Vec::new();
        let mut lagr_terms = Vec::new();
        if let Some(bv) = &bound {
            for c in constraints.controllers.iter().filter(|c| c.active) {
                let size = gates.model_size(&mut g, bv, Some(&c.scope))?;
                let lam1 = g.constant(Tensor::scalar(c.state.lam1));
                let lam2 = g.constant(Tensor::scalar(c.state.lam2));
                lagr_terms.push(c.state.loss_with(&mut g, size, lam1, lam2)?);
                sizes.push(g.value(size).item());
            }
        }
        let mut lagr = g.constant(Tensor::scalar(0.0));
        for t in lagr_terms {
            lagr = g.add(lagr, t)?;
        }
        let mix = if use_kd { weights.mix } else { 1.0 };
        let loss = finetune_loss(&mut g, task, kd, lagr, mix)?;
        let total = g.value(loss).item();
        check_finite(total, stage, step)?;
        let grads = g.backward(loss)?;
        let lr_scale = warmup_scale(step, b.steps, b.warmup_frac);
        let (wgrads, ggrads) = split_grads(grads.by_name());
        opt.step(&mut model.params, &wgrads, lr_scale);
        if pruning {
            let mut logits = gates.logit_tensors();
            gate_opt.step(&mut logits, &ggrads, lr_scale);
            gates.set_logits(&logits)?;
            let rate = constraints.ascent_rate;
            let mut it = sizes.iter();
            for c in constraints.controllers.iter_mut().filter(|c| c.active) {
                c.state = c
                    .state
                    .step(*it.next().expect("one size per active controller"), rate)?;
            }
        }
        let kd_v: KdValues = kd_values.unwrap_or_default();
        let first = constraints
            .controllers
            .iter()
            .find(|c| c.active)
            .map(|c| c.state);
        metrics.push(Record::Step(StepRecord {
            stage: stage.into(),
            step,
            total,
            task: Some(g.value(task).item()),
            kd_attn: Some(kd_v.attn),
            kd_hid: Some(kd_v.hid),
            kd_logits: Some(kd_v.logits),
            lagrangian: Some(g.value(lagr).item()),
            expected_size: pruning.then(|| gates.model_size_value(None)).transpose()?,
            lam1: first.map(|s| s.lam1),
            lam2: first.map(|s| s.lam2),
            lr_scale,
            ..Default::default()
        }));
        if b.due(step) {
            metrics.push(eval_record(stage, step + 1, masked_eval(&model, &gates)?));
            if pruning {
                metrics.push(Record::density(
                    stage,
                    step + 1,
                    &gates.modal_density_report(),
                    1.0 - gates.retained_fraction(),
                ));
            }
        }
    }
    metrics.push(eval_record(stage, b.steps, masked_eval(&model, &gates)?));
    metrics.push(Record::density(
        stage,
        b.steps,
        &gates.modal_density_report(),
        1.0 - gates.retained_fraction(),
    ));
    metrics
        .timings
        .push((stage.into(), started.elapsed().as_secs_f64()));
    Ok(PruneTrained {
        model,
        gates,
        constraints,
        metrics,
    })
}

/// Result of fine-tuning with pruning, after slicing.
#[derive(Clone, Debug)]
pub struct PruneOutcome {
    /// The sliced model.
    pub model: VlmModel,
    /// The trained model before slicing, with its gates.
    pub unsliced: VlmModel,
    pub gates: GateSet,
    pub constraints: Constraints,
    pub metrics: RunMetrics,
    /// Removed fraction of gated parameters, counted on the sliced model.
    pub removed: f64,
    pub metric_masked: f64,
    pub metric_sliced: f64,
}

/// [`prune_train`], then structural removal of every gate below the threshold. Without an
/// active controller the model is returned unsliced.
#[allow(clippy::too_many_arguments)]
pub fn finetune_prune(
    student: VlmModel,
    teacher: Option<&VlmModel>,
    spec: &SynthSpec,
    opts: &FinetuneOptions,
    gates: Option<GateSet>,
    constraints: Constraints,
    ctx: &RunContext,
) -> Result<PruneOutcome> {
    let stage = "finetune";
    let pruning = constraints.any_active();
    let mut trained = prune_train(student, teacher, spec, opts, gates, constraints, ctx, stage)?;
    let metric_masked = trained
        .metrics
        .last_eval()
        .map(EvalMetrics::primary)
        .unwrap_or(0.0);
    let (sliced, metric_sliced) = if pruning {
        let sliced = structurally_remove(&trained.model, &trained.gates, opts.threshold)?;
        let m = evaluate(&sliced, &spec.held_out(), &opts.budget.eval, None)?.primary();
        (sliced, m)
    } else {
        (trained.model.clone(), metric_masked)
    };
    let before = trained.model.total_gated_params();
    let after = sliced.total_gated_params();
    let removed = 1.0 - after as f64 / before as f64;
    trained.metrics.push(Record::Pruned {
        stage: stage.into(),
        gated_before: before,
        gated_after: after,
        removed,
        metric_masked,
        metric_sliced,
    });
    Ok(PruneOutcome {
        model: sliced,
        unsliced: trained.model,
        gates: trained.gates,
        constraints: trained.constraints,
        metrics: trained.metrics,
        removed,
        metric_masked,
        metric_sliced,
    })
}

/// Task fine-tuning without a teacher or gates (used for the teacher's downstream copy).
pub fn finetune_plain(
    model: VlmModel,
    spec: &SynthSpec,
    opts: &FinetuneOptions,
    ctx: &RunContext,
) -> Result<(VlmModel, RunMetrics)> {
    let constraints = Constraints::global(0.0)?;
    let t = prune_train(
        model,
        None,
        spec,
        opts,
        None,
        constraints,
        ctx,
        "finetune_teacher",
    )?;
    Ok((t.model, t.metrics))
}
