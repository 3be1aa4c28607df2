use std::collections::{BTreeMap, BTreeSet};

use numcore::{Graph, Rng};
use vlprune::distill::{
    finetune_loss_value, pretrain_loss_value, vlp_losses, DistillWeights, KdValues, VlpTargets,
};
use vlprune::harness::*;
use vlprune::l0prune::Constraints;
use vlprune::trimodel::*;

fn bytes(m: &VlmModel) -> Vec<u8> {
    m.params.values().flat_map(|t| t.to_le_bytes()).collect()
}

fn quick(steps: usize) -> PretrainOptions {
    let mut o = PretrainOptions::new(steps);
    o.budget.batch_size = 8;
    o.budget.eval = EvalOptions {
        batches: 1,
        batch_size: 8,
    };
    o
}

#[test]
fn generation_is_deterministic() {
    for task in TaskKind::ALL {
        let spec = SynthSpec::new(task, 9);
        let (a, b) = (generate(&spec, 40), generate(&spec, 40));
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(
                x.image.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                y.image.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            assert_eq!((&x.tokens, x.label), (&y.tokens, y.label));
        }
        assert_ne!(generate(&SynthSpec::new(task, 10), 4)[0].image, a[0].image);
    }
}

#[test]
fn modal_labels_follow_one_modality() {
    let text = generate(&SynthSpec::new(TaskKind::TextOnly, 2), 200);
    let mut by_caption: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for s in &text {
        assert_eq!(s.label, s.caption_latent.shape);
        assert_eq!(
            *by_caption.entry(s.tokens.clone()).or_insert(s.label),
            s.label
        );
    }
    // Pairing every caption with another sample's image keeps its label valid.
    let mut images: Vec<usize> = (0..text.len()).collect();
    Rng::new(1).shuffle(&mut images);
    for (i, s) in text.iter().enumerate() {
        assert_eq!(by_caption[&s.tokens], text[i].label);
        let _ = &text[images[i]].image;
    }
    for s in generate(&SynthSpec::new(TaskKind::VisionOnly, 2), 200) {
        assert_eq!(s.label, s.image_latent.shape);
    }
    for s in generate(&SynthSpec::new(TaskKind::Balanced, 2), 200) {
        assert_eq!(s.label, s.image_latent.shape * 4 + s.caption_latent.color);
    }
}

#[test]
fn retrieval_batches_have_no_latent_collisions() {
    let spec = SynthSpec::new(TaskKind::Retrieval, 4);
    let batches = [
        (0, 64),
        (96, 64),
        (224, 64),
        (0, COMBOS),
        (32 * 7, 32),
        (32 * 40, 32),
    ];
    for (start, n) in batches {
        let s = spec.samples(start, n);
        let latents: BTreeSet<usize> = s.iter().map(|x| x.caption_latent.index()).collect();
        assert_eq!(latents.len(), n, "start {start}");
        assert!(s.iter().all(|x| x.image_latent == x.caption_latent));
    }
}

#[test]
fn hardest_negatives_never_share_latents() {
    let spec = SynthSpec::new(TaskKind::Retrieval, 4);
    let batch = Batch::from_samples(&spec.samples(0, 16));
    let model = VlmModel::init(Preset::Tiny.student(), &mut Rng::new(3)).unwrap();
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let enc = encode(&mut g, &model.config, &p, &batch.input, None, Mode::Plain).unwrap();
    let (pairs, labels) = itm_pairs(
        g.value(enc.itc.sim_t2i),
        &batch.image_latents,
        &batch.caption_latents,
    );
    assert_eq!(pairs.len(), 32);
    for (&(t, i), &l) in pairs.iter().zip(&labels) {
        assert_eq!(l == 1, batch.caption_latents[t] == batch.image_latents[i]);
    }
}

#[test]
fn overfits_one_batch() {
    let spec = SynthSpec::new(TaskKind::Retrieval, 12);
    let batch = Batch::from_samples(&spec.samples(0, 8));
    let (masked, positions, targets) = batch.mask_tokens(0.15, &mut Rng::new(2));
    let mut model = VlmModel::init(Preset::Mini.student(), &mut Rng::new(5)).unwrap();
    let mut opt = AdamW::new(AdamWConfig::with_lr(3e-3));
    let positives: Vec<(usize, usize)> = (0..8).map(|i| (i, i)).collect();
    let mut last = f64::INFINITY;
    for _ in 0..300 {
        let mut g = Graph::new();
        let p = model.bind(&mut g, true);
        let enc = encode(&mut g, &model.config, &p, &batch.input, None, Mode::Plain).unwrap();
        let (pairs, itm_labels) = itm_pairs(
            g.value(enc.itc.sim_t2i),
            &batch.image_latents,
            &batch.caption_latents,
        );
        let itm = HeadRequest {
            itm: true,
            ..Default::default()
        };
        let mut tr = fuse(
            &mut g,
            &model.config,
            &p,
            &enc,
            &pairs,
            &itm,
            None,
            Mode::Plain,
        )
        .unwrap();
        let menc =
            reencode_text(&mut g, &model.config, &p, &enc, &masked, None, Mode::Plain).unwrap();
        let mlm = HeadRequest {
            mlm_positions: positions.clone(),
            ..Default::default()
        };
        tr.logits.mlm = fuse(
            &mut g,
            &model.config,
            &p,
            &menc,
            &positives,
            &mlm,
            None,
            Mode::Plain,
        )
        .unwrap()
        .logits
        .mlm;
        let parts = vlp_losses(
            &mut g,
            &tr,
            &VlpTargets {
                itm_labels,
                mlm_targets: targets.clone(),
            },
        )
        .unwrap();
        let loss = parts.total(&mut g).unwrap();
        last = g.value(loss).item();
        if last < 0.05 {
            let sim = g.value(enc.itc.sim_t2i);
            for i in 0..8 {
                let best = (0..8)
                    .max_by(|&a, &b| sim.at2(i, a).total_cmp(&sim.at2(i, b)))
                    .unwrap();
                assert_eq!(best, i, "memorized batch has recall@1 = 1");
            }
            break;
        }
        let grads = g.backward(loss).unwrap();
        opt.step(&mut model.params, &grads.by_name(), 1.0);
    }
    assert!(last < 0.05, "final loss {last}");
}

#[test]
fn zero_steps_return_the_initial_model() {
    let spec = SynthSpec::new(TaskKind::Retrieval, 1);
    let cfg = Preset::Tiny.teacher();
    let (a, ma) = train_teacher(&cfg, &spec, &quick(0), &RunContext::new(4)).unwrap();
    let (b, _) = train_teacher(&cfg, &spec, &quick(0), &RunContext::new(4)).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_eq!(ma.steps().count(), 0);
    let (c, _) = train_vlp(
        a.clone(),
        None,
        &spec,
        &quick(0),
        &RunContext::new(4),
        "teacher",
    )
    .unwrap();
    assert_eq!(bytes(&a), bytes(&c));
}

#[test]
fn same_seed_gives_identical_bytes() {
    let spec = SynthSpec::new(TaskKind::Retrieval, 1);
    let cfg = Preset::Tiny.teacher();
    let (a, ma) = train_teacher(&cfg, &spec, &quick(6), &RunContext::new(4)).unwrap();
    let (b, mb) = train_teacher(&cfg, &spec, &quick(6), &RunContext::new(4)).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_eq!(ma.to_jsonl(), mb.to_jsonl());
    let (c, _) = train_teacher(&cfg, &spec, &quick(6), &RunContext::new(5)).unwrap();
    assert_ne!(bytes(&a), bytes(&c));
}

#[test]
fn mix_one_matches_teacherless_training() {
    let spec = SynthSpec::new(TaskKind::Retrieval, 1);
    let (teacher, _) = train_teacher(
        &Preset::Tiny.teacher(),
        &spec,
        &quick(3),
        &RunContext::new(2),
    )
    .unwrap();
    let student = shrink_from_teacher(&teacher).unwrap();
    let mut o = quick(5);
    o.weights.mix = 1.0;
    let (a, ma) =
        pretrain_distill(student.clone(), &teacher, &spec, &o, &RunContext::new(2)).unwrap();
    let (b, mb) = train_vlp(student, None, &spec, &o, &RunContext::new(2), "pretrain").unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    let totals = |m: &RunMetrics| m.steps().map(|s| s.total.to_bits()).collect::<Vec<_>>();
    assert_eq!(totals(&ma), totals(&mb));
    assert!(ma
        .steps()
        .all(|s| s.kd_attn == Some(0.0) && s.kd_hid == Some(0.0) && s.kd_logits == Some(0.0)));
}

#[test]
fn self_distillation_starts_at_zero_kd() {
    let spec = SynthSpec::new(TaskKind::Retrieval, 1);
    let teacher = VlmModel::init(Preset::Tiny.teacher(), &mut Rng::new(3)).unwrap();
    let mut o = quick(1);
    o.weights.mix = 0.0;
    let (_, m) =
        pretrain_distill(teacher.clone(), &teacher, &spec, &o, &RunContext::new(1)).unwrap();
    let first = m.steps().next().unwrap();
    assert_eq!(
        (first.kd_attn, first.kd_hid, first.kd_logits),
        (Some(0.0), Some(0.0), Some(0.0))
    );
    assert_eq!(first.total, 0.0);
}

fn stage_weights(m: &RunMetrics) -> DistillWeights {
    m.records
        .iter()
        .find_map(|r| match r {
            Record::Stage {
                weights: Some(w), ..
            } => Some(serde_json::from_value(w.clone()).unwrap()),
            _ => None,
        })
        .unwrap()
}

#[test]
fn logged_totals_equal_their_constituents() {
    let spec = SynthSpec::new(TaskKind::Retrieval, 1);
    let (teacher, _) = train_teacher(
        &Preset::Tiny.teacher(),
        &spec,
        &quick(3),
        &RunContext::new(2),
    )
    .unwrap();
    let student = shrink_from_teacher(&teacher).unwrap();
    let (student, m) =
        pretrain_distill(student, &teacher, &spec, &quick(4), &RunContext::new(2)).unwrap();
    let w = stage_weights(&m);
    for s in m.steps() {
        let vlp = s.itc.unwrap() + s.itm.unwrap() + s.mlm.unwrap();
        let kd = KdValues {
            attn: s.kd_attn.unwrap(),
            hid: s.kd_hid.unwrap(),
            logits: s.kd_logits.unwrap(),
        };
        assert!((s.total - pretrain_loss_value(vlp, &kd, &w)).abs() < 1e-9);
    }

    let task = SynthSpec::new(TaskKind::Balanced, 1);
    let mut fo = FinetuneOptions::new(4);
    fo.budget.batch_size = 8;
    fo.budget.eval = EvalOptions {
        batches: 1,
        batch_size: 8,
    };
    let (ft_teacher, _) = finetune_plain(teacher, &task, &fo, &RunContext::new(2)).unwrap();
    let out = finetune_prune(
        student,
        Some(&ft_teacher),
        &task,
        &fo,
        None,
        Constraints::global(0.3).unwrap(),
        &RunContext::new(2),
    )
    .unwrap();
    let w = stage_weights(&out.metrics);
    for s in out.metrics.steps() {
        let kd = KdValues {
            attn: s.kd_attn.unwrap(),
            hid: s.kd_hid.unwrap(),
            logits: s.kd_logits.unwrap(),
        };
        let expected = finetune_loss_value(
            s.task.unwrap(),
            kd.weighted(&w),
            s.lagrangian.unwrap(),
            w.mix,
        );
        assert!((s.total - expected).abs() < 1e-9);
        assert!(s.expected_size.is_some() && s.lam1.is_some());
    }
}

#[test]
fn untrained_match_head_is_at_chance() {
    let model = VlmModel::init(Preset::Tiny.student(), &mut Rng::new(21)).unwrap();
    let spec = SynthSpec::new(TaskKind::Match, 3).held_out();
    let m = evaluate(
        &model,
        &spec,
        &EvalOptions {
            batches: 13,
            batch_size: 32,
        },
        None,
    )
    .unwrap();
    assert!(m.samples >= 400);
    assert!((m.match_acc.unwrap() - 0.5).abs() <= 0.05, "{m:?}");
}

fn ft_opts(steps: usize) -> FinetuneOptions {
    let mut fo = FinetuneOptions::new(steps);
    fo.budget.batch_size = 8;
    fo.budget.eval = EvalOptions {
        batches: 1,
        batch_size: 8,
    };
    fo
}

#[test]
fn zero_target_leaves_the_model_unsliced() {
    let student = VlmModel::init(Preset::Tiny.student(), &mut Rng::new(8)).unwrap();
    let task = SynthSpec::new(TaskKind::VisionOnly, 1);
    let out = finetune_prune(
        student.clone(),
        None,
        &task,
        &ft_opts(3),
        None,
        Constraints::global(0.0).unwrap(),
        &RunContext::new(1),
    )
    .unwrap();
    assert_eq!(out.removed, 0.0);
    assert_eq!(out.model.config, student.config);
    assert_eq!(bytes(&out.model), bytes(&out.unsliced));
    assert!(out.gates.groups.iter().all(|g| g
        .logits
        .iter()
        .all(|&v| v == vlprune::l0prune::DEFAULT_INIT_LOGIT)));
    assert!(out
        .metrics
        .steps()
        .all(|s| s.expected_size.is_none() && s.lagrangian == Some(0.0)));
}

#[test]
fn reported_sparsity_is_counted_on_the_sliced_model() {
    let student = VlmModel::init(Preset::Tiny.student(), &mut Rng::new(8)).unwrap();
    let task = SynthSpec::new(TaskKind::Balanced, 1);
    let mut gates = vlprune::l0prune::GateSet::for_model(&student, 3.0);
    // Close half of each FFN layer's neurons so slicing has something to remove.
    for grp in gates
        .groups
        .iter_mut()
        .filter(|g| g.kind == UnitKind::FfnNeuron)
    {
        let n = grp.logits.len();
        grp.logits[n / 2..].iter_mut().for_each(|v| *v = -8.0);
    }
    let out = finetune_prune(
        student,
        None,
        &task,
        &ft_opts(2),
        Some(gates),
        Constraints::global(0.25).unwrap(),
        &RunContext::new(1),
    )
    .unwrap();
    let before = out.unsliced.total_gated_params() as f64;
    let after = out.model.total_gated_params() as f64;
    assert!(out.removed > 0.0);
    assert_eq!(out.removed, 1.0 - after / before);
    let pruned = out.metrics.records.iter().find_map(|r| match r {
        Record::Pruned {
            removed,
            gated_after,
            ..
        } => Some((*removed, *gated_after)),
        _ => None,
    });
    assert_eq!(pruned, Some((out.removed, after as usize)));
}

#[test]
fn sweep_baseline_and_range() {
    let model = VlmModel::init(Preset::Tiny.student(), &mut Rng::new(8)).unwrap();
    let spec = SynthSpec::new(TaskKind::VisionOnly, 1).held_out();
    let opts = EvalOptions {
        batches: 2,
        batch_size: 16,
    };
    let base = evaluate(&model, &spec, &opts, None).unwrap().primary();
    let rows = sweep_heads(
        &model,
        &spec,
        &[0.0, 0.5, 1.0],
        Encoder::Vision,
        &opts,
        None,
    )
    .unwrap();
    assert_eq!(rows[0].metric, base);
    assert_eq!(rows[0].pruned_heads, 0);
    assert_eq!(rows[2].pruned_heads, rows[2].total_heads);
    assert!(sweep_heads(&model, &spec, &[1.5], Encoder::Text, &opts, None).is_err());
    assert_eq!(
        rows,
        sweep_heads(
            &model,
            &spec,
            &[0.0, 0.5, 1.0],
            Encoder::Vision,
            &opts,
            None
        )
        .unwrap()
    );
}

#[test]
fn metrics_files_are_line_delimited_json() {
    let spec = SynthSpec::new(TaskKind::Retrieval, 1);
    let (_, m) = train_teacher(
        &Preset::Tiny.teacher(),
        &spec,
        &quick(2),
        &RunContext::new(4),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.jsonl");
    m.write_jsonl(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let kinds: Vec<String> = text
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["kind"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    assert_eq!(kinds[0], "stage");
    assert_eq!(kinds.iter().filter(|k| *k == "step").count(), 2);
    assert!(kinds.iter().any(|k| k == "eval"));
    m.write_timings(&dir.path().join("timings.jsonl")).unwrap();
}
