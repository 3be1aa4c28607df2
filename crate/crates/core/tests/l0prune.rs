use numcore::gradcheck::check_gradients;
use numcore::{uniform, Graph, NumError, Rng, Tensor, Var};
use proptest::prelude::*;
use vlprune::l0prune::*;
use vlprune::trimodel::*;

const L: f64 = -0.1;
const R: f64 = 1.1;

fn one_group(logits: Vec<f64>, params_per_unit: usize) -> GateSet {
    GateSet {
        stretch_lo: L,
        stretch_hi: R,
        threshold: 0.5,
        groups: vec![UnitGroup {
            encoder: Encoder::Vision,
            layer: 0,
            kind: UnitKind::Head,
            params_per_unit,
            logits,
        }],
    }
}

fn to_num(e: vlprune::VlpError) -> NumError {
    NumError::BadShape {
        op: "l0",
        detail: e.to_string(),
    }
}

#[test]
fn open_probability_at_zero_matches_monte_carlo() {
    let n = 100_000;
    let gates = one_group(vec![0.0; n], 1);
    let z = &sample_gates(&gates, &mut Rng::new(17))[0];
    let p_hat = z.iter().filter(|&&v| v > 0.0).count() as f64 / n as f64;
    let p = 11.0 / 12.0;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    assert!((p_hat - p).abs() < 3.0 * se, "{p_hat} vs {p}");
    assert!((p_hat - p).abs() < 0.005);
    assert!((gates.expected_l0_value() - n as f64 * p).abs() < 1e-6);
}

#[test]
fn expected_l0_matches_monte_carlo_for_random_logits() {
    let mut rng = Rng::new(5);
    let draws = 100_000;
    for case in 0..20 {
        let k = 1 + rng.below(8);
        let logits: Vec<f64> = (0..k).map(|_| rng.normal() * 2.0).collect();
        // Stack `draws` copies so one sampling call yields every draw.
        let gates = one_group(logits.iter().cycle().take(k * draws).copied().collect(), 1);
        let z = &sample_gates(&gates, &mut Rng::stream(case, 1))[0];
        let open = z.iter().filter(|&&v| v > 0.0).count() as f64 / draws as f64;
        let single = one_group(logits, 1);
        let probs = &single.open_probabilities()[0];
        let var: f64 = probs.iter().map(|p| p * (1.0 - p)).sum::<f64>() / draws as f64;
        let expected = single.expected_l0_value();
        assert!(
            (open - expected).abs() < 3.0 * var.sqrt(),
            "case {case}: {open} vs {expected}"
        );
    }
}

#[test]
fn sampling_examples() {
    assert!((hard_concrete(0.0, 0.5, L, R) - 0.5).abs() < 1e-15);
    assert_eq!(hard_concrete(20.0, 0.3, L, R), 1.0);
    let g = one_group(vec![0.0, -20.0, 20.0], 1);
    let det = &g.deterministic()[0];
    assert!(
        (det[0] - 0.5).abs() < 1e-12 && det[0] > 0.0,
        "ties are retained"
    );
    assert_eq!(det[1], 0.0);
    assert_eq!(det[2], 1.0);
}

proptest! {
    #[test]
    fn gate_is_bounded_and_monotone(a in -8.0f64..8.0, da in 0.0f64..4.0, u in 1e-6f64..0.999, du in 0.0f64..0.5) {
        let z = hard_concrete(a, u, L, R);
        prop_assert!((0.0..=1.0).contains(&z));
        prop_assert!(hard_concrete(a + da, u, L, R) >= z);
        let u2 = (u + du).min(1.0 - 1e-9);
        prop_assert!(hard_concrete(a, u2, L, R) >= z);
    }

    #[test]
    fn deterministic_gate_is_monotone(a in -8.0f64..8.0, da in 0.0f64..4.0) {
        let g = one_group(vec![a, a + da], 1);
        let d = &g.deterministic()[0];
        prop_assert!(d[1] >= d[0]);
        prop_assert!((0.0..=1.0).contains(&d[0]));
    }
}

#[test]
fn expected_l0_limits_and_model_size_examples() {
    let g = one_group(vec![-1e3, 0.0], 1);
    assert!((g.expected_l0_value() - 11.0 / 12.0).abs() < 1e-12);

    let mut two = one_group(vec![50.0], 3);
    two.groups.push(UnitGroup {
        encoder: Encoder::Text,
        layer: 0,
        kind: UnitKind::FfnNeuron,
        params_per_unit: 1,
        logits: vec![-50.0],
    });
    assert!((two.model_size_value(None).unwrap() - 0.75).abs() < 1e-12);
    assert!((two.model_size_value(Some(&[Encoder::Text])).unwrap()).abs() < 1e-12);
    for g in two.groups.iter_mut() {
        g.logits.iter_mut().for_each(|v| *v = 0.0);
    }
    assert!((two.model_size_value(None).unwrap() - 11.0 / 12.0).abs() < 1e-12);
    let open = one_group(vec![60.0; 4], 7);
    assert!((open.model_size_value(None).unwrap() - 1.0).abs() < 1e-12);
    assert!(one_group(vec![1.0], 0).model_size_value(None).is_err());
}

fn random_groups(rng: &mut Rng) -> GateSet {
    let mut gs = one_group(Vec::new(), 0);
    gs.groups.clear();
    for (i, e) in Encoder::ALL.into_iter().enumerate() {
        let n = 1 + rng.below(4);
        gs.groups.push(UnitGroup {
            encoder: e,
            layer: i,
            kind: UnitKind::ALL[i],
            params_per_unit: 1 + rng.below(20),
            logits: (0..n).map(|_| rng.normal() * 2.0).collect(),
        });
    }
    gs
}

fn logit_inputs(gs: &GateSet) -> Vec<Tensor> {
    gs.groups
        .iter()
        .map(|g| Tensor::vector(g.logits.clone()))
        .collect()
}

#[test]
fn expected_l0_and_size_pass_finite_differences() {
    let mut rng = Rng::new(31);
    for case in 0..20 {
        let gs = random_groups(&mut rng);
        let inputs = logit_inputs(&gs);
        let r =
            check_gradients(|g, v| gs.expected_l0(g, v).map_err(to_num), &inputs, 1e-5).unwrap();
        assert!(r.passes(1e-4), "expected_l0 case {case}: {r:?}");
        let scope = [Encoder::Vision, Encoder::Fusion];
        let r = check_gradients(
            |g, v| gs.model_size(g, v, Some(&scope)).map_err(to_num),
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(r.passes(1e-4), "model_size case {case}: {r:?}");

        // Richardson-extrapolated central differences are accurate enough for 1e-6.
        let mut g = Graph::new();
        let bound = gs.bind(&mut g);
        let l0 = gs.expected_l0(&mut g, &bound).unwrap();
        let grads = g.backward(l0).unwrap();
        for (gi, grp) in gs.groups.iter().enumerate() {
            let analytic = grads.get(bound[gi]);
            for j in 0..grp.logits.len() {
                let at = |h: f64| {
                    let mut moved = gs.clone();
                    moved.groups[gi].logits[j] += h;
                    moved.expected_l0_value()
                };
                let d = |h: f64| (at(h) - at(-h)) / (2.0 * h);
                let h = 1e-3;
                let numeric = (4.0 * d(h / 2.0) - d(h)) / 3.0;
                let a = analytic.data()[j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-6, "case {case} unit {gi}.{j}: {a} vs {numeric}");
            }
        }
    }
}

#[test]
fn lagrangian_passes_finite_differences_on_gate_logits() {
    let mut rng = Rng::new(32);
    for case in 0..20 {
        let gs = random_groups(&mut rng);
        let state = LagrangianState {
            lam1: rng.normal(),
            lam2: rng.uniform_f64() * 3.0,
            target: rng.uniform_f64(),
        };
        let r = check_gradients(
            |g, v| {
                let size = gs.model_size(g, v, None).map_err(to_num)?;
                let lam1 = g.constant(Tensor::scalar(state.lam1));
                let lam2 = g.constant(Tensor::scalar(state.lam2));
                state.loss_with(g, size, lam1, lam2).map_err(to_num)
            },
            &logit_inputs(&gs),
            1e-5,
        )
        .unwrap();
        assert!(r.passes(1e-4), "case {case}: {r:?}");
    }
}

/// Stretched pre-clamp gate for the draws `sample` will make from `Rng::new(seed)`.
fn stretched(gs: &GateSet, seed: u64) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    for grp in &gs.groups {
        let u = uniform(&mut rng, &[grp.logits.len()]);
        for (&a, &u) in grp.logits.iter().zip(u.data()) {
            let s = 1.0 / (1.0 + (-(u.ln() - (1.0 - u).ln() + a)).exp());
            out.push(s * (R - L) + L);
        }
    }
    out
}

#[test]
fn hard_concrete_sampling_passes_finite_differences() {
    let mut rng = Rng::new(33);
    let mut checked = 0;
    let mut seed = 0;
    while checked < 20 {
        seed += 1;
        let gs = random_groups(&mut rng);
        // Central differences straddling a clamp kink are meaningless; skip those draws.
        if stretched(&gs, seed)
            .iter()
            .any(|s| s.abs() < 1e-3 || (s - 1.0).abs() < 1e-3)
        {
            continue;
        }
        let weights: Vec<f64> = (0..gs.num_units()).map(|_| rng.normal()).collect();
        let r = check_gradients(
            |g, v| {
                let z = gs.sample(g, v, &mut Rng::new(seed)).map_err(to_num)?;
                let mut total: Option<Var> = None;
                let mut off = 0;
                for grp in &gs.groups {
                    let n = grp.logits.len();
                    let w = g.constant(Tensor::vector(weights[off..off + n].to_vec()));
                    off += n;
                    let p = g.mul(z[&grp.key()], w)?;
                    let s = g.sum(p);
                    total = Some(match total {
                        Some(t) => g.add(t, s)?,
                        None => s,
                    });
                }
                Ok(total.expect("groups"))
            },
            &logit_inputs(&gs),
            1e-5,
        )
        .unwrap();
        assert!(r.passes(1e-4), "seed {seed}: {r:?}");
        checked += 1;
    }
}

#[test]
fn lagrangian_examples() {
    let st = LagrangianState {
        lam1: 1.0,
        lam2: 2.0,
        target: 0.25,
    };
    assert!((st.loss_value(0.3) - 0.055).abs() < 1e-15);
    assert_eq!(st.loss_value(0.25), 0.0);

    let mut g = Graph::new();
    let size = g.input(Tensor::scalar(0.3));
    let l = lagrangian_loss(&mut g, &st, size).unwrap();
    assert!((g.value(l).item() - 0.055).abs() < 1e-15);
    let grads = g.backward(l).unwrap();
    assert!((grads.get_named("lagr.lam1").unwrap().item() - 0.05).abs() < 1e-15);
    assert!((grads.get_named("lagr.lam2").unwrap().item() - 0.0025).abs() < 1e-15);

    let mut g = Graph::new();
    let at_target = g.input(Tensor::scalar(0.25));
    let l = lagrangian_loss(
        &mut g,
        &LagrangianState {
            lam1: 7.0,
            lam2: 3.0,
            target: 0.25,
        },
        at_target,
    )
    .unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn controller_ascent() {
    let st = LagrangianState::new(0.75);
    assert_eq!(controller_step(&st, 0.75, 0.01).unwrap(), st);
    let up = controller_step(&st, 0.9, 0.01).unwrap();
    assert!(up.lam1 > 0.0 && up.lam2 > 0.0);
    let mut s = st;
    for k in 1..=50 {
        s = controller_step(&s, 0.85, 0.01).unwrap();
        assert!((s.lam1 - k as f64 * 0.01 * 0.1).abs() < 1e-12);
    }
    let neg = LagrangianState { lam2: -1.0, ..st };
    assert_eq!(controller_step(&neg, 0.75, 0.01).unwrap().lam2, 0.0);
    assert!(controller_step(&st, 0.8, 0.0).is_err());
}

#[test]
fn manual_schedules() {
    let c = manual_sparsity_schedule([0.3, 0.3, 0.3]).unwrap();
    assert_eq!(c.controllers.len(), 3);
    for (ctl, e) in c.controllers.iter().zip(Encoder::ALL) {
        assert_eq!(ctl.scope, vec![e]);
        assert!((ctl.state.target - 0.7).abs() < 1e-15 && ctl.active);
    }
    let inert = manual_sparsity_schedule([0.0; 3]).unwrap();
    assert!(!inert.any_active());
    let f = manual_sparsity_schedule([0.1, 0.1, 0.6]).unwrap();
    assert!((f.controllers[2].state.target - 0.4).abs() < 1e-15);
    assert!(manual_sparsity_schedule([1.0, 0.0, 0.0]).is_err());
    assert!(manual_sparsity_schedule([-0.1, 0.0, 0.0]).is_err());
    assert!(Constraints::global(0.25).unwrap().any_active());
    assert!(!Constraints::global(0.0).unwrap().any_active());
}

#[test]
fn density_report_isolates_groups() {
    let model = VlmModel::init(Preset::Tiny.student(), &mut Rng::new(2)).unwrap();
    let mut gs = GateSet::for_model(&model, DEFAULT_INIT_LOGIT);
    let all = gs.modal_density_report();
    assert_eq!((all.vision, all.text, all.fusion), (1.0, 1.0, 1.0));
    gs.fill_encoder(Encoder::Text, -20.0);
    let d = modal_density_report(&gs);
    assert_eq!((d.vision, d.text, d.fusion), (1.0, 0.0, 1.0));
}

#[test]
fn every_prunable_unit_has_one_gate() {
    let model = VlmModel::init(Preset::Mini.student(), &mut Rng::new(2)).unwrap();
    let gs = GateSet::for_model(&model, DEFAULT_INIT_LOGIT);
    let units: usize = Encoder::ALL
        .iter()
        .map(|&e| {
            let c = model.config.encoder(e);
            c.num_layers
                * (c.num_heads + c.ffn_dim + if c.is_cross_modal { c.num_heads } else { 0 })
        })
        .sum();
    assert_eq!(gs.num_units(), units);
    let w: usize = gs
        .groups
        .iter()
        .map(|g| g.params_per_unit * g.logits.len())
        .sum();
    assert_eq!(w, model.total_gated_params());
    let mut bad = gs.clone();
    bad.stretch_lo = 0.1;
    assert!(bad.validate().is_err());
}

#[test]
fn slicing_polarized_gates_matches_expected_size() {
    let mut rng = Rng::new(40);
    for _ in 0..10 {
        let model = VlmModel::init(Preset::Mini.student(), &mut rng).unwrap();
        let mut gs = GateSet::for_model(&model, DEFAULT_INIT_LOGIT);
        for grp in gs.groups.iter_mut() {
            for v in grp.logits.iter_mut() {
                let mag = 4.0 + rng.uniform_f64() * 4.0;
                *v = if rng.uniform_f64() < 0.35 { -mag } else { mag };
            }
            grp.logits[0] = grp.logits[0].abs();
        }
        let sliced = structurally_remove(&model, &gs, 0.5).unwrap();
        let counted = sliced.total_gated_params() as f64 / model.total_gated_params() as f64;
        let expected = gs.model_size_value(None).unwrap();
        assert!(
            (counted - expected).abs() <= 0.05,
            "{counted} vs {expected}"
        );
    }
}

#[test]
fn lagrangian_gradient_never_reaches_model_weights() {
    let model = VlmModel::init(Preset::Tiny.student(), &mut Rng::new(6)).unwrap();
    let gs = GateSet::for_model(&model, 1.0);
    let batch = vlprune::harness::Batch::from_samples(
        &vlprune::harness::SynthSpec::new(vlprune::harness::TaskKind::Balanced, 1).samples(0, 3),
    );
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let bound = gs.bind(&mut g);
    let z = gs.sample(&mut g, &bound, &mut Rng::new(1)).unwrap();
    let heads = HeadRequest {
        cls: true,
        ..Default::default()
    };
    let _ = forward(
        &mut g,
        &model.config,
        &p,
        &batch.input,
        &heads,
        Some(&z),
        Mode::Plain,
    )
    .unwrap();
    let size = gs.model_size(&mut g, &bound, None).unwrap();
    let st = LagrangianState {
        lam1: 0.7,
        lam2: 0.3,
        target: 0.5,
    };
    let l = lagrangian_loss(&mut g, &st, size).unwrap();
    let grads = g.backward(l).unwrap().by_name();
    let mut gate_grad = 0.0;
    for (name, t) in &grads {
        let mass: f64 = t.data().iter().map(|v| v.abs()).sum();
        if name.starts_with("gate.") {
            gate_grad += mass;
        } else if !name.starts_with("lagr.") {
            assert_eq!(mass, 0.0, "{name}");
        }
    }
    assert!(gate_grad > 0.0);
}
