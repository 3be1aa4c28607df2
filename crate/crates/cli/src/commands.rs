//! The four subcommands. Each writes its resolved config first, then its artifacts:
//!
//! | command  | files                                                                        |
//! |----------|------------------------------------------------------------------------------|
//! | pretrain | `teacher.ckpt` (with `train_teacher`), `student.ckpt`                        |
//! | finetune | `teacher_ft.ckpt` (with `finetune_teacher`), `pruned.ckpt`, `sliced.ckpt`, `density.json` |
//! | sweep    | `sweep_vision.jsonl`, `sweep_text.jsonl`, `sweep_fusion.jsonl`               |
//! | eval     | `eval.json`                                                                  |
//!
//! Training commands also write `metrics.jsonl` (deterministic) and `timings.jsonl`
//! (wall-clock).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use vlprune::harness::{
    evaluate, finetune_plain, finetune_prune, pretrain_distill, sweep_heads, train_teacher,
    EvalMetrics, RunContext, RunMetrics, SweepRow, TaskKind,
};
use vlprune::l0prune::modal_density_report;
use vlprune::persist::{load, save, Checkpoint};
use vlprune::trimodel::{
    shrink_from_teacher, structurally_remove, unit_param_count, Encoder, UnitKind, VlmModel,
};
use vlprune::VlpError;

use crate::config::RunConfig;
use crate::CliError;

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Run(VlpError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Creates the output directory and echoes the resolved config into it.
fn prepare(cfg: &RunConfig) -> Result<(PathBuf, RunContext), CliError> {
    let out = cfg.out_dir();
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let path = out.join("config.toml");
    write(&path, &cfg.to_toml())?;
    eprintln!("resolved config: {}", path.display());
    Ok((
        out,
        RunContext {
            seed: cfg.seed,
            config_hash: cfg.hash(),
        },
    ))
}

fn require<'a>(value: &'a str, key: &str, why: &str) -> Result<&'a Path, CliError> {
    if value.is_empty() {
        return Err(CliError::Config(format!("{key} is required {why}")));
    }
    Ok(Path::new(value))
}

fn finish(out: &Path, metrics: &RunMetrics) -> Result<(), CliError> {
    metrics.write_jsonl(&out.join("metrics.jsonl"))?;
    metrics.write_timings(&out.join("timings.jsonl"))?;
    Ok(())
}

fn report(json_out: bool, value: &serde_json::Value, human: impl FnOnce() -> String) {
    let text = if json_out {
        serde_json::to_string_pretty(value).expect("json")
    } else {
        human()
    };
    // A closed pipe on stdout is not a run failure; the artifacts are already on disk.
    let _ = writeln!(std::io::stdout(), "{text}");
}

/// Held-out match accuracy from the last match evaluation of a pretraining log.
fn match_acc(m: &RunMetrics) -> Option<f64> {
    m.evals().filter_map(|(_, _, e)| e.match_acc).last()
}

pub fn pretrain(cfg: &RunConfig, json_out: bool) -> Result<(), CliError> {
    let spec = cfg.spec(TaskKind::Retrieval);
    if !cfg.train_teacher {
        require(&cfg.teacher, "teacher", "unless train_teacher is set")?;
    }
    let (out, ctx) = prepare(cfg)?;
    let mut metrics = RunMetrics::default();
    let teacher = if cfg.train_teacher {
        let (t, m) = train_teacher(
            &cfg.preset()?.teacher(),
            &spec,
            &cfg.teacher_options(),
            &ctx,
        )?;
        let steps = m.steps().count() as u64;
        metrics.extend(m);
        save(
            &Checkpoint::new(t.clone(), cfg.seed, steps),
            &out.join("teacher.ckpt"),
        )?;
        t
    } else {
        load(Path::new(&cfg.teacher))?.model
    };
    let teacher_acc = match_acc(&metrics);
    let student = shrink_from_teacher(&teacher)?;
    let (student, m) = pretrain_distill(
        student,
        &teacher,
        &spec,
        &cfg.pretrain_options(cfg.pretrain_steps),
        &ctx,
    )?;
    let student_acc = match_acc(&m);
    metrics.extend(m);
    save(
        &Checkpoint::new(student.clone(), cfg.seed, cfg.pretrain_steps as u64),
        &out.join("student.ckpt"),
    )?;
    finish(&out, &metrics)?;
    let summary = json!({
        "teacher_params": teacher.num_params(),
        "student_params": student.num_params(),
        "teacher_match_acc": teacher_acc,
        "student_match_acc": student_acc,
        "out_dir": out,
    });
    report(json_out, &summary, || {
        let fmt = |a: Option<f64>| a.map_or("-".into(), |v| format!("{v:.4}"));
        format!(
            "teacher {} params, student {} params\nheld-out match accuracy: teacher {}, student {}\nwrote {}",
            teacher.num_params(),
            student.num_params(),
            fmt(teacher_acc),
            fmt(student_acc),
            out.display()
        )
    });
    Ok(())
}

pub fn finetune(cfg: &RunConfig, json_out: bool) -> Result<(), CliError> {
    let task = cfg.task()?;
    if task == TaskKind::Retrieval {
        return Err(CliError::Config(
            "finetune needs a downstream task, not retrieval".into(),
        ));
    }
    let student_path = require(&cfg.student, "student", "for finetune")?;
    if cfg.mix < 1.0 || cfg.finetune_teacher {
        require(
            &cfg.teacher,
            "teacher",
            "when mix < 1 or finetune_teacher is set",
        )?;
    }
    let constraints = cfg.constraints()?;
    let (out, ctx) = prepare(cfg)?;
    let spec = cfg.spec(task);
    let student = load(student_path)?.model;
    let mut metrics = RunMetrics::default();
    let teacher = if cfg.teacher.is_empty() {
        None
    } else {
        let t = load(Path::new(&cfg.teacher))?.model;
        if cfg.finetune_teacher {
            let (t, m) = finetune_plain(
                t,
                &spec,
                &cfg.finetune_options(cfg.teacher_finetune_steps),
                &ctx,
            )?;
            metrics.extend(m);
            save(
                &Checkpoint::new(t.clone(), cfg.seed, cfg.teacher_finetune_steps as u64),
                &out.join("teacher_ft.ckpt"),
            )?;
            Some(t)
        } else {
            Some(t)
        }
    };
    let gates = cfg.gates_for(&student);
    let opts = cfg.finetune_options(cfg.finetune_steps);
    let outcome = finetune_prune(
        student,
        teacher.as_ref(),
        &spec,
        &opts,
        Some(gates),
        constraints,
        &ctx,
    )?;
    metrics.extend(outcome.metrics.clone());
    let steps = cfg.finetune_steps as u64;
    let mut pruned = Checkpoint::new(outcome.unsliced.clone(), cfg.seed, steps);
    pruned.gates = Some(outcome.gates.clone());
    pruned.constraints = Some(outcome.constraints.clone());
    save(&pruned, &out.join("pruned.ckpt"))?;
    save(
        &Checkpoint::new(outcome.model.clone(), cfg.seed, steps),
        &out.join("sliced.ckpt"),
    )?;
    let density = modal_density_report(&outcome.gates);
    let summary = json!({
        "task": task.name(),
        "removed": outcome.removed,
        "density": {"vision": density.vision, "text": density.text, "fusion": density.fusion},
        "gated_before": outcome.unsliced.total_gated_params(),
        "gated_after": outcome.model.total_gated_params(),
        "metric_masked": outcome.metric_masked,
        "metric_sliced": outcome.metric_sliced,
    });
    write(
        &out.join("density.json"),
        &format!(
            "{}\n",
            serde_json::to_string_pretty(&summary).expect("json")
        ),
    )?;
    finish(&out, &metrics)?;
    report(json_out, &summary, || {
        format!(
            "removed {:.4} of gated parameters\nretained density: vision {:.3}, text {:.3}, fusion {:.3}\n{} metric: masked {:.4}, sliced {:.4}\nwrote {}",
            outcome.removed,
            density.vision,
            density.text,
            density.fusion,
            task.name(),
            outcome.metric_masked,
            outcome.metric_sliced,
            out.display()
        )
    });
    Ok(())
}

pub fn sweep(cfg: &RunConfig, json_out: bool) -> Result<(), CliError> {
    let path = require(&cfg.checkpoint, "checkpoint", "for sweep")?;
    let task = cfg.task()?;
    let (out, _) = prepare(cfg)?;
    let ck = load(path)?;
    let spec = cfg.spec(task).held_out();
    let mut tables: Vec<(Encoder, Vec<SweepRow>)> = Vec::new();
    for e in Encoder::ALL {
        let rows = sweep_heads(
            &ck.model,
            &spec,
            &cfg.fractions,
            e,
            &cfg.eval_options(),
            ck.gates.as_ref(),
        )?;
        let mut text = String::new();
        for r in &rows {
            text.push_str(&serde_json::to_string(r).expect("json"));
            text.push('\n');
        }
        write(&out.join(format!("sweep_{}.jsonl", e.name())), &text)?;
        tables.push((e, rows));
    }
    let value = json!(tables
        .iter()
        .map(|(e, rows)| (e.name(), rows))
        .collect::<std::collections::BTreeMap<_, _>>());
    report(json_out, &value, || {
        let mut s = format!("{:>8}", "fraction");
        for (e, _) in &tables {
            s.push_str(&format!(" {:>8}", e.name()));
        }
        for (i, f) in cfg.fractions.iter().enumerate() {
            s.push_str(&format!("\n{f:>8.2}"));
            for (_, rows) in &tables {
                s.push_str(&format!(" {:>8.4}", rows[i].metric));
            }
        }
        s
    });
    Ok(())
}

#[derive(Debug, Serialize)]
struct Counts {
    params: usize,
    gated_full: usize,
    gated_retained: usize,
    removed: f64,
}

/// Gated parameters of the encoder at its unpruned widths.
fn full_gated(model: &VlmModel, e: Encoder) -> usize {
    let enc = model.config.encoder(e);
    let cross = if enc.is_cross_modal { enc.num_heads } else { 0 };
    let per_layer = (enc.num_heads + cross) * unit_param_count(&model.config, e, UnitKind::Head)
        + enc.ffn_dim * unit_param_count(&model.config, e, UnitKind::FfnNeuron);
    enc.num_layers * per_layer
}

fn counts(params: usize, full: usize, retained: usize) -> Counts {
    Counts {
        params,
        gated_full: full,
        gated_retained: retained,
        removed: if full == 0 {
            0.0
        } else {
            1.0 - retained as f64 / full as f64
        },
    }
}

pub fn eval(cfg: &RunConfig, json_out: bool) -> Result<(), CliError> {
    let path = require(&cfg.checkpoint, "checkpoint", "for eval")?;
    let task = cfg.task()?;
    let (out, _) = prepare(cfg)?;
    let ck = load(path)?;
    // Gated checkpoints are evaluated as the model their gates slice to.
    let model = match &ck.gates {
        Some(g) => structurally_remove(&ck.model, g, g.threshold)?,
        None => ck.model,
    };
    let metrics: EvalMetrics = evaluate(
        &model,
        &cfg.spec(task).held_out(),
        &cfg.eval_options(),
        None,
    )?;
    let mut encoders = std::collections::BTreeMap::new();
    for e in Encoder::ALL {
        encoders.insert(
            e.name(),
            counts(
                model.encoder_params(e),
                full_gated(&model, e),
                model.gated_params(e),
            ),
        );
    }
    let full: usize = Encoder::ALL.iter().map(|&e| full_gated(&model, e)).sum();
    let total = counts(model.num_params(), full, model.total_gated_params());
    let ratio = if cfg.reference.is_empty() {
        None
    } else {
        Some(model.num_params() as f64 / load(Path::new(&cfg.reference))?.model.num_params() as f64)
    };
    let value = json!({
        "task": task.name(),
        "metric": metrics.primary(),
        "metrics": metrics,
        "encoders": encoders,
        "total": total,
        "reference_ratio": ratio,
    });
    write(
        &out.join("eval.json"),
        &format!("{}\n", serde_json::to_string_pretty(&value).expect("json")),
    )?;
    report(json_out, &value, || {
        let mut s = format!(
            "{} metric {:.4} over {} samples\n",
            task.name(),
            metrics.primary(),
            metrics.samples
        );
        s.push_str(&format!(
            "{:>8} {:>10} {:>10} {:>10} {:>8}",
            "encoder", "params", "gated", "retained", "removed"
        ));
        let rows = encoders
            .iter()
            .map(|(n, c)| (*n, c))
            .chain(std::iter::once(("total", &total)));
        for (name, c) in rows {
            s.push_str(&format!(
                "\n{name:>8} {:>10} {:>10} {:>10} {:>8.4}",
                c.params, c.gated_full, c.gated_retained, c.removed
            ));
        }
        if let Some(r) = ratio {
            s.push_str(&format!("\nparameter ratio to reference: {r:.4}"));
        }
        s
    });
    Ok(())
}
