//! The flat run configuration.
//!
//! Values resolve in three layers, later ones winning: built-in defaults, the `--config`
//! TOML file, then command-line flags (`--set key=value` first, named flags last). The
//! resolved document is written to `<out_dir>/config.toml` before any computation; passing
//! that file back with `--config` repeats the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vlprune::distill::{DistillWeights, KdOptions};
use vlprune::harness::{
    EvalOptions, FinetuneOptions, PretrainOptions, StageBudget, SynthSpec, TaskKind,
};
use vlprune::l0prune::{manual_sparsity_schedule, Constraints, GateSet};
use vlprune::trimodel::{Preset, VlmModel};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Model size: tiny, mini, small or desk.
    pub preset: String,
    /// Seed of initialization, gate noise, masking and batch order.
    pub seed: u64,
    /// Seed of the synthetic corpus.
    pub data_seed: u64,
    /// Pixel noise of synthetic images.
    pub noise: f64,
    /// Downstream task for finetune, sweep and eval.
    pub task: String,
    pub out_dir: String,

    /// Teacher checkpoint (pretrain: pretrained teacher; finetune: task teacher).
    pub teacher: String,
    /// Student checkpoint to fine-tune.
    pub student: String,
    /// Checkpoint to sweep or evaluate.
    pub checkpoint: String,
    /// Checkpoint whose parameter count eval reports the ratio against.
    pub reference: String,
    pub train_teacher: bool,
    pub finetune_teacher: bool,

    pub teacher_steps: usize,
    /// Stop teacher pretraining once held-out match accuracy reaches this; 0 disables.
    pub teacher_stop_at: f64,
    pub pretrain_steps: usize,
    pub teacher_finetune_steps: usize,
    pub finetune_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub gate_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub eval_every: usize,
    pub eval_batches: usize,
    pub eval_batch_size: usize,

    pub mix: f64,
    pub w_attn: f64,
    pub w_hid: f64,
    pub w_logits: f64,
    pub calibrate: bool,
    pub temperature: f64,
    pub include_cross_attn: bool,
    pub mlm_prob: f64,

    /// Global removed-fraction target; ignored when `manual_sparsity` is set.
    pub target_removed: f64,
    /// Per-encoder removed fractions "vision,text,fusion"; empty for the global target.
    pub manual_sparsity: String,
    pub threshold: f64,
    pub stretch_lo: f64,
    pub stretch_hi: f64,
    pub init_logit: f64,
    pub ascent_rate: f64,

    /// Head-pruning fractions for sweep.
    pub fractions: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let budget = StageBudget::new(0);
        let kd = KdOptions::default();
        let w = DistillWeights::default();
        let gates = (
            vlprune::l0prune::DEFAULT_STRETCH,
            vlprune::l0prune::DEFAULT_THRESHOLD,
        );
        Self {
            preset: "mini".into(),
            seed: 0,
            data_seed: 0,
            noise: 0.1,
            task: "balanced".into(),
            out_dir: "runs/latest".into(),
            teacher: String::new(),
            student: String::new(),
            checkpoint: String::new(),
            reference: String::new(),
            train_teacher: false,
            finetune_teacher: false,
            teacher_steps: 3000,
            teacher_stop_at: 0.9,
            pretrain_steps: 3000,
            teacher_finetune_steps: 1500,
            finetune_steps: 1500,
            batch_size: budget.batch_size,
            lr: budget.lr,
            gate_lr: budget.gate_lr,
            warmup_frac: budget.warmup_frac,
            weight_decay: budget.weight_decay,
            eval_every: 100,
            eval_batches: budget.eval.batches,
            eval_batch_size: budget.eval.batch_size,
            mix: w.mix,
            w_attn: w.w_attn,
            w_hid: w.w_hid,
            w_logits: w.w_logits,
            calibrate: true,
            temperature: kd.temperature,
            include_cross_attn: kd.include_cross_attn,
            mlm_prob: 0.15,
            target_removed: 0.25,
            manual_sparsity: String::new(),
            threshold: gates.1,
            stretch_lo: gates.0 .0,
            stretch_hi: gates.0 .1,
            init_logit: vlprune::l0prune::DEFAULT_INIT_LOGIT,
            ascent_rate: vlprune::l0prune::DEFAULT_ASCENT_RATE,
            fractions: vec![0.0, 0.2, 0.4, 0.6, 0.8],
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Parses a `--set` right-hand side as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    /// Resolves defaults, the optional file and `overrides` (applied in order).
    pub fn resolve(
        file: Option<&Path>,
        overrides: &[(String, toml::Value)],
    ) -> Result<Self, CliError> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| config_err(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| config_err(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            table.insert(k.clone(), v.clone());
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Splits `key=value` into an override.
    pub fn parse_set(s: &str) -> Result<(String, toml::Value), CliError> {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| config_err(format!("--set expects key=value, got {s:?}")))?;
        Ok((k.trim().to_string(), parse_value(v.trim())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.preset()?;
        self.task()?;
        self.weights().validate().map_err(|e| match e {
            vlprune::VlpError::Config(m) => config_err(m),
            other => config_err(other.to_string()),
        })?;
        if self.batch_size == 0 || self.eval_batches == 0 || self.eval_batch_size == 0 {
            return Err(config_err("batch sizes and eval_batches must be positive"));
        }
        if !(self.stretch_lo < 0.0 && self.stretch_hi > 1.0) {
            return Err(config_err(format!(
                "stretch interval ({}, {}) must contain [0, 1]",
                self.stretch_lo, self.stretch_hi
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(config_err(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        if self.ascent_rate <= 0.0 {
            return Err(config_err("ascent_rate must be positive"));
        }
        if self.temperature <= 0.0 {
            return Err(config_err("temperature must be positive"));
        }
        if let Some(f) = self.fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(config_err(format!("sweep fraction {f} outside [0, 1]")));
        }
        self.constraints()?;
        Ok(())
    }

    pub fn preset(&self) -> Result<Preset, CliError> {
        self.preset
            .parse()
            .map_err(|e: vlprune::VlpError| config_err(e.to_string()))
    }

    pub fn task(&self) -> Result<TaskKind, CliError> {
        self.task
            .parse()
            .map_err(|e: vlprune::VlpError| config_err(e.to_string()))
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out_dir)
    }

    /// The resolved document as written to `config.toml`.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the resolved document with `out_dir` blanked, so a rerun into another
    /// directory logs the same hash.
    pub fn hash(&self) -> String {
        let blank = RunConfig {
            out_dir: String::new(),
            ..self.clone()
        };
        Sha256::digest(blank.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn spec(&self, task: TaskKind) -> SynthSpec {
        SynthSpec {
            noise: self.noise,
            ..SynthSpec::new(task, self.data_seed)
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            batches: self.eval_batches,
            batch_size: self.eval_batch_size,
        }
    }

    fn budget(&self, steps: usize) -> StageBudget {
        StageBudget {
            steps,
            batch_size: self.batch_size,
            lr: self.lr,
            gate_lr: self.gate_lr,
            warmup_frac: self.warmup_frac,
            weight_decay: self.weight_decay,
            eval_every: self.eval_every,
            eval: self.eval_options(),
        }
    }

    pub fn weights(&self) -> DistillWeights {
        DistillWeights {
            w_attn: self.w_attn,
            w_hid: self.w_hid,
            w_logits: self.w_logits,
            mix: self.mix,
        }
    }

    fn kd(&self) -> KdOptions {
        KdOptions {
            temperature: self.temperature,
            include_cross_attn: self.include_cross_attn,
        }
    }

    pub fn teacher_options(&self) -> PretrainOptions {
        PretrainOptions {
            stop_at_match_acc: (self.teacher_stop_at > 0.0).then_some(self.teacher_stop_at),
            ..self.pretrain_options(self.teacher_steps)
        }
    }

    pub fn pretrain_options(&self, steps: usize) -> PretrainOptions {
        PretrainOptions {
            budget: self.budget(steps),
            weights: self.weights(),
            calibrate: self.calibrate,
            kd: self.kd(),
            mlm_prob: self.mlm_prob,
            stop_at_match_acc: None,
        }
    }

    pub fn finetune_options(&self, steps: usize) -> FinetuneOptions {
        FinetuneOptions {
            budget: self.budget(steps),
            weights: self.weights(),
            calibrate: self.calibrate,
            kd: self.kd(),
            threshold: self.threshold,
        }
    }

    pub fn manual_sparsity(&self) -> Result<Option<[f64; 3]>, CliError> {
        if self.manual_sparsity.trim().is_empty() {
            return Ok(None);
        }
        let parts: Vec<f64> = self
            .manual_sparsity
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| config_err(format!("manual_sparsity {:?}: {e}", self.manual_sparsity)))?;
        let arr: [f64; 3] = parts
            .try_into()
            .map_err(|_| config_err("manual_sparsity needs three values: vision,text,fusion"))?;
        Ok(Some(arr))
    }

    pub fn constraints(&self) -> Result<Constraints, CliError> {
        let mut c = match self.manual_sparsity()? {
            Some(r) => manual_sparsity_schedule(r),
            None => Constraints::global(self.target_removed),
        }
        .map_err(|e| config_err(e.to_string()))?;
        c.ascent_rate = self.ascent_rate;
        Ok(c)
    }

    pub fn gates_for(&self, model: &VlmModel) -> GateSet {
        let mut g = GateSet::for_model(model, self.init_logit);
        g.stretch_lo = self.stretch_lo;
        g.stretch_hi = self.stretch_hi;
        g.threshold = self.threshold;
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(back, c);
        let text = c.to_toml();
        let parsed: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(parsed, c);
    }

    #[test]
    fn later_layers_win() {
        let dir = std::env::temp_dir().join(format!("vlprune-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let file = dir.join("c.toml");
        std::fs::write(&file, "seed = 4\nmix = 0.3\npreset = \"tiny\"\n").unwrap();
        let sets = [
            RunConfig::parse_set("mix=0.7").unwrap(),
            ("seed".to_string(), toml::Value::Integer(9)),
        ];
        let c = RunConfig::resolve(Some(&file), &sets).unwrap();
        assert_eq!((c.seed, c.mix, c.preset.as_str()), (9, 0.7, "tiny"));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn bad_values_are_config_errors() {
        for set in [
            "mix=1.5",
            "preset=\"huge\"",
            "task=\"vqa\"",
            "manual_sparsity=\".1,.2\"",
            "target_removed=1.0",
            "colour=3",
        ] {
            let r = RunConfig::resolve(None, &[RunConfig::parse_set(set).unwrap()]);
            assert!(matches!(r, Err(CliError::Config(_))), "{set}");
        }
    }

    #[test]
    fn hash_ignores_out_dir_only() {
        let a = RunConfig::default();
        let b = RunConfig {
            out_dir: "elsewhere".into(),
            ..a.clone()
        };
        let c = RunConfig {
            seed: 1,
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn manual_schedule_sets_three_controllers() {
        let c = RunConfig {
            manual_sparsity: ".1,.1,.6".into(),
            ..RunConfig::default()
        };
        let cons = c.constraints().unwrap();
        assert_eq!(cons.controllers.len(), 3);
        assert!(cons.controllers.iter().all(|k| k.active));
        assert!((cons.controllers[2].state.target - 0.4).abs() < 1e-12);
    }
}
