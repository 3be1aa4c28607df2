//! `vlprune`: pretrain a teacher and distill a half-depth student, fine-tune it with pruning,
//! sweep head-pruning sensitivity, and evaluate checkpoints.
//!
//! Exit status: 0 success, 1 I/O or checkpoint failure, 2 configuration error, 3 numeric
//! divergence, 4 degenerate pruning.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vlprune::VlpError;

use crate::config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Run(VlpError),
}

impl From<VlpError> for CliError {
    fn from(e: VlpError) -> Self {
        CliError::Run(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_)
            | CliError::Run(VlpError::Config(_) | VlpError::InvalidArgument(_)) => 2,
            CliError::Run(VlpError::Divergence { .. }) => 3,
            CliError::Run(VlpError::DegenerateLayer { .. }) => 4,
            CliError::Run(_) => 1,
        }
    }

    fn hint(&self) -> Option<&'static str> {
        match self {
            CliError::Run(VlpError::DegenerateLayer { .. }) => Some(
                "hint: lower --target-removed, give that encoder a smaller share with --manual-sparsity, \
                 or train longer so the gates settle",
            ),
            CliError::Run(VlpError::Divergence { .. }) => Some("hint: lower --lr or raise warmup_frac"),
            _ => None,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "vlprune",
    version,
    args_override_self = true,
    about = "Distill-then-prune compression of tri-encoder vision-language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or load) a teacher, halve it into a student and distill.
    Pretrain(Flags),
    /// Fine-tune a student on a task with distillation and L0 pruning, then slice it.
    Finetune(Flags),
    /// Head-pruning sensitivity sweep per encoder.
    Sweep(Flags),
    /// Task metric and per-encoder parameter counts of a checkpoint.
    Eval(Flags),
}

/// Flags override the config file; `--set` covers every config key.
#[derive(Args, Debug, Default)]
struct Flags {
    /// TOML config file (flat key = value).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set lr=3e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Print machine-readable JSON instead of text.
    #[arg(long)]
    json: bool,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long)]
    teacher: Option<String>,
    #[arg(long)]
    student: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    reference: Option<String>,
    /// Train the teacher from scratch instead of loading `teacher`.
    #[arg(long)]
    train_teacher: bool,
    /// Fine-tune the loaded teacher on the task before using it.
    #[arg(long)]
    finetune_teacher: bool,
    #[arg(long)]
    mix: Option<f64>,
    #[arg(long)]
    target_removed: Option<f64>,
    /// Per-encoder removed fractions, e.g. `.1,.1,.6` (vision, text, fusion).
    #[arg(long)]
    manual_sparsity: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    teacher_steps: Option<usize>,
    #[arg(long)]
    pretrain_steps: Option<usize>,
    #[arg(long)]
    teacher_finetune_steps: Option<usize>,
    #[arg(long)]
    finetune_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eval_batches: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Comma-separated sweep fractions.
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
}

impl Flags {
    fn overrides(&self) -> Result<Vec<(String, toml::Value)>, CliError> {
        use toml::Value as V;
        let mut out = self
            .sets
            .iter()
            .map(|s| RunConfig::parse_set(s))
            .collect::<Result<Vec<_>, _>>()?;
        let mut put = |k: &str, v: Option<V>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        let int = |v: Option<u64>| v.map(|x| V::Integer(x as i64));
        let uint = |v: Option<usize>| v.map(|x| V::Integer(x as i64));
        let s = |v: &Option<String>| v.clone().map(V::String);
        put("preset", s(&self.preset));
        put("seed", int(self.seed));
        put("data_seed", int(self.data_seed));
        put("task", s(&self.task));
        put("out_dir", s(&self.out_dir));
        put("teacher", s(&self.teacher));
        put("student", s(&self.student));
        put("checkpoint", s(&self.checkpoint));
        put("reference", s(&self.reference));
        put(
            "train_teacher",
            self.train_teacher.then_some(V::Boolean(true)),
        );
        put(
            "finetune_teacher",
            self.finetune_teacher.then_some(V::Boolean(true)),
        );
        put("mix", self.mix.map(V::Float));
        put("target_removed", self.target_removed.map(V::Float));
        put("manual_sparsity", s(&self.manual_sparsity));
        put("threshold", self.threshold.map(V::Float));
        put("teacher_steps", uint(self.teacher_steps));
        put("pretrain_steps", uint(self.pretrain_steps));
        put("teacher_finetune_steps", uint(self.teacher_finetune_steps));
        put("finetune_steps", uint(self.finetune_steps));
        put("batch_size", uint(self.batch_size));
        put("eval_batches", uint(self.eval_batches));
        put("lr", self.lr.map(V::Float));
        put(
            "fractions",
            self.fractions
                .as_ref()
                .map(|f| V::Array(f.iter().map(|&x| V::Float(x)).collect())),
        );
        Ok(out)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (flags, cmd): (&Flags, fn(&RunConfig, bool) -> Result<(), CliError>) = match &cli.command {
        Command::Pretrain(f) => (f, commands::pretrain),
        Command::Finetune(f) => (f, commands::finetune),
        Command::Sweep(f) => (f, commands::sweep),
        Command::Eval(f) => (f, commands::eval),
    };
    let cfg = RunConfig::resolve(flags.config.as_deref(), &flags.overrides()?)?;
    cmd(&cfg, flags.json)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(h) = e.hint() {
                eprintln!("{h}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let div = VlpError::Divergence {
            stage: "s".into(),
            step: 1,
        };
        let deg = VlpError::DegenerateLayer {
            layer: "text.0".into(),
            what: "head",
        };
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Run(VlpError::Config("x".into())).exit_code(), 2);
        assert_eq!(CliError::Run(div).exit_code(), 3);
        assert_eq!(CliError::Run(deg).exit_code(), 4);
        assert!(CliError::Run(VlpError::DegenerateLayer {
            layer: "l".into(),
            what: "head"
        })
        .hint()
        .is_some());
    }

    #[test]
    fn named_flags_follow_set() {
        let f = Flags {
            sets: vec!["seed=3".into()],
            seed: Some(8),
            ..Flags::default()
        };
        let cfg = RunConfig::resolve(None, &f.overrides().unwrap()).unwrap();
        assert_eq!(cfg.seed, 8);
    }
}
