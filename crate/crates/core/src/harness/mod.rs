//! Synthetic image-caption data, the training stages, evaluation, and the head-pruning
//! sensitivity sweep.

mod data;
mod eval;
mod metrics;
mod optim;
mod train;

pub use data::{
    caption, generate, render, Batch, Latent, Sample, SynthSpec, TaskKind, CLS, COLORS, COMBOS,
    MASK, PAD, SHAPES, SIZES, WORDS,
};
pub use eval::{evaluate, head_output_norms, sweep_heads, EvalOptions, SweepRow};
pub use metrics::{EvalMetrics, Record, RunMetrics, StepRecord};
pub use optim::{warmup_scale, AdamW, AdamWConfig};
pub use train::{
    finetune_plain, finetune_prune, itm_pairs, pretrain_distill, prune_train, train_teacher,
    train_vlp, FinetuneOptions, PretrainOptions, PruneOutcome, PruneTrained, RunContext,
    StageBudget,
};
