use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VlpError};
use crate::l0prune::DensityReport;

/// Losses of one optimizer step. Absent constituents are omitted from the JSON line; the
/// order of present fields never changes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: String,
    pub step: usize,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub itc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub itm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kd_attn: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kd_hid: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kd_logits: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lagrangian: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_size: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lam1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lam2: Option<f64>,
    pub lr_scale: f64,
}

/// Held-out metrics; each task fills the fields it defines.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall_t2i: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall_i2t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub match_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlm_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cls_acc: Option<f64>,
}

impl EvalMetrics {
    /// The task's headline number: classification accuracy, match accuracy, or mean recall@1.
    pub fn primary(&self) -> f64 {
        if let Some(a) = self.cls_acc {
            return a;
        }
        if let Some(a) = self.match_acc {
            return a;
        }
        match (self.recall_t2i, self.recall_i2t) {
            (Some(a), Some(b)) => 0.5 * (a + b),
            _ => self.mlm_acc.unwrap_or(0.0),
        }
    }
}

/// One line of a metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    /// Opens a stage: what determines every later number in it.
    Stage {
        stage: String,
        seed: u64,
        config_hash: String,
        steps: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<serde_json::Value>,
    },
    Step(StepRecord),
    Eval {
        stage: String,
        step: usize,
        #[serde(flatten)]
        metrics: EvalMetrics,
    },
    Density {
        stage: String,
        step: usize,
        vision: f64,
        text: f64,
        fusion: f64,
        /// Removed fraction of all gated parameters under deterministic gates.
        removed: f64,
    },
    /// Final pruning outcome, counted on the sliced model.
    Pruned {
        stage: String,
        gated_before: usize,
        gated_after: usize,
        removed: f64,
        metric_masked: f64,
        metric_sliced: f64,
    },
}

impl Record {
    pub fn density(stage: &str, step: usize, d: &DensityReport, removed: f64) -> Self {
        Record::Density {
            stage: stage.into(),
            step,
            vision: d.vision,
            text: d.text,
            fusion: d.fusion,
            removed,
        }
    }
}

/// Append-only log of a run. Wall-clock timings are kept apart so that the metrics lines are
/// a pure function of seed and config.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub records: Vec<Record>,
    /// `(stage, seconds)`.
    pub timings: Vec<(String, f64)>,
}

impl RunMetrics {
    pub fn push(&mut self, r: Record) {
        self.records.push(r);
    }

    pub fn extend(&mut self, other: RunMetrics) {
        self.records.extend(other.records);
        self.timings.extend(other.timings);
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn evals(&self) -> impl Iterator<Item = (&str, usize, &EvalMetrics)> {
        self.records.iter().filter_map(|r| match r {
            Record::Eval {
                stage,
                step,
                metrics,
            } => Some((stage.as_str(), *step, metrics)),
            _ => None,
        })
    }

    pub fn last_eval(&self) -> Option<&EvalMetrics> {
        self.evals().last().map(|(_, _, m)| m)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_jsonl().as_bytes())
    }

    /// Timings as JSON lines, `{"stage": .., "seconds": ..}`.
    pub fn write_timings(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (stage, secs) in &self.timings {
            out.push_str(&serde_json::json!({"stage": stage, "seconds": secs}).to_string());
            out.push('\n');
        }
        write_file(path, out.as_bytes())
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| VlpError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_order_is_stable() {
        let r = Record::Step(StepRecord {
            stage: "pretrain".into(),
            step: 3,
            total: 1.5,
            itc: Some(0.5),
            kd_hid: Some(0.25),
            lr_scale: 1.0,
            ..Default::default()
        });
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"kind":"step","stage":"pretrain","step":3,"total":1.5,"itc":0.5,"kd_hid":0.25,"lr_scale":1.0}"#
        );
    }

    #[test]
    fn primary_metric_prefers_the_task_field() {
        let m = EvalMetrics {
            samples: 10,
            match_acc: Some(0.8),
            mlm_acc: Some(0.1),
            ..Default::default()
        };
        assert_eq!(m.primary(), 0.8);
        let r = EvalMetrics {
            samples: 10,
            recall_t2i: Some(0.5),
            recall_i2t: Some(1.0),
            ..Default::default()
        };
        assert_eq!(r.primary(), 0.75);
    }
}
