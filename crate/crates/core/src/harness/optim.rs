use std::collections::BTreeMap;

use numcore::Tensor;
use serde::{Deserialize, Serialize};

/// AdamW hyperparameters for one parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only.
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Linear warmup over the first `warmup_frac` of `total` steps, then constant.
pub fn warmup_scale(step: usize, total: usize, warmup_frac: f64) -> f64 {
    let warm = (total as f64 * warmup_frac).ceil() as usize;
    if warm == 0 || step >= warm {
        1.0
    } else {
        (step + 1) as f64 / warm as f64
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adaptive-moment optimizer with decoupled weight decay, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: BTreeMap<String, Moments>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates every parameter in `params` that has an entry in `grads`.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
        lr_scale: f64,
    ) {
        self.t += 1;
        let c = self.config;
        let lr = c.lr * lr_scale;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; grad.numel()],
                v: vec![0.0; grad.numel()],
            });
            let decay = if p.rank() >= 2 { c.weight_decay } else { 0.0 };
            for (((w, &gr), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(&mut st.m)
                .zip(&mut st.v)
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * gr;
                *v = c.beta2 * *v + (1.0 - c.beta2) * gr * gr;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *w -= lr * (update + decay * *w);
            }
        }
    }
}
