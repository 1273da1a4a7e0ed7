//! First-order optimizers with named per-tensor state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub const ADAM: OptimizerKind = OptimizerKind::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    pub lr: f64,
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::ADAM,
            lr,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::validation(field, format!("learning rate {} must be >= 0", self.lr)));
        }
        match self.kind {
            OptimizerKind::Sgd => Ok(()),
            OptimizerKind::Momentum { beta } if (0.0..1.0).contains(&beta) => Ok(()),
            OptimizerKind::Adam { beta1, beta2, eps }
                if (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0 =>
            {
                Ok(())
            }
            _ => Err(Error::validation(field, "optimizer coefficients out of range")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Slot {
    m: Vec<f64>,
    #[serde(default)]
    v: Vec<f64>,
}

/// Optimizer plus its moment buffers, keyed by parameter name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    steps: u64,
    slots: BTreeMap<String, Slot>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            steps: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update over all `(name, param, grad)` triples. With `clip`, the
    /// gradients are first rescaled to a global L2 norm of at most `clip`.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor, Tensor)], clip: Option<f64>) {
        self.steps += 1;
        if let Some(max_norm) = clip {
            let norm = params
                .iter()
                .flat_map(|(_, _, g)| g.data())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            if norm > max_norm {
                let s = max_norm / norm;
                for (_, _, g) in params.iter_mut() {
                    *g = g.scale(s);
                }
            }
        }
        let lr = self.config.lr;
        for (name, p, g) in params.iter_mut() {
            let slot = self.slots.entry(name.clone()).or_default();
            match self.config.kind {
                OptimizerKind::Sgd => {
                    if lr == 0.0 {
                        continue;
                    }
                    for (w, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * gv;
                    }
                }
                OptimizerKind::Momentum { beta } => {
                    if slot.m.is_empty() {
                        slot.m = vec![0.0; g.numel()];
                    }
                    for (m, gv) in slot.m.iter_mut().zip(g.data()) {
                        *m = beta * *m + gv;
                    }
                    if lr == 0.0 {
                        continue;
                    }
                    for (w, m) in p.data_mut().iter_mut().zip(&slot.m) {
                        *w -= lr * m;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    if slot.m.is_empty() {
                        slot.m = vec![0.0; g.numel()];
                        slot.v = vec![0.0; g.numel()];
                    }
                    let t = self.steps as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for ((m, v), gv) in slot.m.iter_mut().zip(slot.v.iter_mut()).zip(g.data()) {
                        *m = beta1 * *m + (1.0 - beta1) * gv;
                        *v = beta2 * *v + (1.0 - beta2) * gv * gv;
                    }
                    if lr == 0.0 {
                        continue;
                    }
                    for ((w, m), v) in p.data_mut().iter_mut().zip(&slot.m).zip(&slot.v) {
                        *w -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}
