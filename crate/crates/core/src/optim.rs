//! First-order optimizers over [`ModelParams`] and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::detector::ModelParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Optimizer {
    kind: OptimizerKind,
    /// Per tensor: momentum buffer (SGD) or first/second moments (Adam).
    state: Vec<Option<(Tensor, Tensor)>>,
    steps: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Decoupled weight decay applied to every updated tensor.
    pub weight_decay: f64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            state: Vec::new(),
            steps: 0,
            clip_norm: None,
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn with_clip(mut self, clip: f64) -> Self {
        self.clip_norm = Some(clip);
        self
    }

    /// Applies one update. `grads[i]` belongs to `params.tensors[i]`; tensors
    /// without a gradient are left exactly as they are.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Option<Tensor>], lr: f64) {
        assert_eq!(grads.len(), params.tensors.len());
        if self.state.len() != grads.len() {
            self.state = (0..grads.len()).map(|_| None).collect();
        }
        self.steps += 1;
        let scale = match self.clip_norm {
            Some(c) => {
                let norm = grads
                    .iter()
                    .flatten()
                    .flat_map(|g| g.data().iter())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = &mut params.tensors[i].value;
            if self.weight_decay > 0.0 {
                let f = 1.0 - lr * self.weight_decay;
                p.data_mut().iter_mut().for_each(|v| *v *= f);
            }
            let st = self.state[i]
                .get_or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    let buf = st.0.data_mut();
                    for ((pv, gv), bv) in p.data_mut().iter_mut().zip(g.data()).zip(buf.iter_mut())
                    {
                        *bv = momentum * *bv + gv * scale;
                        *pv -= lr * *bv;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let t = self.steps as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let (m, v) = (&mut st.0, &mut st.1);
                    for (((pv, gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut())
                        .zip(v.data_mut().iter_mut())
                    {
                        let gs = gv * scale;
                        *mv = beta1 * *mv + (1.0 - beta1) * gs;
                        *vv = beta2 * *vv + (1.0 - beta2) * gs * gs;
                        *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Cosine annealing from `start` at iteration 0 to `end` at `total`.
pub fn cosine_lr(start: f64, end: f64, iter: usize, total: usize) -> f64 {
    if total == 0 {
        return start;
    }
    let frac = (iter.min(total) as f64) / total as f64;
    end + (start - end) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert!((cosine_lr(2e-4, 1e-4, 0, 100) - 2e-4).abs() < 1e-15);
        assert!((cosine_lr(2e-4, 1e-4, 100, 100) - 1e-4).abs() < 1e-15);
        assert!((cosine_lr(2e-4, 1e-4, 50, 100) - 1.5e-4).abs() < 1e-15);
    }
}
