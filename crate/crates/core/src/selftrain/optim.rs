use serde::{Deserialize, Serialize};

use crate::ndgrad::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    /// Plain gradient descent.
    Sgd,
    /// Heavy-ball momentum.
    Momentum { beta: f64 },
    /// Adam with bias correction.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter optimizer buffers, created lazily on the first step.
#[derive(Clone, Debug, Default)]
pub struct OptimState {
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u32,
}

impl OptimState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one update to `params` in place. `grads[i]` of `None` means the
    /// parameter did not influence the loss.
    pub fn step(&mut self, opt: &Optimizer, lr: f64, params: Vec<&mut Tensor>, grads: &[Option<&Tensor>]) {
        assert_eq!(params.len(), grads.len());
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.second = self.first.clone();
        }
        self.steps += 1;
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            match *opt {
                Optimizer::Sgd => p.axpy(-lr, g),
                Optimizer::Momentum { beta } => {
                    let v = &mut self.first[i];
                    for (vj, gj) in v.data_mut().iter_mut().zip(g.data()) {
                        *vj = beta * *vj + gj;
                    }
                    p.axpy(-lr, v);
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let t = self.steps as i32;
                    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (((pj, mj), vj), gj) in p
                        .data_mut()
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                        .zip(g.data())
                    {
                        *mj = beta1 * *mj + (1.0 - beta1) * gj;
                        *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
                        *pj -= lr * (*mj / c1) / ((*vj / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}
