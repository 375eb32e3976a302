use serde::{Deserialize, Serialize};

use super::network::{Gradients, Network};
use super::tensor::{Scalar, Tensor};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// First-order optimizer with per-parameter state.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update to the trainable parameters of `net`.
    pub fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>) -> Result<(), NnError> {
        let params = net.params_mut();
        if params.len() != grads.grads.len() {
            return Err(NnError::Shape("gradient count does not match parameters".into()));
        }
        if self.first.is_empty() {
            self.first = vec![None; params.len()];
            self.second = vec![None; params.len()];
        }
        self.step += 1;
        let lr = T::of(self.lr);
        for (idx, ((param, trainable), grad)) in params.into_iter().zip(&grads.grads).enumerate() {
            let Some(grad) = grad else { continue };
            if !trainable {
                continue;
            }
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    if momentum == 0.0 {
                        for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
                            *p -= lr * g;
                        }
                    } else {
                        let mu = T::of(momentum);
                        let v = self.first[idx].get_or_insert_with(|| Tensor::zeros(grad.shape()));
                        for ((p, &g), vel) in param.data_mut().iter_mut().zip(grad.data()).zip(v.data_mut()) {
                            *vel = mu * *vel + g;
                            *p -= lr * *vel;
                        }
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (b1, b2, e) = (T::of(beta1), T::of(beta2), T::of(eps));
                    let c1 = T::of(1.0 - beta1.powi(self.step as i32));
                    let c2 = T::of(1.0 - beta2.powi(self.step as i32));
                    let m = self.first[idx].get_or_insert_with(|| Tensor::zeros(grad.shape()));
                    let v = self.second[idx].get_or_insert_with(|| Tensor::zeros(grad.shape()));
                    for (((p, &g), mi), vi) in param
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mi = b1 * *mi + (T::one() - b1) * g;
                        *vi = b2 * *vi + (T::one() - b2) * g * g;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *p -= lr * mhat / (vhat.sqrt() + e);
                    }
                }
            }
        }
        Ok(())
    }
}
