//! Adam optimizer with bias correction.

use serde::{Deserialize, Serialize};

use crate::scalar::{r64, Real};
use crate::tensor::Tensor;

/// Optimizer selection; plain gradient descent stays available behind the
/// config switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Adam,
    Sgd,
}

/// Per-parameter first/second moment accumulators plus step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AdamState<R: Real> {
    pub kind: OptimKind,
    pub lr: R,
    pub beta1: R,
    pub beta2: R,
    pub eps: R,
    pub step: u64,
    m: Vec<Tensor<R>>,
    v: Vec<Tensor<R>>,
}

impl<R: Real> AdamState<R> {
    /// Fresh state with zero moments matching the parameter shapes.
    pub fn new(kind: OptimKind, lr: f64, params: &[&Tensor<R>]) -> Self {
        Self {
            kind,
            lr: r64(lr),
            beta1: r64(0.9),
            beta2: r64(0.999),
            eps: r64(1e-8),
            step: 0,
            m: params.iter().map(|p| Tensor::zeros_like(p)).collect(),
            v: params.iter().map(|p| Tensor::zeros_like(p)).collect(),
        }
    }

    /// One update step. `params` and `grads` must be aligned with the shapes
    /// this state was created from.
    pub fn apply(&mut self, params: &mut [&mut Tensor<R>], grads: &[&Tensor<R>]) {
        assert_eq!(params.len(), self.m.len(), "param count mismatch");
        assert_eq!(grads.len(), self.m.len(), "grad count mismatch");
        match self.kind {
            OptimKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    let lr = self.lr;
                    p.add_scaled(g, -lr);
                }
                self.step += 1;
            }
            OptimKind::Adam => {
                self.step += 1;
                let t = self.step as i32;
                let bias1 = R::one() - self.beta1.powi(t);
                let bias2 = R::one() - self.beta2.powi(t);
                for ((p, g), (m, v)) in
                    params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v))
                {
                    assert_eq!(p.shape(), m.shape(), "param/state shape mismatch");
                    for k in 0..p.len() {
                        let gk = g.values()[k];
                        let mk = self.beta1 * m.values()[k] + (R::one() - self.beta1) * gk;
                        let vk = self.beta2 * v.values()[k] + (R::one() - self.beta2) * gk * gk;
                        m.values_mut()[k] = mk;
                        v.values_mut()[k] = vk;
                        let m_hat = mk / bias1;
                        let v_hat = vk / bias2;
                        p.values_mut()[k] =
                            p.values()[k] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}
