//! Minimal differentiable dense networks.
//!
//! Supports stacks of fully-connected, batch-norm and ReLU layers with
//! reverse-mode gradients with respect to both parameters and inputs.
//! Train-mode batch norm differentiates through the batch statistics, which
//! is what lets input optimization steer those statistics.
//!
//! The forward pass is split into a non-mutating part ([`DenseNet::forward_frozen`])
//! and an explicit running-statistics commit, so callers that must not touch
//! running stats (the data generator) share the exact same arithmetic as
//! training.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{r64, Real};
use crate::tensor::Tensor;

/// Forward execution mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Normalize by batch statistics; running stats may be committed.
    Train,
    /// Normalize by stored running statistics; never mutates.
    Eval,
}

/// Layer kind in an architecture description.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Dense,
    BatchNorm,
    Relu,
}

/// Architecture-level description of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LayerSpec {
    pub fn dense(fan_in: usize, fan_out: usize) -> Self {
        Self { kind: LayerKind::Dense, fan_in, fan_out }
    }
    pub fn batchnorm(dim: usize) -> Self {
        Self { kind: LayerKind::BatchNorm, fan_in: dim, fan_out: dim }
    }
    pub fn relu(dim: usize) -> Self {
        Self { kind: LayerKind::Relu, fan_in: dim, fan_out: dim }
    }
}

/// Batch-norm layer state. `running_var` stores the biased (1/N) variance,
/// matching the batch statistic it tracks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct BnState<R: Real> {
    pub running_mean: Vec<R>,
    pub running_var: Vec<R>,
    pub gamma: Tensor<R>,
    pub beta: Tensor<R>,
    pub momentum: R,
    pub eps: R,
}

impl<R: Real> BnState<R> {
    pub fn new(dim: usize, momentum: R, eps: R) -> Self {
        Self {
            running_mean: vec![R::zero(); dim],
            running_var: vec![R::one(); dim],
            gamma: Tensor::from_parts(vec![dim], vec![R::one(); dim]),
            beta: Tensor::zeros(vec![dim]),
            momentum,
            eps,
        }
    }

    pub fn dim(&self) -> usize {
        self.running_mean.len()
    }
}

/// Realized layer with parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub enum Layer<R: Real> {
    /// `weight` is `[fan_in, fan_out]`, `bias` is `[fan_out]`.
    Dense { weight: Tensor<R>, bias: Tensor<R> },
    BatchNorm(BnState<R>),
    Relu,
}

impl<R: Real> Layer<R> {
    fn out_dim(&self, in_dim: usize) -> usize {
        match self {
            Layer::Dense { weight, .. } => weight.shape()[1],
            _ => in_dim,
        }
    }
}

/// Per-channel batch statistics of a BN layer input (biased variance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct BatchStats<R: Real> {
    pub mean: Vec<R>,
    pub var: Vec<R>,
}

/// Stack of layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct DenseNet<R: Real> {
    pub layers: Vec<Layer<R>>,
}

/// Everything the backward pass needs from one forward execution.
#[derive(Debug, Clone)]
pub struct ForwardTrace<R: Real> {
    pub mode: Mode,
    /// Input to each layer, index-aligned with `layers`.
    pub layer_inputs: Vec<Tensor<R>>,
    /// Batch statistics per layer (`Some` for BN layers only).
    pub bn_stats: Vec<Option<BatchStats<R>>>,
    pub output: Tensor<R>,
}

impl<R: Real> ForwardTrace<R> {
    /// Batch statistics of every BN layer, in layer order.
    pub fn bn_batch_stats(&self) -> Vec<&BatchStats<R>> {
        self.bn_stats.iter().filter_map(|s| s.as_ref()).collect()
    }
}

/// Gradients for one layer, mirroring [`Layer`].
#[derive(Debug, Clone)]
pub enum LayerGrads<R: Real> {
    Dense { weight: Tensor<R>, bias: Tensor<R> },
    BatchNorm { gamma: Tensor<R>, beta: Tensor<R> },
    Relu,
}

/// Gradients of a scalar loss with respect to all parameters and the input.
#[derive(Debug, Clone)]
pub struct NetGrads<R: Real> {
    pub layers: Vec<LayerGrads<R>>,
    pub input: Tensor<R>,
}

impl<R: Real> NetGrads<R> {
    pub fn zeros_like(net: &DenseNet<R>, input_shape: Vec<usize>) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense { weight, bias } => LayerGrads::Dense {
                    weight: Tensor::zeros_like(weight),
                    bias: Tensor::zeros_like(bias),
                },
                Layer::BatchNorm(bn) => LayerGrads::BatchNorm {
                    gamma: Tensor::zeros_like(&bn.gamma),
                    beta: Tensor::zeros_like(&bn.beta),
                },
                Layer::Relu => LayerGrads::Relu,
            })
            .collect();
        Self { layers, input: Tensor::zeros(input_shape) }
    }

    /// Flattened parameter gradients, in the same canonical order as
    /// [`DenseNet::params`].
    pub fn param_tensors(&self) -> Vec<&Tensor<R>> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                LayerGrads::Dense { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                LayerGrads::BatchNorm { gamma, beta } => {
                    out.push(gamma);
                    out.push(beta);
                }
                LayerGrads::Relu => {}
            }
        }
        out
    }

    /// Accumulate `other` into `self` (same structure required).
    pub fn accumulate(&mut self, other: &Self) {
        self.input.add_assign(&other.input);
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            match (a, b) {
                (
                    LayerGrads::Dense { weight: wa, bias: ba },
                    LayerGrads::Dense { weight: wb, bias: bb },
                ) => {
                    wa.add_assign(wb);
                    ba.add_assign(bb);
                }
                (
                    LayerGrads::BatchNorm { gamma: ga, beta: ba },
                    LayerGrads::BatchNorm { gamma: gb, beta: bb },
                ) => {
                    ga.add_assign(gb);
                    ba.add_assign(bb);
                }
                (LayerGrads::Relu, LayerGrads::Relu) => {}
                _ => panic!("grad structure mismatch"),
            }
        }
    }
}

fn glorot_uniform<R: Real>(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor<R> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let values = (0..fan_in * fan_out)
        .map(|_| r64::<R>(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_parts(vec![fan_in, fan_out], values)
}

impl<R: Real> DenseNet<R> {
    /// Build a network from layer specs with seeded Glorot-uniform weights,
    /// zero biases and identity BN affine state.
    pub fn from_specs(
        specs: &[LayerSpec],
        momentum: f64,
        eps: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) || momentum <= 0.0 {
            return Err(Error::config("bn momentum must lie in (0,1)"));
        }
        if eps <= 0.0 {
            return Err(Error::config("bn eps must be positive"));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut prev_out: Option<usize> = None;
        for spec in specs {
            if spec.fan_in == 0 || spec.fan_out == 0 {
                return Err(Error::config("layer dims must be positive"));
            }
            if spec.kind != LayerKind::Dense && spec.fan_in != spec.fan_out {
                return Err(Error::config(format!(
                    "{:?} layer requires fan_in == fan_out",
                    spec.kind
                )));
            }
            if let Some(p) = prev_out {
                if p != spec.fan_in {
                    return Err(Error::config(format!(
                        "layer fan_in {} does not chain from previous fan_out {}",
                        spec.fan_in, p
                    )));
                }
            }
            prev_out = Some(spec.fan_out);
            layers.push(match spec.kind {
                LayerKind::Dense => Layer::Dense {
                    weight: glorot_uniform(spec.fan_in, spec.fan_out, rng),
                    bias: Tensor::zeros(vec![spec.fan_out]),
                },
                LayerKind::BatchNorm => {
                    Layer::BatchNorm(BnState::new(spec.fan_in, r64(momentum), r64(eps)))
                }
                LayerKind::Relu => Layer::Relu,
            });
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        match self.layers.first() {
            Some(Layer::Dense { weight, .. }) => weight.shape()[0],
            Some(Layer::BatchNorm(bn)) => bn.dim(),
            _ => 0,
        }
    }

    pub fn output_dim(&self) -> usize {
        let mut dim = self.input_dim();
        for l in &self.layers {
            dim = l.out_dim(dim);
        }
        dim
    }

    /// Forward pass without mutating running statistics, regardless of mode.
    /// Batch statistics are computed and recorded for every BN layer in both
    /// modes; in eval mode they are recorded but not used for normalization.
    pub fn forward_frozen(&self, input: &Tensor<R>, mode: Mode) -> Result<ForwardTrace<R>> {
        if input.shape().len() != 2 || input.rows() == 0 {
            return Err(Error::input("forward expects a non-empty 2-D batch"));
        }
        if input.cols() != self.input_dim() {
            return Err(Error::config(format!(
                "input width {} does not match first layer fan_in {}",
                input.cols(),
                self.input_dim()
            )));
        }
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut bn_stats = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            layer_inputs.push(x.clone());
            let (y, stats) = match layer {
                Layer::Dense { weight, bias } => {
                    let mut y = x.matmul(weight);
                    let c = y.cols();
                    for i in 0..y.rows() {
                        let row = y.row_mut(i);
                        for j in 0..c {
                            row[j] += bias.values()[j];
                        }
                    }
                    (y, None)
                }
                Layer::BatchNorm(bn) => {
                    let stats = batch_stats(&x);
                    let (mean, var) = match mode {
                        Mode::Train => (&stats.mean, &stats.var),
                        Mode::Eval => (&bn.running_mean, &bn.running_var),
                    };
                    let y = bn_normalize(&x, mean, var, bn);
                    (y, Some(stats))
                }
                Layer::Relu => {
                    let vals = x
                        .values()
                        .iter()
                        .map(|&v| if v > R::zero() { v } else { R::zero() })
                        .collect();
                    (Tensor::from_parts(x.shape().to_vec(), vals), None)
                }
            };
            bn_stats.push(stats);
            x = y;
        }
        Ok(ForwardTrace { mode, layer_inputs, bn_stats, output: x })
    }

    /// Apply the exponential-moving-average running-stat update recorded in a
    /// train-mode trace: `new = (1-momentum)*old + momentum*batch`.
    pub fn commit_bn_updates(&mut self, trace: &ForwardTrace<R>) {
        debug_assert_eq!(trace.mode, Mode::Train);
        for (layer, stats) in self.layers.iter_mut().zip(&trace.bn_stats) {
            if let (Layer::BatchNorm(bn), Some(s)) = (layer, stats) {
                let m = bn.momentum;
                let keep = R::one() - m;
                for c in 0..bn.running_mean.len() {
                    bn.running_mean[c] = keep * bn.running_mean[c] + m * s.mean[c];
                    bn.running_var[c] = keep * bn.running_var[c] + m * s.var[c];
                }
            }
        }
    }

    /// Forward pass; in train mode, commits BN running-stat updates.
    pub fn forward(&mut self, input: &Tensor<R>, mode: Mode) -> Result<ForwardTrace<R>> {
        let trace = self.forward_frozen(input, mode)?;
        if mode == Mode::Train {
            self.commit_bn_updates(&trace);
        }
        Ok(trace)
    }

    /// Reverse pass from `upstream = dL/d(output)`.
    pub fn backward(&self, trace: &ForwardTrace<R>, upstream: &Tensor<R>) -> NetGrads<R> {
        self.backward_injected(trace, upstream, &[])
    }

    /// Reverse pass with extra gradient terms injected at layer inputs.
    ///
    /// `input_injections[i]`, when present, is added to `dL/d(input of layer i)`
    /// after that layer's own backward step — the hook used to differentiate
    /// losses defined directly on BN-layer input activations.
    pub fn backward_injected(
        &self,
        trace: &ForwardTrace<R>,
        upstream: &Tensor<R>,
        input_injections: &[Option<Tensor<R>>],
    ) -> NetGrads<R> {
        assert_eq!(trace.layer_inputs.len(), self.layers.len(), "trace/net mismatch");
        assert!(
            input_injections.is_empty() || input_injections.len() == self.layers.len(),
            "injection slice must align with layers"
        );
        let mut grads: Vec<LayerGrads<R>> = Vec::with_capacity(self.layers.len());
        let mut g = upstream.clone();
        for idx in (0..self.layers.len()).rev() {
            let x = &trace.layer_inputs[idx];
            let (layer_grad, mut gx) = match &self.layers[idx] {
                Layer::Dense { weight, bias: _ } => {
                    let gw = x.matmul_tn(&g);
                    let mut gb = Tensor::zeros(vec![g.cols()]);
                    for i in 0..g.rows() {
                        let row = g.row(i);
                        for (b, &v) in gb.values_mut().iter_mut().zip(row) {
                            *b += v;
                        }
                    }
                    let gx = g.matmul_nt(weight);
                    (LayerGrads::Dense { weight: gw, bias: gb }, gx)
                }
                Layer::BatchNorm(bn) => {
                    let stats = trace.bn_stats[idx].as_ref().expect("bn stats in trace");
                    bn_backward(x, &g, bn, stats, trace.mode)
                }
                Layer::Relu => {
                    let vals = x
                        .values()
                        .iter()
                        .zip(g.values())
                        .map(|(&xv, &gv)| if xv > R::zero() { gv } else { R::zero() })
                        .collect();
                    (LayerGrads::Relu, Tensor::from_parts(x.shape().to_vec(), vals))
                }
            };
            if let Some(Some(inj)) = input_injections.get(idx) {
                gx.add_assign(inj);
            }
            grads.push(layer_grad);
            g = gx;
        }
        grads.reverse();
        NetGrads { layers: grads, input: g }
    }

    /// Parameter tensors in canonical order (dense: weight, bias; BN: gamma, beta).
    pub fn params(&self) -> Vec<&Tensor<R>> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Dense { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                Layer::BatchNorm(bn) => {
                    out.push(&bn.gamma);
                    out.push(&bn.beta);
                }
                Layer::Relu => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Dense { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                Layer::BatchNorm(bn) => {
                    out.push(&mut bn.gamma);
                    out.push(&mut bn.beta);
                }
                Layer::Relu => {}
            }
        }
        out
    }

    /// Learnable parameter count (dense weights/biases, BN gamma/beta).
    pub fn trainable_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Transferred state count: trainable parameters plus BN running stats.
    pub fn state_count(&self) -> usize {
        let running: usize = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::BatchNorm(bn) => 2 * bn.dim(),
                _ => 0,
            })
            .sum();
        self.trainable_count() + running
    }

    pub fn bn_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::BatchNorm(_))).count()
    }

    /// Elementwise accumulate another net's full state (parameters and BN
    /// running statistics) into this one. Structures must match.
    pub fn state_add_assign(&mut self, other: &DenseNet<R>) {
        assert_eq!(self.layers.len(), other.layers.len(), "layer count mismatch");
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            match (a, b) {
                (
                    Layer::Dense { weight: wa, bias: ba },
                    Layer::Dense { weight: wb, bias: bb },
                ) => {
                    wa.add_assign(wb);
                    ba.add_assign(bb);
                }
                (Layer::BatchNorm(sa), Layer::BatchNorm(sb)) => {
                    sa.gamma.add_assign(&sb.gamma);
                    sa.beta.add_assign(&sb.beta);
                    for (x, &y) in sa.running_mean.iter_mut().zip(&sb.running_mean) {
                        *x += y;
                    }
                    for (x, &y) in sa.running_var.iter_mut().zip(&sb.running_var) {
                        *x += y;
                    }
                }
                (Layer::Relu, Layer::Relu) => {}
                _ => panic!("layer structure mismatch"),
            }
        }
    }

    /// Scale the full state (parameters and BN running statistics).
    pub fn state_scale(&mut self, factor: R) {
        for layer in &mut self.layers {
            match layer {
                Layer::Dense { weight, bias } => {
                    weight.scale(factor);
                    bias.scale(factor);
                }
                Layer::BatchNorm(bn) => {
                    bn.gamma.scale(factor);
                    bn.beta.scale(factor);
                    for v in &mut bn.running_mean {
                        *v *= factor;
                    }
                    for v in &mut bn.running_var {
                        *v *= factor;
                    }
                }
                Layer::Relu => {}
            }
        }
    }

    /// Running statistics of every BN layer, in layer order.
    pub fn bn_running_stats(&self) -> Vec<(&[R], &[R])> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::BatchNorm(bn) => Some((&bn.running_mean[..], &bn.running_var[..])),
                _ => None,
            })
            .collect()
    }
}

/// Per-channel mean and biased variance of a 2-D batch.
pub fn batch_stats<R: Real>(x: &Tensor<R>) -> BatchStats<R> {
    let (n, c) = (x.rows(), x.cols());
    let inv_n = R::one() / r64::<R>(n as f64);
    let mut mean = vec![R::zero(); c];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m *= inv_n;
    }
    let mut var = vec![R::zero(); c];
    for i in 0..n {
        for (j, (vv, &v)) in var.iter_mut().zip(x.row(i)).enumerate() {
            let d = v - mean[j];
            *vv += d * d;
        }
    }
    for v in &mut var {
        *v *= inv_n;
    }
    BatchStats { mean, var }
}

fn bn_normalize<R: Real>(x: &Tensor<R>, mean: &[R], var: &[R], bn: &BnState<R>) -> Tensor<R> {
    let (n, c) = (x.rows(), x.cols());
    let inv_std: Vec<R> = var.iter().map(|&v| (v + bn.eps).sqrt().recip()).collect();
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        for (j, &v) in x.row(i).iter().enumerate() {
            let xhat = (v - mean[j]) * inv_std[j];
            out.push(bn.gamma.values()[j] * xhat + bn.beta.values()[j]);
        }
    }
    Tensor::from_parts(vec![n, c], out)
}

fn bn_backward<R: Real>(
    x: &Tensor<R>,
    gy: &Tensor<R>,
    bn: &BnState<R>,
    stats: &BatchStats<R>,
    mode: Mode,
) -> (LayerGrads<R>, Tensor<R>) {
    let (n, c) = (x.rows(), x.cols());
    let (mean, var): (&[R], &[R]) = match mode {
        Mode::Train => (&stats.mean, &stats.var),
        Mode::Eval => (&bn.running_mean, &bn.running_var),
    };
    let inv_std: Vec<R> = var.iter().map(|&v| (v + bn.eps).sqrt().recip()).collect();

    let mut g_gamma = vec![R::zero(); c];
    let mut g_beta = vec![R::zero(); c];
    let mut sum_gy = vec![R::zero(); c];
    let mut sum_gy_xhat = vec![R::zero(); c];
    for i in 0..n {
        let xr = x.row(i);
        let gr = gy.row(i);
        for j in 0..c {
            let xhat = (xr[j] - mean[j]) * inv_std[j];
            g_gamma[j] += gr[j] * xhat;
            g_beta[j] += gr[j];
            sum_gy[j] += gr[j];
            sum_gy_xhat[j] += gr[j] * xhat;
        }
    }

    let mut gx = Vec::with_capacity(n * c);
    match mode {
        Mode::Train => {
            // Differentiates through the batch mean and variance.
            let n_r = r64::<R>(n as f64);
            let inv_n = n_r.recip();
            for i in 0..n {
                let xr = x.row(i);
                let gr = gy.row(i);
                for j in 0..c {
                    let xhat = (xr[j] - mean[j]) * inv_std[j];
                    let v = bn.gamma.values()[j] * inv_std[j] * inv_n
                        * (n_r * gr[j] - sum_gy[j] - xhat * sum_gy_xhat[j]);
                    gx.push(v);
                }
            }
        }
        Mode::Eval => {
            // Running stats are constants.
            for i in 0..n {
                let gr = gy.row(i);
                for j in 0..c {
                    gx.push(gr[j] * bn.gamma.values()[j] * inv_std[j]);
                }
            }
        }
    }

    (
        LayerGrads::BatchNorm {
            gamma: Tensor::from_parts(vec![c], g_gamma),
            beta: Tensor::from_parts(vec![c], g_beta),
        },
        Tensor::from_parts(vec![n, c], gx),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn bn_only_net(dim: usize) -> DenseNet<f64> {
        let mut rng = seed::rng(0, "test-init", &[]);
        DenseNet::from_specs(&[LayerSpec::batchnorm(dim)], 0.1, 1e-12, &mut rng).unwrap()
    }

    #[test]
    fn train_mode_bn_normalizes_batch() {
        // per-channel mean 3, var 4, gamma=1, beta=0, eps ~ 0
        let net = bn_only_net(1);
        let x = Tensor::new(vec![4, 1], vec![1.0, 3.0, 3.0, 5.0]).unwrap();
        let trace = net.forward_frozen(&x, Mode::Train).unwrap();
        let stats = batch_stats(&trace.output);
        assert!((stats.mean[0]).abs() < 1e-9);
        assert!((stats.var[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn eval_mode_identity_with_unit_running_stats() {
        let net = bn_only_net(2);
        let x = Tensor::new(vec![3, 2], vec![0.5, -1.0, 2.0, 0.0, -0.25, 3.0]).unwrap();
        let trace = net.forward_frozen(&x, Mode::Eval).unwrap();
        for (a, b) in trace.output.values().iter().zip(x.values()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn running_stats_update_is_exact_ema() {
        let mut rng = seed::rng(1, "test-init", &[]);
        let mut net: DenseNet<f64> =
            DenseNet::from_specs(&[LayerSpec::batchnorm(2)], 0.25, 1e-5, &mut rng).unwrap();
        if let Layer::BatchNorm(bn) = &mut net.layers[0] {
            bn.running_mean = vec![1.0, -2.0];
            bn.running_var = vec![4.0, 9.0];
        }
        let x = Tensor::new(vec![2, 2], vec![2.0, 4.0, 6.0, 8.0]).unwrap();
        let stats = batch_stats(&x);
        net.forward(&x, Mode::Train).unwrap();
        if let Layer::BatchNorm(bn) = &net.layers[0] {
            for c in 0..2 {
                assert_eq!(bn.running_mean[c], 0.75 * [1.0, -2.0][c] + 0.25 * stats.mean[c]);
                assert_eq!(bn.running_var[c], 0.75 * [4.0, 9.0][c] + 0.25 * stats.var[c]);
            }
        } else {
            panic!("expected BN layer");
        }
    }

    #[test]
    fn frozen_forward_never_touches_running_stats() {
        let mut rng = seed::rng(2, "test-init", &[]);
        let net: DenseNet<f64> =
            DenseNet::from_specs(&[LayerSpec::batchnorm(2)], 0.1, 1e-5, &mut rng).unwrap();
        let before = net.clone();
        let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        net.forward_frozen(&x, Mode::Train).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn linear_layer_input_grad_is_weight_column_sums() {
        // loss = sum(logits) on y = xW + b: dL/dx = row of W column... summed over
        // outputs, i.e. dx[i][k] = sum_j W[k][j].
        let mut rng = seed::rng(3, "test-init", &[]);
        let net: DenseNet<f64> =
            DenseNet::from_specs(&[LayerSpec::dense(3, 2)], 0.1, 1e-5, &mut rng).unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, -0.5, 0.4, 0.0]).unwrap();
        let trace = net.forward_frozen(&x, Mode::Train).unwrap();
        let ones = Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap();
        let grads = net.backward(&trace, &ones);
        let w = match &net.layers[0] {
            Layer::Dense { weight, .. } => weight,
            _ => unreachable!(),
        };
        for i in 0..2 {
            for k in 0..3 {
                let colsum: f64 = (0..2).map(|j| w.values()[k * 2 + j]).sum();
                assert!((grads.input.values()[i * 3 + k] - colsum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = seed::rng(4, "test-init", &[]);
        let net: DenseNet<f64> = DenseNet::from_specs(
            &[
                LayerSpec::dense(3, 4),
                LayerSpec::batchnorm(4),
                LayerSpec::relu(4),
                LayerSpec::dense(4, 2),
            ],
            0.1,
            1e-5,
            &mut rng,
        )
        .unwrap();
        let x = Tensor::new(vec![3, 3], vec![0.3; 9]).unwrap();
        let trace = net.forward_frozen(&x, Mode::Train).unwrap();
        let zero = Tensor::zeros(vec![3, 2]);
        let grads = net.backward(&trace, &zero);
        assert!(grads.input.values().iter().all(|&v| v == 0.0));
        for t in grads.param_tensors() {
            assert!(t.values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn train_eval_agree_when_running_stats_equal_batch_stats() {
        let mut rng = seed::rng(5, "test-init", &[]);
        let mut net: DenseNet<f64> = DenseNet::from_specs(
            &[LayerSpec::dense(2, 3), LayerSpec::batchnorm(3)],
            0.1,
            1e-5,
            &mut rng,
        )
        .unwrap();
        let x = Tensor::new(vec![4, 2], vec![0.1, 0.9, -0.4, 0.2, 1.3, -0.7, 0.0, 0.5]).unwrap();
        let train = net.forward_frozen(&x, Mode::Train).unwrap();
        let stats = train.bn_stats[1].as_ref().unwrap().clone();
        if let Layer::BatchNorm(bn) = &mut net.layers[1] {
            bn.running_mean = stats.mean.clone();
            bn.running_var = stats.var.clone();
        }
        let eval = net.forward_frozen(&x, Mode::Eval).unwrap();
        for (a, b) in train.output.values().iter().zip(eval.output.values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn chain_validation_rejects_mismatch() {
        let mut rng = seed::rng(6, "test-init", &[]);
        let err = DenseNet::<f64>::from_specs(
            &[LayerSpec::dense(2, 3), LayerSpec::batchnorm(4)],
            0.1,
            1e-5,
            &mut rng,
        );
        assert!(err.is_err());
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let mut rng = seed::rng(7, "test-init", &[]);
        let net: DenseNet<f64> =
            DenseNet::from_specs(&[LayerSpec::dense(3, 2)], 0.1, 1e-5, &mut rng).unwrap();
        let x = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(net.forward_frozen(&x, Mode::Train), Err(Error::Config(_))));
    }
}
