//! Shared naive oracles for integration tests.
//!
//! Everything here is written as straight-line scalar code, independent of
//! the library's forward/backward implementation, so tests compare two
//! genuinely different arithmetic paths.

#![allow(dead_code)]

use fedbeam_core::adam::{AdamState, OptimKind};
use fedbeam_core::dataset::{build_inputs, labels_of, FillCache, Sample};
use fedbeam_core::loss::{one_hot, softmax_cross_entropy};
use fedbeam_core::model::{ArchConfig, BranchId, MultiModalNet};
use fedbeam_core::net::{DenseNet, Layer, Mode};
use fedbeam_core::seed;
use fedbeam_core::tensor::Tensor;
use rand::Rng;

/// Naive forward pass of a dense/BN/ReLU stack on an `[n, d]` batch, as
/// nested Vec rows. Train mode normalizes by batch statistics computed here
/// with plain loops; eval mode uses the stored running stats.
pub fn naive_forward(net: &DenseNet<f64>, input: &[Vec<f64>], mode: Mode) -> Vec<Vec<f64>> {
    let mut x: Vec<Vec<f64>> = input.to_vec();
    for layer in &net.layers {
        x = match layer {
            Layer::Dense { weight, bias } => {
                let (fan_in, fan_out) = (weight.shape()[0], weight.shape()[1]);
                x.iter()
                    .map(|row| {
                        (0..fan_out)
                            .map(|j| {
                                let mut acc = bias.values()[j];
                                for k in 0..fan_in {
                                    acc += row[k] * weight.values()[k * fan_out + j];
                                }
                                acc
                            })
                            .collect()
                    })
                    .collect()
            }
            Layer::BatchNorm(bn) => {
                let n = x.len();
                let c = bn.dim();
                let (mean, var) = match mode {
                    Mode::Train => {
                        let mut mean = vec![0.0; c];
                        for row in &x {
                            for (m, v) in mean.iter_mut().zip(row) {
                                *m += v;
                            }
                        }
                        for m in &mut mean {
                            *m /= n as f64;
                        }
                        let mut var = vec![0.0; c];
                        for row in &x {
                            for j in 0..c {
                                var[j] += (row[j] - mean[j]).powi(2);
                            }
                        }
                        for v in &mut var {
                            *v /= n as f64;
                        }
                        (mean, var)
                    }
                    Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
                };
                x.iter()
                    .map(|row| {
                        (0..c)
                            .map(|j| {
                                let xhat = (row[j] - mean[j]) / (var[j] + bn.eps).sqrt();
                                bn.gamma.values()[j] * xhat + bn.beta.values()[j]
                            })
                            .collect()
                    })
                    .collect()
            }
            Layer::Relu => x
                .iter()
                .map(|row| row.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect())
                .collect(),
        };
    }
    x
}

pub fn tensor_to_rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Relative-error comparison with an absolute floor for near-zero gradients.
pub fn grad_close(analytic: f64, numeric: f64, tol: f64) -> bool {
    let denom = analytic.abs().max(numeric.abs()).max(1e-4);
    (analytic - numeric).abs() / denom < tol
}

// ── Toy two-class teacher ─────────────────────────────────────────────
//
// Class 1 sits at GPS x ≈ -3, class 2 at +3; RGB means differ per class;
// LiDAR is marker-embedded random binary whose marginal matches
// binarize(N(0,1), 0.5), so synthetic initialization starts distribution-
// matched on the frozen modality.

pub fn toy_samples(n: usize, seed_v: u64) -> Vec<Sample<f64>> {
    let mut rng = seed::rng(seed_v, "toy-data", &[]);
    (0..n)
        .map(|i| {
            let class = 1 + (i % 2);
            let sign = if class == 1 { -1.0 } else { 1.0 };
            let gps = vec![
                sign * 3.0 + rng.random_range(-0.5..0.5),
                30.0 + rng.random_range(-2.0..2.0),
            ];
            let mu = if class == 1 { 0.1 } else { 0.6 };
            let rgb: Vec<f64> = (0..64).map(|_| mu + rng.random_range(-0.3..0.3)).collect();
            let mut lidar: Vec<i8> = (0..128)
                .map(|_| {
                    let v: f64 = rng.sample(rand_distr::StandardNormal);
                    i8::from(v > 0.5)
                })
                .collect();
            lidar[0] = -1;
            let rx = 1 + rng.random_range(0..100usize);
            lidar[rx] = -2;
            Sample {
                id: i,
                gps,
                rgb,
                lidar,
                label: class,
                mask: [true; 3],
                synthetic: false,
                channel: None,
            }
        })
        .collect()
}

/// Train a two-class teacher on the toy samples (full-batch Adam) and return
/// it with its training accuracy.
pub fn train_toy_teacher(samples: &[Sample<f64>], epochs: usize) -> (MultiModalNet<f64>, f64) {
    let arch = ArchConfig { beams: 2, ..ArchConfig::default() };
    let mut net: MultiModalNet<f64> = MultiModalNet::build(&arch, 77).unwrap();
    let refs: Vec<&Sample<f64>> = samples.iter().collect();
    let fills = FillCache::new();
    let mut opt = AdamState::new(OptimKind::Adam, 1e-3, &net.params_of(&BranchId::ALL));
    for _ in 0..epochs {
        let inputs = build_inputs(&refs, &fills);
        let trace = net.forward(&inputs, Mode::Train).unwrap();
        let targets = one_hot::<f64>(&labels_of(&refs), 2).unwrap();
        let (_, grad_logits) = softmax_cross_entropy(trace.logits(), &targets).unwrap();
        let grads = net.backward(&trace, &grad_logits, None);
        let mut flat = Vec::new();
        for b in &grads.branches {
            flat.extend(b.as_ref().unwrap().param_tensors().into_iter().cloned());
        }
        flat.extend(grads.integration.param_tensors().into_iter().cloned());
        let mut params = net.params_of_mut(&BranchId::ALL);
        let grad_refs: Vec<&Tensor<f64>> = flat.iter().collect();
        opt.apply(&mut params, &grad_refs);
    }
    let inputs = build_inputs(&refs, &fills);
    let (_, pred) = net.predict(&inputs, Mode::Eval).unwrap();
    let acc = pred.iter().zip(labels_of(&refs)).filter(|(p, l)| **p == *l).count() as f64
        / refs.len() as f64;
    (net, acc)
}

/// Manifest matching the toy sample format.
pub fn toy_manifest() -> fedbeam_core::dataset::DatasetManifest {
    fedbeam_core::dataset::DatasetManifest {
        seed: 0,
        n_t: 16,
        beams: 2,
        rgb_grid: [8, 8],
        lidar_grid: [4, 4, 8],
        noise_power: 0.01,
        power: 10.0,
        bounds: [-10.0, 10.0, 20.0, 40.0],
        vehicles: 1,
        has_channels: false,
    }
}
