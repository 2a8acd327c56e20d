//! Zero-shot multi-modal data generator.
//!
//! Synthesizes labeled samples (or missing-modality features) by gradient
//! descent on the inputs of the frozen global model, driving the train-mode
//! batch statistics at every BN layer toward the model's running statistics
//! while pinning predictions to hard target labels and to soft labels from an
//! evaluation model. LiDAR tensors are re-projected onto the discrete sample
//! format (binarize, then re-embed the transmitter/receiver markers) after
//! every update; GPS coordinates are clamped to the scenario bounding box.
//!
//! Feature filling reuses the same loss with three changes: the trainable
//! variables are missing-modality feature vectors riding alongside frozen
//! real data, statistic matching is restricted to the integration branch,
//! and the hard-label constraint uses the samples' true labels.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::adam::{AdamState, OptimKind};
use crate::dataset::{FillCache, Sample};
use crate::error::{Error, Result};
use crate::loss::{one_hot, softmax, softmax_cross_entropy};
use crate::model::{
    BnInjections, BranchId, ModalInputs, ModalTrace, ModalityId, ModelGrads, MultiModalNet,
};
use crate::net::{BatchStats, Layer, Mode};
use crate::scalar::{r64, Real};
use crate::seed;
use crate::tensor::Tensor;

/// Which BN layers participate in statistic matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnScope {
    /// Every BN layer of every branch (data generation).
    AllLayers,
    /// Only the integration branch (feature filling).
    IntegrationOnly,
}

/// Generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimKind,
    /// Binarization threshold τ.
    pub binarize_threshold: f64,
    /// Term weights for the statistic / hard-label / soft-label parts.
    pub bn_weight: f64,
    pub hard_weight: f64,
    pub soft_weight: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 1e-4,
            optimizer: OptimKind::Adam,
            binarize_threshold: 0.5,
            bn_weight: 1.0,
            hard_weight: 1.0,
            soft_weight: 1.0,
        }
    }
}

/// Loss decomposition of one generator evaluation. The three terms carry
/// their configured weights, so `total` is exactly their sum.
#[derive(Debug, Clone)]
pub struct GenLossReport<R: Real> {
    pub bn_term: R,
    pub hard_label_term: R,
    pub soft_label_term: R,
    pub total: R,
    /// Unweighted per-layer (‖μ−μ̂‖², ‖σ−σ̂‖²) distances, in branch order
    /// (GPS, RGB, LiDAR, integration), restricted to the active scope.
    pub per_layer: Vec<(R, R)>,
}

/// Elementwise binarization: 1 if `x > τ`, else 0 (the boundary maps to 0).
pub fn binarize<R: Real>(values: &[R], tau: R) -> Vec<R> {
    values.iter().map(|&v| if v > tau { R::one() } else { R::zero() }).collect()
}

/// Overwrite the transmitter cell with -1 and the receiver cell with -2.
pub fn embed_tx_rx<R: Real>(grid: &[R], tx: usize, rx: usize) -> Result<Vec<R>> {
    if tx >= grid.len() || rx >= grid.len() {
        return Err(Error::input(format!(
            "tx/rx cell ({tx}, {rx}) outside grid of {} cells",
            grid.len()
        )));
    }
    if tx == rx {
        return Err(Error::input("tx and rx cells must differ"));
    }
    let mut out = grid.to_vec();
    out[tx] = -R::one();
    out[rx] = -r64::<R>(2.0);
    Ok(out)
}

/// Everything the generator needs to know about the sample format.
#[derive(Debug, Clone)]
pub struct SynthContext {
    pub rgb_len: usize,
    pub lidar_len: usize,
    pub beams: usize,
    /// GPS clamp box `[x_min, x_max, y_min, y_max]`.
    pub gps_bounds: [f64; 4],
    /// Valid (tx, rx) cell pairs observed in real data; drawn per sample.
    pub tx_rx_pairs: Vec<(usize, usize)>,
}

impl SynthContext {
    /// Derive the context from a dataset manifest plus a vehicle's own
    /// samples (the LiDAR marker cells of available grids form the tx/rx
    /// distribution).
    pub fn from_samples<R: Real>(
        manifest: &crate::dataset::DatasetManifest,
        samples: &[&Sample<R>],
    ) -> Self {
        let mut pairs = Vec::new();
        for s in samples {
            if !s.has(ModalityId::Lidar) {
                continue;
            }
            let tx = s.lidar.iter().position(|&v| v == -1);
            let rx = s.lidar.iter().position(|&v| v == -2);
            if let (Some(t), Some(r)) = (tx, rx) {
                pairs.push((t, r));
            }
        }
        Self {
            rgb_len: manifest.rgb_len(),
            lidar_len: manifest.lidar_len(),
            beams: manifest.beams,
            gps_bounds: manifest.bounds,
            tx_rx_pairs: pairs,
        }
    }

    fn draw_pair(&self, rng: &mut ChaCha8Rng) -> (usize, usize) {
        if self.tx_rx_pairs.is_empty() {
            // No observed pairs: fall back to two distinct uniform cells.
            let tx = rng.random_range(0..self.lidar_len);
            let rx = loop {
                let r = rng.random_range(0..self.lidar_len);
                if r != tx {
                    break r;
                }
            };
            (tx, rx)
        } else {
            self.tx_rx_pairs[rng.random_range(0..self.tx_rx_pairs.len())]
        }
    }
}

/// Result of a synthesis run.
#[derive(Debug, Clone)]
pub struct SynthOutcome<R: Real> {
    pub samples: Vec<Sample<R>>,
    pub initial: GenLossReport<R>,
    /// Report of the returned (lowest-total) iterate.
    pub best: GenLossReport<R>,
    /// Projection-invariant violations observed across all iterations.
    pub lidar_violations: usize,
}

/// Result of a feature-filling run.
#[derive(Debug, Clone)]
pub struct FillOutcome<R: Real> {
    pub fills: FillCache<R>,
    pub initial_loss: R,
    pub final_loss: R,
}

fn check_class_compat<R: Real>(a: &MultiModalNet<R>, b: &MultiModalNet<R>) -> Result<()> {
    if a.arch.beams != b.arch.beams {
        return Err(Error::config(format!(
            "class count mismatch: global {} vs eval {}",
            a.arch.beams, b.arch.beams
        )));
    }
    Ok(())
}

/// Evaluate the generator loss and its input gradients on one batch.
///
/// The forward uses train-mode batch statistics without mutating the global
/// model. Soft labels come from the eval model's (eval-mode) softmax output
/// on the same batch and are treated as constants. Returns the loss report
/// plus the full gradient set (inputs and fused features included).
pub fn gen_loss<R: Real>(
    global: &MultiModalNet<R>,
    eval_model: &MultiModalNet<R>,
    inputs: &ModalInputs<R>,
    target_labels: &[usize],
    scope: BnScope,
    cfg: &GenConfig,
) -> Result<(GenLossReport<R>, ModelGrads<R>)> {
    check_class_compat(global, eval_model)?;
    if inputs.batch_len() < 2 {
        return Err(Error::input("generator batches need at least 2 samples"));
    }
    if target_labels.len() != inputs.batch_len() {
        return Err(Error::input("one target label per sample"));
    }
    let trace = global.forward_frozen(inputs, Mode::Train)?;
    let logits = trace.logits();

    let hard_targets = one_hot::<R>(target_labels, global.arch.beams)?;
    let (hard_raw, hard_grad) = softmax_cross_entropy(logits, &hard_targets)?;

    let soft_targets = {
        let eval_trace = eval_model.forward_frozen(inputs, Mode::Eval)?;
        softmax(eval_trace.logits())
    };
    let (soft_raw, soft_grad) = softmax_cross_entropy(logits, &soft_targets)?;

    let (bn_raw, per_layer, injections) = bn_statistic_term(global, &trace, scope, cfg);

    let w_bn = r64::<R>(cfg.bn_weight);
    let w_hard = r64::<R>(cfg.hard_weight);
    let w_soft = r64::<R>(cfg.soft_weight);
    let bn_term = w_bn * bn_raw;
    let hard_label_term = w_hard * hard_raw;
    let soft_label_term = w_soft * soft_raw;
    let report = GenLossReport {
        bn_term,
        hard_label_term,
        soft_label_term,
        total: bn_term + hard_label_term + soft_label_term,
        per_layer,
    };

    let mut upstream = Tensor::zeros_like(logits);
    upstream.add_scaled(&hard_grad, w_hard);
    upstream.add_scaled(&soft_grad, w_soft);
    let grads = global.backward(&trace, &upstream, Some(&injections));
    Ok((report, grads))
}

/// BN statistic distances plus the gradient injections they induce at each
/// matched BN layer's input activations.
fn bn_statistic_term<R: Real>(
    global: &MultiModalNet<R>,
    trace: &ModalTrace<R>,
    scope: BnScope,
    cfg: &GenConfig,
) -> (R, Vec<(R, R)>, BnInjections<R>) {
    let w_bn = r64::<R>(cfg.bn_weight);
    let mut total = R::zero();
    let mut per_layer = Vec::new();
    let mut injections = BnInjections {
        branches: [
            vec![None; global.gps.net.layers.len()],
            vec![None; global.rgb.net.layers.len()],
            vec![None; global.lidar.net.layers.len()],
        ],
        integration: vec![None; global.integration.net.layers.len()],
    };

    let mut handle_branch = |id: BranchId| {
        let branch = &global.branch(id).net;
        let (layer_inputs, bn_stats): (&[Tensor<R>], &[Option<BatchStats<R>>]) = match id {
            BranchId::Integration => {
                (&trace.integration.layer_inputs, &trace.integration.bn_stats)
            }
            BranchId::Modality(m) => match &trace.extractors[m.index()] {
                Some(e) => (&e.trace.layer_inputs, &e.trace.bn_stats),
                None => return,
            },
        };
        for (idx, layer) in branch.layers.iter().enumerate() {
            let Layer::BatchNorm(bn) = layer else { continue };
            let stats = bn_stats[idx].as_ref().expect("train-mode stats recorded");
            let x = &layer_inputs[idx];
            let n = x.rows();
            let inv_n = r64::<R>(1.0 / n as f64);
            let two = r64::<R>(2.0);

            let mut mean_d = R::zero();
            let mut var_d = R::zero();
            for c in 0..bn.dim() {
                let dm = stats.mean[c] - bn.running_mean[c];
                let dv = stats.var[c] - bn.running_var[c];
                mean_d += dm * dm;
                var_d += dv * dv;
            }
            per_layer.push((mean_d, var_d));
            total += mean_d + var_d;

            // d/d a[n,c] of (‖μ̂−μ‖² + ‖σ̂−σ‖²):
            //   2(μ̂_c−μ_c)/N + 2(σ̂²_c−σ²_c)·2(a[n,c]−μ̂_c)/N
            let mut inj = Tensor::zeros(vec![n, bn.dim()]);
            for i in 0..n {
                let xr = x.row(i);
                let row = inj.row_mut(i);
                for c in 0..bn.dim() {
                    let dm = stats.mean[c] - bn.running_mean[c];
                    let dv = stats.var[c] - bn.running_var[c];
                    row[c] = w_bn
                        * inv_n
                        * (two * dm + two * two * dv * (xr[c] - stats.mean[c]));
                }
            }
            match id {
                BranchId::Integration => injections.integration[idx] = Some(inj),
                BranchId::Modality(m) => injections.branches[m.index()][idx] = Some(inj),
            }
        }
    };

    match scope {
        BnScope::AllLayers => {
            for id in BranchId::ALL {
                handle_branch(id);
            }
        }
        BnScope::IntegrationOnly => handle_branch(BranchId::Integration),
    }
    (total, per_layer, injections)
}

/// Project a LiDAR tensor onto the sample format: binarize, then re-embed
/// the per-sample transmitter/receiver markers.
fn project_lidar<R: Real>(lidar: &mut Tensor<R>, tau: R, pairs: &[(usize, usize)]) -> Result<()> {
    let cols = lidar.cols();
    for i in 0..lidar.rows() {
        let row = lidar.row_mut(i);
        let bin = binarize(row, tau);
        let (tx, rx) = pairs[i];
        if tx >= cols || rx >= cols {
            return Err(Error::input("tx/rx cell outside grid"));
        }
        let embedded = embed_tx_rx(&bin, tx, rx)?;
        row.copy_from_slice(&embedded);
    }
    Ok(())
}

fn clamp_gps<R: Real>(gps: &mut Tensor<R>, bounds: [f64; 4]) {
    let lo = [r64::<R>(bounds[0]), r64::<R>(bounds[2])];
    let hi = [r64::<R>(bounds[1]), r64::<R>(bounds[3])];
    for i in 0..gps.rows() {
        let row = gps.row_mut(i);
        for k in 0..2 {
            row[k] = row[k].max(lo[k]).min(hi[k]);
        }
    }
}

fn lidar_row_valid<R: Real>(row: &[R]) -> bool {
    let neg1 = -R::one();
    let neg2 = -r64::<R>(2.0);
    let mut tx = 0;
    let mut rx = 0;
    for &v in row {
        if v == neg1 {
            tx += 1;
        } else if v == neg2 {
            rx += 1;
        } else if v != R::zero() && v != R::one() {
            return false;
        }
    }
    tx == 1 && rx == 1
}

/// Synthesize `targets.len()` fully multi-modal samples labeled with the
/// given hard targets. Inputs start from a standard Gaussian and are
/// optimized for `cfg.epochs` steps; the iterate with the lowest total loss
/// is returned. Sample ids are assigned from `id_start`.
pub fn synthesize<R: Real>(
    global: &MultiModalNet<R>,
    eval_model: &MultiModalNet<R>,
    targets: &[usize],
    ctx: &SynthContext,
    cfg: &GenConfig,
    stream_seed: u64,
    id_start: usize,
) -> Result<SynthOutcome<R>> {
    check_class_compat(global, eval_model)?;
    if targets.is_empty() {
        return Err(Error::input("no synthesis targets"));
    }
    for &t in targets {
        if t < 1 || t > ctx.beams {
            return Err(Error::input(format!("target label {t} outside 1..={}", ctx.beams)));
        }
    }
    let n = targets.len();
    let mut rng = seed::rng(stream_seed, "synth-init", &[]);
    let mut normal = |len: usize| -> Vec<R> {
        (0..len)
            .map(|_| {
                let v: f64 = rng.sample(rand_distr::StandardNormal);
                r64(v)
            })
            .collect()
    };
    let mut gps = Tensor::from_parts(vec![n, 2], normal(n * 2));
    let mut rgb = Tensor::from_parts(vec![n, ctx.rgb_len], normal(n * ctx.rgb_len));
    let mut lidar = Tensor::from_parts(vec![n, ctx.lidar_len], normal(n * ctx.lidar_len));
    let pairs: Vec<(usize, usize)> = (0..n).map(|_| ctx.draw_pair(&mut rng)).collect();

    let tau = r64::<R>(cfg.binarize_threshold);
    project_lidar(&mut lidar, tau, &pairs)?;
    clamp_gps(&mut gps, ctx.gps_bounds);

    let mut opt = AdamState::new(cfg.optimizer, cfg.lr, &[&gps, &rgb, &lidar]);
    let mut violations = 0usize;
    let mut initial: Option<GenLossReport<R>> = None;
    let mut best: Option<(GenLossReport<R>, Tensor<R>, Tensor<R>, Tensor<R>)> = None;

    for epoch in 0..=cfg.epochs {
        let inputs = ModalInputs::full(gps.clone(), rgb.clone(), lidar.clone());
        let (report, grads) =
            gen_loss(global, eval_model, &inputs, targets, BnScope::AllLayers, cfg)?;
        if !report.total.is_finite() {
            return Err(Error::Diverged {
                round: epoch,
                detail: format!("generator loss non-finite (bn {:?})", report.bn_term),
            });
        }
        if initial.is_none() {
            initial = Some(report.clone());
        }
        if best.as_ref().map_or(true, |(b, ..)| report.total < b.total) {
            best = Some((report, gps.clone(), rgb.clone(), lidar.clone()));
        }
        if epoch == cfg.epochs {
            break;
        }

        let g_gps = grads.branches[ModalityId::Gps.index()].as_ref().expect("gps ran").input.clone();
        let g_rgb = grads.branches[ModalityId::Rgb.index()].as_ref().expect("rgb ran").input.clone();
        let g_lidar =
            grads.branches[ModalityId::Lidar.index()].as_ref().expect("lidar ran").input.clone();
        opt.apply(&mut [&mut gps, &mut rgb, &mut lidar], &[&g_gps, &g_rgb, &g_lidar]);

        project_lidar(&mut lidar, tau, &pairs)?;
        clamp_gps(&mut gps, ctx.gps_bounds);
        for i in 0..n {
            if !lidar_row_valid(lidar.row(i)) {
                violations += 1;
            }
        }
    }

    let (best_report, gps, rgb, lidar) = best.expect("at least one evaluation");
    let samples = (0..n)
        .map(|i| Sample {
            id: id_start + i,
            gps: gps.row(i).to_vec(),
            rgb: rgb.row(i).to_vec(),
            lidar: lidar
                .row(i)
                .iter()
                .map(|&v| {
                    let f = v.to_f64().expect("finite lidar value");
                    f as i8
                })
                .collect(),
            label: targets[i],
            mask: [true; 3],
            synthetic: true,
            channel: None,
        })
        .collect();

    Ok(SynthOutcome {
        samples,
        initial: initial.expect("evaluated"),
        best: best_report,
        lidar_violations: violations,
    })
}

/// Optimize feature vectors for every missing modality of the given samples.
///
/// Samples without missing modalities are untouched; with fewer than two
/// candidates the run is a no-op (train-mode statistics need a batch).
pub fn fill_missing_modality<R: Real>(
    global: &MultiModalNet<R>,
    eval_model: &MultiModalNet<R>,
    samples: &[&Sample<R>],
    cfg: &GenConfig,
    stream_seed: u64,
) -> Result<FillOutcome<R>> {
    check_class_compat(global, eval_model)?;
    for s in samples {
        if s.mask.iter().all(|&p| !p) {
            return Err(Error::input(format!("sample {}: all modalities missing", s.id)));
        }
    }
    let candidates: Vec<&Sample<R>> =
        samples.iter().copied().filter(|s| s.mask.iter().any(|&p| !p)).collect();
    if candidates.len() < 2 {
        return Ok(FillOutcome { fills: FillCache::new(), initial_loss: R::zero(), final_loss: R::zero() });
    }

    // Trainable feature rows per modality: (candidate row, feature tensor row).
    let mut rows_of: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (i, s) in candidates.iter().enumerate() {
        for m in ModalityId::ALL {
            if !s.has(m) {
                rows_of[m.index()].push(i);
            }
        }
    }
    let mut rng = seed::rng(stream_seed, "fill-init", &[]);
    let mut features: [Option<Tensor<R>>; 3] = [None, None, None];
    for m in ModalityId::ALL {
        let rows = &rows_of[m.index()];
        if rows.is_empty() {
            continue;
        }
        let dim = global.arch.feature_dim(m);
        let values = (0..rows.len() * dim)
            .map(|_| {
                let v: f64 = rng.sample(rand_distr::StandardNormal);
                // Gaussian init folded into the ReLU feature range.
                r64(v.max(0.0))
            })
            .collect();
        features[m.index()] = Some(Tensor::from_parts(vec![rows.len(), dim], values));
    }

    let labels: Vec<usize> = candidates.iter().map(|s| s.label).collect();
    let mut opt = {
        let present: Vec<&Tensor<R>> = features.iter().flatten().collect();
        AdamState::new(cfg.optimizer, cfg.lr, &present)
    };

    let build_inputs = |features: &[Option<Tensor<R>>; 3]| -> ModalInputs<R> {
        let mut inputs = crate::dataset::build_inputs(&candidates, &FillCache::new());
        for m in ModalityId::ALL {
            if let Some(f) = &features[m.index()] {
                for (k, &i) in rows_of[m.index()].iter().enumerate() {
                    inputs.filled[i][m.index()] = Some(f.row(k).to_vec());
                }
            }
        }
        inputs
    };

    let mut initial_loss = R::zero();
    let mut best: Option<(R, [Option<Tensor<R>>; 3])> = None;
    for epoch in 0..=cfg.epochs {
        let inputs = build_inputs(&features);
        let (report, grads) =
            gen_loss(global, eval_model, &inputs, &labels, BnScope::IntegrationOnly, cfg)?;
        if !report.total.is_finite() {
            return Err(Error::Diverged {
                round: epoch,
                detail: "feature filling loss non-finite".into(),
            });
        }
        if epoch == 0 {
            initial_loss = report.total;
        }
        if best.as_ref().map_or(true, |(b, _)| report.total < *b) {
            best = Some((report.total, features.clone()));
        }
        if epoch == cfg.epochs {
            break;
        }

        // Feature gradients: fused-feature slots of the candidate rows.
        let mut grad_list: Vec<Tensor<R>> = Vec::new();
        for m in ModalityId::ALL {
            let rows = &rows_of[m.index()];
            if rows.is_empty() {
                continue;
            }
            let slot = global.arch.fused_slot(m);
            let mut g = Tensor::zeros(vec![rows.len(), slot.len()]);
            for (k, &i) in rows.iter().enumerate() {
                g.row_mut(k).copy_from_slice(&grads.fused_grad.row(i)[slot.clone()]);
            }
            grad_list.push(g);
        }
        let mut params: Vec<&mut Tensor<R>> = features.iter_mut().flatten().collect();
        let grad_refs: Vec<&Tensor<R>> = grad_list.iter().collect();
        opt.apply(&mut params, &grad_refs);
        // Real extractor features are ReLU outputs; keep fills in their range.
        for f in features.iter_mut().flatten() {
            for v in f.values_mut() {
                if *v < R::zero() {
                    *v = R::zero();
                }
            }
        }
    }

    let (final_loss, best_features) = best.expect("evaluated");
    let mut fills = FillCache::new();
    for m in ModalityId::ALL {
        if let Some(f) = &best_features[m.index()] {
            for (k, &i) in rows_of[m.index()].iter().enumerate() {
                fills.insert((candidates[i].id, m.index()), f.row(k).to_vec());
            }
        }
    }
    Ok(FillOutcome { fills, initial_loss, final_loss })
}
