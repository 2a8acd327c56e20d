//! Federation protocols and communication accounting.
//!
//! One round: the base station distributes branches according to each
//! vehicle's sensor configuration, vehicles optionally regenerate synthetic
//! data when the loss-decline trigger fires, run local updates on the
//! real+synthetic mixture, and upload their branches; the BS averages
//! extractor branches over the vehicles owning each modality and the
//! integration branch over everyone. Benchmarks: FedAvg (full-model
//! exchange), FLASH (orchestrator returns one extractor branch per round)
//! and centralized learning.
//!
//! All randomness is derived from `(master seed, stream label, round,
//! vehicle)`, so runs are reproducible and resumable, and vehicle fan-out
//! order (parallel or sequential) cannot change results.

use num_complex::Complex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamState, OptimKind};
use crate::dataset::{
    build_inputs, labels_of, split_indices, DatasetFile, FillCache, Partition, Sample,
};
use crate::error::{Error, Result};
use crate::generator::{fill_missing_modality, synthesize, GenConfig, SynthContext};
use crate::imbalance::{sample_shortfall, LabelHistogram};
use crate::loss::{one_hot, softmax_cross_entropy};
use crate::model::{ArchConfig, BranchId, BranchPart, ModalityId, MultiModalNet};
use crate::net::Mode;
use crate::scalar::Real;
use crate::scenario::{sum_rate_ratio, Codebook};
use crate::seed;
use crate::tensor::Tensor;

/// Training protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    Gfl4bs,
    FedAvg,
    Flash,
    Cl,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [Protocol::Gfl4bs, Protocol::FedAvg, Protocol::Flash, Protocol::Cl];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Gfl4bs => "GFL4BS",
            Protocol::FedAvg => "FedAvg",
            Protocol::Flash => "FLASH",
            Protocol::Cl => "CL",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "GFL4BS" => Ok(Protocol::Gfl4bs),
            "FEDAVG" => Ok(Protocol::FedAvg),
            "FLASH" => Ok(Protocol::Flash),
            "CL" => Ok(Protocol::Cl),
            other => Err(Error::config(format!("unknown protocol {other:?}"))),
        }
    }
}

/// Round-level configuration. Defaults follow the hyperparameter table:
/// Adam, batch 128, learning rate 1e-4, 500 global rounds, 5 local epochs,
/// 500 generation epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoundConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimKind,
    /// Loss-decline trigger threshold γ.
    pub gamma: f64,
    /// Trigger when ΔL > γ (as printed); false flips to ΔL < γ.
    pub trigger_above: bool,
    pub enable_label_generation: bool,
    pub enable_modality_filling: bool,
    pub gen_epochs: usize,
    pub gen_lr: f64,
    /// Synthetic cache ceiling as a multiple of the local dataset size.
    pub synth_cap_factor: f64,
    /// Multi-user group size for the sum-rate ratio.
    pub eval_group: usize,
    /// Force single-thread vehicle execution.
    pub sequential: bool,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            rounds: 500,
            local_epochs: 5,
            batch_size: 128,
            lr: 1e-4,
            optimizer: OptimKind::Adam,
            gamma: 0.01,
            trigger_above: true,
            enable_label_generation: true,
            enable_modality_filling: true,
            gen_epochs: 500,
            gen_lr: 1e-4,
            synth_cap_factor: 2.0,
            eval_group: 4,
            sequential: false,
        }
    }
}

impl RoundConfig {
    pub fn generation_enabled(&self) -> bool {
        self.enable_label_generation || self.enable_modality_filling
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig { epochs: self.gen_epochs, lr: self.gen_lr, ..GenConfig::default() }
    }
}

/// One ledger entry: scalars moved between the BS and one vehicle in a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub round: usize,
    pub vehicle: usize,
    pub params_down: u64,
    pub params_up: u64,
}

/// Per-round, per-vehicle communication accounting.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub rows: Vec<LedgerRow>,
}

impl CommLedger {
    pub fn total_up(&self) -> u64 {
        self.rows.iter().map(|r| r.params_up).sum()
    }
    pub fn total_down(&self) -> u64 {
        self.rows.iter().map(|r| r.params_down).sum()
    }
    pub fn total(&self) -> u64 {
        self.total_up() + self.total_down()
    }
}

/// Per-round report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub global_acc: f64,
    pub mean_local_acc: f64,
    /// Population variance of the per-vehicle local accuracies.
    pub local_var: f64,
    /// Loss decline ΔL_b computed at the start of the round.
    pub delta_loss: f64,
    pub triggered: bool,
    pub params_up: u64,
    pub params_down: u64,
}

/// Final training report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub protocol: Protocol,
    pub rounds: Vec<RoundMetrics>,
    pub final_global_acc: f64,
    pub final_local_accs: Vec<f64>,
    pub final_local_var: f64,
    /// Sum-rate ratio of the final model on the pooled test split
    /// (NaN when the dataset carries no channels).
    pub sum_rate_ratio: f64,
    pub loss_history: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Serialized fill-cache entry (JSON maps need string keys).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct FillEntry<R: Real> {
    pub sample: usize,
    pub modality: usize,
    pub feature: Vec<R>,
}

fn fills_to_entries<R: Real>(fills: &FillCache<R>) -> Vec<FillEntry<R>> {
    fills
        .iter()
        .map(|(&(sample, modality), feature)| FillEntry { sample, modality, feature: feature.clone() })
        .collect()
}

fn entries_to_fills<R: Real>(entries: &[FillEntry<R>]) -> FillCache<R> {
    entries
        .iter()
        .map(|e| ((e.sample, e.modality), e.feature.clone()))
        .collect()
}

/// Complete resumable state of a federated run after `rounds_done` rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct RunState<R: Real> {
    pub protocol: Protocol,
    pub seed: u64,
    pub rounds_done: usize,
    pub global: MultiModalNet<R>,
    pub eval_model: Option<MultiModalNet<R>>,
    /// Per-vehicle synthetic samples from label generation.
    pub synth: Vec<Vec<Sample<R>>>,
    /// Per-vehicle completed-sample duplicates from feature filling; their
    /// reconstructed features live in `fills`, keyed by the duplicate ids.
    pub fill_dups: Vec<Vec<Sample<R>>>,
    pub fills: Vec<Vec<FillEntry<R>>>,
    pub flash_selected: Option<ModalityId>,
    pub loss_history: Vec<f64>,
    pub metrics: Vec<RoundMetrics>,
    pub ledger: CommLedger,
    pub warnings: Vec<String>,
}

/// Inputs of one training run.
pub struct RunSpec<'a, R: Real> {
    pub data: &'a DatasetFile<R>,
    pub partition: &'a Partition,
    pub protocol: Protocol,
    pub arch: &'a ArchConfig,
    pub round: &'a RoundConfig,
    pub seed: u64,
    /// Cached evaluation model for the generator's soft labels; when absent
    /// and needed, a FedAvg run over the same spec produces it.
    pub eval_model: Option<&'a MultiModalNet<R>>,
}

/// Run result: report, ledger and the final global model.
pub struct RunOutcome<R: Real> {
    pub report: TrainReport,
    pub ledger: CommLedger,
    pub model: MultiModalNet<R>,
    pub state: RunState<R>,
}

/// Loss-decline generation trigger: with `trigger_above` (as printed) the
/// generator activates when `previous - current > γ`.
pub fn generation_trigger(loss_history: &[f64], gamma: f64, trigger_above: bool) -> bool {
    if loss_history.len() < 2 {
        return false;
    }
    let delta = loss_history[loss_history.len() - 2] - loss_history[loss_history.len() - 1];
    if trigger_above {
        delta > gamma
    } else {
        delta < gamma
    }
}

/// Uniform elementwise average of uploaded branch parts per branch id
/// (uploads sorted by vehicle id). Branches nobody uploaded keep the previous
/// round's state and produce a warning.
pub fn aggregate_branches<R: Real>(
    previous: &MultiModalNet<R>,
    uploads: &[(usize, Vec<BranchPart<R>>)],
) -> (MultiModalNet<R>, Vec<String>) {
    let mut sorted: Vec<&(usize, Vec<BranchPart<R>>)> = uploads.iter().collect();
    sorted.sort_by_key(|(v, _)| *v);
    let mut next = previous.clone();
    let mut warnings = Vec::new();
    for id in BranchId::ALL {
        let mut acc: Option<crate::model::Branch<R>> = None;
        let mut count = 0usize;
        for (_, parts) in &sorted {
            if let Some(part) = parts.iter().find(|p| p.id == id) {
                match &mut acc {
                    None => acc = Some(part.branch.clone()),
                    Some(b) => b.net.state_add_assign(&part.branch.net),
                }
                count += 1;
            }
        }
        match acc {
            Some(mut branch) => {
                branch.net.state_scale(R::one() / crate::scalar::r64::<R>(count as f64));
                *next.branch_mut(id) = branch;
            }
            None => warnings.push(format!("no uploads for branch {id:?}; kept previous state")),
        }
    }
    (next, warnings)
}

/// Evaluation over samples in fixed-size chunks (eval mode, so chunking
/// cannot change results). Returns (top-1 accuracy, mean CE loss).
pub fn evaluate<R: Real>(
    model: &MultiModalNet<R>,
    samples: &[&Sample<R>],
    fills: &FillCache<R>,
    restrict: Option<ModalityId>,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::input("cannot evaluate on an empty set"));
    }
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    let mut n_total = 0usize;
    for chunk in samples.chunks(256) {
        let mut inputs = build_inputs(chunk, fills);
        if let Some(only) = restrict {
            for p in &mut inputs.present {
                for m in ModalityId::ALL {
                    if m != only {
                        p[m.index()] = false;
                    }
                }
            }
            for f in &mut inputs.filled {
                for m in ModalityId::ALL {
                    if m != only {
                        f[m.index()] = None;
                    }
                }
            }
        }
        let (logits, pred) = model.predict(&inputs, Mode::Eval)?;
        let labels = labels_of(chunk);
        let targets = one_hot::<R>(&labels, model.arch.beams)?;
        let (loss, _) = softmax_cross_entropy(&logits, &targets)?;
        let loss_f = loss.to_f64().unwrap_or(f64::NAN);
        loss_sum += loss_f * chunk.len() as f64;
        n_total += chunk.len();
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok((correct as f64 / n_total as f64, loss_sum / n_total as f64))
}

/// One vehicle's local update: `epochs` passes of minibatch optimization on
/// the real+synthetic mixture, updating only `update_branches`. Train-mode
/// BN commits into the local model. An empty mixture is a silent skip.
#[allow(clippy::too_many_arguments)]
pub fn local_update<R: Real>(
    model: &mut MultiModalNet<R>,
    update_branches: &[BranchId],
    train: &[&Sample<R>],
    synth: &[&Sample<R>],
    fills: &FillCache<R>,
    cfg: &RoundConfig,
    master_seed: u64,
    round: usize,
    vehicle: usize,
    restrict: Option<ModalityId>,
) -> Result<()> {
    let mixture: Vec<&Sample<R>> = train.iter().chain(synth.iter()).copied().collect();
    if mixture.is_empty() {
        return Ok(());
    }
    let params0 = model.params_of(update_branches);
    let mut opt = AdamState::new(cfg.optimizer, cfg.lr, &params0);
    drop(params0);
    for epoch in 0..cfg.local_epochs {
        let mut order: Vec<usize> = (0..mixture.len()).collect();
        let mut rng = seed::rng(
            master_seed,
            "shuffle",
            &[round as u64, vehicle as u64, epoch as u64],
        );
        crate::dataset::shuffle(&mut order, &mut rng);
        for batch_ids in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&Sample<R>> = batch_ids.iter().map(|&i| mixture[i]).collect();
            let mut inputs = build_inputs(&batch, fills);
            if let Some(only) = restrict {
                for p in &mut inputs.present {
                    for m in ModalityId::ALL {
                        if m != only {
                            p[m.index()] = false;
                        }
                    }
                }
                for f in &mut inputs.filled {
                    for m in ModalityId::ALL {
                        if m != only {
                            f[m.index()] = None;
                        }
                    }
                }
            }
            let trace = model.forward(&inputs, Mode::Train)?;
            let targets = one_hot::<R>(&labels_of(&batch), model.arch.beams)?;
            let (loss, grad_logits) = softmax_cross_entropy(trace.logits(), &targets)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    round,
                    detail: format!("vehicle {vehicle} local loss non-finite"),
                });
            }
            let grads = model.backward(&trace, &grad_logits, None);
            let grad_tensors = collect_branch_grads(model, &grads, update_branches);
            let mut params = model.params_of_mut(update_branches);
            let grad_refs: Vec<&Tensor<R>> = grad_tensors.iter().collect();
            opt.apply(&mut params, &grad_refs);
        }
    }
    Ok(())
}

/// Flatten gradients for the selected branches in the canonical order used by
/// `params_of`. Branches that never ran contribute zero tensors.
fn collect_branch_grads<R: Real>(
    model: &MultiModalNet<R>,
    grads: &crate::model::ModelGrads<R>,
    ids: &[BranchId],
) -> Vec<Tensor<R>> {
    let mut out = Vec::new();
    for id in BranchId::ALL {
        if !ids.contains(&id) {
            continue;
        }
        match id {
            BranchId::Integration => {
                out.extend(grads.integration.param_tensors().into_iter().cloned());
            }
            BranchId::Modality(m) => match &grads.branches[m.index()] {
                Some(g) => out.extend(g.param_tensors().into_iter().cloned()),
                None => {
                    // Zero gradients against the branch's own shapes.
                    out.extend(
                        model
                            .branch(id)
                            .net
                            .params()
                            .into_iter()
                            .map(Tensor::zeros_like),
                    );
                }
            },
        }
    }
    out
}

// ── Run orchestration ─────────────────────────────────────────────────

struct VehicleCtx<R: Real> {
    id: usize,
    train: Vec<Sample<R>>,
    val: Vec<Sample<R>>,
    /// Modalities with at least one available sample (train or validation).
    owned: [bool; 3],
}

impl<R: Real> VehicleCtx<R> {
    fn owned_branches(&self) -> Vec<BranchId> {
        let mut ids: Vec<BranchId> = ModalityId::ALL
            .iter()
            .filter(|m| self.owned[m.index()])
            .map(|&m| BranchId::Modality(m))
            .collect();
        ids.push(BranchId::Integration);
        ids
    }
}

struct Env<R: Real> {
    vehicles: Vec<VehicleCtx<R>>,
    test: Vec<Sample<R>>,
    arch: ArchConfig,
    manifest: crate::dataset::DatasetManifest,
}

fn build_env<R: Real>(spec: &RunSpec<'_, R>) -> Result<Env<R>> {
    spec.arch.validate()?;
    if spec.arch.beams != spec.data.manifest.beams {
        return Err(Error::config(format!(
            "arch beams {} != dataset beams {}",
            spec.arch.beams, spec.data.manifest.beams
        )));
    }
    if spec.arch.input_dim(ModalityId::Rgb) != spec.data.manifest.rgb_len()
        || spec.arch.input_dim(ModalityId::Lidar) != spec.data.manifest.lidar_len()
    {
        return Err(Error::config("arch input dims do not match dataset grids"));
    }
    let per_vehicle = spec.partition.apply(spec.data)?;
    let mut vehicles = Vec::with_capacity(per_vehicle.len());
    let mut test = Vec::new();
    for vd in per_vehicle {
        let (tr, va, te) = split_indices(vd.samples.len(), spec.seed, vd.vehicle_id);
        let pick = |ids: &[usize]| -> Vec<Sample<R>> {
            ids.iter().map(|&i| vd.samples[i].clone()).collect()
        };
        let train = pick(&tr);
        let val = pick(&va);
        test.extend(pick(&te));
        let mut owned = [false; 3];
        for s in train.iter().chain(val.iter()) {
            for m in ModalityId::ALL {
                owned[m.index()] = owned[m.index()] || s.has(m);
            }
        }
        vehicles.push(VehicleCtx { id: vd.vehicle_id, train, val, owned });
    }
    if test.is_empty() {
        return Err(Error::input("empty pooled test split"));
    }
    Ok(Env {
        vehicles,
        test,
        arch: spec.arch.clone(),
        manifest: spec.data.manifest.clone(),
    })
}

fn population_variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64
}

fn final_sum_rate_ratio<R: Real>(
    model: &MultiModalNet<R>,
    test: &[Sample<R>],
    manifest: &crate::dataset::DatasetManifest,
    group: usize,
) -> Result<f64> {
    if !manifest.has_channels || test.iter().any(|s| s.channel.is_none()) {
        return Ok(f64::NAN);
    }
    let refs: Vec<&Sample<R>> = test.iter().collect();
    let mut predicted = Vec::with_capacity(test.len());
    for chunk in refs.chunks(256) {
        let inputs = build_inputs(chunk, &FillCache::new());
        let (_, pred) = model.predict(&inputs, Mode::Eval)?;
        predicted.extend(pred);
    }
    let optimal: Vec<usize> = test.iter().map(|s| s.label).collect();
    let channels: Vec<Vec<Complex<R>>> =
        test.iter().map(|s| s.channel.clone().expect("checked")).collect();
    let codebook = Codebook::<R>::dft(manifest.n_t, manifest.beams);
    let ratio = sum_rate_ratio(
        &predicted,
        &optimal,
        &channels,
        &codebook,
        crate::scalar::r64(manifest.power),
        crate::scalar::r64(manifest.noise_power),
        group,
    );
    Ok(ratio.to_f64().unwrap_or(f64::NAN))
}

/// Synthetic-sample id range for a vehicle (disjoint from dataset ids).
fn synth_id_base(vehicle: usize) -> usize {
    (1usize << 32) + vehicle * (1usize << 20)
}

/// Id range for completed-sample duplicates (disjoint from `synth_id_base`).
fn fill_id_base(vehicle: usize) -> usize {
    (1usize << 33) + vehicle * (1usize << 20)
}

struct VehicleRoundOutput<R: Real> {
    vehicle: usize,
    uploads: Vec<BranchPart<R>>,
    val_loss: f64,
    val_acc: f64,
    params_up: u64,
    synth: Option<Vec<Sample<R>>>,
    /// Completed-sample duplicates plus their feature cache.
    filled: Option<(Vec<Sample<R>>, FillCache<R>)>,
}

/// Build the label-generation target list from the real-data shortfall,
/// capped by the synthetic budget; labels are emitted in ascending order.
fn shortfall_targets(hist: &LabelHistogram, budget: usize) -> Vec<usize> {
    let shortfall = sample_shortfall(hist);
    let mut targets = Vec::new();
    'outer: for (idx, &need) in shortfall.iter().enumerate() {
        for _ in 0..need {
            if targets.len() >= budget {
                break 'outer;
            }
            targets.push(idx + 1);
        }
    }
    targets
}

/// Execute (or resume) one training run. `on_round` fires after every
/// completed round with the full resumable state (the checkpoint hook).
pub fn run_training<R: Real>(
    spec: &RunSpec<'_, R>,
    resume: Option<RunState<R>>,
    mut on_round: impl FnMut(&RunState<R>) -> Result<()>,
) -> Result<RunOutcome<R>> {
    run_training_dyn(spec, resume, &mut on_round)
}

fn run_training_dyn<R: Real>(
    spec: &RunSpec<'_, R>,
    resume: Option<RunState<R>>,
    on_round: &mut dyn FnMut(&RunState<R>) -> Result<()>,
) -> Result<RunOutcome<R>> {
    if spec.protocol == Protocol::Cl {
        return run_centralized(spec, resume, on_round);
    }
    let env = build_env(spec)?;
    let cfg = spec.round;
    let v_count = env.vehicles.len();

    let mut state = match resume {
        Some(s) => {
            if s.protocol != spec.protocol || s.seed != spec.seed {
                return Err(Error::config("resume state does not match run spec"));
            }
            s
        }
        None => {
            let global = MultiModalNet::build(&env.arch, seed::derive(spec.seed, "model-init", &[]))?;
            // The generator needs an evaluation model; reuse the caller's
            // cached FedAvg model or train one on the same spec.
            let eval_model = if spec.protocol == Protocol::Gfl4bs && cfg.generation_enabled() {
                Some(match spec.eval_model {
                    Some(m) => m.clone(),
                    None => {
                        let sub = RunSpec {
                            protocol: Protocol::FedAvg,
                            eval_model: None,
                            ..*spec
                        };
                        run_training_dyn(&sub, None, &mut |_| Ok(()))?.model
                    }
                })
            } else {
                None
            };
            RunState {
                protocol: spec.protocol,
                seed: spec.seed,
                rounds_done: 0,
                global,
                eval_model,
                synth: vec![Vec::new(); v_count],
                fill_dups: vec![Vec::new(); v_count],
                fills: vec![Vec::new(); v_count],
                flash_selected: None,
                loss_history: Vec::new(),
                metrics: Vec::new(),
                ledger: CommLedger::default(),
                warnings: Vec::new(),
            }
        }
    };

    let test_refs: Vec<&Sample<R>> = env.test.iter().collect();
    for round in state.rounds_done + 1..=cfg.rounds {
        let triggered = spec.protocol == Protocol::Gfl4bs
            && cfg.generation_enabled()
            && generation_trigger(&state.loss_history, cfg.gamma, cfg.trigger_above);
        let delta_loss = if state.loss_history.len() >= 2 {
            state.loss_history[state.loss_history.len() - 2]
                - state.loss_history[state.loss_history.len() - 1]
        } else {
            0.0
        };

        // Branch distribution per vehicle.
        let restrict = match spec.protocol {
            Protocol::Flash if round > 1 => state.flash_selected,
            _ => None,
        };
        let down_branches: Vec<Vec<BranchId>> = env
            .vehicles
            .iter()
            .map(|v| match spec.protocol {
                Protocol::Gfl4bs => v.owned_branches(),
                Protocol::FedAvg => BranchId::ALL.to_vec(),
                Protocol::Flash => match restrict {
                    Some(m) => vec![BranchId::Modality(m), BranchId::Integration],
                    None => BranchId::ALL.to_vec(),
                },
                Protocol::Cl => unreachable!(),
            })
            .collect();

        let global = state.global.clone();
        let eval_model = state.eval_model.clone();
        let gen_cfg = cfg.gen_config();

        let task = |(v, vehicle): (usize, &VehicleCtx<R>)| -> Result<VehicleRoundOutput<R>> {
            let mut model = global.clone();
            let mut synth: Option<Vec<Sample<R>>> = None;
            let mut filled: Option<(Vec<Sample<R>>, FillCache<R>)> = None;

            if triggered {
                let me = eval_model.as_ref().expect("eval model prepared");
                let train_refs: Vec<&Sample<R>> = vehicle.train.iter().collect();
                // Full-input synthesis needs every extractor branch, so label
                // generation runs only on vehicles owning all modalities;
                // modality-poor vehicles rely on feature filling.
                let full_sensors = vehicle.owned.iter().all(|&o| o);
                if cfg.enable_label_generation && full_sensors && !vehicle.train.is_empty() {
                    let hist = LabelHistogram {
                        counts: {
                            let mut counts = vec![0u64; env.arch.beams];
                            for s in &vehicle.train {
                                counts[s.label - 1] += 1;
                            }
                            counts
                        },
                    };
                    let budget =
                        (cfg.synth_cap_factor * vehicle.train.len() as f64).floor() as usize;
                    let targets = shortfall_targets(&hist, budget);
                    if targets.len() >= 2 {
                        let ctx = SynthContext::from_samples(&env.manifest, &train_refs);
                        let outcome = synthesize(
                            &global,
                            me,
                            &targets,
                            &ctx,
                            &gen_cfg,
                            seed::derive(spec.seed, "label-gen", &[round as u64, v as u64]),
                            synth_id_base(v),
                        )?;
                        synth = Some(outcome.samples);
                    }
                }
                if cfg.enable_modality_filling {
                    let outcome = fill_missing_modality(
                        &global,
                        me,
                        &train_refs,
                        &gen_cfg,
                        seed::derive(spec.seed, "fill", &[round as u64, v as u64]),
                    )?;
                    if !outcome.fills.is_empty() {
                        // Completed duplicates join the mixture alongside the
                        // zero-filled originals; reconstructed features are
                        // re-keyed to the duplicate ids.
                        let mut dups = Vec::new();
                        let mut cache = FillCache::new();
                        let mut next_id = fill_id_base(v);
                        for s in &vehicle.train {
                            let entries: Vec<(usize, Vec<R>)> = ModalityId::ALL
                                .iter()
                                .filter_map(|m| {
                                    outcome
                                        .fills
                                        .get(&(s.id, m.index()))
                                        .map(|f| (m.index(), f.clone()))
                                })
                                .collect();
                            if entries.is_empty() {
                                continue;
                            }
                            let mut dup = s.clone();
                            dup.id = next_id;
                            dup.synthetic = true;
                            next_id += 1;
                            for (mi, feat) in entries {
                                cache.insert((dup.id, mi), feat);
                            }
                            dups.push(dup);
                        }
                        filled = Some((dups, cache));
                    }
                }
            }

            let active_synth: &[Sample<R>] = synth.as_deref().unwrap_or(&state.synth[v]);
            let (active_dups, active_fills): (&[Sample<R>], FillCache<R>) = match &filled {
                Some((d, f)) => (d.as_slice(), f.clone()),
                None => (state.fill_dups[v].as_slice(), entries_to_fills(&state.fills[v])),
            };

            let update_branches = match spec.protocol {
                Protocol::Gfl4bs => vehicle.owned_branches(),
                Protocol::FedAvg => BranchId::ALL.to_vec(),
                Protocol::Flash => down_branches[v].clone(),
                Protocol::Cl => unreachable!(),
            };
            let train_refs: Vec<&Sample<R>> = vehicle.train.iter().collect();
            let synth_refs: Vec<&Sample<R>> =
                active_synth.iter().chain(active_dups.iter()).collect();
            local_update(
                &mut model,
                &update_branches,
                &train_refs,
                &synth_refs,
                &active_fills,
                cfg,
                spec.seed,
                round,
                v,
                restrict,
            )?;

            let val_refs: Vec<&Sample<R>> = vehicle.val.iter().collect();
            let (val_acc, val_loss) = if val_refs.is_empty() {
                (0.0, 0.0)
            } else {
                evaluate(&model, &val_refs, &FillCache::new(), restrict)?
            };

            let uploads: Vec<BranchPart<R>> = model
                .split_branches()
                .into_iter()
                .filter(|p| update_branches.contains(&p.id))
                .collect();
            let params_up: u64 =
                uploads.iter().map(|p| p.branch.net.state_count() as u64).sum();
            Ok(VehicleRoundOutput {
                vehicle: vehicle.id,
                uploads,
                val_loss,
                val_acc,
                params_up,
                synth,
                filled,
            })
        };

        let outputs: Vec<VehicleRoundOutput<R>> = if cfg.sequential {
            env.vehicles
                .iter()
                .enumerate()
                .map(task)
                .collect::<Result<Vec<_>>>()?
        } else {
            env.vehicles
                .par_iter()
                .enumerate()
                .map(task)
                .collect::<Result<Vec<_>>>()?
        };

        // Ledger rows and cache updates.
        let mut round_up = 0u64;
        let mut round_down = 0u64;
        for (v, out) in outputs.iter().enumerate() {
            let down: u64 = down_branches[v]
                .iter()
                .map(|&b| env.arch.branch_state_count(b) as u64)
                .sum();
            round_up += out.params_up;
            round_down += down;
            state.ledger.rows.push(LedgerRow {
                round,
                vehicle: out.vehicle,
                params_down: down,
                params_up: out.params_up,
            });
            if let Some(s) = &out.synth {
                state.synth[v] = s.clone();
            }
            if let Some((dups, cache)) = &out.filled {
                state.fill_dups[v] = dups.clone();
                state.fills[v] = fills_to_entries(cache);
            }
        }

        // Aggregation.
        let uploads: Vec<(usize, Vec<BranchPart<R>>)> =
            outputs.iter().map(|o| (o.vehicle, o.uploads.clone())).collect();
        let (next_global, warnings) = aggregate_branches(&state.global, &uploads);
        state.warnings.extend(warnings.into_iter().map(|w| format!("round {round}: {w}")));
        state.global = next_global;

        // FLASH branch selection for the next round: best solo validation
        // accuracy on the pooled validation split, ties in GPS, RGB, LiDAR order.
        if spec.protocol == Protocol::Flash {
            let pooled_val: Vec<&Sample<R>> =
                env.vehicles.iter().flat_map(|v| v.val.iter()).collect();
            let mut best: Option<(f64, ModalityId)> = None;
            for m in ModalityId::ALL {
                let (acc, _) = evaluate(&state.global, &pooled_val, &FillCache::new(), Some(m))?;
                if best.map_or(true, |(b, _)| acc > b) {
                    best = Some((acc, m));
                }
            }
            state.flash_selected = best.map(|(_, m)| m);
        }

        // Round metrics.
        let val_losses: Vec<f64> = outputs.iter().map(|o| o.val_loss).collect();
        let val_accs: Vec<f64> = outputs.iter().map(|o| o.val_acc).collect();
        let mean_val_loss = val_losses.iter().sum::<f64>() / val_losses.len().max(1) as f64;
        if !mean_val_loss.is_finite() {
            return Err(Error::Diverged {
                round,
                detail: format!("mean validation loss {mean_val_loss}"),
            });
        }
        state.loss_history.push(mean_val_loss);
        let (global_acc, _) = evaluate(&state.global, &test_refs, &FillCache::new(), None)?;
        let mean_local_acc = val_accs.iter().sum::<f64>() / val_accs.len().max(1) as f64;
        state.metrics.push(RoundMetrics {
            round,
            global_acc,
            mean_local_acc,
            local_var: population_variance(&val_accs),
            delta_loss,
            triggered,
            params_up: round_up,
            params_down: round_down,
        });
        state.rounds_done = round;
        on_round(&state)?;
    }

    let final_ratio =
        final_sum_rate_ratio(&state.global, &env.test, &env.manifest, cfg.eval_group)?;
    let last = state.metrics.last().cloned();
    let final_local_accs: Vec<f64> = {
        // Recompute per-vehicle accuracies of the FINAL global model.
        let mut accs = Vec::with_capacity(v_count);
        for v in &env.vehicles {
            let refs: Vec<&Sample<R>> = v.val.iter().collect();
            let (acc, _) = if refs.is_empty() {
                (0.0, 0.0)
            } else {
                evaluate(&state.global, &refs, &FillCache::new(), None)?
            };
            accs.push(acc);
        }
        accs
    };
    let report = TrainReport {
        protocol: spec.protocol,
        rounds: state.metrics.clone(),
        final_global_acc: last.as_ref().map_or(0.0, |m| m.global_acc),
        final_local_var: population_variance(&final_local_accs),
        final_local_accs,
        sum_rate_ratio: final_ratio,
        loss_history: state.loss_history.clone(),
        warnings: state.warnings.clone(),
    };
    Ok(RunOutcome { report, ledger: state.ledger.clone(), model: state.global.clone(), state })
}

/// Centralized learning: all local training data pooled at the BS, one model
/// trained for `rounds` epochs. The ledger books the one-time raw-data upload
/// (available modalities plus the label) in round 1 and the final model
/// broadcast in the last round.
fn run_centralized<R: Real>(
    spec: &RunSpec<'_, R>,
    resume: Option<RunState<R>>,
    on_round: &mut dyn FnMut(&RunState<R>) -> Result<()>,
) -> Result<RunOutcome<R>> {
    let env = build_env(spec)?;
    let cfg = spec.round;
    let v_count = env.vehicles.len();

    let mut state = match resume {
        Some(s) => {
            if s.protocol != Protocol::Cl || s.seed != spec.seed {
                return Err(Error::config("resume state does not match run spec"));
            }
            s
        }
        None => RunState {
            protocol: Protocol::Cl,
            seed: spec.seed,
            rounds_done: 0,
            global: MultiModalNet::build(&env.arch, seed::derive(spec.seed, "model-init", &[]))?,
            eval_model: None,
            synth: vec![Vec::new(); v_count],
            fill_dups: vec![Vec::new(); v_count],
            fills: vec![Vec::new(); v_count],
            flash_selected: None,
            loss_history: Vec::new(),
            metrics: Vec::new(),
            ledger: CommLedger::default(),
            warnings: Vec::new(),
        },
    };

    let pooled: Vec<&Sample<R>> =
        env.vehicles.iter().flat_map(|v| v.train.iter()).collect();
    if pooled.is_empty() {
        return Err(Error::input("no pooled training data"));
    }
    let test_refs: Vec<&Sample<R>> = env.test.iter().collect();
    let no_fills = FillCache::new();

    let raw_upload = |v: &VehicleCtx<R>| -> u64 {
        v.train
            .iter()
            .map(|s| {
                let mut scalars = 1u64; // label
                if s.has(ModalityId::Gps) {
                    scalars += 2;
                }
                if s.has(ModalityId::Rgb) {
                    scalars += s.rgb.len() as u64;
                }
                if s.has(ModalityId::Lidar) {
                    scalars += s.lidar.len() as u64;
                }
                scalars
            })
            .sum()
    };

    for round in state.rounds_done + 1..=cfg.rounds {
        let mut order: Vec<usize> = (0..pooled.len()).collect();
        let mut rng = seed::rng(spec.seed, "cl-shuffle", &[round as u64]);
        crate::dataset::shuffle(&mut order, &mut rng);
        let params0 = state.global.params_of(&BranchId::ALL);
        let mut opt = AdamState::new(cfg.optimizer, cfg.lr, &params0);
        drop(params0);
        for batch_ids in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&Sample<R>> = batch_ids.iter().map(|&i| pooled[i]).collect();
            let inputs = build_inputs(&batch, &no_fills);
            let trace = state.global.forward(&inputs, Mode::Train)?;
            let targets = one_hot::<R>(&labels_of(&batch), env.arch.beams)?;
            let (loss, grad_logits) = softmax_cross_entropy(trace.logits(), &targets)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { round, detail: "centralized loss non-finite".into() });
            }
            let grads = state.global.backward(&trace, &grad_logits, None);
            let grad_tensors = collect_branch_grads(&state.global, &grads, &BranchId::ALL);
            let mut params = state.global.params_of_mut(&BranchId::ALL);
            let grad_refs: Vec<&Tensor<R>> = grad_tensors.iter().collect();
            opt.apply(&mut params, &grad_refs);
        }

        let mut val_accs = Vec::with_capacity(v_count);
        let mut val_losses = Vec::with_capacity(v_count);
        for v in &env.vehicles {
            let refs: Vec<&Sample<R>> = v.val.iter().collect();
            let (acc, loss) = if refs.is_empty() {
                (0.0, 0.0)
            } else {
                evaluate(&state.global, &refs, &no_fills, None)?
            };
            val_accs.push(acc);
            val_losses.push(loss);
        }
        let mean_val_loss = val_losses.iter().sum::<f64>() / v_count.max(1) as f64;
        if !mean_val_loss.is_finite() {
            return Err(Error::Diverged { round, detail: "validation loss non-finite".into() });
        }
        let delta_loss = if state.loss_history.is_empty() {
            0.0
        } else {
            state.loss_history.last().unwrap() - mean_val_loss
        };
        state.loss_history.push(mean_val_loss);

        let model_count = env.arch.total_state_count() as u64;
        for v in &env.vehicles {
            state.ledger.rows.push(LedgerRow {
                round,
                vehicle: v.id,
                params_down: if round == cfg.rounds { model_count } else { 0 },
                params_up: if round == 1 { raw_upload(v) } else { 0 },
            });
        }

        let (global_acc, _) = evaluate(&state.global, &test_refs, &no_fills, None)?;
        let round_rows: Vec<&LedgerRow> =
            state.ledger.rows.iter().filter(|r| r.round == round).collect();
        state.metrics.push(RoundMetrics {
            round,
            global_acc,
            mean_local_acc: val_accs.iter().sum::<f64>() / v_count.max(1) as f64,
            local_var: population_variance(&val_accs),
            delta_loss,
            triggered: false,
            params_up: round_rows.iter().map(|r| r.params_up).sum(),
            params_down: round_rows.iter().map(|r| r.params_down).sum(),
        });
        state.rounds_done = round;
        on_round(&state)?;
    }

    let final_ratio =
        final_sum_rate_ratio(&state.global, &env.test, &env.manifest, cfg.eval_group)?;
    let mut final_local_accs = Vec::with_capacity(v_count);
    for v in &env.vehicles {
        let refs: Vec<&Sample<R>> = v.val.iter().collect();
        let (acc, _) = if refs.is_empty() {
            (0.0, 0.0)
        } else {
            evaluate(&state.global, &refs, &no_fills, None)?
        };
        final_local_accs.push(acc);
    }
    let report = TrainReport {
        protocol: Protocol::Cl,
        rounds: state.metrics.clone(),
        final_global_acc: state.metrics.last().map_or(0.0, |m| m.global_acc),
        final_local_var: population_variance(&final_local_accs),
        final_local_accs,
        sum_rate_ratio: final_ratio,
        loss_history: state.loss_history.clone(),
        warnings: state.warnings.clone(),
    };
    Ok(RunOutcome { report, ledger: state.ledger.clone(), model: state.global.clone(), state })
}
