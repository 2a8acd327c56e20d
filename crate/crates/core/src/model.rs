//! Multi-branch beam-selection network.
//!
//! Three modality extractor branches (GPS, RGB, LiDAR) produce feature
//! vectors that are concatenated — with zero fill or stored synthetic
//! features for absent modalities — into an integration branch emitting
//! beam-class logits. Every dense layer is followed by batch norm; extractor
//! stacks end in ReLU features, the integration stack ends at the logits BN.
//!
//! Within a batch each extractor runs only on the sub-batch of samples that
//! actually carry its modality; features are scattered back into the fused
//! tensor. Gradients route the same way, so an absent modality's extractor
//! receives exactly zero gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{DenseNet, ForwardTrace, LayerSpec, Mode, NetGrads};
use crate::scalar::Real;
use crate::seed;
use crate::tensor::Tensor;

/// Sensor modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ModalityId {
    Gps,
    Rgb,
    Lidar,
}

impl ModalityId {
    pub const ALL: [ModalityId; 3] = [ModalityId::Gps, ModalityId::Rgb, ModalityId::Lidar];

    pub fn index(self) -> usize {
        match self {
            ModalityId::Gps => 0,
            ModalityId::Rgb => 1,
            ModalityId::Lidar => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModalityId::Gps => "GPS",
            ModalityId::Rgb => "RGB",
            ModalityId::Lidar => "LiDAR",
        }
    }
}

/// Addressable part of the model in the federation exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BranchId {
    Modality(ModalityId),
    Integration,
}

impl BranchId {
    pub const ALL: [BranchId; 4] = [
        BranchId::Modality(ModalityId::Gps),
        BranchId::Modality(ModalityId::Rgb),
        BranchId::Modality(ModalityId::Lidar),
        BranchId::Integration,
    ];
}

/// Architecture description. Dimension lists run input → feature; the
/// integration input width is derived from the three feature widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    /// Codebook size M (number of beam classes).
    pub beams: usize,
    pub gps_dims: Vec<usize>,
    pub rgb_dims: Vec<usize>,
    pub lidar_dims: Vec<usize>,
    /// Hidden widths of the integration branch (input and output derived).
    pub integration_hidden: Vec<usize>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            beams: 16,
            gps_dims: vec![2, 16, 8],
            rgb_dims: vec![64, 32, 16],
            lidar_dims: vec![128, 32, 16],
            integration_hidden: vec![32],
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beams < 2 {
            return Err(Error::config("need at least 2 beam classes"));
        }
        for dims in [&self.gps_dims, &self.rgb_dims, &self.lidar_dims] {
            if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
                return Err(Error::config("extractor dims need input and feature widths > 0"));
            }
        }
        if self.integration_hidden.iter().any(|&d| d == 0) {
            return Err(Error::config("integration widths must be positive"));
        }
        Ok(())
    }

    pub fn feature_dim(&self, m: ModalityId) -> usize {
        *match m {
            ModalityId::Gps => self.gps_dims.last(),
            ModalityId::Rgb => self.rgb_dims.last(),
            ModalityId::Lidar => self.lidar_dims.last(),
        }
        .expect("validated dims")
    }

    pub fn input_dim(&self, m: ModalityId) -> usize {
        match m {
            ModalityId::Gps => self.gps_dims[0],
            ModalityId::Rgb => self.rgb_dims[0],
            ModalityId::Lidar => self.lidar_dims[0],
        }
    }

    /// Integration input width: sum of feature dims in fixed GPS, RGB, LiDAR order.
    pub fn fused_dim(&self) -> usize {
        ModalityId::ALL.iter().map(|&m| self.feature_dim(m)).sum()
    }

    /// Column range of a modality inside the fused feature vector.
    pub fn fused_slot(&self, m: ModalityId) -> std::ops::Range<usize> {
        let mut start = 0;
        for &q in &ModalityId::ALL {
            if q == m {
                return start..start + self.feature_dim(q);
            }
            start += self.feature_dim(q);
        }
        unreachable!()
    }

    fn extractor_specs(dims: &[usize]) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        for w in dims.windows(2) {
            specs.push(LayerSpec::dense(w[0], w[1]));
            specs.push(LayerSpec::batchnorm(w[1]));
            specs.push(LayerSpec::relu(w[1]));
        }
        specs
    }

    fn integration_specs(&self) -> Vec<LayerSpec> {
        let mut dims = vec![self.fused_dim()];
        dims.extend_from_slice(&self.integration_hidden);
        let mut specs = Vec::new();
        for w in dims.windows(2) {
            specs.push(LayerSpec::dense(w[0], w[1]));
            specs.push(LayerSpec::batchnorm(w[1]));
            specs.push(LayerSpec::relu(w[1]));
        }
        let last = *dims.last().expect("nonempty");
        specs.push(LayerSpec::dense(last, self.beams));
        specs.push(LayerSpec::batchnorm(self.beams));
        specs
    }

    pub fn branch_specs(&self, id: BranchId) -> Vec<LayerSpec> {
        match id {
            BranchId::Modality(ModalityId::Gps) => Self::extractor_specs(&self.gps_dims),
            BranchId::Modality(ModalityId::Rgb) => Self::extractor_specs(&self.rgb_dims),
            BranchId::Modality(ModalityId::Lidar) => Self::extractor_specs(&self.lidar_dims),
            BranchId::Integration => self.integration_specs(),
        }
    }

    /// Closed-form transferred-state count of one branch:
    /// dense `in·out + out` plus `4·dim` per BN layer (gamma, beta, running
    /// mean, running var).
    pub fn branch_state_count(&self, id: BranchId) -> usize {
        self.branch_specs(id)
            .iter()
            .map(|s| match s.kind {
                crate::net::LayerKind::Dense => s.fan_in * s.fan_out + s.fan_out,
                crate::net::LayerKind::BatchNorm => 4 * s.fan_out,
                crate::net::LayerKind::Relu => 0,
            })
            .sum()
    }

    pub fn total_state_count(&self) -> usize {
        BranchId::ALL.iter().map(|&b| self.branch_state_count(b)).sum()
    }
}

/// One branch: a dense stack plus its declared output width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Branch<R: Real> {
    pub net: DenseNet<R>,
    pub output_dim: usize,
}

/// The full four-branch model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct MultiModalNet<R: Real> {
    pub arch: ArchConfig,
    pub gps: Branch<R>,
    pub rgb: Branch<R>,
    pub lidar: Branch<R>,
    pub integration: Branch<R>,
}

/// A detached branch, as exchanged between base station and vehicles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct BranchPart<R: Real> {
    pub id: BranchId,
    pub branch: Branch<R>,
}

/// Batch inputs for the fused forward pass. Rows of a modality tensor are
/// meaningful only where `present` says so; `filled` carries synthetic
/// feature vectors used in place of zero fill for absent modalities.
#[derive(Debug, Clone)]
pub struct ModalInputs<R: Real> {
    pub gps: Tensor<R>,
    pub rgb: Tensor<R>,
    pub lidar: Tensor<R>,
    pub present: Vec<[bool; 3]>,
    pub filled: Vec<[Option<Vec<R>>; 3]>,
}

impl<R: Real> ModalInputs<R> {
    pub fn batch_len(&self) -> usize {
        self.present.len()
    }

    pub fn modality(&self, m: ModalityId) -> &Tensor<R> {
        match m {
            ModalityId::Gps => &self.gps,
            ModalityId::Rgb => &self.rgb,
            ModalityId::Lidar => &self.lidar,
        }
    }

    /// Indices of samples carrying modality `m`.
    pub fn rows_present(&self, m: ModalityId) -> Vec<usize> {
        (0..self.present.len()).filter(|&i| self.present[i][m.index()]).collect()
    }

    /// All-present inputs without fills (the generator's case).
    pub fn full(gps: Tensor<R>, rgb: Tensor<R>, lidar: Tensor<R>) -> Self {
        let n = gps.rows();
        assert_eq!(rgb.rows(), n);
        assert_eq!(lidar.rows(), n);
        Self {
            gps,
            rgb,
            lidar,
            present: vec![[true; 3]; n],
            filled: (0..n).map(|_| [None, None, None]).collect(),
        }
    }
}

/// Trace of one extractor run over its present sub-batch.
#[derive(Debug, Clone)]
pub struct ExtractorTrace<R: Real> {
    pub rows: Vec<usize>,
    pub trace: ForwardTrace<R>,
}

/// Trace of a fused forward pass.
#[derive(Debug, Clone)]
pub struct ModalTrace<R: Real> {
    pub mode: Mode,
    pub extractors: [Option<ExtractorTrace<R>>; 3],
    pub fused: Tensor<R>,
    pub integration: ForwardTrace<R>,
}

impl<R: Real> ModalTrace<R> {
    pub fn logits(&self) -> &Tensor<R> {
        &self.integration.output
    }
}

/// Gradients of a fused forward/backward pass.
#[derive(Debug, Clone)]
pub struct ModelGrads<R: Real> {
    /// Extractor gradients; `None` when the branch never ran (zero gradient).
    pub branches: [Option<NetGrads<R>>; 3],
    pub integration: NetGrads<R>,
    /// dL/d(fused features), for optimizing filled feature slots.
    pub fused_grad: Tensor<R>,
}

/// Gradient injections at BN-layer inputs, per branch.
#[derive(Debug, Clone, Default)]
pub struct BnInjections<R: Real> {
    pub branches: [Vec<Option<Tensor<R>>>; 3],
    pub integration: Vec<Option<Tensor<R>>>,
}

/// Concatenate per-modality features in fixed GPS, RGB, LiDAR order; absent
/// modalities contribute their filled feature vector if stored, else zeros.
pub fn fuse_features<R: Real>(
    arch: &ArchConfig,
    features: [Option<(&[usize], &Tensor<R>)>; 3],
    inputs: &ModalInputs<R>,
) -> Tensor<R> {
    let n = inputs.batch_len();
    let width = arch.fused_dim();
    let mut fused = Tensor::zeros(vec![n, width]);
    for &m in &ModalityId::ALL {
        let slot = arch.fused_slot(m);
        if let Some((rows, feats)) = features[m.index()] {
            for (k, &i) in rows.iter().enumerate() {
                fused.row_mut(i)[slot.clone()].copy_from_slice(feats.row(k));
            }
        }
        for i in 0..n {
            if !inputs.present[i][m.index()] {
                if let Some(f) = &inputs.filled[i][m.index()] {
                    fused.row_mut(i)[slot.clone()].copy_from_slice(f);
                }
            }
        }
    }
    fused
}

impl<R: Real> MultiModalNet<R> {
    /// Deterministic model construction from an architecture and a seed.
    pub fn build(arch: &ArchConfig, init_seed: u64) -> Result<Self> {
        arch.validate()?;
        let make = |id: BranchId, tag: u64| -> Result<Branch<R>> {
            let mut rng = seed::rng(init_seed, "init", &[tag]);
            let net =
                DenseNet::from_specs(&arch.branch_specs(id), arch.bn_momentum, arch.bn_eps, &mut rng)?;
            let output_dim = match id {
                BranchId::Modality(m) => arch.feature_dim(m),
                BranchId::Integration => arch.beams,
            };
            Ok(Branch { net, output_dim })
        };
        Ok(Self {
            arch: arch.clone(),
            gps: make(BranchId::Modality(ModalityId::Gps), 0)?,
            rgb: make(BranchId::Modality(ModalityId::Rgb), 1)?,
            lidar: make(BranchId::Modality(ModalityId::Lidar), 2)?,
            integration: make(BranchId::Integration, 3)?,
        })
    }

    pub fn branch(&self, id: BranchId) -> &Branch<R> {
        match id {
            BranchId::Modality(ModalityId::Gps) => &self.gps,
            BranchId::Modality(ModalityId::Rgb) => &self.rgb,
            BranchId::Modality(ModalityId::Lidar) => &self.lidar,
            BranchId::Integration => &self.integration,
        }
    }

    pub fn branch_mut(&mut self, id: BranchId) -> &mut Branch<R> {
        match id {
            BranchId::Modality(ModalityId::Gps) => &mut self.gps,
            BranchId::Modality(ModalityId::Rgb) => &mut self.rgb,
            BranchId::Modality(ModalityId::Lidar) => &mut self.lidar,
            BranchId::Integration => &mut self.integration,
        }
    }

    /// Fused forward pass without mutating BN running statistics.
    pub fn forward_frozen(&self, inputs: &ModalInputs<R>, mode: Mode) -> Result<ModalTrace<R>> {
        if inputs.batch_len() == 0 {
            return Err(Error::input("empty batch"));
        }
        let mut extractors: [Option<ExtractorTrace<R>>; 3] = [None, None, None];
        for &m in &ModalityId::ALL {
            let rows = inputs.rows_present(m);
            if rows.is_empty() {
                continue;
            }
            let sub = inputs.modality(m).gather_rows(&rows);
            let trace = self.branch(BranchId::Modality(m)).net.forward_frozen(&sub, mode)?;
            extractors[m.index()] = Some(ExtractorTrace { rows, trace });
        }
        let features: [Option<(&[usize], &Tensor<R>)>; 3] = [0, 1, 2].map(|i| {
            extractors[i].as_ref().map(|e| (&e.rows[..], &e.trace.output))
        });
        let fused = fuse_features(&self.arch, features, inputs);
        let integration = self.integration.net.forward_frozen(&fused, mode)?;
        Ok(ModalTrace { mode, extractors, fused, integration })
    }

    /// Commit the BN running-stat updates recorded in a train-mode trace.
    pub fn commit_bn_updates(&mut self, trace: &ModalTrace<R>) {
        for &m in &ModalityId::ALL {
            if let Some(e) = &trace.extractors[m.index()] {
                self.branch_mut(BranchId::Modality(m)).net.commit_bn_updates(&e.trace);
            }
        }
        self.integration.net.commit_bn_updates(&trace.integration);
    }

    /// Fused forward; train mode commits BN running-stat updates.
    pub fn forward(&mut self, inputs: &ModalInputs<R>, mode: Mode) -> Result<ModalTrace<R>> {
        let trace = self.forward_frozen(inputs, mode)?;
        if mode == Mode::Train {
            self.commit_bn_updates(&trace);
        }
        Ok(trace)
    }

    /// Reverse pass from dL/d(logits), optionally with BN-input injections.
    pub fn backward(
        &self,
        trace: &ModalTrace<R>,
        grad_logits: &Tensor<R>,
        injections: Option<&BnInjections<R>>,
    ) -> ModelGrads<R> {
        let empty: &[Option<Tensor<R>>] = &[];
        let integration = self.integration.net.backward_injected(
            &trace.integration,
            grad_logits,
            injections.map_or(empty, |i| &i.integration),
        );
        let fused_grad = integration.input.clone();
        let mut branches: [Option<NetGrads<R>>; 3] = [None, None, None];
        for &m in &ModalityId::ALL {
            let Some(e) = &trace.extractors[m.index()] else { continue };
            let slot = self.arch.fused_slot(m);
            let mut upstream = Tensor::zeros(vec![e.rows.len(), slot.len()]);
            for (k, &i) in e.rows.iter().enumerate() {
                upstream.row_mut(k).copy_from_slice(&fused_grad.row(i)[slot.clone()]);
            }
            let g = self.branch(BranchId::Modality(m)).net.backward_injected(
                &e.trace,
                &upstream,
                injections.map_or(empty, |i| &i.branches[m.index()]),
            );
            branches[m.index()] = Some(g);
        }
        ModelGrads { branches, integration, fused_grad }
    }

    /// Logits and 1-based argmax labels (ties toward the lowest beam index).
    pub fn predict(&self, inputs: &ModalInputs<R>, mode: Mode) -> Result<(Tensor<R>, Vec<usize>)> {
        let trace = self.forward_frozen(inputs, mode)?;
        let logits = trace.integration.output;
        let labels = (0..logits.rows()).map(|i| crate::loss::argmax_label(logits.row(i))).collect();
        Ok((logits, labels))
    }

    /// Detach all four branches.
    pub fn split_branches(&self) -> Vec<BranchPart<R>> {
        BranchId::ALL
            .iter()
            .map(|&id| BranchPart { id, branch: self.branch(id).clone() })
            .collect()
    }

    /// Rebuild a model from four parts; every branch must be present exactly once.
    pub fn merge_branches(arch: &ArchConfig, parts: Vec<BranchPart<R>>) -> Result<Self> {
        let mut slots: [Option<Branch<R>>; 4] = [None, None, None, None];
        for part in parts {
            let i = BranchId::ALL.iter().position(|&b| b == part.id).expect("known branch id");
            if slots[i].is_some() {
                return Err(Error::protocol(format!("duplicate branch {:?}", part.id)));
            }
            slots[i] = Some(part.branch);
        }
        let [gps, rgb, lidar, integration] = slots;
        match (gps, rgb, lidar, integration) {
            (Some(gps), Some(rgb), Some(lidar), Some(integration)) => {
                Ok(Self { arch: arch.clone(), gps, rgb, lidar, integration })
            }
            _ => Err(Error::protocol("missing branch on merge")),
        }
    }

    pub fn state_count(&self) -> usize {
        BranchId::ALL.iter().map(|&b| self.branch(b).net.state_count()).sum()
    }

    /// Parameter tensors of the selected branches, in canonical branch order
    /// (GPS, RGB, LiDAR, integration) regardless of `ids` order.
    pub fn params_of(&self, ids: &[BranchId]) -> Vec<&Tensor<R>> {
        BranchId::ALL
            .iter()
            .filter(|b| ids.contains(b))
            .flat_map(|&id| self.branch(id).net.params())
            .collect()
    }

    /// Mutable counterpart of [`MultiModalNet::params_of`], same canonical order.
    pub fn params_of_mut(&mut self, ids: &[BranchId]) -> Vec<&mut Tensor<R>> {
        let mut out = Vec::new();
        if ids.contains(&BranchId::Modality(ModalityId::Gps)) {
            out.extend(self.gps.net.params_mut());
        }
        if ids.contains(&BranchId::Modality(ModalityId::Rgb)) {
            out.extend(self.rgb.net.params_mut());
        }
        if ids.contains(&BranchId::Modality(ModalityId::Lidar)) {
            out.extend(self.lidar.net.params_mut());
        }
        if ids.contains(&BranchId::Integration) {
            out.extend(self.integration.net.params_mut());
        }
        out
    }
}
