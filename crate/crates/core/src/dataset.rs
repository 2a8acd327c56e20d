//! Labeled multi-modal samples, vehicle datasets, partitions and the
//! on-disk dataset format.
//!
//! Labels are 1-based beam indices (`1..=M`), matching the file format; they
//! are shifted to 0-based class indices only at the loss boundary. LiDAR
//! grids are stored as small integers with the marker convention: obstacle
//! cells `1`, transmitter `-1`, receiver `-2`, free space `0`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModalInputs, ModalityId};
use crate::scalar::{r64, Real};
use crate::seed;
use crate::tensor::Tensor;

/// One multi-modal observation with its best-beam label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Sample<R: Real> {
    /// Globally unique sample id within a dataset file.
    pub id: usize,
    /// Relative 2-D coordinates (vehicle minus base station).
    pub gps: Vec<R>,
    /// Flattened RGB-proxy occupancy grid.
    pub rgb: Vec<R>,
    /// Flattened LiDAR cuboid grid over {0, 1, -1, -2}.
    pub lidar: Vec<i8>,
    /// Beam label in `1..=M`.
    pub label: usize,
    /// Modality availability in GPS, RGB, LiDAR order.
    pub mask: [bool; 3],
    pub synthetic: bool,
    /// mmWave channel vector, present for generated scenarios.
    #[serde(default)]
    pub channel: Option<Vec<Complex<R>>>,
}

impl<R: Real> Sample<R> {
    pub fn has(&self, m: ModalityId) -> bool {
        self.mask[m.index()]
    }

    /// Validate shape, value-set and label invariants.
    pub fn validate(&self, beams: usize, rgb_len: usize, lidar_len: usize) -> Result<()> {
        if self.gps.len() != 2 {
            return Err(Error::format(format!("sample {}: gps dim {}", self.id, self.gps.len())));
        }
        if self.rgb.len() != rgb_len {
            return Err(Error::format(format!(
                "sample {}: rgb len {} expected {}",
                self.id,
                self.rgb.len(),
                rgb_len
            )));
        }
        if self.lidar.len() != lidar_len {
            return Err(Error::format(format!(
                "sample {}: lidar len {} expected {}",
                self.id,
                self.lidar.len(),
                lidar_len
            )));
        }
        if self.label < 1 || self.label > beams {
            return Err(Error::format(format!(
                "sample {}: label {} outside 1..={}",
                self.id, self.label, beams
            )));
        }
        validate_lidar_grid(&self.lidar)
            .map_err(|e| Error::format(format!("sample {}: {}", self.id, e)))?;
        if self.gps.iter().any(|v| !v.is_finite()) || self.rgb.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(format!("sample {}: non-finite value", self.id)));
        }
        Ok(())
    }
}

/// Check the LiDAR value-set and marker invariant.
pub fn validate_lidar_grid(lidar: &[i8]) -> std::result::Result<(), String> {
    let mut tx = 0usize;
    let mut rx = 0usize;
    for &v in lidar {
        match v {
            0 | 1 => {}
            -1 => tx += 1,
            -2 => rx += 1,
            other => return Err(format!("lidar cell value {other} outside {{0,1,-1,-2}}")),
        }
    }
    if tx != 1 || rx != 1 {
        return Err(format!("lidar grid has {tx} transmitter and {rx} receiver markers"));
    }
    Ok(())
}

/// All samples held by one vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct VehicleDataset<R: Real> {
    pub vehicle_id: usize,
    pub samples: Vec<Sample<R>>,
}

impl<R: Real> VehicleDataset<R> {
    /// Per-label counts over `1..=beams` (index `m-1`).
    pub fn label_histogram(&self, beams: usize) -> Vec<u64> {
        let mut counts = vec![0u64; beams];
        for s in &self.samples {
            counts[s.label - 1] += 1;
        }
        counts
    }

    /// Per-modality sample counts (availability-mask based).
    pub fn modality_counts(&self) -> [u64; 3] {
        let mut counts = [0u64; 3];
        for s in &self.samples {
            for (c, &p) in counts.iter_mut().zip(&s.mask) {
                if p {
                    *c += 1;
                }
            }
        }
        counts
    }
}

/// Dataset file manifest: everything needed to rebuild codebook and grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n_t: usize,
    pub beams: usize,
    pub rgb_grid: [usize; 2],
    pub lidar_grid: [usize; 3],
    pub noise_power: f64,
    pub power: f64,
    /// World bounding box `[x_min, x_max, y_min, y_max]`.
    pub bounds: [f64; 4],
    pub vehicles: usize,
    pub has_channels: bool,
}

impl DatasetManifest {
    pub fn rgb_len(&self) -> usize {
        self.rgb_grid.iter().product()
    }
    pub fn lidar_len(&self) -> usize {
        self.lidar_grid.iter().product()
    }
}

/// On-disk dataset container (versioned JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct DatasetFile<R: Real> {
    pub format_version: u32,
    pub manifest: DatasetManifest,
    pub vehicles: Vec<VehicleDataset<R>>,
}

pub const DATASET_FORMAT_VERSION: u32 = 1;

impl<R: Real> DatasetFile<R> {
    pub fn new(manifest: DatasetManifest, vehicles: Vec<VehicleDataset<R>>) -> Self {
        Self { format_version: DATASET_FORMAT_VERSION, manifest, vehicles }
    }

    pub fn total_samples(&self) -> usize {
        self.vehicles.iter().map(|v| v.samples.len()).sum()
    }

    /// Validate every sample against the manifest.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported dataset format version {}",
                self.format_version
            )));
        }
        if self.vehicles.len() != self.manifest.vehicles {
            return Err(Error::format(format!(
                "manifest declares {} vehicles, file has {}",
                self.manifest.vehicles,
                self.vehicles.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for v in &self.vehicles {
            for s in &v.samples {
                s.validate(self.manifest.beams, self.manifest.rgb_len(), self.manifest.lidar_len())?;
                if !seen.insert(s.id) {
                    return Err(Error::format(format!("duplicate sample id {}", s.id)));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let file = fs::File::create(path)?;
        serde_json::to_writer(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)?;
        let loaded: Self = serde_json::from_reader(BufReader::new(file))?;
        loaded.validate()?;
        Ok(loaded)
    }

    /// Sample lookup across vehicles.
    pub fn samples_by_id(&self) -> BTreeMap<usize, &Sample<R>> {
        self.vehicles
            .iter()
            .flat_map(|v| v.samples.iter())
            .map(|s| (s.id, s))
            .collect()
    }
}

/// A sample's membership in a partition: id plus the (possibly reduced)
/// availability mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSample {
    pub id: usize,
    pub mask: [bool; 3],
}

/// Reassignment of dataset samples to vehicles with experiment masks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub vehicles: Vec<Vec<PartitionSample>>,
}

impl Partition {
    /// Identity partition of a dataset: same ownership, same masks.
    pub fn identity<R: Real>(data: &DatasetFile<R>) -> Self {
        Self {
            vehicles: data
                .vehicles
                .iter()
                .map(|v| v.samples.iter().map(|s| PartitionSample { id: s.id, mask: s.mask }).collect())
                .collect(),
        }
    }

    pub fn vehicle_count(&self) -> usize {
        self.vehicles.len()
    }

    pub fn total_samples(&self) -> usize {
        self.vehicles.iter().map(|v| v.len()).sum()
    }

    /// Materialize per-vehicle datasets: ownership and masks from the
    /// partition, sample payloads from the dataset file. Partition masks can
    /// only reduce intrinsic availability.
    pub fn apply<R: Real>(&self, data: &DatasetFile<R>) -> Result<Vec<VehicleDataset<R>>> {
        let by_id = data.samples_by_id();
        let mut out = Vec::with_capacity(self.vehicles.len());
        for (vid, members) in self.vehicles.iter().enumerate() {
            let mut samples = Vec::with_capacity(members.len());
            for m in members {
                let base = by_id
                    .get(&m.id)
                    .ok_or_else(|| Error::format(format!("partition references unknown sample {}", m.id)))?;
                let mut s = (*base).clone();
                for k in 0..3 {
                    s.mask[k] = s.mask[k] && m.mask[k];
                }
                samples.push(s);
            }
            out.push(VehicleDataset { vehicle_id: vid, samples });
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let file = fs::File::create(path)?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

/// Deterministic 80/10/10 split of one vehicle's sample indices into
/// local-train / local-validation / global-test portions.
pub fn split_indices(n: usize, master_seed: u64, vehicle_id: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed::rng(master_seed, "split", &[vehicle_id as u64]);
    shuffle(&mut order, &mut rng);
    let n_test = (n as f64 * 0.1).round() as usize;
    let n_val = (n as f64 * 0.1).round() as usize;
    let n_train = n.saturating_sub(n_test + n_val);
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();
    (train, val, test)
}

/// Fisher–Yates with a fixed draw order.
pub fn shuffle<T>(items: &mut [T], rng: &mut rand_chacha::ChaCha8Rng) {
    use rand::Rng;
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Synthetic feature vectors indexed by `(sample id, modality)`.
pub type FillCache<R> = BTreeMap<(usize, usize), Vec<R>>;

/// Pack samples into a fused-forward input batch. Masked-off modalities get
/// zero rows in the raw tensors (never read); filled features come from the
/// cache when available.
pub fn build_inputs<R: Real>(samples: &[&Sample<R>], fills: &FillCache<R>) -> ModalInputs<R> {
    let n = samples.len();
    let gps_d = 2;
    let rgb_d = samples.first().map_or(0, |s| s.rgb.len());
    let lidar_d = samples.first().map_or(0, |s| s.lidar.len());
    let mut gps = vec![R::zero(); n * gps_d];
    let mut rgb = vec![R::zero(); n * rgb_d];
    let mut lidar = vec![R::zero(); n * lidar_d];
    let mut present = Vec::with_capacity(n);
    let mut filled: Vec<[Option<Vec<R>>; 3]> = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        if s.has(ModalityId::Gps) {
            gps[i * gps_d..(i + 1) * gps_d].copy_from_slice(&s.gps);
        }
        if s.has(ModalityId::Rgb) {
            rgb[i * rgb_d..(i + 1) * rgb_d].copy_from_slice(&s.rgb);
        }
        if s.has(ModalityId::Lidar) {
            for (dst, &v) in lidar[i * lidar_d..(i + 1) * lidar_d].iter_mut().zip(&s.lidar) {
                *dst = r64(f64::from(v));
            }
        }
        present.push(s.mask);
        let mut f: [Option<Vec<R>>; 3] = [None, None, None];
        for &m in &ModalityId::ALL {
            if !s.has(m) {
                if let Some(v) = fills.get(&(s.id, m.index())) {
                    f[m.index()] = Some(v.clone());
                }
            }
        }
        filled.push(f);
    }
    ModalInputs {
        gps: Tensor::from_parts(vec![n, gps_d], gps),
        rgb: Tensor::from_parts(vec![n, rgb_d], rgb),
        lidar: Tensor::from_parts(vec![n, lidar_d], lidar),
        present,
        filled,
    }
}

pub fn labels_of<R: Real>(samples: &[&Sample<R>]) -> Vec<usize> {
    samples.iter().map(|s| s.label).collect()
}
