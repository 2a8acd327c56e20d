//! Label / modality imbalance quantification and skewed partition builders.
//!
//! Metrics: pairwise label-distribution overlap ζ, normalized Shannon entropy
//! ε of the global label distribution, and the per-vehicle modality
//! completeness ratio κ. Partition builders construct the label-removal and
//! modality-masking skews used by the experiments.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetFile, Partition, PartitionSample};
use crate::error::{Error, Result};
use crate::model::ModalityId;
use crate::scalar::{r64, Real};
use crate::seed;

/// Per-vehicle label counts over `1..=M` (index `m-1`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelHistogram {
    pub counts: Vec<u64>,
}

impl LabelHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Normalized ratios Ñ (requires total > 0).
    pub fn normalized<R: Real>(&self) -> Result<Vec<R>> {
        let total = self.total();
        if total == 0 {
            return Err(Error::input("empty histogram"));
        }
        let inv = r64::<R>(1.0 / total as f64);
        Ok(self.counts.iter().map(|&c| r64::<R>(c as f64) * inv).collect())
    }
}

/// Elementwise sum of the vehicle histograms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalHistogram {
    pub counts: Vec<u64>,
}

impl GlobalHistogram {
    pub fn from_vehicles(hists: &[LabelHistogram]) -> Self {
        let m = hists.first().map_or(0, |h| h.counts.len());
        let mut counts = vec![0u64; m];
        for h in hists {
            for (g, &c) in counts.iter_mut().zip(&h.counts) {
                *g += c;
            }
        }
        Self { counts }
    }
}

/// Per-vehicle, per-modality sample counts (GPS, RGB, LiDAR order).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityCensus {
    pub per_vehicle: Vec<[u64; 3]>,
}

/// Average overlap rate ζ ∈ [0, 1]:
/// `ζ = 2/(V(V-1)) Σ_{i<j} Σ_m min(Ñ_i^m, Ñ_j^m)`.
pub fn average_overlap_rate<R: Real>(hists: &[LabelHistogram]) -> Result<R> {
    let v = hists.len();
    if v < 2 {
        return Err(Error::input("overlap rate needs at least 2 vehicles"));
    }
    let ratios: Vec<Vec<R>> = hists.iter().map(|h| h.normalized()).collect::<Result<_>>()?;
    let mut acc = R::zero();
    for i in 0..v - 1 {
        for j in i + 1..v {
            let pair: R = ratios[i]
                .iter()
                .zip(&ratios[j])
                .map(|(&a, &b)| if a < b { a } else { b })
                .sum();
            acc += pair;
        }
    }
    Ok(acc * r64::<R>(2.0 / (v as f64 * (v as f64 - 1.0))))
}

/// Normalized Shannon entropy ε ∈ [0, 1] of the global label distribution;
/// zero-count labels contribute nothing (0·log 0 := 0). Natural log — the
/// log M normalization makes the base irrelevant.
pub fn normalized_entropy<R: Real>(global: &GlobalHistogram) -> Result<R> {
    let m = global.counts.len();
    if m < 2 {
        return Err(Error::input("entropy needs at least 2 labels"));
    }
    let total: u64 = global.counts.iter().sum();
    if total == 0 {
        return Err(Error::input("empty global histogram"));
    }
    let inv = 1.0 / total as f64;
    let mut h = R::zero();
    for &c in &global.counts {
        if c > 0 {
            let p = c as f64 * inv;
            h -= r64::<R>(p * p.ln());
        }
    }
    Ok(h / r64::<R>((m as f64).ln()))
}

/// Modality completeness ratio κ = N_v^Q / N_v^{Q*} ∈ [0, 1].
pub fn modality_completeness<R: Real>(counts: &[u64; 3], modality: ModalityId) -> Result<R> {
    let max = *counts.iter().max().expect("three entries");
    if max == 0 {
        return Err(Error::input("vehicle has no samples in any modality"));
    }
    Ok(r64::<R>(counts[modality.index()] as f64 / max as f64))
}

/// Per-label sample shortfall: `N_v^* - N_v^m` except at the (lowest-index)
/// argmax label, which gets 0. Other labels tied at the maximum also get 0
/// since the difference vanishes.
pub fn sample_shortfall(hist: &LabelHistogram) -> Vec<u64> {
    let max = hist.counts.iter().copied().max().unwrap_or(0);
    hist.counts.iter().map(|&c| max - c).collect()
}

/// Label-imbalance level: number of labels removed per vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImbalanceLevel {
    L,
    M,
    H,
}

impl ImbalanceLevel {
    pub fn removed_labels(self) -> usize {
        match self {
            ImbalanceLevel::L => 6,
            ImbalanceLevel::M => 9,
            ImbalanceLevel::H => 12,
        }
    }
}

impl std::str::FromStr for ImbalanceLevel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L" | "l" => Ok(ImbalanceLevel::L),
            "M" | "m" => Ok(ImbalanceLevel::M),
            "H" | "h" => Ok(ImbalanceLevel::H),
            other => Err(Error::config(format!("unknown imbalance level {other:?}"))),
        }
    }
}

/// Histograms of a partition's vehicles, looked up against the dataset.
pub fn partition_histograms<R: Real>(
    partition: &Partition,
    data: &DatasetFile<R>,
) -> Result<Vec<LabelHistogram>> {
    let by_id = data.samples_by_id();
    let m = data.manifest.beams;
    partition
        .vehicles
        .iter()
        .map(|members| {
            let mut counts = vec![0u64; m];
            for s in members {
                let sample = by_id
                    .get(&s.id)
                    .ok_or_else(|| Error::input(format!("unknown sample id {}", s.id)))?;
                counts[sample.label - 1] += 1;
            }
            Ok(LabelHistogram { counts })
        })
        .collect()
}

/// Modality census of a partition (mask-based availability).
pub fn partition_census(partition: &Partition) -> ModalityCensus {
    ModalityCensus {
        per_vehicle: partition
            .vehicles
            .iter()
            .map(|members| {
                let mut counts = [0u64; 3];
                for s in members {
                    for (c, &p) in counts.iter_mut().zip(&s.mask) {
                        if p {
                            *c += 1;
                        }
                    }
                }
                counts
            })
            .collect(),
    }
}

/// Stratified round-robin deal of all samples onto `vehicles` clients: labels
/// spread as evenly as the data allows, sample order shuffled per seed.
pub fn make_iid_partition<R: Real>(
    data: &DatasetFile<R>,
    vehicles: usize,
    seed_value: u64,
) -> Result<Partition> {
    if vehicles == 0 {
        return Err(Error::input("need at least one vehicle"));
    }
    let mut by_label: BTreeMap<usize, Vec<PartitionSample>> = BTreeMap::new();
    for v in &data.vehicles {
        for s in &v.samples {
            by_label
                .entry(s.label)
                .or_default()
                .push(PartitionSample { id: s.id, mask: s.mask });
        }
    }
    let mut rng = seed::rng(seed_value, "iid-deal", &[]);
    let mut out = vec![Vec::new(); vehicles];
    let mut next = 0usize;
    for (_, mut members) in by_label {
        crate::dataset::shuffle(&mut members, &mut rng);
        for s in members {
            out[next].push(s);
            next = (next + 1) % vehicles;
        }
    }
    Ok(Partition { vehicles: out })
}

/// Label-removal skew: per vehicle, labels ranked by volume are split into
/// top/bottom halves; removed labels are drawn from the top half with
/// probability `top_probability` (default 0.7), and all their samples move to
/// the cyclically next vehicle. Removal sets are nested across levels for a
/// fixed seed (H ⊇ M ⊇ L).
pub fn make_label_imbalanced_partition<R: Real>(
    base: &Partition,
    data: &DatasetFile<R>,
    level: ImbalanceLevel,
    seed_value: u64,
    top_probability: f64,
) -> Result<Partition> {
    let v_count = base.vehicles.len();
    if v_count < 2 {
        return Err(Error::input("label skew needs at least 2 vehicles"));
    }
    let hists = partition_histograms(base, data)?;
    let by_id = data.samples_by_id();
    let remove_n = level.removed_labels();

    // Removal label set per vehicle, computed on the base partition.
    let mut removed: Vec<Vec<usize>> = Vec::with_capacity(v_count);
    for (v, hist) in hists.iter().enumerate() {
        let mut present: Vec<(usize, u64)> = hist
            .counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, &c)| (i + 1, c))
            .collect();
        if present.len() < remove_n {
            return Err(Error::input(format!(
                "vehicle {v} has {} distinct labels, cannot remove {remove_n}",
                present.len()
            )));
        }
        // Rank by volume, ties toward the lower label for determinism.
        present.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let top_len = present.len().div_ceil(2);
        let mut top: Vec<usize> = present[..top_len].iter().map(|&(l, _)| l).collect();
        let mut bottom: Vec<usize> = present[top_len..].iter().map(|&(l, _)| l).collect();

        // One RNG stream per vehicle; drawing the full H-length sequence and
        // truncating keeps the removal sets nested across levels.
        let mut rng = seed::rng(seed_value, "label-removal", &[v as u64]);
        let mut sequence = Vec::with_capacity(ImbalanceLevel::H.removed_labels());
        for _ in 0..ImbalanceLevel::H.removed_labels() {
            let want_top = rng.random_range(0.0..1.0) < top_probability;
            let group = if want_top && !top.is_empty() {
                &mut top
            } else if !want_top && !bottom.is_empty() {
                &mut bottom
            } else if !top.is_empty() {
                &mut top
            } else if !bottom.is_empty() {
                &mut bottom
            } else {
                break;
            };
            let pick = rng.random_range(0..group.len());
            sequence.push(group.remove(pick));
        }
        if sequence.len() < remove_n {
            return Err(Error::input(format!(
                "vehicle {v}: only {} removable labels for level {:?}",
                sequence.len(),
                level
            )));
        }
        sequence.truncate(remove_n);
        removed.push(sequence);
    }

    // Simultaneous transfer: each vehicle keeps its surviving samples and
    // receives the previous vehicle's removed ones, preserving order.
    let mut out: Vec<Vec<PartitionSample>> = vec![Vec::new(); v_count];
    for (v, members) in base.vehicles.iter().enumerate() {
        let next = (v + 1) % v_count;
        for s in members {
            let label = by_id
                .get(&s.id)
                .ok_or_else(|| Error::input(format!("unknown sample id {}", s.id)))?
                .label;
            if removed[v].contains(&label) {
                out[next].push(s.clone());
            } else {
                out[v].push(s.clone());
            }
        }
    }
    Ok(Partition { vehicles: out })
}

/// Modality masking mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MaskMode {
    /// Drop each sample's RGB / LiDAR independently at this rate.
    Partial { rate: f64 },
    /// Remove RGB and LiDAR entirely from `k` uniformly chosen vehicles.
    Complete { k: usize },
}

/// Apply RGB/LiDAR masking to a partition; GPS is never masked.
pub fn make_modality_masked_partition(
    base: &Partition,
    mode: MaskMode,
    seed_value: u64,
) -> Result<Partition> {
    let mut out = base.clone();
    match mode {
        MaskMode::Partial { rate } => {
            const RATES: [f64; 4] = [0.2, 0.4, 0.6, 0.8];
            if !RATES.iter().any(|&r| (r - rate).abs() < 1e-9) {
                return Err(Error::input(format!("partial mask rate {rate} not in {RATES:?}")));
            }
            let mut rng = seed::rng(seed_value, "mask-partial", &[]);
            for members in &mut out.vehicles {
                for s in members.iter_mut() {
                    for m in [ModalityId::Rgb, ModalityId::Lidar] {
                        if rng.random_range(0.0..1.0) < rate {
                            s.mask[m.index()] = false;
                        }
                    }
                }
            }
        }
        MaskMode::Complete { k } => {
            const COUNTS: [usize; 4] = [2, 4, 6, 8];
            if !COUNTS.contains(&k) {
                return Err(Error::input(format!("complete mask count {k} not in {COUNTS:?}")));
            }
            if k > base.vehicles.len() {
                return Err(Error::input(format!(
                    "cannot mask {k} of {} vehicles",
                    base.vehicles.len()
                )));
            }
            let mut order: Vec<usize> = (0..base.vehicles.len()).collect();
            let mut rng = seed::rng(seed_value, "mask-complete", &[]);
            crate::dataset::shuffle(&mut order, &mut rng);
            for &v in order.iter().take(k) {
                for s in &mut out.vehicles[v] {
                    s.mask[ModalityId::Rgb.index()] = false;
                    s.mask[ModalityId::Lidar.index()] = false;
                }
            }
        }
    }
    Ok(out)
}

/// Metrics bundle reported alongside partition manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImbalanceReport {
    pub zeta: f64,
    pub epsilon: f64,
    /// Per-vehicle κ in GPS, RGB, LiDAR order.
    pub kappa: Vec<[f64; 3]>,
}

pub fn imbalance_report<R: Real>(partition: &Partition, data: &DatasetFile<R>) -> Result<ImbalanceReport> {
    let hists = partition_histograms(partition, data)?;
    let zeta: f64 = average_overlap_rate(&hists)?;
    let epsilon: f64 = normalized_entropy(&GlobalHistogram::from_vehicles(&hists))?;
    let census = partition_census(partition);
    let kappa = census
        .per_vehicle
        .iter()
        .map(|counts| {
            let mut k = [0.0f64; 3];
            for m in ModalityId::ALL {
                k[m.index()] = modality_completeness(counts, m)?;
            }
            Ok(k)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImbalanceReport { zeta, epsilon, kappa })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, ScenarioConfig};

    fn hist(counts: &[u64]) -> LabelHistogram {
        LabelHistogram { counts: counts.to_vec() }
    }

    #[test]
    fn identical_distributions_have_full_overlap() {
        let hists = vec![hist(&[4, 2, 2]), hist(&[8, 4, 4]), hist(&[2, 1, 1])];
        let z: f64 = average_overlap_rate(&hists).unwrap();
        assert!((z - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_supports_have_zero_overlap() {
        let hists = vec![hist(&[5, 0]), hist(&[0, 7])];
        let z: f64 = average_overlap_rate(&hists).unwrap();
        assert_eq!(z, 0.0);
    }

    #[test]
    fn three_vehicle_overlap_hand_oracle() {
        // ratios (1,0), (0.5,0.5), (0,1): pair overlaps 0.5, 0, 0.5.
        let hists = vec![hist(&[4, 0]), hist(&[2, 2]), hist(&[0, 4])];
        let z: f64 = average_overlap_rate(&hists).unwrap();
        assert!((z - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn overlap_preconditions() {
        assert!(average_overlap_rate::<f64>(&[hist(&[1, 2])]).is_err());
        assert!(average_overlap_rate::<f64>(&[hist(&[1, 2]), hist(&[0, 0])]).is_err());
    }

    #[test]
    fn entropy_boundaries_and_half_case() {
        let uniform = GlobalHistogram { counts: vec![5, 5, 5, 5] };
        let e: f64 = normalized_entropy(&uniform).unwrap();
        assert_eq!(e, 1.0);
        let point = GlobalHistogram { counts: vec![0, 9, 0] };
        let e: f64 = normalized_entropy(&point).unwrap();
        assert_eq!(e, 0.0);
        let half = GlobalHistogram { counts: vec![7, 7, 0, 0] };
        let e: f64 = normalized_entropy(&half).unwrap();
        assert!((e - 0.5).abs() < 1e-12, "log2/log4 = 0.5, got {e}");
        assert!(normalized_entropy::<f64>(&GlobalHistogram { counts: vec![3] }).is_err());
    }

    #[test]
    fn completeness_boundaries() {
        let full: f64 = modality_completeness(&[10, 10, 10], ModalityId::Lidar).unwrap();
        assert_eq!(full, 1.0);
        let partial: f64 = modality_completeness(&[10, 10, 2], ModalityId::Lidar).unwrap();
        assert!((partial - 0.2).abs() < 1e-12);
        let missing: f64 = modality_completeness(&[10, 0, 10], ModalityId::Rgb).unwrap();
        assert_eq!(missing, 0.0);
        assert!(modality_completeness::<f64>(&[0, 0, 0], ModalityId::Gps).is_err());
    }

    #[test]
    fn shortfall_examples() {
        assert_eq!(sample_shortfall(&hist(&[5, 3, 2])), vec![0, 2, 3]);
        assert_eq!(sample_shortfall(&hist(&[4, 4, 4])), vec![0, 0, 0]);
        assert_eq!(sample_shortfall(&hist(&[4, 0])), vec![0, 4]);
    }

    fn small_scenario(seed: u64) -> crate::scenario::SyntheticScenario<f64> {
        let cfg = ScenarioConfig {
            seed,
            vehicles: 10,
            samples_per_vehicle: 60,
            ..ScenarioConfig::default()
        };
        generate_scenario(&cfg).unwrap()
    }

    #[test]
    fn label_skew_lowers_overlap_and_conserves_samples() {
        let sc = small_scenario(13);
        let base = make_iid_partition(&sc.data, 10, 13).unwrap();
        let before = imbalance_report(&base, &sc.data).unwrap();
        let skewed =
            make_label_imbalanced_partition(&base, &sc.data, ImbalanceLevel::L, 13, 0.7).unwrap();
        let after = imbalance_report(&skewed, &sc.data).unwrap();
        assert!(after.zeta < before.zeta, "ζ {} -> {}", before.zeta, after.zeta);
        assert_eq!(skewed.total_samples(), base.total_samples());
        // Determinism.
        let again =
            make_label_imbalanced_partition(&base, &sc.data, ImbalanceLevel::L, 13, 0.7).unwrap();
        assert_eq!(skewed, again);
    }

    #[test]
    fn removal_sets_nest_across_levels() {
        let sc = small_scenario(17);
        let base = make_iid_partition(&sc.data, 10, 17).unwrap();
        let parts: Vec<Partition> = [ImbalanceLevel::L, ImbalanceLevel::M, ImbalanceLevel::H]
            .iter()
            .map(|&lvl| make_label_imbalanced_partition(&base, &sc.data, lvl, 17, 0.7).unwrap())
            .collect();
        // A sample that moved away from vehicle v at level L must also be gone
        // at M and H (nested removal sets).
        for v in 0..10 {
            let ids = |p: &Partition| -> std::collections::BTreeSet<usize> {
                p.vehicles[v].iter().map(|s| s.id).collect()
            };
            let base_ids = ids(&base);
            let l_kept: std::collections::BTreeSet<_> =
                base_ids.intersection(&ids(&parts[0])).cloned().collect();
            let m_kept: std::collections::BTreeSet<_> =
                base_ids.intersection(&ids(&parts[1])).cloned().collect();
            let h_kept: std::collections::BTreeSet<_> =
                base_ids.intersection(&ids(&parts[2])).cloned().collect();
            assert!(m_kept.is_subset(&l_kept));
            assert!(h_kept.is_subset(&m_kept));
        }
    }

    #[test]
    fn too_few_distinct_labels_is_an_error() {
        let sc = small_scenario(19);
        // Two vehicles, all samples crammed onto each with only labels seen
        // there; force a histogram with < 6 distinct labels by filtering.
        let mut base = make_iid_partition(&sc.data, 2, 19).unwrap();
        let by_id = sc.data.samples_by_id();
        for members in &mut base.vehicles {
            members.retain(|s| by_id[&s.id].label <= 3);
        }
        assert!(matches!(
            make_label_imbalanced_partition(&base, &sc.data, ImbalanceLevel::L, 0, 0.7),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn partial_mask_hits_binomial_rate_and_spares_gps() {
        let sc = small_scenario(23);
        let base = Partition::identity(&sc.data);
        let masked =
            make_modality_masked_partition(&base, MaskMode::Partial { rate: 0.8 }, 23).unwrap();
        let census = partition_census(&masked);
        let n = 60u64;
        // ±3σ binomial band around keep rate 0.2.
        let sigma = (0.8 * 0.2 * n as f64).sqrt();
        for (v, counts) in census.per_vehicle.iter().enumerate() {
            assert_eq!(counts[0], n, "GPS untouched for vehicle {v}");
            for &c in &counts[1..] {
                let kept = c as f64;
                assert!(
                    (kept - 0.2 * n as f64).abs() <= 3.0 * sigma,
                    "vehicle {v} kept {kept} of {n}"
                );
            }
        }
    }

    #[test]
    fn complete_mask_zeroes_exactly_k_vehicles() {
        let sc = small_scenario(29);
        let base = Partition::identity(&sc.data);
        let masked =
            make_modality_masked_partition(&base, MaskMode::Complete { k: 2 }, 29).unwrap();
        let census = partition_census(&masked);
        let zeroed = census
            .per_vehicle
            .iter()
            .filter(|c| c[1] == 0 && c[2] == 0)
            .count();
        assert_eq!(zeroed, 2);
        for c in &census.per_vehicle {
            assert_eq!(c[0], 60);
        }
        assert!(matches!(
            make_modality_masked_partition(&base, MaskMode::Complete { k: 12 }, 0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn invalid_partial_rate_rejected() {
        let sc = small_scenario(31);
        let base = Partition::identity(&sc.data);
        assert!(make_modality_masked_partition(&base, MaskMode::Partial { rate: 0.5 }, 0).is_err());
    }
}
