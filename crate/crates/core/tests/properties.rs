//! Property tests for the spec-level invariants.

mod common;

use fedbeam_core::dataset::validate_lidar_grid;
use fedbeam_core::generator::{binarize, embed_tx_rx};
use fedbeam_core::imbalance::{
    average_overlap_rate, modality_completeness, normalized_entropy, sample_shortfall,
    GlobalHistogram, LabelHistogram,
};
use fedbeam_core::loss::softmax_cross_entropy;
use fedbeam_core::model::{ArchConfig, ModalInputs, ModalityId, MultiModalNet};
use fedbeam_core::net::{batch_stats, DenseNet, Layer, LayerSpec, Mode};
use fedbeam_core::tensor::Tensor;
use proptest::prelude::*;

fn histogram_strategy(m: usize) -> impl Strategy<Value = LabelHistogram> {
    proptest::collection::vec(0u64..40, m).prop_map(|mut counts| {
        if counts.iter().all(|&c| c == 0) {
            counts[0] = 1;
        }
        LabelHistogram { counts }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn overlap_in_unit_interval_and_permutation_symmetric(
        hists in proptest::collection::vec(histogram_strategy(6), 2..6),
        shift in 0usize..5,
    ) {
        let zeta: f64 = average_overlap_rate(&hists).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&zeta));
        let mut rotated = hists.clone();
        let k = shift % rotated.len();
        rotated.rotate_left(k);
        let zeta_rot: f64 = average_overlap_rate(&rotated).unwrap();
        prop_assert!((zeta - zeta_rot).abs() < 1e-12);
    }

    #[test]
    fn entropy_in_unit_interval_and_label_permutation_symmetric(
        hist in histogram_strategy(8),
        shift in 0usize..8,
    ) {
        let global = GlobalHistogram { counts: hist.counts.clone() };
        let eps: f64 = normalized_entropy(&global).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&eps));
        let mut rotated = hist.counts.clone();
        rotated.rotate_left(shift);
        let eps_rot: f64 = normalized_entropy(&GlobalHistogram { counts: rotated }).unwrap();
        prop_assert!((eps - eps_rot).abs() < 1e-12);
    }

    #[test]
    fn completeness_in_unit_interval(a in 1u64..60, b in 0u64..60, c in 0u64..60) {
        let counts = [a, b, c];
        for m in ModalityId::ALL {
            let kappa: f64 = modality_completeness(&counts, m).unwrap();
            prop_assert!((0.0..=1.0).contains(&kappa));
        }
    }

    #[test]
    fn shortfall_tops_every_label_up_to_the_argmax(hist in histogram_strategy(7)) {
        let sf = sample_shortfall(&hist);
        let max = *hist.counts.iter().max().unwrap();
        for (c, d) in hist.counts.iter().zip(&sf) {
            prop_assert_eq!(c + d, max);
        }
        let argmax = hist.counts.iter().enumerate().max_by(
            |a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))).unwrap().0;
        prop_assert_eq!(sf[argmax], 0);
    }

    #[test]
    fn binarize_then_embed_yields_valid_lidar(
        values in proptest::collection::vec(-3.0f64..3.0, 32),
        tx in 0usize..32,
        rx_off in 1usize..32,
    ) {
        let rx = (tx + rx_off) % 32;
        let bin = binarize(&values, 0.5);
        prop_assert!(bin.iter().all(|&v| v == 0.0 || v == 1.0));
        let grid = embed_tx_rx(&bin, tx, rx).unwrap();
        let as_i8: Vec<i8> = grid.iter().map(|&v| v as i8).collect();
        prop_assert!(validate_lidar_grid(&as_i8).is_ok());
    }

    #[test]
    fn softmax_ce_nonnegative_with_zero_sum_grad_rows(
        logits in proptest::collection::vec(-5.0f64..5.0, 12),
        label in 1usize..=4,
    ) {
        let logits = Tensor::new(vec![3, 4], logits).unwrap();
        let targets = fedbeam_core::loss::one_hot::<f64>(&[label, 1, 4], 4).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &targets).unwrap();
        prop_assert!(loss >= 0.0);
        for i in 0..3 {
            let row_sum: f64 = grad.row(i).iter().sum();
            prop_assert!(row_sum.abs() < 1e-12);
        }
    }

    #[test]
    fn running_stats_follow_exact_ema(
        values in proptest::collection::vec(-2.0f64..2.0, 8),
        momentum in 0.05f64..0.95,
    ) {
        let mut rng = fedbeam_core::seed::rng(0, "prop-init", &[]);
        let mut net: DenseNet<f64> =
            DenseNet::from_specs(&[LayerSpec::batchnorm(2)], momentum, 1e-5, &mut rng).unwrap();
        let old_mean = [0.3f64, -0.7];
        let old_var = [1.5f64, 0.5];
        if let Layer::BatchNorm(bn) = &mut net.layers[0] {
            bn.running_mean = old_mean.to_vec();
            bn.running_var = old_var.to_vec();
        }
        let x = Tensor::new(vec![4, 2], values).unwrap();
        let stats = batch_stats(&x);
        net.forward(&x, Mode::Train).unwrap();
        if let Layer::BatchNorm(bn) = &net.layers[0] {
            for c in 0..2 {
                prop_assert_eq!(
                    bn.running_mean[c],
                    (1.0 - momentum) * old_mean[c] + momentum * stats.mean[c]
                );
                prop_assert_eq!(
                    bn.running_var[c],
                    (1.0 - momentum) * old_var[c] + momentum * stats.var[c]
                );
            }
        }
    }

    #[test]
    fn fusion_zero_equivalence_under_random_masks(
        seed_v in 0u64..50,
        mask_bits in proptest::collection::vec(proptest::bool::ANY, 9),
    ) {
        let arch = ArchConfig {
            beams: 3,
            gps_dims: vec![2, 3],
            rgb_dims: vec![4, 3],
            lidar_dims: vec![5, 3],
            integration_hidden: vec![4],
            ..ArchConfig::default()
        };
        let net: MultiModalNet<f64> = MultiModalNet::build(&arch, seed_v).unwrap();
        let mut rng = fedbeam_core::seed::rng(seed_v, "prop-data", &[]);
        use rand::Rng;
        let mut mk = |d: usize| {
            let vals: Vec<f64> = (0..3 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::new(vec![3, d], vals).unwrap()
        };
        let mut inputs = ModalInputs::full(mk(2), mk(4), mk(5));
        for i in 0..3 {
            for m in 0..3 {
                // GPS stays present so no sample is fully absent.
                if m > 0 {
                    inputs.present[i][m] = mask_bits[i * 3 + m];
                }
            }
        }
        let (masked, _) = net.predict(&inputs, Mode::Eval).unwrap();

        let mut explicit = inputs.clone();
        for i in 0..3 {
            for m in ModalityId::ALL {
                if !explicit.present[i][m.index()] {
                    explicit.filled[i][m.index()] = Some(vec![0.0; arch.feature_dim(m)]);
                }
            }
        }
        let (zeroed, _) = net.predict(&explicit, Mode::Eval).unwrap();
        prop_assert_eq!(masked, zeroed);
    }

    #[test]
    fn split_merge_identity_over_random_archs(
        seed_v in 0u64..100,
        gps_h in 2usize..6,
        beams in 2usize..6,
    ) {
        let arch = ArchConfig {
            beams,
            gps_dims: vec![2, gps_h, 3],
            rgb_dims: vec![4, 3],
            lidar_dims: vec![5, 3],
            integration_hidden: vec![4],
            ..ArchConfig::default()
        };
        let net: MultiModalNet<f64> = MultiModalNet::build(&arch, seed_v).unwrap();
        let merged = MultiModalNet::merge_branches(&arch, net.split_branches()).unwrap();
        prop_assert_eq!(net, merged);
    }
}
