mod support;

use std::collections::BTreeMap;

use proptest::prelude::*;
use starmt::bbox::{iou, BBox};
use starmt::datagen::generate_sequence;
use starmt::degrade::{add_gaussian_noise, apply_haze, apply_turbulence};
use starmt::detector::checkpoint::{decode_checkpoint, encode_checkpoint};
use starmt::detector::model::nms;
use starmt::detector::ModelParams;
use starmt::seed::rng;
use starmt::sfda::augment::masked_count;
use starmt::sfda::{
    ema_update, mask_frames, mean_self_entropy, stage_of, EmaScope, TeacherStudent,
};

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..50.0f64, 0.0..50.0f64, 0.5..30.0f64, 0.5..30.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn entropy_is_bounded(rows in prop::collection::vec(prop::collection::vec(0.0..=1.0f64, 1..5), 1..10)) {
        let h = mean_self_entropy(&rows).unwrap();
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (-1.0f64).exp() + 1e-12);
    }

    #[test]
    fn entropy_vanishes_only_at_hard_scores(rows in prop::collection::vec(prop::collection::vec(prop::bool::ANY, 1..5), 1..10)) {
        let hard: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&b| b as u8 as f64).collect()).collect();
        prop_assert_eq!(mean_self_entropy(&hard), Some(0.0));
        let mut soft = hard.clone();
        soft[0][0] = 0.5;
        prop_assert!(mean_self_entropy(&soft).unwrap() > 0.0);
    }

    #[test]
    fn stages_alternate_every_tau(t in 0usize..100_000, tau in 1usize..1_000) {
        prop_assert_ne!(stage_of(t + tau, tau), stage_of(t, tau));
        prop_assert_eq!(stage_of(t + 2 * tau, tau), stage_of(t, tau));
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let x = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(x, iou(&b, &a));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nms_output_is_sparse_and_covering(
        boxes in prop::collection::vec(bbox(), 0..20),
        seed in any::<u64>(),
        thr in 0.1..0.9f64,
    ) {
        let mut r = rng(seed);
        let scores: Vec<f64> = boxes.iter().map(|_| rand::Rng::gen_range(&mut r, 0.0..1.0)).collect();
        let keep = nms(&boxes, &scores, thr);
        for (i, &a) in keep.iter().enumerate() {
            for &b in &keep[i + 1..] {
                prop_assert!(iou(&boxes[a], &boxes[b]) <= thr);
            }
        }
        for j in 0..boxes.len() {
            if !keep.contains(&j) {
                prop_assert!(keep.iter().any(|&k| scores[k] >= scores[j] && iou(&boxes[k], &boxes[j]) > thr));
            }
        }
    }

    #[test]
    fn ema_teacher_stays_between_endpoints(alpha in 0.0..=1.0f64, steps in 1usize..20, seed in any::<u64>()) {
        let arch = support::tiny_arch(0, true);
        let source = support::tiny_params(&arch, seed);
        let target = support::tiny_params(&arch, seed.wrapping_add(1));
        let mut ts = TeacherStudent::new(&source, alpha).unwrap();
        ts.student = target.clone();
        for _ in 0..steps {
            ema_update(&mut ts, EmaScope::BackboneOnly).unwrap();
        }
        for ((t, a), b) in ts.teacher.tensors.iter().zip(&source.tensors).zip(&target.tensors) {
            for ((v, x), y) in t.value.data().iter().zip(a.value.data()).zip(b.value.data()) {
                match t.scope {
                    starmt::detector::Scope::Tam => prop_assert_eq!(v, x),
                    starmt::detector::Scope::Backbone => {
                        prop_assert!(*v >= x.min(*y) - 1e-12 && *v <= x.max(*y) + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn masking_keeps_sorted_distinct_frames(frames in 1usize..32, r in 0.0..=75.0f64, seed in any::<u64>()) {
        let kept = mask_frames(frames, r, &mut rng(seed));
        prop_assert_eq!(kept.len(), frames - masked_count(frames, r));
        prop_assert!(!kept.is_empty());
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(kept.iter().all(|&f| f < frames));
    }

    #[test]
    fn checkpoints_round_trip_bytes(seed in any::<u64>(), hidden in 0usize..4, relative in any::<bool>()) {
        let mut params = ModelParams::init(&support::tiny_arch(hidden, relative), seed).unwrap();
        params.quantize_f32();
        let bytes = encode_checkpoint(&params, &BTreeMap::new()).unwrap();
        let (back, _) = decode_checkpoint(&bytes, Some(&params.arch)).unwrap();
        prop_assert_eq!(&back, &params);
        prop_assert_eq!(encode_checkpoint(&back, &BTreeMap::new()).unwrap(), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn degradations_keep_shape_labels_and_range(
        seed in any::<u64>(),
        sigma in 0.0..0.3f64,
        beta in 0.0..2.0f64,
        strength in 0.0..3.0f64,
    ) {
        let seq = generate_sequence(&support::tiny_gen(), seed).unwrap();
        for out in [
            add_gaussian_noise(&seq, sigma, seed).unwrap(),
            apply_haze(&seq, beta, 1.0).unwrap(),
            apply_turbulence(&seq, strength, 0.9, seed).unwrap(),
        ] {
            prop_assert_eq!(out.pixels.len(), seq.pixels.len());
            prop_assert_eq!(out.frames, seq.frames);
            prop_assert_eq!(&out.labels, &seq.labels);
            prop_assert!(out.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        prop_assert_eq!(add_gaussian_noise(&seq, sigma, seed).unwrap(), add_gaussian_noise(&seq, sigma, seed).unwrap());
    }
}
