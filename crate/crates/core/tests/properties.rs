mod common;

use std::collections::HashSet;

use desklab::datagen::{generate_corpus, split_corpus, stack_frames, HmmSpec, Split, SyntheticHmm, Utterance, WindowSpec};
use desklab::distill::{teacher_label, LabelSettings, SelectionPolicy};
use desklab::harness::werr;
use desklab::net::{self, Dataset, Target, TrainSchedule};
use desklab::risk::Counts;
use desklab::rng;
use proptest::prelude::*;

use common::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn hmm_rows_stay_stochastic_through_json(states in 2usize..12, dim in 1usize..5, seed in any::<u64>()) {
        let spec = SyntheticHmm { num_states: states, feature_dim: dim, successors: 2.min(states - 1), ..Default::default() }.build(seed).unwrap();
        let back: HmmSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        for row in &back.transition {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        prop_assert_eq!(back, spec);
    }

    #[test]
    fn identity_window_is_identity(dim in 1usize..5, len in 1usize..30, seed in any::<u64>()) {
        let mut r = rng::stream(seed, "frames", 0);
        let frames: Vec<f64> = (0..dim * len).map(|_| rand::Rng::random_range(&mut r, -3.0..3.0)).collect();
        let labels: Vec<u32> = (0..len as u32).map(|i| i % 3).collect();
        let u = Utterance::new("u", dim, frames.clone(), labels.clone()).unwrap();
        let (rows, ls) = stack_frames(&u, &WindowSpec::identity());
        prop_assert_eq!(rows, frames);
        prop_assert_eq!(ls, labels);
    }

    #[test]
    fn softmax_is_on_the_simplex(logits in proptest::collection::vec(-1e3f64..1e3, 1..12)) {
        let p = net::softmax(&logits);
        prop_assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn temperature_keeps_the_argmax(logits in proptest::collection::vec(-50f64..50.0, 2..10), t in 0.05f64..20.0) {
        let p = net::softmax_temperature(&logits, t).unwrap();
        prop_assert_eq!(net::argmax(&p), net::argmax(&logits));
    }

    #[test]
    fn backward_matches_central_differences(seed in any::<u64>(), soft in any::<bool>()) {
        let mut r = rng::stream(seed, "gradcheck", 0);
        let p = random_net(&mut r, seed);
        let data = random_batch(&mut r, &p, 5, soft);
        prop_assume!(relu_margin(&p, &data) > 1e-3);
        prop_assert!(gradient_error(&p, &data, 1e-5) < 1e-4);
    }

    #[test]
    fn compression_keeps_argmax_and_renormalises(seed in any::<u64>(), n in 2usize..20, k in 1usize..6, bits in prop_oneof![Just(4u8), Just(8), Just(16)]) {
        let mut r = rng::stream(seed, "simplex", 0);
        let p = random_simplex(&mut r, n);
        let c = codec_check(&p, k.min(n), bits);
        prop_assert!(c.argmax_kept);
        prop_assert!(c.sum_error < 1e-12);
        prop_assert!(c.linf <= c.bound + 1e-12);
    }

    #[test]
    fn soft_loss_is_stationary_at_the_teacher_posterior(seed in any::<u64>()) {
        let mut r = rng::stream(seed, "kd-eq", 0);
        let p = random_net(&mut r, seed);
        let probe = random_batch(&mut r, &p, 6, false);
        let mut data = Dataset { dim: probe.dim, inputs: Vec::new(), targets: Vec::new() };
        for i in 0..probe.len() {
            let post = p.forward(probe.row(i)).unwrap();
            data.push(probe.row(i), Target::Soft(post.into_iter().enumerate().collect()));
        }
        let g = net::backward(&p, &data).unwrap().values();
        prop_assert!(g.iter().all(|v| v.abs() < 1e-12), "max {}", g.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }

    #[test]
    fn werr_recomputes(b in 1e-6f64..1.0, m in 0f64..1.0) {
        let w = werr(b, m).unwrap();
        prop_assert!((b - b * w - m).abs() < 1e-12);
        prop_assert_eq!(werr(b, b).unwrap(), 0.0);
        prop_assert_eq!(w > 0.0, m < b);
    }

    #[test]
    fn division_free_and_ratio_forms_agree(n in 1u32..=64, y in any::<u64>(), t in any::<u64>(), s in any::<u64>()) {
        let c = Counts::from_masks(n, y, t, s);
        let r = c.report();
        if let (Some(ratio), Some(threshold)) = (r.ratio, r.threshold) {
            prop_assert_eq!(ratio >= threshold, c.division_free_holds());
        }
        prop_assert_eq!(c.division_free_holds(), r.student_beats_teacher);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn raising_min_confidence_shrinks_the_kept_set(lo in 0f64..0.9, delta in 0f64..0.5, seed in 0u64..1000) {
        let spec = SyntheticHmm { num_states: 4, feature_dim: 2, ..Default::default() }.build(seed).unwrap();
        let corpus = generate_corpus(&spec, 12, (20, 40), seed).unwrap();
        let h = corpus.hours_equivalent();
        let split = split_corpus(&corpus, 0.3 * h, 0.4 * h, 0.3 * h, seed).unwrap();
        let arch = small_arch(2, vec![6], 4, net::Activation::Tanh);
        let teacher = net::init_params(&arch, seed).unwrap();
        let data = split.unlabeled(Split::Unsupervised).unwrap();
        let kept = |min_confidence: f64| -> HashSet<(u64, u32)> {
            let settings = LabelSettings { selection: SelectionPolicy { min_confidence, max_fraction: 1.0 }, k: 2, ..Default::default() };
            teacher_label(&teacher, &data, &settings).unwrap().batch.frame_refs.iter().map(|f| (f.utterance, f.frame)).collect()
        };
        let (a, b) = (kept(lo), kept((lo + delta).min(1.0)));
        prop_assert!(b.is_subset(&a));
    }

    #[test]
    fn training_is_bit_deterministic(seed in any::<u64>()) {
        let mut r = rng::stream(seed, "train", 0);
        let p = random_net(&mut r, seed);
        let data = random_batch(&mut r, &p, 20, false);
        let s = TrainSchedule { epochs: 2, batch_size: 4, seed, ..Default::default() };
        let (a, la) = net::train(p.clone(), &data, &s).unwrap();
        let (b, lb) = net::train(p, &data, &s).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(la.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), lb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert!(la.iter().all(|v| v.is_finite()));
    }
}

