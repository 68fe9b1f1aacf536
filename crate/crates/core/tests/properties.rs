use dove::analysis::pearson;
use dove::corpus::{vocab, BBox, Image};
use dove::dygen::{detect_eos, truncate_to_budget, zero_mask, TokenSequence};
use dove::model::DoveModel;
use dove::nn::Tensor;
use dove::objective::{eos_weights, qdove_eos_weights, ThresholdState};
use dove::par::Exec;
use dove::trainloop::{Checkpoint, TrainConfig, Trainer};
use proptest::prelude::*;

const K: usize = 6;
const D: usize = 5;

fn sequence() -> impl Strategy<Value = TokenSequence> {
    (
        proptest::collection::vec(-3.0f32..3.0, K * D),
        proptest::collection::vec(0.0f32..1.0, K),
        proptest::option::of(1..=K),
    )
        .prop_map(|(slots, p_eos, eos_pos)| TokenSequence {
            eos_pos,
            p_eos,
            slots: Tensor::new(vec![K, D], slots).unwrap(),
        })
}

proptest! {
    #[test]
    fn zero_mask_zeroes_exactly_the_tail(seq in sequence(), m in 1..=K) {
        let z = zero_mask(&seq, Some(m));
        prop_assert!(z.invariant_holds());
        prop_assert_eq!(z.len(), m);
        prop_assert_eq!(&z.slots.data()[..m * D], &seq.slots.data()[..m * D]);
        prop_assert_eq!(&zero_mask(&z, Some(m)), &z);
        prop_assert_eq!(&zero_mask(&seq, None), &seq);
    }

    #[test]
    fn budget_truncation_keeps_a_prefix(seq in sequence(), b in 1..=K, c in 1..=K) {
        let t = truncate_to_budget(&seq, b).unwrap();
        prop_assert_eq!(t.len(), b);
        prop_assert!(t.invariant_holds());
        let (lo, hi) = (b.min(c), b.max(c));
        let nested = truncate_to_budget(&truncate_to_budget(&seq, hi).unwrap(), lo).unwrap();
        prop_assert_eq!(nested, truncate_to_budget(&seq, lo).unwrap());
        prop_assert!(truncate_to_budget(&seq, 0).is_err());
        prop_assert!(truncate_to_budget(&seq, K + 1).is_err());
    }

    #[test]
    fn eos_detection_is_the_first_crossing(p in proptest::collection::vec(0.0f32..1.0, 1..12), gate in 0.0f64..0.99) {
        match detect_eos(&p, gate) {
            Some(m) => {
                prop_assert!(p[m - 1] as f64 > gate);
                prop_assert!(p[..m - 1].iter().all(|&v| v as f64 <= gate));
            }
            None => prop_assert!(p.iter().all(|&v| v as f64 <= gate)),
        }
    }

    #[test]
    fn eos_coefficients_sum_to_their_branch(k in 1usize..20, m_frac in 0.0f64..1.0, rel in any::<bool>(), irr in any::<bool>()) {
        let m = 1 + ((k - 1) as f64 * m_frac) as usize;
        let below_sum = if m > 1 { -1.0 } else { 0.0 };
        let above: f64 = eos_weights(k, m, true).iter().sum();
        let below: f64 = eos_weights(k, m, false).iter().sum();
        prop_assert!((above - 1.0).abs() < 1e-12);
        prop_assert!((below - below_sum).abs() < 1e-12);
        let c = qdove_eos_weights(k, m, rel, irr);
        let want = if rel { 1.0 } else { below_sum } + if irr { below_sum } else { 0.0 };
        prop_assert!((c.iter().sum::<f64>() - want).abs() < 1e-12);
        prop_assert!(c[m..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn window_threshold_stays_within_recent_extremes(values in proptest::collection::vec(0.0f64..100.0, 1..200), w in 1usize..30) {
        let mut s = ThresholdState::window(w);
        for (i, &v) in values.iter().enumerate() {
            let t = s.update(v);
            let tail = &values[(i + 1).saturating_sub(w)..=i];
            let lo = tail.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(t >= lo - 1e-9 && t <= hi + 1e-9);
        }
    }

    #[test]
    fn pearson_is_invariant_to_positive_affine_maps(
        pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..40),
        a in 0.1f64..5.0,
        b in -5.0f64..5.0,
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        if let Ok(r) = pearson(&x, &y) {
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&r));
            let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let r2 = pearson(&xs, &y).unwrap();
            prop_assert!((r - r2).abs() < 1e-6);
            prop_assert!((pearson(&y, &x).unwrap() - r).abs() < 1e-9);
        }
    }

    #[test]
    fn box_geometry_is_consistent(x0 in 0usize..10, y0 in 0usize..10, w in 1usize..6, h in 1usize..6, px in 0usize..16, py in 0usize..16) {
        let b = BBox::new(x0, y0, x0 + w - 1, y0 + h - 1);
        prop_assert_eq!(b.area(), w * h);
        let inside = (0..16).flat_map(|y| (0..16).map(move |x| (x, y))).filter(|&(x, y)| b.contains(x, y)).count();
        prop_assert_eq!(inside, w * h);
        let p = BBox::new(px, py, px, py);
        prop_assert_eq!(b.intersects(&p), b.contains(px, py));
        prop_assert_eq!(b.intersects(&p), p.intersects(&b));
    }

    #[test]
    fn image_layout_round_trips(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let data: Vec<f32> = (0..3 * h * w).map(|i| ((seed.wrapping_add(i as u64) % 97) as f32) / 97.0).collect();
        let img = Image::new(h, w, data).unwrap();
        prop_assert_eq!(Image::from_chw(h, w, &img.to_chw()).unwrap(), img);
    }

    #[test]
    fn vocabulary_words_round_trip(i in 0usize..vocab::SIZE) {
        let w = vocab::word(i).unwrap();
        prop_assert_eq!(vocab::id(w), Some(i));
        prop_assert_eq!(vocab::parse(w), Some(vec![i]));
    }

    #[test]
    fn parallel_map_preserves_order(items in proptest::collection::vec(any::<i32>(), 0..100)) {
        let f = |i: usize, v: &i32| (i, v.wrapping_mul(3));
        prop_assert_eq!(Exec::Parallel.map(&items, f), Exec::Sequential.map(&items, f));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn zero_masked_slots_never_reach_the_decoder(seed in 0u64..1000, m in 1usize..4, junk in -5.0f32..5.0) {
        let cfg = TrainConfig::smoke();
        let (model, store) = DoveModel::new(seed, cfg.model).unwrap();
        let (k, d) = (model.k(), model.cfg.codec.latent_dim);
        let base: Vec<f32> = (0..k * d).map(|i| ((i as u64 * 31 + seed) % 17) as f32 / 17.0 - 0.5).collect();
        let seq = TokenSequence { eos_pos: None, p_eos: vec![0.0; k], slots: Tensor::new(vec![k, d], base.clone()).unwrap() };
        let mut noisy = seq.clone();
        noisy.slots.data_mut()[m * d..].iter_mut().for_each(|v| *v += junk);
        let a = model.decode_tokens(&store, &zero_mask(&seq, Some(m))).unwrap();
        let b = model.decode_tokens(&store, &zero_mask(&noisy, Some(m))).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn checkpoints_round_trip_for_any_seed(seed in any::<u64>()) {
        let cfg = TrainConfig { seed, ..TrainConfig::smoke() };
        let ck = Trainer::new(cfg).unwrap().checkpoint();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back, ck);
    }
}
