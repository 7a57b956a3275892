mod common;

use common::oracles;
use proptest::prelude::*;
use varidiff::config::KeyValues;
use varidiff::data::{filter_by_similarity, read_pairs_from, write_pairs_to, PairRecord};
use varidiff::diffusion::{forward_diffuse, predictions_from_v, ScheduleConfig};
use varidiff::metrics::{frechet_distance, knn_precision_recall, FeatureSet};
use varidiff::train::{adam_update, ema_update_slice, AdamConfig};
use varidiff::{Tape, Tensor};

fn rows(max_m: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, dim), 5..max_m)
}

fn pair(sim: Option<f32>, i: u64) -> PairRecord {
    PairRecord {
        cond_image_id: i,
        target_image_id: i + 1,
        similarity: sim,
        episode_id: i / 3,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn filtering_matches_linear_scan(
        sims in prop::collection::vec(-1.0f32..=1.0, 0..200),
        a in -1.0f64..=1.0,
        b in -1.0f64..=1.0,
    ) {
        let (low, high) = (a.min(b), a.max(b));
        let pairs: Vec<PairRecord> = sims.iter().enumerate().map(|(i, &s)| pair(Some(s), i as u64)).collect();
        let kept = filter_by_similarity(&pairs, low, high);
        prop_assert_eq!(kept.len(), oracles::count_in_band(&sims, low, high));
        let in_band = kept.iter().all(|p| {
            let s = p.similarity.unwrap() as f64;
            low <= s && s <= high
        });
        prop_assert!(in_band);
    }

    #[test]
    fn knn_precision_recall_matches_brute_force(
        real in rows(30, 3),
        gen in rows(30, 3),
        k in 1usize..4,
    ) {
        let a = FeatureSet::from_rows(&real, "t").unwrap();
        let b = FeatureSet::from_rows(&gen, "t").unwrap();
        let got = knn_precision_recall(&a, &b, k).unwrap();
        prop_assert_eq!(got, oracles::knn_precision_recall(&real, &gen, k));
    }

    #[test]
    fn fid_is_symmetric_nonnegative_and_translation_invariant(
        a in rows(25, 3),
        b in rows(25, 3),
        shift in prop::collection::vec(-5.0f64..5.0, 3),
    ) {
        let fa = FeatureSet::from_rows(&a, "t").unwrap();
        let fb = FeatureSet::from_rows(&b, "t").unwrap();
        let ab = frechet_distance(&fa, &fb).unwrap();
        let ba = frechet_distance(&fb, &fa).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8 * (1.0 + ab));
        prop_assert!(frechet_distance(&fa, &fa).unwrap() < 1e-8);
        let mv = |r: &Vec<Vec<f64>>| r.iter().map(|x| x.iter().zip(&shift).map(|(v, s)| v + s).collect()).collect::<Vec<Vec<f64>>>();
        let moved = frechet_distance(&FeatureSet::from_rows(&mv(&a), "t").unwrap(), &FeatureSet::from_rows(&mv(&b), "t").unwrap()).unwrap();
        prop_assert!((moved - ab).abs() <= 1e-7 * (1.0 + ab));
    }

    #[test]
    fn one_dimensional_fid_matches_closed_form(
        a in prop::collection::vec(-4.0f64..4.0, 3..40),
        b in prop::collection::vec(-4.0f64..4.0, 3..40),
    ) {
        let col = |x: &[f64]| x.iter().map(|&v| vec![v]).collect::<Vec<_>>();
        let got = frechet_distance(&FeatureSet::from_rows(&col(&a), "t").unwrap(), &FeatureSet::from_rows(&col(&b), "t").unwrap()).unwrap();
        prop_assert!((got - oracles::fid_1d(&a, &b).max(0.0)).abs() < 1e-8);
    }

    #[test]
    fn schedule_is_variance_preserving_and_monotone(t1 in 1e-4f64..0.9999, t2 in 1e-4f64..0.9999, res in 4u32..64) {
        let s = ScheduleConfig::for_resolution(res);
        let (p1, p2) = (s.at(t1).unwrap(), s.at(t2).unwrap());
        prop_assert!((p1.alpha * p1.alpha + p1.sigma * p1.sigma - 1.0).abs() < 1e-12);
        if t1 < t2 {
            prop_assert!(p1.log_snr > p2.log_snr);
        }
    }

    #[test]
    fn epsilon_space_equivalence(
        x in prop::collection::vec(-1.0f64..1.0, 6),
        eps in prop::collection::vec(-3.0f64..3.0, 6),
        v_hat in prop::collection::vec(-3.0f64..3.0, 6),
        t in 0.01f64..0.99,
    ) {
        let p = ScheduleConfig::default().at(t).unwrap();
        let (x, eps, v_hat) = (Tensor::new(&[6], x).unwrap(), Tensor::new(&[6], eps).unwrap(), Tensor::new(&[6], v_hat).unwrap());
        let z = forward_diffuse(&x, &p, &eps).unwrap();
        let (x_hat, eps_hat) = predictions_from_v(&z, &v_hat, &p).unwrap();
        let sq = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(u, w)| (u - w).powi(2)).sum::<f64>();
        let lhs = p.snr() * sq(&x, &x_hat);
        let rhs = sq(&eps, &eps_hat);
        prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.max(1e-12));
    }

    #[test]
    fn adam_follows_reference(
        grads in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 1..30),
        init in prop::collection::vec(-1.0f64..1.0, 4),
    ) {
        let cfg = AdamConfig { lr: 1e-2, ..AdamConfig::default() };
        let mut reference = oracles::RefAdam::new(4, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
        let (mut a, mut b) = (init.clone(), init);
        let (mut m, mut v) = (vec![0.0; 4], vec![0.0; 4]);
        for (i, g) in grads.iter().enumerate() {
            adam_update(&mut a, g, &mut m, &mut v, i as u64 + 1, &cfg).unwrap();
            reference.step(&mut b, g);
        }
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_of_a_constant_is_geometric(e0 in -2.0f64..2.0, p in -2.0f64..2.0, decay in 0.5f64..0.999, n in 1u32..200) {
        let mut e = [e0];
        for _ in 0..n {
            ema_update_slice(&mut e, &[p], decay).unwrap();
        }
        let closed = decay.powi(n as i32) * e0 + (1.0 - decay.powi(n as i32)) * p;
        prop_assert!((e[0] - closed).abs() < 1e-10);
    }

    #[test]
    fn pair_files_round_trip(sims in prop::collection::vec(prop::option::of(-1.0f32..=1.0), 0..50)) {
        let pairs: Vec<PairRecord> = sims.iter().enumerate().map(|(i, &s)| pair(s, i as u64 * 7)).collect();
        let mut buf = Vec::new();
        write_pairs_to(&pairs, &mut buf).unwrap();
        prop_assert_eq!(read_pairs_from(&mut buf.as_slice()).unwrap(), pairs);
    }

    #[test]
    fn config_text_round_trips(entries in prop::collection::btree_map("[a-z]{1,6}\\.[a-z_]{1,8}", "[A-Za-z0-9.:/_-]{0,12}", 0..12)) {
        let kv: KeyValues = entries.into_iter().collect();
        prop_assert_eq!(KeyValues::parse(&kv.to_text()).unwrap(), kv);
    }

    #[test]
    fn broadcast_add_matches_manual_loop(
        a in prop::collection::vec(-5.0f64..5.0, 24),
        b in prop::collection::vec(-5.0f64..5.0, 4),
    ) {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[2, 3, 4], a.clone()).unwrap());
        let y = tape.constant(Tensor::new(&[4], b.clone()).unwrap());
        let out = x.add(y).unwrap().value();
        for i in 0..24 {
            prop_assert_eq!(out.data()[i], a[i] + b[i % 4]);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(x in prop::collection::vec(-30.0f64..30.0, 12), axis in 0usize..3) {
        let tape = Tape::<f64>::new();
        let y = tape.constant(Tensor::new(&[2, 3, 2], x).unwrap()).softmax(axis).unwrap();
        let total = y.sum(axis, false).unwrap().value();
        prop_assert!(total.data().iter().all(|s| (s - 1.0).abs() < 1e-12));
        prop_assert!(y.value().data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn permute_then_inverse_is_identity(x in prop::collection::vec(-1.0f64..1.0, 24), perm in Just([0usize, 1, 2]).prop_shuffle()) {
        let tape = Tape::<f64>::new();
        let t = Tensor::new(&[2, 3, 4], x).unwrap();
        let mut inv = [0usize; 3];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let back = tape.constant(t.clone()).permute(&perm).unwrap().permute(&inv).unwrap().value();
        prop_assert_eq!(back, t);
    }
}
