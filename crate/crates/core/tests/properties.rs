//! Property tests for the algebraic invariants of the losses and kernels.

use cfseq_core::decoder::club_value;
use cfseq_core::diffcore::{Array, Graph};
use cfseq_core::encoder::infonce_from_scores;
use proptest::prelude::*;

fn finite_scores(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-8.0f64..8.0, n * n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn infonce_row_shift_invariance(data in finite_scores(4), shifts in proptest::collection::vec(-5.0f64..5.0, 4)) {
        let base = Array::new(vec![4, 4], data.clone());
        let mut shifted = base.clone();
        for i in 0..4 {
            for j in 0..4 {
                let v = shifted.at2(i, j) + shifts[i];
                shifted.set2(i, j, v);
            }
        }
        let mut g = Graph::new();
        let a = g.constant(base);
        let b = g.constant(shifted);
        let la = infonce_from_scores(&mut g, a).unwrap();
        let lb = infonce_from_scores(&mut g, b).unwrap();
        prop_assert!((g.value(la).item() - g.value(lb).item()).abs() < 1e-9);
    }

    #[test]
    fn infonce_permutation_symmetry(data in finite_scores(5), seed in 0u64..1000) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..5).collect();
        perm.shuffle(&mut rng);
        let base = Array::new(vec![5, 5], data);
        let mut permuted = Array::zeros(&[5, 5]);
        for i in 0..5 {
            for j in 0..5 {
                permuted.set2(i, j, base.at2(perm[i], perm[j]));
            }
        }
        let mut g = Graph::new();
        let a = g.constant(base);
        let b = g.constant(permuted);
        let la = infonce_from_scores(&mut g, a).unwrap();
        let lb = infonce_from_scores(&mut g, b).unwrap();
        prop_assert!((g.value(la).item() - g.value(lb).item()).abs() < 1e-9);
    }

    #[test]
    fn infonce_bound_capped_by_log_batch(data in finite_scores(6)) {
        let mut g = Graph::new();
        let s = g.constant(Array::new(vec![6, 6], data));
        let loss = infonce_from_scores(&mut g, s).unwrap();
        // loss >= 0, so the reported bound log n - loss never exceeds log n.
        prop_assert!(g.value(loss).item() >= -1e-12);
    }

    #[test]
    fn weight_norm_rows_have_gain_norm(
        v in proptest::collection::vec(-3.0f64..3.0, 12),
        gains in proptest::collection::vec(-2.0f64..2.0, 3),
    ) {
        // Skip degenerate all-zero rows.
        let rows_ok = (0..3).all(|r| v[r * 4..(r + 1) * 4].iter().any(|x| x.abs() > 1e-6));
        prop_assume!(rows_ok);
        let mut g = Graph::new();
        let vv = g.constant(Array::new(vec![3, 4], v));
        let gg = g.constant(Array::from_vec(gains.clone()));
        let w = g.weight_norm(vv, gg).unwrap();
        for r in 0..3 {
            let norm: f64 = g.value(w).row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - gains[r].abs()).abs() < 1e-9);
        }
    }

    #[test]
    fn club_antisymmetry(
        a in proptest::collection::vec(-4.0f64..-0.01, 6),
        b in proptest::collection::vec(-4.0f64..-0.01, 6),
    ) {
        prop_assert!((club_value(&a, &b) + club_value(&b, &a)).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_matches_naive_on_safe_range(data in proptest::collection::vec(-30.0f64..30.0, 8)) {
        let mut g = Graph::new();
        let x = g.constant(Array::from_vec(data.clone()));
        let lse = g.log_sum_exp(x).unwrap();
        let naive = data.iter().map(|&v| v.exp()).sum::<f64>().ln();
        prop_assert!((g.value(lse).item() - naive).abs() < 1e-9);
    }

    #[test]
    fn optimizer_steps_are_deterministic(
        params in proptest::collection::vec(-2.0f64..2.0, 5),
        grads in proptest::collection::vec(-1.0f64..1.0, 5),
    ) {
        use cfseq_core::diffcore::{adamw_step, AdamWConfig, AdamWState, ParamStore};
        let run = || {
            let mut store = ParamStore::new();
            store.insert("w", Array::from_vec(params.clone()));
            let gm = [("w".to_string(), Array::from_vec(grads.clone()))].into();
            let mut state = AdamWState::new();
            adamw_step(&mut store, &gm, &mut state, &AdamWConfig::with_lr(0.01)).unwrap();
            adamw_step(&mut store, &gm, &mut state, &AdamWConfig::with_lr(0.01)).unwrap();
            store.get("w").data().to_vec()
        };
        prop_assert_eq!(run(), run());
    }
}
