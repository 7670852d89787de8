use std::collections::BTreeSet;

use nalgebra::DMatrix;
use proptest::prelude::*;

use corml::dataio::{decode_model, encode_model, split, SplitConfig, SplitStrategy, TrainedModel};
use corml::eval::{list_novelty, mrr_at_k, ndcg_at_k, rank_topk};
use corml::geometry::{distance_residual, predicted_half_distance_residual, MetricWeight, SignalFeatureSpace};
use corml::signal::fit_ease;
use corml::solver::{admm_z_step, compute_phi, lyapunov_symmetrize, AdmmState};
use corml::sparse::{InteractionMatrix, SparseSquareMatrix};

fn pairs_strategy() -> impl Strategy<Value = Vec<(String, String)>> {
    prop::collection::vec((0..25usize, 0..15usize), 1..200)
        .prop_map(|v| v.into_iter().map(|(u, i)| (format!("u{u}"), format!("i{i}"))).collect())
}

fn interactions(users: usize, items: usize) -> impl Strategy<Value = InteractionMatrix> {
    prop::collection::vec(prop::bool::weighted(0.35), users * items).prop_map(move |bits| {
        let mut pairs: Vec<(usize, usize)> = bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(k, _)| (k / items, k % items))
            .collect();
        // keep every item and user present
        pairs.extend((0..items).map(|i| (i % users, i)));
        pairs.extend((0..users).map(|u| (u, u % items)));
        InteractionMatrix::from_pairs(users, items, pairs).unwrap()
    })
}

fn hollow(n: usize) -> impl Strategy<Value = SparseSquareMatrix> {
    prop::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| {
        let mut t = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let x = v[i * n + j];
                if x.abs() > 0.3 {
                    t.push((i, j, x));
                    t.push((j, i, x));
                }
            }
        }
        SparseSquareMatrix::from_triplets(n, t).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_the_deduplicated_log(
        pairs in pairs_strategy(),
        seed in 0u64..1000,
        min_user_degree in 1usize..6,
        global in any::<bool>(),
    ) {
        let config = SplitConfig {
            seed,
            min_user_degree,
            strategy: if global { SplitStrategy::Global } else { SplitStrategy::PerUser },
            ..Default::default()
        };
        let data = split(&pairs, &config);
        prop_assume!(data.is_ok());
        let data = data.unwrap();
        let mut seen = BTreeSet::new();
        for part in [&data.train, &data.valid, &data.test] {
            for (u, i) in part.pairs() {
                prop_assert!(seen.insert((u, i)), "pair in two parts");
            }
        }
        let expected: BTreeSet<(usize, usize)> = pairs
            .iter()
            .filter_map(|(u, i)| Some((data.index.users.index(u)?, data.index.items.index(i)?)))
            .collect();
        prop_assert_eq!(&seen, &expected);
        if !global {
            for u in 0..data.n_users() {
                prop_assert!(!data.train.row(u).is_empty());
            }
        }
        prop_assert_eq!(data.content_hash(), split(&pairs, &config).unwrap().content_hash());
    }

    #[test]
    fn ease_model_round_trips(r in interactions(6, 5), l2 in 0.1f64..50.0) {
        let model = TrainedModel::Ease(fit_ease(&r, l2).unwrap());
        let bytes = encode_model(&model, r.item_degrees(), r.user_degrees());
        let (back, items, users) = decode_model(&bytes).unwrap();
        prop_assert_eq!(back, model);
        prop_assert_eq!(items.as_slice(), r.item_degrees());
        prop_assert_eq!(users.as_slice(), r.user_degrees());
    }

    #[test]
    fn topk_is_sorted_and_respects_exclusions(
        scores in prop::collection::vec(-5.0f64..5.0, 1..60),
        k in 1usize..20,
        mask in prop::collection::vec(any::<bool>(), 60),
    ) {
        let exclude: Vec<usize> = (0..scores.len()).filter(|&i| mask[i]).collect();
        let list = rank_topk(0, &scores, &exclude, k).unwrap();
        let candidates = scores.len() - exclude.len();
        prop_assert_eq!(list.items.len(), k.min(candidates));
        prop_assert_eq!(list.truncated, candidates < k);
        prop_assert!(list.items.iter().all(|i| !exclude.contains(i)));
        prop_assert!(list.scores.windows(2).all(|w| w[0] >= w[1]));
        let cutoff = list.scores.last().copied().unwrap_or(f64::INFINITY);
        for i in (0..scores.len()).filter(|i| !exclude.contains(i) && !list.items.contains(i)) {
            prop_assert!(scores[i] <= cutoff);
        }
    }

    #[test]
    fn metrics_stay_in_unit_interval(
        items in prop::collection::vec(0usize..30, 1..15),
        relevant in prop::collection::btree_set(0usize..30, 1..10),
        degrees in prop::collection::vec(0usize..100, 30),
        k in 1usize..20,
    ) {
        let mut uniq = Vec::new();
        for i in items {
            if !uniq.contains(&i) {
                uniq.push(i);
            }
        }
        let list = corml::eval::RankedList { user: 0, scores: vec![0.0; uniq.len()], items: uniq, truncated: false };
        let relevant: Vec<usize> = relevant.into_iter().collect();
        for v in [ndcg_at_k(&list, &relevant, k), mrr_at_k(&list, &relevant, k), list_novelty(&list, &degrees, 100, k).0] {
            prop_assert!((0.0..=1.0).contains(&v), "{v}");
        }
    }

    #[test]
    fn distance_residuals_follow_the_interaction_cases(
        r in interactions(4, 6),
        h in hollow(6),
        t in -0.3f64..0.3,
    ) {
        let space = SignalFeatureSpace::new(&r, t);
        let w = MetricWeight::for_space(&space, h.clone()).unwrap();
        for u in 0..4 {
            for i in 0..6 {
                for j in 0..6 {
                    let got = 0.5 * distance_residual(&space, &w, u, i, j).unwrap();
                    let want = predicted_half_distance_residual(&space, &w, u, i, j).unwrap();
                    prop_assert!((got - want).abs() <= 1e-9 * (1.0 + want.abs()), "{got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn z_step_keeps_hollow_input_feasible(
        values in prop::collection::vec(-2.0f64..2.0, 49),
        weights in prop::collection::vec(0.1f64..4.0, 7),
    ) {
        let mut state = AdmmState::zeros(7);
        state.h = DMatrix::from_row_slice(7, 7, &values);
        state.h.fill_diagonal(0.0);
        let z = admm_z_step(&state, &weights);
        for a in 0..7 {
            prop_assert_eq!(z[(a, a)], 0.0);
            for b in 0..7 {
                prop_assert!(z[(a, b)] >= 0.0);
                prop_assert_eq!(z[(a, b)], z[(b, a)]);
            }
        }
        let sym = lyapunov_symmetrize(&state.h, &weights);
        prop_assert!((sym.clone() - sym.transpose()).abs().max() == 0.0);
    }

    #[test]
    fn phi_is_epsilon_at_the_busiest_user(degrees in prop::collection::vec(1usize..50, 1..30), eps in 0.01f64..1.0, tu in 0.0f64..1.0) {
        let phi = compute_phi(&degrees, eps, tu).unwrap();
        let max = *degrees.iter().max().unwrap();
        for (d, p) in degrees.iter().zip(phi.as_slice()) {
            prop_assert!(*p >= eps * (1.0 - 1e-12));
            if *d == max {
                prop_assert!((p - eps).abs() <= 1e-12);
            }
        }
    }
}
