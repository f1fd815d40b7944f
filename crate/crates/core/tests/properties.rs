use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lightprune::augment::{augment_graph, AugmentCap};
use lightprune::checkpoint::{self, Metadata};
use lightprune::config::RunConfig;
use lightprune::data::{from_raw_pairs, split_dataset, Pair, Split, SplitMode, SplitRatios};
use lightprune::embedding::EmbeddingTable;
use lightprune::eval::{full_rank_eval, mad_metric, rank_embeddings};
use lightprune::graph::BipartiteGraph;
use lightprune::losses::{build_positive_sets, sigmoid, Sampler};
use lightprune::matrix::Matrix;
use lightprune::model::{Model, Role};
use lightprune::propagation::{forward_plain, forward_with_weights};
use lightprune::pruning::{self, drop_count, geometric_rate, PruneSchedule};
use lightprune::train::{KdTarget, Optimizer, StepResult, TrainConfig};

fn graph_strategy(max_users: usize, max_items: usize) -> impl Strategy<Value = BipartiteGraph> {
    (1..=max_users, 1..=max_items)
        .prop_flat_map(|(nu, ni)| (Just(nu), Just(ni), prop::collection::vec((0..nu as u32, 0..ni as u32), 1..(nu * ni + 1))))
        .prop_map(|(nu, ni, edges)| BipartiteGraph::from_edges(nu, ni, &edges).unwrap())
}

fn table_for(g: &BipartiteGraph, d: usize, seed: u64) -> EmbeddingTable {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    EmbeddingTable::new(
        Matrix::uniform(g.num_users(), d, 1.0, &mut r),
        Matrix::uniform(g.num_items(), d, 1.0, &mut r),
    )
    .unwrap()
}

fn weighted_model(g: BipartiteGraph, d: usize, seed: u64) -> Model {
    let m = g.num_edges();
    let emb = table_for(&g, d, seed);
    Model::weighted(Role::Student, g, emb, 2, vec![true; m]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_a_disjoint_partition(
        raw in prop::collection::vec((0u64..30, 0u64..30), 1..200),
        seed in any::<u64>(),
        global in any::<bool>(),
    ) {
        let ds = from_raw_pairs(raw, 1).unwrap();
        let mode = if global { SplitMode::Global } else { SplitMode::PerUser };
        let s = split_dataset(&ds, SplitRatios::DEFAULT, mode, seed).unwrap();
        let sets: Vec<HashSet<Pair>> = [Split::Train, Split::Val, Split::Test]
            .iter()
            .map(|&w| s.split(w).iter().copied().collect())
            .collect();
        prop_assert!(sets[0].is_disjoint(&sets[1]) && sets[0].is_disjoint(&sets[2]) && sets[1].is_disjoint(&sets[2]));
        prop_assert_eq!(s.num_interactions(), ds.num_interactions());
        for &(u, v) in s.train.iter().chain(&s.val).chain(&s.test) {
            prop_assert!((u as usize) < s.num_users && (v as usize) < s.num_items);
        }
        if !global {
            let degrees = s.train_user_degrees();
            prop_assert!(degrees.iter().all(|&d| d >= 1));
        }
    }

    #[test]
    fn graph_transpose_and_norms(g in graph_strategy(12, 12), keep_seed in any::<u64>()) {
        let check = |g: &BipartiteGraph| -> Result<(), TestCaseError> {
            for (e, (u, v)) in g.edges().enumerate() {
                prop_assert!(g.item_edges(v as usize).contains(&(e as u32)));
                let want = 1.0 / ((g.user_degree(u as usize) * g.item_degree(v as usize)) as f64).sqrt();
                prop_assert!((g.norm()[e] - want).abs() < 1e-15);
            }
            let t = g.transpose();
            for (u, v) in g.edges() {
                prop_assert!(t.has_edge(v as usize, u as usize));
            }
            prop_assert_eq!(t.num_edges(), g.num_edges());
            Ok(())
        };
        check(&g)?;
        let mut r = ChaCha8Rng::seed_from_u64(keep_seed);
        let keep = pruning::random_edge_keep_mask(g.num_edges(), 40.0, &mut r);
        check(&g.retain_edges(&keep).unwrap())?;
    }

    #[test]
    fn augmented_contains_original(g in graph_strategy(10, 10), h in 1usize..4, per_node in 0usize..4) {
        let full = augment_graph(&g, h, AugmentCap::Unbounded, u64::MAX).unwrap();
        let capped = augment_graph(&g, h, AugmentCap::PerNode(per_node), u64::MAX).unwrap();
        let full_set: HashSet<Pair> = full.graph.edges().collect();
        for aug in [&full, &capped] {
            for (u, v) in g.edges() {
                let e = aug.graph.find_edge(u as usize, v as usize);
                prop_assert!(e.is_some_and(|e| aug.original[e]));
            }
            prop_assert_eq!(aug.original.iter().filter(|o| **o).count(), g.num_edges());
        }
        prop_assert!(capped.graph.edges().all(|p| full_set.contains(&p)));
    }

    #[test]
    fn final_embedding_is_sum_of_layers(g in graph_strategy(8, 8), d in 1usize..5, layers in 0usize..4, seed in any::<u64>()) {
        let emb = table_for(&g, d, seed);
        let out = forward_plain(&g, &emb, layers).unwrap();
        let mut sum = Matrix::zeros(g.num_users(), d);
        for l in &out.user_layers {
            sum.add_assign(l);
        }
        prop_assert!(sum.max_abs_diff(&out.users) < 1e-12);
    }

    #[test]
    fn propagation_is_linear(g in graph_strategy(8, 8), alpha in -3.0f64..3.0, seed in any::<u64>()) {
        let emb = table_for(&g, 3, seed);
        let mut scaled = emb.clone();
        scaled.users.scale(alpha);
        scaled.items.scale(alpha);
        let w = vec![0.7; g.num_edges()];
        let a = forward_with_weights(&g, &w, &emb, 2).unwrap();
        let b = forward_with_weights(&g, &w, &scaled, 2).unwrap();
        let mut au = a.users.clone();
        au.scale(alpha);
        prop_assert!(au.max_abs_diff(&b.users) < 1e-10);
    }

    #[test]
    fn masked_entries_stay_zero_after_steps(g in graph_strategy(6, 6), seed in any::<u64>()) {
        let mut model = weighted_model(g, 4, seed);
        pruning::prune_embeddings(&mut model.emb, 50.0);
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let mut opt = Optimizer::new(&model, &TrainConfig::default());
        for _ in 0..3 {
            let step = StepResult {
                loss: 0.0,
                components: Default::default(),
                grad_users: Matrix::uniform(model.emb.num_users(), 4, 1.0, &mut r),
                grad_items: Matrix::uniform(model.emb.num_items(), 4, 1.0, &mut r),
                grad_weights: Some(vec![0.1; model.num_edges()]),
            };
            opt.step(&mut model, &step).unwrap();
        }
        for (x, m) in model.emb.users.as_slice().iter().zip(&model.emb.user_mask) {
            prop_assert!(*m || *x == 0.0);
        }
        for (x, m) in model.emb.items.as_slice().iter().zip(&model.emb.item_mask) {
            prop_assert!(*m || *x == 0.0);
        }
    }

    #[test]
    fn bpr_triples_respect_polarity(raw in prop::collection::vec((0u64..8, 0u64..12), 1..60), seed in any::<u64>()) {
        let ds = from_raw_pairs(raw, 1).unwrap();
        prop_assume!(ds.train_user_degrees().iter().all(|&d| d < ds.num_items));
        let sampler = Sampler::new(ds.num_users, ds.num_items, &ds.train);
        let train: HashSet<Pair> = ds.train.iter().copied().collect();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for batch in sampler.epoch(16, true, &mut r) {
            for &(u, p, n) in &batch.bpr {
                prop_assert!(train.contains(&(u, p)));
                prop_assert!(!train.contains(&(u, n)));
            }
        }
    }

    #[test]
    fn schedule_reaches_targets_within_one_round(
        edges in 50usize..5000,
        entries in 50usize..5000,
        rounds in 1usize..8,
        edge_keep in 0.05f64..0.9,
        emb_keep in 0.05f64..0.9,
    ) {
        let s = PruneSchedule { rounds, edge_keep, emb_keep, ..PruneSchedule::default() };
        let (re, rv) = (s.edge_rate(edges, edges), s.emb_rate());
        prop_assert!(re > 0.0 && re < 100.0 && rv > 0.0 && rv < 100.0);
        let (mut e, mut v) = (edges, entries);
        for _ in 0..rounds {
            e -= drop_count(e, re);
            v -= drop_count(v, rv);
        }
        // floor rounding only ever keeps more; one round's drop bounds the overshoot
        let last_e = (edges as f64 * edge_keep.powf((rounds - 1) as f64 / rounds as f64)) * re / 100.0;
        let last_v = (entries as f64 * emb_keep.powf((rounds - 1) as f64 / rounds as f64)) * rv / 100.0;
        prop_assert!(e as f64 >= edges as f64 * edge_keep - 1e-9 && e as f64 <= edges as f64 * edge_keep + last_e + rounds as f64);
        prop_assert!(v as f64 >= entries as f64 * emb_keep - 1e-9 && v as f64 <= entries as f64 * emb_keep + last_v + rounds as f64);
        prop_assert!((geometric_rate(1.0, rounds)).abs() == 0.0);
    }

    #[test]
    fn compound_weight_recomputable(g in graph_strategy(6, 6), b1 in 0.0f64..2.0, b2 in 0.0f64..2.0, seed in any::<u64>()) {
        let teacher = weighted_model(g.clone(), 3, seed);
        let target = KdTarget::from_model(&teacher).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let ws: Vec<f64> = Matrix::uniform(1, g.num_edges(), 2.0, &mut r).as_slice().to_vec();
        let wt: Vec<f64> = Matrix::uniform(1, g.num_edges(), 2.0, &mut r).as_slice().to_vec();
        let dec = pruning::compound_edge_weights(&g, &ws, &g, &wt, &target, b1, b2).unwrap();
        for (e, (u, v)) in g.edges().enumerate() {
            let want = ws[e] + b1 * wt[e] + b2 * sigmoid(target.score(u as usize, v as usize));
            prop_assert!((dec.compound()[e] - want).abs() < 1e-12);
            prop_assert!((dec.offset()[e] + ws[e] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_in_range(g in graph_strategy(8, 10), seed in any::<u64>()) {
        let pairs: Vec<Pair> = g.edge_list();
        let mut ds = lightprune::data::InteractionDataset::from_pairs(g.num_users(), g.num_items(), &pairs);
        ds.test = ds.train.split_off(ds.train.len() / 2);
        prop_assume!(!ds.test.is_empty() && !ds.train.is_empty());
        let tg = BipartiteGraph::from_edges(ds.num_users, ds.num_items, &ds.train).unwrap();
        let emb = table_for(&tg, 3, seed);
        let model = Model::teacher(tg, emb, 2).unwrap();
        let m = full_rank_eval(&model, &ds, Split::Test, &[1, 5, 20]).unwrap();
        for x in m.recall.iter().chain(&m.ndcg) {
            prop_assert!((0.0..=1.0 + 1e-12).contains(x));
        }
        let out = model.forward().unwrap();
        let (mad, _) = mad_metric(&out.users, &(0..ds.num_users).collect::<Vec<_>>()).unwrap();
        prop_assert!((0.0 - 1e-12..=2.0 + 1e-12).contains(&mad));
    }

    #[test]
    fn checkpoint_round_trip(g in graph_strategy(8, 8), d in 1usize..6, seed in any::<u64>(), prune in 0.0f64..90.0) {
        let mut model = weighted_model(g, d, seed);
        pruning::prune_embeddings(&mut model.emb, prune);
        model.weight_offset = Some(vec![0.25; model.num_edges()]);
        let meta = Metadata { config_hash: format!("{seed:x}") };
        let bytes = checkpoint::encode(&model, &meta);
        let (back, meta_back) = checkpoint::decode(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, model);
        prop_assert_eq!(meta_back, meta);
    }

    #[test]
    fn config_round_trip(
        seed in any::<u64>(),
        d in 1usize..128,
        lr in 1e-5f64..1.0,
        edge_keep in 0.01f64..1.0,
        emb_keep in 0.01f64..1.0,
        beta1 in 0.0f64..3.0,
        flags in any::<[bool; 6]>(),
    ) {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.model.d = d;
        cfg.optim.lr = lr;
        cfg.student.edge_keep = edge_keep;
        cfg.student.emb_keep = emb_keep;
        cfg.student.beta1 = beta1;
        cfg.ablation.random_edge_drop = flags[0];
        cfg.ablation.random_emb_drop = flags[1];
        cfg.ablation.binary_edge_weights = flags[2];
        cfg.ablation.disable_bilevel_kd = flags[3];
        cfg.ablation.disable_intermediate = flags[4];
        cfg.ablation.disable_importance_distill = flags[5];
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn positive_sets_are_symmetric(rows in 1usize..12, d in 1usize..8, delta in 0usize..4, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<bool> = (0..rows * d).map(|_| r.random_bool(0.5)).collect();
        let sets = build_positive_sets(&mask, d, delta);
        for (a, s) in sets.iter().enumerate() {
            for &b in s {
                prop_assert!(sets[b as usize].contains(&(a as u32)));
            }
        }
    }

    #[test]
    fn metrics_monotone_in_cutoff_and_score_transform(g in graph_strategy(6, 12), seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let users = Matrix::uniform(g.num_users(), 1, 1.0, &mut r);
        let items = Matrix::uniform(g.num_items(), 1, 1.0, &mut r);
        let held: Vec<Vec<u32>> = (0..g.num_users()).map(|u| g.user_items(u).to_vec()).collect();
        let cutoffs = [1, 2, 3, 5, 8, 12];
        let m = rank_embeddings(&users, &items, &held, &[], &cutoffs).unwrap();
        for w in 0..cutoffs.len() - 1 {
            prop_assert!(m.recall[w] <= m.recall[w + 1] + 1e-12);
        }
        // scores u*v with u > 0: a strictly increasing map of v keeps every ranking
        let items2 = Matrix::from_fn(items.rows(), 1, |k, _| items.get(k, 0).powi(3) + items.get(k, 0));
        let users_pos = Matrix::from_fn(users.rows(), 1, |k, _| users.get(k, 0).abs() + 0.1);
        let a = rank_embeddings(&users_pos, &items, &held, &[], &cutoffs).unwrap();
        let b = rank_embeddings(&users_pos, &items2, &held, &[], &cutoffs).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn masks_only_shrink_across_rounds(g in graph_strategy(6, 6), seed in any::<u64>(), rho in 5.0f64..60.0) {
        let mut model = weighted_model(g, 4, seed);
        let mut prev = (model.emb.user_mask.clone(), model.emb.item_mask.clone());
        for _ in 0..4 {
            pruning::prune_embeddings(&mut model.emb, rho);
            let next = (model.emb.user_mask.clone(), model.emb.item_mask.clone());
            prop_assert!(prev.0.iter().zip(&next.0).all(|(p, n)| *p || !*n));
            prop_assert!(prev.1.iter().zip(&next.1).all(|(p, n)| *p || !*n));
            prev = next;
        }
    }

    #[test]
    fn edge_ranking_ignores_a_constant_shift(weights in prop::collection::vec(0.0f64..3.0, 1..40), shift in 0.0f64..2.0, rho in 1.0f64..99.0) {
        let shifted: Vec<f64> = weights.iter().map(|w| w + shift).collect();
        prop_assert_eq!(pruning::edge_keep_mask(&weights, rho), pruning::edge_keep_mask(&shifted, rho));
    }
}
