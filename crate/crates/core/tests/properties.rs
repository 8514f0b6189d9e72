use darp_core::agent::sample_location;
use darp_core::embedder::{Embedder, EmbeddingTable, EMBED_DIM};
use darp_core::metrics::{
    acc_at_q, dataset_auir, percentile_from_rank, rank_from_distances, squared_distances,
    RetrievalResult,
};
use darp_core::reward::score;
use darp_core::rng;
use darp_core::sketchgen::{generate_dataset, GenConfig, Split};
use darp_core::trainer::{run_episode, sigma_schedule, EpisodeEnv, EpisodeParams, TrainConfig};
use proptest::prelude::*;

fn table(rows: &[Vec<f32>]) -> EmbeddingTable {
    let ids = (0..rows.len()).map(|i| format!("g{i}")).collect();
    let data = rows
        .iter()
        .flat_map(|r| (0..EMBED_DIM).map(move |j| r[j % r.len()]))
        .collect();
    EmbeddingTable::new(ids, data).unwrap()
}

fn rows(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(prop::collection::vec(-3i8..=3, 4), n).prop_map(|v| {
        v.into_iter()
            .map(|r| r.into_iter().map(f32::from).collect())
            .collect()
    })
}

fn results() -> impl Strategy<Value = (usize, Vec<Vec<usize>>)> {
    (2usize..30).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec(prop::collection::vec(1..=n, 1..6), 1..12),
        )
    })
}

fn build(n: usize, ranks: &[Vec<usize>]) -> Vec<RetrievalResult> {
    ranks
        .iter()
        .enumerate()
        .map(|(i, r)| RetrievalResult::new(format!("i{i}"), r.clone(), n).unwrap())
        .collect()
}

proptest! {
    #[test]
    fn rank_is_bounded_and_matches_counting(g in rows(1..25), q in prop::collection::vec(-3i8..=3, 4), t in 0usize..25) {
        let gal = table(&g);
        let t = t % gal.len();
        let q: Vec<f32> = (0..EMBED_DIM).map(|j| f32::from(q[j % 4])).collect();
        let d = squared_distances(&q, &gal);
        let k = rank_from_distances(&d, t);
        prop_assert!((1..=gal.len()).contains(&k));
        let closer = d.iter().filter(|&&x| x < d[t]).count();
        let tied = d.iter().filter(|&&x| x == d[t]).count();
        prop_assert_eq!(k, closer + tied);
    }

    #[test]
    fn score_properties(g in rows(1..20), q in prop::collection::vec(-3i8..=3, 4), t in 0usize..20) {
        let mut gal_rows = g.clone();
        let t = t % gal_rows.len();
        let qv: Vec<f32> = q.iter().map(|&x| f32::from(x)).collect();
        let gal = table(&gal_rows);
        let query: Vec<f32> = (0..EMBED_DIM).map(|j| qv[j % 4]).collect();
        let s = score(&query, &format!("g{t}"), &gal).unwrap();
        prop_assert!(s > 0.0 && s <= 1.0);
        let d = squared_distances(&query, &gal);
        let nearest = d.iter().enumerate().all(|(i, &x)| i == t || x > d[t]);
        prop_assert_eq!(s == 1.0, nearest);
        if d[t] > 0.0 {
            // the query itself is strictly closer than the target
            gal_rows.push(qv.clone());
            let more = table(&gal_rows);
            let s2 = score(&query, &format!("g{t}"), &more).unwrap();
            prop_assert!(s2 < s);
        }
    }

    #[test]
    fn acc_is_monotone_in_q((n, ranks) in results(), q in 1usize..30) {
        let res = build(n, &ranks);
        prop_assert!(acc_at_q(&res, q) <= acc_at_q(&res, q + 1));
    }

    #[test]
    fn auir_ignores_item_order((n, ranks) in results(), seed in 0u64..1000) {
        use rand::seq::SliceRandom;
        let res = build(n, &ranks);
        let mut shuffled = res.clone();
        shuffled.shuffle(&mut rng::seeded(seed));
        prop_assert!((dataset_auir(&res) - dataset_auir(&shuffled)).abs() < 1e-9);
    }

    #[test]
    fn tie_free_percentile_identity(n in 1usize..500, rank in 1usize..500) {
        let rank = 1 + (rank - 1) % n;
        let p = percentile_from_rank(rank, n);
        prop_assert!((p - (1.0 - rank as f64 / n as f64)).abs() < 1e-12);
    }

    #[test]
    fn sigma_schedule_is_bounded_and_non_increasing(
        total in 1u64..5000,
        m in 0u64..5000,
        end in 0.001f64..0.5,
        ratio in 1.0f64..100.0,
    ) {
        let start = end * ratio;
        let m = m % (total + 1);
        let a = sigma_schedule(m, total, start, end);
        let b = sigma_schedule(m + 1, total, start, end);
        prop_assert!(b[0] <= a[0]);
        prop_assert!(a[0] >= end * (1.0 - 1e-12) && a[0] <= start * (1.0 + 1e-12));
        prop_assert_eq!(a[0], a[1]);
    }

    #[test]
    fn sampled_locations_are_clamped(mx in -1.0f64..1.0, my in -1.0f64..1.0, s in 0.01f64..3.0, seed in 0u64..1000) {
        let smp = sample_location([mx, my], [s, s], &mut rng::seeded(seed)).unwrap();
        prop_assert!(smp.v.iter().all(|v| (-1.0..=1.0).contains(v)));
        for i in 0..2 {
            prop_assert_eq!(smp.v[i], smp.v_raw[i].clamp(-1.0, 1.0));
        }
    }

    #[test]
    fn invalid_train_configs_are_rejected(k in 0usize..3, t in 0usize..3, p in -0.5f64..1.5, s0 in -0.1f64..1.0, s1 in -0.1f64..1.0) {
        let cfg = TrainConfig { k, t, mask_p: p, sigma_start: s0, sigma_end: s1, ..Default::default() };
        let valid = k >= 1 && t >= 1 && p > 0.0 && p <= 1.0 && s1 > 0.0 && s0 >= s1;
        prop_assert_eq!(cfg.validate().is_ok(), valid);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn embeddings_have_unit_norm(seed in 0u64..1000) {
        let mut r = rng::seeded(seed);
        let e = Embedder::<f32>::new(64 * 64, &mut r).unwrap();
        let x: Vec<f32> = (0..64 * 64).map(|i| ((i as u64 * 31 + seed) % 7) as f32 / 7.0).collect();
        let v = e.embed(&x).unwrap();
        prop_assert_eq!(v.len(), EMBED_DIM);
        let norm: f64 = v.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn episodes_use_one_head_and_stay_within_t(seed in 0u64..100, t in 1usize..20, head in 1usize..=3) {
        let data = generate_dataset(&GenConfig { n_classes: 2, items_per_class: 2, seed, ..Default::default() }).unwrap();
        let emb = darp_core::embedder::initial_embedder(&data, seed).unwrap().table;
        let item = data.items.iter().find(|i| i.split == Split::Train).unwrap();
        let gallery = emb.subset([item.id.as_str()]).unwrap();
        let cfg = TrainConfig { k: 3, t, seed, ..Default::default() };
        let agent = darp_core::agent::Agent::new(cfg.agent_config(), &mut rng::seeded(seed)).unwrap();
        let stages = item.stage_rasters(cfg.dilation).unwrap();
        let env = EpisodeEnv { item_id: &item.id, stages: &stages, target: gallery.vector(0), gallery: &gallery, target_index: 0 };
        let ep = EpisodeParams { head, sigma: [0.2, 0.2], episode: 0 };
        let ro = run_episode(&env, &ep, &agent, &cfg, &mut rng::seeded(seed)).unwrap();
        prop_assert_eq!(ro.trace.head, head);
        prop_assert!(ro.trace.steps.len() <= t);
        prop_assert_eq!(ro.trace.returns.len(), ro.trace.steps.len());
        prop_assert!(ro.trace.steps.iter().all(|s| s.masks.len() == 3));
        prop_assert!(ro.trace.steps[0].sample.is_none());
        prop_assert!(ro.trace.steps.iter().skip(1).all(|s| s.sample.is_some()));
    }
}
