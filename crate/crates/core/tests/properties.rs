use proptest::prelude::*;

use hyperfd::autodiff::{
    adam_step, init_attention, seeded_rng, self_attention_encoder, AdamState, ParamStore, Tape, Tensor,
};
use hyperfd::benchdata::{
    gen_synthetic_world, kmeans_split, quantize, BenchmarkTable, KMeansInit, SyntheticWorldSpec,
};
use hyperfd::confenc::{encode_nas, init_encoder, EncoderConfig};
use hyperfd::config::RunConfig;
use hyperfd::metafeat::{extract_on_tape, init_extractor, ExtractorConfig, MetaFeature};
use hyperfd::metrics::{
    expected_random_best, expected_random_rank, mean, normalized_rank, std_dev, ExperimentReport, ReportRow,
};
use hyperfd::protocol::select_top_b;
use hyperfd::ranker::{delta_ndcg, delta_ndcg_full, ideal_dcg, predicted_positions};
use hyperfd::space::{
    arch_to_graph, enumerate_hpo, estimate_flops, sample_nas, Block, Config, Graph, NasArch, SpaceKind,
    KERNEL_CHOICES, NAS_STAGES, RES_360P,
};
use hyperfd::transform::{least_squares_oracle, TransformMatrix};

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig::with_cases(n)
}

fn gaussian_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded_rng(seed);
    (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect()
}

proptest! {
    #![proptest_config(cases(24))]

    #[test]
    fn attention_is_permutation_equivariant(seed in any::<u64>(), n in 1usize..7) {
        let mut rng = seeded_rng(seed);
        let mut store = ParamStore::new();
        init_attention(&mut store, "a", 8, &mut rng).unwrap();
        let x = gaussian_rows(n, 8, seed ^ 1);
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let run = |rows: &[Vec<f64>]| {
            let mut t = Tape::new();
            let v = t.constant(Tensor::from_rows(rows).unwrap());
            let y = self_attention_encoder(&mut t, &store, "a", v).unwrap();
            t.value(y).clone()
        };
        let y = run(&x);
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| x[i].clone()).collect();
        let yp = run(&permuted);
        for (r, &i) in perm.iter().enumerate() {
            for (a, b) in yp.row_slice(r).iter().zip(y.row_slice(i)) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn adam_with_zero_gradients_is_the_identity(seed in any::<u64>(), steps in 1usize..5) {
        let mut rng = seeded_rng(seed);
        let mut store = ParamStore::new();
        init_attention(&mut store, "a", 4, &mut rng).unwrap();
        let before = store.flatten();
        let mut adam = AdamState::new();
        for _ in 0..steps {
            store.ensure_grads();
            store.zero_grads();
            adam_step(&mut store, &mut adam, 0.1);
        }
        prop_assert_eq!(before, store.flatten());
    }

    #[test]
    fn equal_seeds_give_equal_streams(seed in any::<u64>(), label in "[a-z]{1,8}") {
        let mut a = seeded_rng(seed).derive_str(&label);
        let mut b = seeded_rng(seed).derive_str(&label);
        for _ in 0..64 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }
}

fn small_world(seed: u64) -> hyperfd::benchdata::SyntheticWorld {
    let spec = SyntheticWorldSpec {
        datasets: 3,
        images_per_dataset: 12,
        latent_dim: 3,
        noise: 0.1,
        seed,
    };
    gen_synthetic_world(&spec, SpaceKind::Hpo).unwrap()
}

proptest! {
    #![proptest_config(cases(16))]

    #[test]
    fn meta_features_have_width_d_and_ignore_image_order(seed in any::<u64>(), heads_width in 1usize..4) {
        let hidden = 4 * heads_width;
        let world = small_world(seed % 1000);
        let cfg = ExtractorConfig { hidden, channels: world.datasets[0].channels(), ..ExtractorConfig::default() };
        let mut rng = seeded_rng(seed);
        let mut store = ParamStore::new();
        init_extractor(&mut store, &cfg, &mut rng).unwrap();
        let d = &world.datasets[1];
        let mut idx = rng.sample_indices(d.len(), 6);
        let phi = |idx: &[usize]| {
            let mut t = Tape::new();
            let v = extract_on_tape(&mut t, &store, &cfg, d, idx).unwrap();
            t.value(v).values().to_vec()
        };
        let a = phi(&idx);
        prop_assert_eq!(a.len(), hidden);
        rng.shuffle(&mut idx);
        let b = phi(&idx);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn label_blocks_are_ignored_when_switched_off(seed in any::<u64>()) {
        let world = small_world(seed % 1000);
        let cfg = ExtractorConfig {
            hidden: 8,
            use_labels: false,
            channels: world.datasets[0].channels(),
            ..ExtractorConfig::default()
        };
        let mut rng = seeded_rng(seed);
        let mut store = ParamStore::new();
        init_extractor(&mut store, &cfg, &mut rng).unwrap();
        let d = world.datasets[0].clone();
        let mut scrambled = d.clone();
        for r in scrambled.records.iter_mut() {
            if let Some(labels) = r.labels.as_mut() {
                for g in labels.iter_mut() {
                    for v in g.pos.iter_mut().chain(g.neg.iter_mut()).chain(g.ign.iter_mut()) {
                        *v = rng.normal();
                    }
                }
            }
        }
        let idx: Vec<usize> = (0..d.len()).collect();
        let phi = |d: &hyperfd::metafeat::DatasetDescriptor| {
            let mut t = Tape::new();
            let v = extract_on_tape(&mut t, &store, &cfg, d, &idx).unwrap();
            t.value(v).values().to_vec()
        };
        prop_assert_eq!(phi(&d), phi(&scrambled));
    }
}

proptest! {
    #![proptest_config(cases(200))]

    #[test]
    fn hpo_ids_round_trip(ordinal in 0usize..216) {
        let c = Config::Hpo(enumerate_hpo()[ordinal]);
        prop_assert_eq!(Config::parse(SpaceKind::Hpo, &c.to_string()).unwrap(), c);
    }

    #[test]
    fn nas_ids_round_trip(seed in any::<u64>()) {
        let a = sample_nas(&mut seeded_rng(seed), None).unwrap();
        let c = Config::Nas(a);
        prop_assert_eq!(Config::parse(SpaceKind::Nas, &c.to_string()).unwrap(), c);
    }
}

fn grow(a: &NasArch, stage: usize) -> Option<NasArch> {
    let spec = NAS_STAGES[stage];
    let blocks = &a.stages()[stage];
    if spec.fixed.is_some() || blocks.len() >= spec.max_depth {
        return None;
    }
    let mut more = blocks.clone();
    more.push(*blocks.last().unwrap());
    a.with_stage(stage, more).ok()
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn flops_grow_with_depth_and_kernel(seed in any::<u64>(), stage in 1usize..NAS_STAGES.len(), pick in any::<usize>()) {
        let a = sample_nas(&mut seeded_rng(seed), None).unwrap();
        let base = estimate_flops(&a, RES_360P).unwrap();
        if let Some(deeper) = grow(&a, stage) {
            prop_assert!(estimate_flops(&deeper, RES_360P).unwrap() > base);
        }
        let blocks = a.stages()[stage].clone();
        let i = pick % blocks.len();
        let k = KERNEL_CHOICES.iter().position(|&k| k == blocks[i].kernel).unwrap();
        if NAS_STAGES[stage].fixed.is_none() && k + 1 < KERNEL_CHOICES.len() {
            let mut wider = blocks.clone();
            wider[i] = Block { kernel: KERNEL_CHOICES[k + 1], ..blocks[i] };
            let b = a.with_stage(stage, wider).unwrap();
            prop_assert!(estimate_flops(&b, RES_360P).unwrap() > base);
        }
    }
}

fn permute_graph(g: &Graph, perm: &[usize]) -> Graph {
    let n = g.node_count();
    let f = g.features.cols();
    let mut feat = vec![0.0; n * f];
    let mut adj = vec![0.0; n * n];
    for (new, &old) in perm.iter().enumerate() {
        feat[new * f..(new + 1) * f].copy_from_slice(g.features.row_slice(old));
        for (new2, &old2) in perm.iter().enumerate() {
            adj[new * n + new2] = g.adjacency.get2(old, old2);
        }
    }
    Graph {
        features: Tensor::matrix(n, f, feat).unwrap(),
        adjacency: Tensor::matrix(n, n, adj).unwrap(),
    }
}

proptest! {
    #![proptest_config(cases(32))]

    #[test]
    fn nas_encoding_ignores_node_order(seed in any::<u64>()) {
        let mut rng = seeded_rng(seed);
        let cfg = EncoderConfig { hidden: 8, gin_dropout: 0.2 };
        let mut store = ParamStore::new();
        init_encoder(&mut store, SpaceKind::Nas, &cfg, &mut rng).unwrap();
        let g = arch_to_graph(&sample_nas(&mut rng, None).unwrap());
        let mut perm: Vec<usize> = (0..g.node_count()).collect();
        rng.shuffle(&mut perm);
        let a = encode_nas(&g, &store, &cfg, None).unwrap();
        let b = encode_nas(&permute_graph(&g, &perm), &store, &cfg, None).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn swap_delta_matches_recomputation(
        rels in prop::collection::vec(0.0f64..1.0, 2..11),
        scores_seed in any::<u64>(),
        i in any::<usize>(),
        j in any::<usize>(),
    ) {
        let n = rels.len();
        let (i, j) = (i % n, j % n);
        let mut rng = seeded_rng(scores_seed);
        let scores: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let pos = predicted_positions(&scores);
        let mut in_order = vec![0.0; n];
        for (item, &p) in pos.iter().enumerate() {
            in_order[p] = rels[item];
        }
        let fast = delta_ndcg(&rels, &pos, i, j, ideal_dcg(&rels));
        let full = delta_ndcg_full(&in_order, pos[i], pos[j]).unwrap();
        prop_assert!((fast - full).abs() <= 1e-12, "{} vs {}", fast, full);
    }

    #[test]
    fn transform_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let d = 5;
        let mut z = TransformMatrix::identity(d, 1);
        let mut rng = seeded_rng(seed);
        for v in z.z.values_mut() {
            *v = rng.normal();
        }
        let rows = gaussian_rows(2, d, seed ^ 7);
        let mix: Vec<f64> = rows[0].iter().zip(&rows[1]).map(|(p, q)| a * p + b * q).collect();
        let zp = z.apply(&MetaFeature { values: rows[0].clone(), version: 1 }).unwrap();
        let zq = z.apply_raw(&rows[1]).unwrap();
        let zm = z.apply_raw(&mix).unwrap();
        for k in 0..d {
            prop_assert!((zm[k] - (a * zp[k] + b * zq[k])).abs() <= 1e-10);
        }
    }
}

proptest! {
    #![proptest_config(cases(12))]

    #[test]
    fn trained_transform_is_near_the_oracle(seed in any::<u64>()) {
        let d = 4;
        let old = gaussian_rows(12, d, seed);
        let a = gaussian_rows(d, d, seed ^ 3);
        let noise = gaussian_rows(12, d, seed ^ 5);
        let cur: Vec<Vec<f64>> = old
            .iter()
            .zip(&noise)
            .map(|(x, e)| (0..d).map(|r| (0..d).map(|c| a[r][c] * x[c]).sum::<f64>() + 0.05 * e[r]).collect())
            .collect();
        let oracle = least_squares_oracle(&old, &cur, 1).unwrap().loss(&old, &cur).unwrap();
        let mut z = TransformMatrix::identity(d, 1);
        z.train(&old, &cur, 4000, 0.01).unwrap();
        let got = z.loss(&old, &cur).unwrap();
        prop_assert!(got <= 1.05 * oracle + 1e-12, "{} vs oracle {}", got, oracle);
    }

    #[test]
    fn lloyd_never_increases_inertia(seed in any::<u64>(), k in 1usize..6, plus in any::<bool>()) {
        let pts = gaussian_rows(40, 3, seed);
        let init = if plus { KMeansInit::PlusPlus } else { KMeansInit::Random };
        let r = kmeans_split(&pts, k, 100, init, &mut seeded_rng(seed ^ 9)).unwrap();
        for w in r.inertia.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn benchmark_csv_round_trip_is_byte_stable(seed in any::<u64>(), n in 1usize..30) {
        let mut rng = seeded_rng(seed);
        let all = enumerate_hpo();
        let mut t = BenchmarkTable::new(SpaceKind::Hpo);
        for i in rng.sample_indices(all.len(), n) {
            let ds = format!("d{}", rng.below(3));
            t.insert(&ds, &Config::Hpo(all[i]).to_string(), quantize(rng.next_f64()), quantize(rng.next_f64())).unwrap();
        }
        let mut a = Vec::new();
        t.write_csv(&mut a).unwrap();
        let back = BenchmarkTable::read_csv(a.as_slice()).unwrap();
        let mut b = Vec::new();
        back.write_csv(&mut b).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(back, t);
    }
}

fn random_rows(seed: u64, n: usize) -> Vec<ReportRow> {
    let mut rng = seeded_rng(seed);
    (0..n)
        .map(|i| ReportRow {
            seed: rng.below(4) as u64,
            dataset_id: format!("task-{}", rng.below(5)),
            config: format!("c{i}"),
            ap_val: (rng.next_f64() * 1e6).round() / 1e6,
            ap_test: (rng.next_f64() * 1e6).round() / 1e6,
            norm_rank: rng.uniform(0.0, 100.0),
            delta_ap: rng.normal() * 10.0,
        })
        .collect()
}

proptest! {
    #![proptest_config(cases(48))]

    #[test]
    fn report_aggregates_equal_recomputation(seed in any::<u64>(), n in 1usize..60) {
        let rows = random_rows(seed, n);
        let r = ExperimentReport::from_rows("m", 4, rows.clone());
        let ranks: Vec<f64> = rows.iter().map(|r| r.norm_rank).collect();
        prop_assert_eq!(r.overall.mean_rank, mean(&ranks));
        prop_assert_eq!(r.overall.std_rank, std_dev(&ranks));
        prop_assert_eq!(r.overall.count, n);
        let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let sums: Vec<f64> = seeds
            .iter()
            .map(|s| rows.iter().filter(|r| r.seed == *s).map(|r| r.delta_ap).sum())
            .collect();
        prop_assert_eq!(r.overall.mean_delta_ap, mean(&sums));
        for (ds, agg) in &r.per_dataset {
            let mine: Vec<f64> = rows.iter().filter(|r| &r.dataset_id == ds).map(|r| r.norm_rank).collect();
            prop_assert_eq!(agg.mean_rank, mean(&mine));
            prop_assert_eq!(agg.count, mine.len());
        }
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        let back = ExperimentReport::read_csv("m", 4, csv.as_slice()).unwrap();
        prop_assert_eq!(back, r);
    }

    #[test]
    fn normalized_rank_is_a_percentage(pool in prop::collection::vec(0.0f64..1.0, 1..50), pick in any::<usize>()) {
        let chosen = pool[pick % pool.len()];
        let r = normalized_rank(chosen, &pool).unwrap();
        prop_assert!(r > 0.0 && r <= 100.0);
        let top = pool.iter().copied().fold(f64::MIN, f64::max);
        prop_assert!(normalized_rank(top, &pool).unwrap() <= r);
    }

    #[test]
    fn expected_best_lies_between_mean_and_max(pool in prop::collection::vec(0.0f64..1.0, 1..60), b in 1usize..8) {
        prop_assume!(b <= pool.len());
        let e = expected_random_best(&pool, b).unwrap();
        let max = pool.iter().copied().fold(f64::MIN, f64::max);
        prop_assert!(e <= max + 1e-12);
        prop_assert!(e >= mean(&pool) - 1e-12);
        if b == pool.len() {
            prop_assert!((e - max).abs() <= 1e-12);
        }
    }

    #[test]
    fn selection_returns_b_distinct_pool_members(
        scores in prop::collection::vec(-5.0f64..5.0, 4..40),
        b in 1usize..5,
        ratio in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let picks = select_top_b(&scores, b, ratio, &mut seeded_rng(seed)).unwrap();
        prop_assert_eq!(picks.len(), b);
        let mut sorted = picks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), b);
        prop_assert!(picks.iter().all(|&i| i < scores.len()));
        let greedy = select_top_b(&scores, b, 1.0, &mut seeded_rng(seed)).unwrap();
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&x, &y| scores[y].total_cmp(&scores[x]).then(x.cmp(&y)));
        let mut top = order[..b].to_vec();
        top.sort_unstable();
        let mut g = greedy.clone();
        g.sort_unstable();
        prop_assert_eq!(g, top);
    }

    #[test]
    fn config_text_round_trips(hidden in 1usize..128, lr in 1e-6f64..1e-1, budget in 1usize..9, seed in any::<u64>()) {
        let mut c = RunConfig::default();
        c.set("hidden", &hidden.to_string()).unwrap();
        c.set("lr", &lr.to_string()).unwrap();
        c.set("budget", &budget.to_string()).unwrap();
        c.set("seed", &seed.to_string()).unwrap();
        prop_assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
    }
}

#[test]
fn random_search_delta_ap_averages_to_zero() {
    let mut rng = seeded_rng(17);
    let pool: Vec<f64> = (0..200).map(|_| rng.next_f64()).collect();
    let oracle = expected_random_best(&pool, 4).unwrap();
    let mut total = 0.0;
    let draws = 200_000;
    for _ in 0..draws {
        let pick = rng.sample_indices(pool.len(), 4);
        total += pick.iter().map(|&i| pool[i]).fold(f64::MIN, f64::max) - oracle;
    }
    assert!((100.0 * total / draws as f64).abs() < 0.02);
}

#[test]
fn random_rank_formula_matches_enumeration() {
    // every 2-subset of 6 distinct values
    let pool: Vec<f64> = (0..6).map(|i| i as f64).collect();
    let mut ranks = Vec::new();
    for a in 0..6 {
        for b in a + 1..6 {
            ranks.push(normalized_rank(pool[a].max(pool[b]), &pool).unwrap());
        }
    }
    assert!((mean(&ranks) - expected_random_rank(6, 2).unwrap()).abs() < 1e-12);
}
