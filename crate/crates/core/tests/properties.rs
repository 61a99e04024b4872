mod common;

use proptest::prelude::*;

use common::{evaluate_brute_force, Protocol};
use omrd_core::autodiff::Graph;
use omrd_core::data::{
    augment_with_info, parse_name, pk_sample, seeded_rng, AugmentConfig, IdentityIndex, Sample, Split,
};
use omrd_core::eval::{evaluate, EmbeddingSet, Feature};
use omrd_core::losses::{batch_hard_triplet, OimConfig, OimState};
use omrd_core::{Tensor32, Tensor64};

fn unit_rows(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n).prop_map(|rows| {
        rows.into_iter()
            .map(|r| {
                let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-3);
                r.into_iter().map(|x| x / norm).collect()
            })
            .collect()
    })
}

fn embedding_set(rows: &[Vec<f64>], ids: &[i64], cams: &[i64]) -> EmbeddingSet {
    EmbeddingSet::new(rows[0].len(), rows.concat(), ids.to_vec(), cams.to_vec(), Feature::Oim).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn l2_normalize_gives_unit_rows(x in prop::collection::vec(-5.0f64..5.0, 12)) {
        prop_assume!(x.chunks(4).all(|r| r.iter().any(|v| v.abs() > 1e-3)));
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor64::new(vec![3, 4], x).unwrap());
        let y = g.l2_normalize(v, 1e-12);
        for row in g.value(y).data().chunks(4) {
            let n: f64 = row.iter().map(|a| a * a).sum();
            prop_assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(x in prop::collection::vec(-30.0f64..30.0, 15), t in 0.05f64..3.0) {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor64::new(vec![3, 5], x).unwrap());
        let y = g.softmax(v, t);
        for row in g.value(y).data().chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn report_invariants(
        q in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..8),
        g in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..20),
        seed in 0u64..1000,
    ) {
        use rand::Rng;
        let mut rng = seeded_rng(seed, 0);
        let p = Protocol {
            q_ids: q.iter().map(|_| rng.gen_range(0..3)).collect(),
            q_cams: q.iter().map(|_| rng.gen_range(0..2)).collect(),
            g_ids: g.iter().map(|_| rng.gen_range(0..3)).collect(),
            g_cams: g.iter().map(|_| rng.gen_range(0..2)).collect(),
            q,
            g,
        };
        let lib = evaluate(&embedding_set(&p.q, &p.q_ids, &p.q_cams), &embedding_set(&p.g, &p.g_ids, &p.g_cams), 5);
        match evaluate_brute_force(&p, 5) {
            None => prop_assert!(lib.is_err()),
            Some(oracle) => {
                let r = lib.unwrap();
                prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
                prop_assert!(r.cmc.iter().all(|&c| (0.0..=1.0).contains(&c)));
                let mean = r.per_query_ap.iter().sum::<f64>() / r.per_query_ap.len() as f64;
                prop_assert!((r.map - mean).abs() < 1e-12);
                prop_assert!((r.map - oracle.map).abs() < 1e-9);
                prop_assert_eq!(r.num_valid_queries + r.num_dropped_queries, p.q.len());
            }
        }
    }

    #[test]
    fn triplet_is_nonnegative_and_zero_only_when_separated(
        x in prop::collection::vec(-2.0f64..2.0, 8),
        margin in 0.0f64..1.0,
    ) {
        let emb: Vec<Tensor64> = x.chunks(2).map(|c| Tensor64::vector(c.to_vec()).unwrap()).collect();
        let labels = [0, 0, 1, 1];
        let v = batch_hard_triplet(&emb, &labels, margin).unwrap();
        prop_assert!(v >= 0.0);
        let d = |a: usize, b: usize| common::euclid(emb[a].data(), emb[b].data());
        let separated = (0..4).all(|a| {
            let pos = (0..4).filter(|&p| p != a && labels[p] == labels[a]).map(|p| d(a, p)).fold(0.0, f64::max);
            let neg = (0..4).filter(|&n| labels[n] != labels[a]).map(|n| d(a, n)).fold(f64::INFINITY, f64::min);
            neg >= pos + margin
        });
        prop_assert_eq!(v == 0.0, separated);
    }

    #[test]
    fn oim_argmax_ignores_temperature(cols in unit_rows(5, 4), f in unit_rows(1, 4), t1 in 0.05f64..3.0, t2 in 0.05f64..3.0) {
        let lut = Tensor64::new(vec![5, 4], cols.concat()).unwrap();
        let feature = Tensor64::vector(f[0].clone()).unwrap();
        let argmax = |t: f64| {
            let s = OimState::from_columns(lut.clone(), &OimConfig { temperature: t, ..OimConfig::default() }).unwrap();
            let (p, _) = s.probabilities(&feature).unwrap();
            p.data().iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0
        };
        prop_assert_eq!(argmax(t1), argmax(t2));
    }

    #[test]
    fn oim_update_keeps_columns_unit(feats in unit_rows(6, 5), targets in prop::collection::vec(0usize..3, 6)) {
        let mut s = OimState::<f64>::new(3, 5, &OimConfig::default()).unwrap();
        let fs: Vec<Tensor64> = feats.iter().map(|r| Tensor64::vector(r.clone()).unwrap()).collect();
        s.update(&fs, &targets).unwrap();
        for &t in &targets {
            let n: f64 = s.column(t).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn pk_batches_have_p_identities_of_k(p in 2usize..5, k in 1usize..6, sizes in prop::collection::vec(1usize..6, 5..8), seed in 0u64..100) {
        let mut samples = Vec::new();
        for (id, &n) in sizes.iter().enumerate() {
            for i in 0..n {
                samples.push(Sample { image: Tensor32::zeros(vec![16, 8, 3]), identity: id as u32 * 7, camera: (i % 2) as u32, split: Split::Train });
            }
        }
        let index = IdentityIndex::new(&samples);
        let batch = pk_sample(&index, p, k, &mut seeded_rng(seed, 0)).unwrap();
        prop_assert_eq!(batch.indices.len(), p * k);
        let ids: std::collections::BTreeSet<u32> = batch.indices.iter().map(|&i| samples[i].identity).collect();
        prop_assert_eq!(ids.len(), p);
        for chunk in batch.indices.chunks(k) {
            prop_assert!(chunk.iter().all(|&i| samples[i].identity == samples[chunk[0]].identity));
        }
    }

    #[test]
    fn erased_area_stays_in_bounds(seed in 0u64..500) {
        let sample = Sample { image: Tensor32::full(vec![64, 32, 3], 0.5), identity: 0, camera: 0, split: Split::Train };
        let cfg = AugmentConfig { erase_p: 1.0, ..AugmentConfig::default() };
        let (_, info) = augment_with_info(&sample, &cfg, &mut seeded_rng(seed, 0));
        if let Some(r) = info.erased {
            let frac = (r.height * r.width) as f32 / (64.0 * 32.0);
            prop_assert!((0.02..=0.4).contains(&frac), "{frac}");
            prop_assert!(r.top + r.height <= 64 && r.left + r.width <= 32);
        }
    }

    #[test]
    fn market_names_parse(pid in 0u32..10000, cam in 0u32..10, ext in prop::sample::select(vec!["jpg", "png", "JPEG"])) {
        let name = format!("{pid:04}_c{cam}s1_000151_01.{ext}");
        prop_assert_eq!(parse_name(&name), Some((pid, cam)));
        prop_assert_eq!(parse_name(&format!("-1_c{cam}s1_000151_01.{ext}")), None);
    }
}
