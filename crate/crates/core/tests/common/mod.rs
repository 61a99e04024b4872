//! Independent reference implementations used by the integration tests.
//!
//! Nothing here calls into the library's sorting, mining or softmax code.

#![allow(dead_code)]

use omrd_core::data::seeded_rng;
use omrd_core::eval::{evaluate, EmbeddingSet, Feature};
use omrd_core::losses::{batch_hard_triplet, OimConfig, OimState};
use omrd_core::optim::{AdamConfig, AdamState};
use omrd_core::Tensor64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s.sqrt()
}

/// Batch-hard triplet by enumerating every (anchor, positive, negative)
/// triple and keeping, per anchor, the triple with the largest hinge
/// argument. The hinge is monotone in `d(a,p) - d(a,n)`, so this equals
/// selecting the farthest positive and nearest negative.
pub fn triplet_brute_force(emb: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
    let n = emb.len();
    let mut total = 0.0;
    for a in 0..n {
        let mut best = f64::NEG_INFINITY;
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for q in 0..n {
                if labels[q] == labels[a] {
                    continue;
                }
                let v = margin + euclid(&emb[a], &emb[p]) - euclid(&emb[a], &emb[q]);
                if v > best {
                    best = v;
                }
            }
        }
        total += best.max(0.0);
    }
    total / n as f64
}

pub struct OracleReport {
    pub cmc: Vec<f64>,
    pub map: f64,
    pub aps: Vec<f64>,
    pub valid: usize,
}

pub struct Protocol {
    pub q: Vec<Vec<f64>>,
    pub q_ids: Vec<i64>,
    pub q_cams: Vec<i64>,
    pub g: Vec<Vec<f64>>,
    pub g_ids: Vec<i64>,
    pub g_cams: Vec<i64>,
}

/// True when gallery item `x` ranks strictly ahead of `y`.
fn ahead(dx: f64, x: usize, dy: f64, y: usize, ids: &[i64], cams: &[i64]) -> bool {
    if dx != dy {
        return dx < dy;
    }
    (ids[x], cams[x], x) < (ids[y], cams[y], y)
}

/// Single-query CMC and mAP. The rank of each candidate is obtained by
/// counting the candidates ahead of it, so no sort is involved.
pub fn evaluate_brute_force(p: &Protocol, max_rank: usize) -> Option<OracleReport> {
    let mut aps = Vec::new();
    let mut hits = vec![0usize; max_rank];
    for i in 0..p.q.len() {
        let cand: Vec<usize> = (0..p.g.len())
            .filter(|&j| !(p.g_ids[j] == p.q_ids[i] && p.g_cams[j] == p.q_cams[i]))
            .collect();
        let dist: Vec<f64> = (0..p.g.len()).map(|j| euclid(&p.q[i], &p.g[j])).collect();
        let relevant: Vec<usize> = cand.iter().copied().filter(|&j| p.g_ids[j] == p.q_ids[i]).collect();
        if relevant.is_empty() {
            continue;
        }
        let rank_of = |j: usize| {
            1 + cand
                .iter()
                .filter(|&&o| o != j && ahead(dist[o], o, dist[j], j, &p.g_ids, &p.g_cams))
                .count()
        };
        let mut ranks: Vec<usize> = relevant.iter().map(|&j| rank_of(j)).collect();
        ranks.sort_unstable();
        // the k-th relevant item (1-based) at rank r contributes precision k / r
        let ap = ranks.iter().enumerate().map(|(k, &r)| (k + 1) as f64 / r as f64).sum::<f64>() / ranks.len() as f64;
        aps.push(ap);
        for (r, h) in hits.iter_mut().enumerate() {
            if ranks[0] <= r + 1 {
                *h += 1;
            }
        }
    }
    if aps.is_empty() {
        return None;
    }
    let valid = aps.len();
    Some(OracleReport {
        cmc: hits.iter().map(|&h| h as f64 / valid as f64).collect(),
        map: aps.iter().sum::<f64>() / valid as f64,
        aps,
        valid,
    })
}

/// Random protocol instance. With `tie_prone` the coordinates are small
/// integers and vectors are often duplicated, so equal distances are common
/// and exact.
pub fn random_protocol(rng: &mut ChaCha8Rng, tie_prone: bool) -> Protocol {
    let nq = rng.gen_range(1..=20);
    let ng = rng.gen_range(1..=50);
    let dim = rng.gen_range(1..=6);
    let ids = rng.gen_range(1..=8);
    let cams = rng.gen_range(1..=3);
    let vector = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..dim)
            .map(|_| if tie_prone { rng.gen_range(0..3) as f64 } else { rng.gen_range(-1.0..1.0) })
            .collect()
    };
    let q: Vec<Vec<f64>> = (0..nq).map(|_| vector(rng)).collect();
    let mut g: Vec<Vec<f64>> = Vec::with_capacity(ng);
    for _ in 0..ng {
        if tie_prone && !g.is_empty() && rng.gen_bool(0.3) {
            let k = rng.gen_range(0..g.len());
            let copy = g[k].clone();
            g.push(copy);
        } else {
            g.push(vector(rng));
        }
    }
    Protocol {
        q,
        q_ids: (0..nq).map(|_| rng.gen_range(0..ids)).collect(),
        q_cams: (0..nq).map(|_| rng.gen_range(0..cams)).collect(),
        g,
        g_ids: (0..ng).map(|_| rng.gen_range(0..ids)).collect(),
        g_cams: (0..ng).map(|_| rng.gen_range(0..cams)).collect(),
    }
}

fn set(rows: &[Vec<f64>], ids: &[i64], cams: &[i64]) -> EmbeddingSet {
    let dim = rows[0].len();
    EmbeddingSet::new(dim, rows.concat(), ids.to_vec(), cams.to_vec(), Feature::Oim).unwrap()
}

/// Largest deviation of the library's batch-hard triplet from the
/// enumeration oracle over random P x K batches with P, K in 2..=4.
pub fn triplet_oracle_error(batches: usize, seed: u64) -> f64 {
    let mut rng = seeded_rng(seed, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..batches {
        let (p, k, d) = (rng.gen_range(2..=4), rng.gen_range(2..=4), rng.gen_range(1..=8));
        let labels: Vec<usize> = (0..p * k).map(|i| i / k).collect();
        let emb: Vec<Vec<f64>> = (0..p * k).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let margin = rng.gen_range(0.0..1.0);
        let tensors: Vec<Tensor64> = emb.iter().map(|e| Tensor64::vector(e.clone()).unwrap()).collect();
        let lib = batch_hard_triplet(&tensors, &labels, margin).unwrap();
        worst = worst.max((lib - triplet_brute_force(&emb, &labels, margin)).abs());
    }
    worst
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Largest `|sum(p) + sum(r) - 1|` over random OIM states; returns the
/// error and how many states had a non-empty queue.
pub fn oim_sum_error(states: usize, seed: u64) -> (f64, usize) {
    let mut rng = seeded_rng(seed, 1);
    let mut worst: f64 = 0.0;
    let mut with_queue = 0;
    for i in 0..states {
        let (l, d) = (rng.gen_range(1..=10), rng.gen_range(1..=8));
        let cfg = OimConfig {
            temperature: rng.gen_range(0.05..2.0),
            momentum: 0.5,
            queue_size: if i % 4 == 0 { 0 } else { rng.gen_range(1..=6) },
        };
        let cols: Vec<f64> = (0..l).flat_map(|_| unit(&mut rng, d)).collect();
        let mut state = OimState::from_columns(Tensor64::new(vec![l, d], cols).unwrap(), &cfg).unwrap();
        let pushed: Vec<Tensor64> = (0..rng.gen_range(0..=8)).map(|_| Tensor64::vector(unit(&mut rng, d)).unwrap()).collect();
        state.push_unlabeled(&pushed).unwrap();
        if state.queue_len() > 0 {
            with_queue += 1;
        }
        let feature = Tensor64::vector(unit(&mut rng, d)).unwrap();
        let (p, r) = state.probabilities(&feature).unwrap();
        let total = p.data().iter().sum::<f64>() + r.map_or(0.0, |r| r.data().iter().sum::<f64>());
        worst = worst.max((total - 1.0).abs());
    }
    (worst, with_queue)
}

pub struct EvalOracleStats {
    pub max_error: f64,
    pub instances: usize,
    /// Instances where at least one query had a tied distance.
    pub with_ties: usize,
    /// Instances where the same-camera filter removed a true match.
    pub with_filtering: usize,
}

fn has_tie(p: &Protocol) -> bool {
    p.q.iter().any(|q| {
        let mut d: Vec<f64> = p.g.iter().map(|g| euclid(q, g)).collect();
        d.sort_by(f64::total_cmp);
        d.windows(2).any(|w| w[0] == w[1])
    })
}

fn has_filtering(p: &Protocol) -> bool {
    (0..p.q.len()).any(|i| (0..p.g.len()).any(|j| p.g_ids[j] == p.q_ids[i] && p.g_cams[j] == p.q_cams[i]))
}

/// Compares `evaluate` against the counting oracle on random protocol
/// instances; half are continuous, half tie-prone. Instances without a
/// single valid query are regenerated.
pub fn eval_oracle_error(instances: usize, seed: u64) -> EvalOracleStats {
    let mut rng = seeded_rng(seed, 2);
    let mut stats = EvalOracleStats {
        max_error: 0.0,
        instances: 0,
        with_ties: 0,
        with_filtering: 0,
    };
    while stats.instances < instances {
        let p = random_protocol(&mut rng, stats.instances % 2 == 1);
        let Some(oracle) = evaluate_brute_force(&p, 10) else {
            // the library must refuse the same instance
            assert!(evaluate(&set(&p.q, &p.q_ids, &p.q_cams), &set(&p.g, &p.g_ids, &p.g_cams), 10).is_err());
            continue;
        };
        let lib = evaluate(&set(&p.q, &p.q_ids, &p.q_cams), &set(&p.g, &p.g_ids, &p.g_cams), 10).unwrap();
        assert_eq!(lib.num_valid_queries, oracle.valid);
        let mut err = (lib.map - oracle.map).abs();
        for (a, b) in lib.cmc.iter().zip(&oracle.cmc) {
            err = err.max((a - b).abs());
        }
        for (a, b) in lib.per_query_ap.iter().zip(&oracle.aps) {
            err = err.max((a - b).abs());
        }
        stats.max_error = stats.max_error.max(err);
        stats.with_ties += has_tie(&p) as usize;
        stats.with_filtering += has_filtering(&p) as usize;
        stats.instances += 1;
    }
    stats
}

/// Minimises an ill-conditioned quadratic with Adam; returns the final
/// distance to the optimum.
pub fn adam_quadratic_distance(steps: usize) -> f64 {
    let scales = [1.0, 10.0, 100.0];
    let target = [1.5, -2.0, 0.25];
    let mut x = Tensor64::zeros(vec![3]);
    let mut adam = AdamState::<f64>::new(AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::default()
    });
    for t in 0..steps {
        let g = Tensor64::from_fn(vec![3], |i| 2.0 * scales[i] * (x.data()[i] - target[i]));
        let lr = if t < steps / 2 { 5e-2 } else { 5e-3 };
        adam.step([("x".to_string(), &mut x, &g)], lr).unwrap();
    }
    euclid(x.data(), &target)
}
