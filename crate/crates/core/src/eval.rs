//! Single-query retrieval evaluation: CMC and mAP.
//!
//! For each query, gallery entries sharing both identity and camera with it
//! are removed, the rest are ranked by ascending Euclidean distance (ties
//! broken by identity, camera, then gallery index) and scored.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_RANK: usize = 10;

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "OMRD_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    /// Fully connected global feature.
    #[default]
    Oim,
    /// Pooled global feature.
    Trip,
}

impl Feature {
    pub fn as_str(self) -> &'static str {
        match self {
            Feature::Oim => "oim",
            Feature::Trip => "trip",
        }
    }
}

impl std::str::FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oim" | "f_oim" => Ok(Feature::Oim),
            "trip" | "f_trip" => Ok(Feature::Trip),
            other => Err(Error::invalid(format!("unknown feature `{other}` (oim|trip)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub dim: usize,
    /// Row-major `[N, dim]`.
    pub vectors: Vec<f64>,
    pub identities: Vec<i64>,
    pub cameras: Vec<i64>,
    pub which_feature: Feature,
}

impl EmbeddingSet {
    pub fn new(
        dim: usize,
        vectors: Vec<f64>,
        identities: Vec<i64>,
        cameras: Vec<i64>,
        which_feature: Feature,
    ) -> Result<Self> {
        let n = identities.len();
        if n == 0 || dim == 0 {
            return Err(Error::invalid("embedding set must be non-empty"));
        }
        if vectors.len() != n * dim || cameras.len() != n {
            return Err(Error::shape(format!(
                "embedding set: {} values, {n} identities, {} cameras for dim {dim}",
                vectors.len(),
                cameras.len()
            )));
        }
        if vectors.iter().any(|v| v.is_nan()) {
            return Err(Error::invalid("embedding set contains NaN"));
        }
        Ok(Self {
            dim,
            vectors,
            identities,
            cameras,
            which_feature,
        })
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `cmc[r - 1]` is the fraction of valid queries matched within rank `r`.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Average precision of each valid query, in query order.
    pub per_query_ap: Vec<f64>,
    pub num_valid_queries: usize,
    pub num_dropped_queries: usize,
    pub which_feature: Feature,
}

impl EvalReport {
    /// CMC at 1-based `rank`, saturating at the last computed rank.
    pub fn rank(&self, rank: usize) -> f64 {
        let i = rank.clamp(1, self.cmc.len()) - 1;
        self.cmc[i]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,value\n");
        for (i, v) in self.cmc.iter().enumerate() {
            let _ = writeln!(s, "{},{v}", i + 1);
        }
        let _ = writeln!(s, "mAP,{}", self.map);
        s
    }

    pub fn write_files(&self, dir: &Path, suffix: &str) -> Result<()> {
        let json = dir.join(format!("eval_report_{suffix}.json"));
        let csv = dir.join(format!("cmc_{suffix}.csv"));
        let body = serde_json::to_string_pretty(self)?;
        std::fs::write(&json, body).map_err(|e| Error::io(&json, e))?;
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        Ok(())
    }
}

/// Row-major `[Nq, Ng]` Euclidean distances.
pub fn pairwise_distances(queries: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<Vec<f64>> {
    if queries.dim != gallery.dim {
        return Err(Error::shape(format!(
            "query dim {} vs gallery dim {}",
            queries.dim, gallery.dim
        )));
    }
    let ng = gallery.len();
    let rows: Vec<Vec<f64>> = (0..queries.len())
        .into_par_iter()
        .map(|i| {
            let q = queries.row(i);
            (0..ng)
                .map(|j| {
                    q.iter()
                        .zip(gallery.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect();
    Ok(rows.concat())
}

/// Outcome of one query, `None` when it has no valid match.
struct QueryResult {
    ap: f64,
    first_hit: usize,
}

fn score_query(
    qi: usize,
    dist: &[f64],
    queries: &EmbeddingSet,
    gallery: &EmbeddingSet,
) -> Option<QueryResult> {
    let (qid, qcam) = (queries.identities[qi], queries.cameras[qi]);
    let mut cand: Vec<usize> = (0..gallery.len())
        .filter(|&j| !(gallery.identities[j] == qid && gallery.cameras[j] == qcam))
        .collect();
    let num_rel = cand.iter().filter(|&&j| gallery.identities[j] == qid).count();
    if num_rel == 0 {
        return None;
    }
    cand.sort_by(|&a, &b| {
        dist[a]
            .total_cmp(&dist[b])
            .then(gallery.identities[a].cmp(&gallery.identities[b]))
            .then(gallery.cameras[a].cmp(&gallery.cameras[b]))
            .then(a.cmp(&b))
    });
    let mut hits = 0usize;
    let mut ap = 0.0;
    let mut first_hit = 0;
    for (k, &j) in cand.iter().enumerate() {
        if gallery.identities[j] == qid {
            hits += 1;
            if hits == 1 {
                first_hit = k + 1;
            }
            ap += hits as f64 / (k + 1) as f64;
        }
    }
    Some(QueryResult {
        ap: ap / num_rel as f64,
        first_hit,
    })
}

/// Thread count from `OMRD_THREADS`, if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Evaluates with parallelism capped by `OMRD_THREADS`.
pub fn evaluate(queries: &EmbeddingSet, gallery: &EmbeddingSet, max_rank: usize) -> Result<EvalReport> {
    evaluate_with_threads(queries, gallery, max_rank, threads_from_env())
}

/// Evaluates on a pool of `threads` workers (all cores when `None`). The
/// report does not depend on the thread count.
pub fn evaluate_with_threads(
    queries: &EmbeddingSet,
    gallery: &EmbeddingSet,
    max_rank: usize,
    threads: Option<usize>,
) -> Result<EvalReport> {
    if max_rank == 0 {
        return Err(Error::invalid("max_rank must be at least 1"));
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| {
        let dist = pairwise_distances(queries, gallery)?;
        let ng = gallery.len();
        let results: Vec<Option<QueryResult>> = (0..queries.len())
            .into_par_iter()
            .map(|qi| score_query(qi, &dist[qi * ng..(qi + 1) * ng], queries, gallery))
            .collect();
        let mut counts = vec![0usize; max_rank];
        let mut per_query_ap = Vec::new();
        let mut dropped = 0;
        for r in &results {
            match r {
                Some(r) => {
                    per_query_ap.push(r.ap);
                    for c in counts.iter_mut().skip(r.first_hit - 1) {
                        *c += 1;
                    }
                }
                None => dropped += 1,
            }
        }
        let valid = per_query_ap.len();
        if valid == 0 {
            return Err(Error::invalid(
                "no query has a cross-camera match in the gallery",
            ));
        }
        let map = per_query_ap.iter().sum::<f64>() / valid as f64;
        Ok(EvalReport {
            cmc: counts.iter().map(|&c| c as f64 / valid as f64).collect(),
            map,
            per_query_ap,
            num_valid_queries: valid,
            num_dropped_queries: dropped,
            which_feature: queries.which_feature,
        })
    })
}

/// Orders two reports' headline numbers; used by analyses over seeds.
pub fn cmp_map(a: &EvalReport, b: &EvalReport) -> Ordering {
    a.map.total_cmp(&b.map)
}
