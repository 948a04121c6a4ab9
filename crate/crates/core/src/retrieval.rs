//! Geodesic ground truth, exact cosine search and Recall@N.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::Descriptor;
use crate::manifest::{check_coord, Manifest, Record, Split};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
/// Database items within this distance of a query count as correct.
pub const DEFAULT_MATCH_THRESHOLD_M: f64 = 25.0;

/// Haversine great-circle distance in metres between `(lat, lon)` pairs in degrees.
pub fn geodistance(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    check_coord(a.0, a.1)?;
    check_coord(b.0, b.1)?;
    let (p1, p2) = (a.0.to_radians(), b.0.to_radians());
    let dp = p2 - p1;
    let dl = (b.1 - a.1).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    Ok(2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: u64,
    pub similarity: f64,
}

/// Highest similarity first; equal similarities by ascending id.
fn rank(a: &Hit, b: &Hit) -> Ordering {
    b.similarity.total_cmp(&a.similarity).then(a.id.cmp(&b.id))
}

/// Exact top-`k` by dot product (cosine on unit vectors) for every query.
/// `k` larger than the database is clamped.
pub fn search(queries: &[Descriptor], database: &[(u64, Descriptor)], k: usize) -> Result<Vec<Vec<Hit>>> {
    let k = if k > database.len() {
        log::warn!("k = {k} exceeds database size {}; clamping", database.len());
        database.len()
    } else {
        k
    };
    let dim = database.first().map(|(_, d)| d.dim());
    for d in queries.iter().chain(database.iter().map(|(_, d)| d)) {
        if Some(d.dim()) != dim {
            return Err(Error::ShapeMismatch {
                axis: "descriptor dim",
                expected: dim.unwrap_or(0),
                actual: d.dim(),
            });
        }
    }
    Ok(queries
        .par_iter()
        .map(|q| {
            let mut hits: Vec<Hit> = database
                .iter()
                .map(|(id, d)| Hit {
                    id: *id,
                    similarity: q.dot(d),
                })
                .collect();
            if k < hits.len() {
                hits.select_nth_unstable_by(k, rank);
                hits.truncate(k);
            }
            hits.sort_by(rank);
            hits
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: u64,
    pub top: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallResult {
    pub dataset: String,
    pub n_values: Vec<usize>,
    pub recalls: Vec<f64>,
    pub threshold_m: f64,
    pub evaluated: usize,
    /// Queries with no correct database item anywhere; left out of the denominator.
    pub excluded: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_query: Option<Vec<QueryResult>>,
}

impl RecallResult {
    pub fn recall_at(&self, n: usize) -> Option<f64> {
        self.n_values.iter().position(|&v| v == n).map(|i| self.recalls[i])
    }
}

/// Same place id, or within `threshold_m`.
pub fn is_match(a: &Record, b: &Record, threshold_m: f64) -> Result<bool> {
    if let (Some(x), Some(y)) = (a.place_id, b.place_id) {
        if x == y {
            return Ok(true);
        }
    }
    Ok(geodistance(a.coord(), b.coord())? <= threshold_m)
}

/// `results[i]` holds the ranked database ids for `query_ids[i]`.
pub fn recall_at_n(
    query_ids: &[u64],
    results: &[Vec<u64>],
    manifest: &Manifest,
    n_values: &[usize],
    threshold_m: f64,
    keep_per_query: bool,
) -> Result<RecallResult> {
    if query_ids.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    if query_ids.len() != results.len() {
        return Err(Error::InvalidShape(format!(
            "{} queries but {} result lists",
            query_ids.len(),
            results.len()
        )));
    }
    let by_id: std::collections::HashMap<u64, &Record> = manifest.records.iter().map(|r| (r.id, r)).collect();
    let lookup = |id: u64| {
        by_id
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Config(format!("id {id} not in manifest")))
    };
    let database: Vec<&Record> = manifest.split(Split::Database).collect();
    let mut hits = vec![0usize; n_values.len()];
    let mut excluded = Vec::new();
    let mut evaluated = 0usize;
    for (&qid, ranked) in query_ids.iter().zip(results) {
        let q = lookup(qid)?;
        let mut has_truth = false;
        for d in &database {
            if is_match(q, d, threshold_m)? {
                has_truth = true;
                break;
            }
        }
        if !has_truth {
            excluded.push(qid);
            continue;
        }
        evaluated += 1;
        let mut first = None;
        for (rank, &id) in ranked.iter().enumerate() {
            if is_match(q, lookup(id)?, threshold_m)? {
                first = Some(rank);
                break;
            }
        }
        if let Some(r) = first {
            for (h, &n) in hits.iter_mut().zip(n_values) {
                if r < n {
                    *h += 1;
                }
            }
        }
    }
    if evaluated == 0 {
        return Err(Error::EmptyQuerySet);
    }
    Ok(RecallResult {
        dataset: manifest.name.clone(),
        n_values: n_values.to_vec(),
        recalls: hits.iter().map(|&h| h as f64 / evaluated as f64).collect(),
        threshold_m,
        evaluated,
        excluded,
        per_query: keep_per_query.then(|| {
            query_ids
                .iter()
                .zip(results)
                .map(|(&query_id, top)| QueryResult {
                    query_id,
                    top: top.clone(),
                })
                .collect()
        }),
    })
}

/// Searches every query against the database and scores Recall@N.
pub fn evaluate(
    manifest: &Manifest,
    descriptors: &std::collections::HashMap<u64, Descriptor>,
    n_values: &[usize],
    threshold_m: f64,
    keep_per_query: bool,
) -> Result<RecallResult> {
    let get = |id: u64| {
        descriptors
            .get(&id)
            .cloned()
            .ok_or_else(|| Error::Config(format!("no descriptor for id {id}")))
    };
    let database = manifest
        .split(Split::Database)
        .map(|r| Ok((r.id, get(r.id)?)))
        .collect::<Result<Vec<_>>>()?;
    let query_ids: Vec<u64> = manifest.split(Split::Query).map(|r| r.id).collect();
    let queries = query_ids.iter().map(|&id| get(id)).collect::<Result<Vec<_>>>()?;
    let k = n_values.iter().copied().max().unwrap_or(1);
    let ranked: Vec<Vec<u64>> = search(&queries, &database, k)?
        .into_iter()
        .map(|hs| hs.into_iter().map(|h| h.id).collect())
        .collect();
    recall_at_n(&query_ids, &ranked, manifest, n_values, threshold_m, keep_per_query)
}

/// Reference Recall@N: full similarity sort per query and a plain double
/// loop over ground truth. Slow and obvious on purpose; used to cross-check
/// [`evaluate`].
pub fn brute_force_recall(
    manifest: &Manifest,
    descriptors: &std::collections::HashMap<u64, Descriptor>,
    n_values: &[usize],
    threshold_m: f64,
) -> Result<Vec<f64>> {
    let db: Vec<&Record> = manifest.split(Split::Database).collect();
    let mut hits = vec![0usize; n_values.len()];
    let mut evaluated = 0usize;
    for q in manifest.split(Split::Query) {
        let qd = descriptors
            .get(&q.id)
            .ok_or_else(|| Error::Config(format!("no descriptor for id {}", q.id)))?;
        let mut scored = Vec::with_capacity(db.len());
        let mut any = false;
        for d in &db {
            let dd = descriptors
                .get(&d.id)
                .ok_or_else(|| Error::Config(format!("no descriptor for id {}", d.id)))?;
            let correct = is_match(q, d, threshold_m)?;
            any |= correct;
            scored.push((qd.dot(dd), d.id, correct));
        }
        if !any {
            continue;
        }
        evaluated += 1;
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (i, &n) in n_values.iter().enumerate() {
            if scored.iter().take(n).any(|s| s.2) {
                hits[i] += 1;
            }
        }
    }
    if evaluated == 0 {
        return Err(Error::EmptyQuerySet);
    }
    Ok(hits.iter().map(|&h| h as f64 / evaluated as f64).collect())
}
