//! Pearson-correlation scoring of query vectors against reference pools.
//!
//! Pool vectors are centered and unit-normalized once at construction, so each
//! correlation is a single dot product. All accumulation is 64-bit. Pools are
//! immutable and shareable; queries partition freely across workers while the
//! per-query reduction over the pool keeps a fixed sequential order, so batch
//! output is bitwise independent of worker count and chunk size.

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Default number of queries handed to one parallel task.
pub const DEFAULT_CHUNK_SIZE: usize = 64;

/// Numerical slack allowed on |r| before clamping to [-1, 1].
pub const RANGE_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("vectors must have at least 2 components, got {0}")]
    TooShort(usize),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("pool is empty")]
    EmptyPool,
    #[error("pool dimension {pool} does not match query dimension {query}")]
    DimensionMismatch { pool: usize, query: usize },
    #[error("correlation undefined against every pool member (zero-variance data)")]
    AllUndefined,
    #[error("query {index}: {source}")]
    Query {
        index: usize,
        #[source]
        source: Box<SimilarityError>,
    },
}

/// Fixed-order dot product: four independent accumulators over the unrolled
/// body, combined in a constant pattern. Same bits for the same inputs, on any
/// worker, at any chunk size.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let blocks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..blocks {
        let base = i * 4;
        s0 += a[base] * b[base];
        s1 += a[base + 1] * b[base + 1];
        s2 += a[base + 2] * b[base + 2];
        s3 += a[base + 3] * b[base + 3];
    }
    for i in blocks * 4..n {
        s0 += a[i] * b[i];
    }
    (s0 + s1) + (s2 + s3)
}

/// Center a vector and scale it to unit norm. `None` when the vector has zero
/// variance (all entries equal), which makes its correlations undefined.
pub(crate) fn zscore(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let centered: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let norm = dot(&centered, &centered).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(centered.iter().map(|x| x / norm).collect())
}

/// Sample Pearson correlation of two equal-length slices, clamped to [-1, 1].
///
/// Returns `Ok(None)` when either input has zero variance: the correlation is
/// undefined and callers decide policy. Computed from centered dot products
/// with 64-bit accumulation; the formula is order-stable, so
/// `pearson(x, y)` and `pearson(y, x)` are bitwise equal.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<f64>, SimilarityError> {
    if x.len() != y.len() {
        return Err(SimilarityError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(SimilarityError::TooShort(x.len()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..x.len() {
        let cx = x[i] - mx;
        let cy = y[i] - my;
        sxy += cx * cy;
        sxx += cx * cx;
        syy += cy * cy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    let r = sxy / (sxx * syy).sqrt();
    debug_assert!(r.abs() <= 1.0 + RANGE_SLACK, "raw correlation {r} out of range");
    Ok(Some(r.clamp(-1.0, 1.0)))
}

/// One reference item. `zscored` is `None` when the raw vector had zero
/// variance; such items are tagged undefined at ingest, never win a max, and
/// are excluded from means.
#[derive(Debug, Clone)]
pub struct PoolItem {
    image_id: String,
    patient_id: String,
    zscored: Option<Vec<f64>>,
}

impl PoolItem {
    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn is_defined(&self) -> bool {
        self.zscored.is_some()
    }
}

/// An immutable, pre-normalized reference pool.
#[derive(Debug, Clone)]
pub struct Pool {
    dimension: usize,
    items: Vec<PoolItem>,
}

impl Pool {
    /// Build from `(image_id, patient_id, vector)` entries, preserving order.
    pub fn build(
        entries: impl IntoIterator<Item = (String, String, Vec<f64>)>,
    ) -> Result<Pool, SimilarityError> {
        let mut items = Vec::new();
        let mut dimension = None;
        for (image_id, patient_id, vector) in entries {
            let dim = *dimension.get_or_insert(vector.len());
            if vector.len() != dim {
                return Err(SimilarityError::LengthMismatch {
                    left: dim,
                    right: vector.len(),
                });
            }
            if dim < 2 {
                return Err(SimilarityError::TooShort(dim));
            }
            items.push(PoolItem {
                image_id,
                patient_id,
                zscored: zscore(&vector),
            });
        }
        let dimension = dimension.ok_or(SimilarityError::EmptyPool)?;
        Ok(Pool { dimension, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn items(&self) -> &[PoolItem] {
        &self.items
    }

    /// SHA-256 over the sorted image ids, as lowercase hex. Stable across
    /// runs and pool orderings.
    pub fn fingerprint(&self) -> String {
        let mut ids: Vec<&str> = self.items.iter().map(|i| i.image_id.as_str()).collect();
        ids.sort_unstable();
        let mut hasher = Sha256::new();
        for id in ids {
            hasher.update(id.as_bytes());
            hasher.update(b"\n");
        }
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }
}

/// A named query vector.
#[derive(Debug, Clone)]
pub struct Query {
    pub id: String,
    pub vector: Vec<f64>,
}

impl Query {
    pub fn new(id: impl Into<String>, vector: Vec<f64>) -> Self {
        Query {
            id: id.into(),
            vector,
        }
    }
}

/// Which pooled statistic drives a decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    Max,
    Mean,
}

impl Aggregate {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregate::Max => "max",
            Aggregate::Mean => "mean",
        }
    }
}

impl std::fmt::Display for Aggregate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Aggregate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max" => Ok(Aggregate::Max),
            "mean" => Ok(Aggregate::Mean),
            other => Err(format!("unknown aggregate `{other}`")),
        }
    }
}

/// Scores of one query against a pool. Both aggregates are always computed;
/// `mean_score` averages only the defined correlations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreResult {
    pub query_id: String,
    pub max_score: f64,
    pub argmax_image_id: String,
    pub argmax_patient_id: String,
    pub mean_score: f64,
    pub defined_count: usize,
    pub pool_size: usize,
}

impl ScoreResult {
    pub fn aggregate_score(&self, aggregate: Aggregate) -> f64 {
        match aggregate {
            Aggregate::Max => self.max_score,
            Aggregate::Mean => self.mean_score,
        }
    }
}

/// Score one query against the whole pool.
///
/// The maximum breaks exact ties toward the lexicographically smallest
/// image_id. Undefined correlations never win the max and are excluded from
/// the mean; if every correlation is undefined the call fails with
/// [`SimilarityError::AllUndefined`].
pub fn score_against_pool(
    query_id: &str,
    query: &[f64],
    pool: &Pool,
) -> Result<ScoreResult, SimilarityError> {
    if pool.is_empty() {
        return Err(SimilarityError::EmptyPool);
    }
    if query.len() != pool.dimension {
        return Err(SimilarityError::DimensionMismatch {
            pool: pool.dimension,
            query: query.len(),
        });
    }
    let qz = zscore(query).ok_or(SimilarityError::AllUndefined)?;
    score_normalized(query_id, &qz, pool, None)
}

/// Same as [`score_against_pool`] but skipping pool items of one patient;
/// used by leave-one-patient-out calibration.
pub fn score_against_pool_excluding(
    query_id: &str,
    query: &[f64],
    pool: &Pool,
    exclude_patient: &str,
) -> Result<ScoreResult, SimilarityError> {
    if pool.is_empty() {
        return Err(SimilarityError::EmptyPool);
    }
    if query.len() != pool.dimension {
        return Err(SimilarityError::DimensionMismatch {
            pool: pool.dimension,
            query: query.len(),
        });
    }
    let qz = zscore(query).ok_or(SimilarityError::AllUndefined)?;
    score_normalized(query_id, &qz, pool, Some(exclude_patient))
}

/// Fixed sequential pass over the pool. This is the only scoring path, so a
/// batch result is bitwise identical to per-query calls.
fn score_normalized(
    query_id: &str,
    qz: &[f64],
    pool: &Pool,
    exclude_patient: Option<&str>,
) -> Result<ScoreResult, SimilarityError> {
    let mut best: Option<(f64, usize)> = None;
    let mut sum = 0.0f64;
    let mut defined = 0usize;
    for (i, item) in pool.items.iter().enumerate() {
        if let Some(skip) = exclude_patient {
            if item.patient_id == skip {
                continue;
            }
        }
        let Some(pz) = &item.zscored else { continue };
        let raw = dot(qz, pz);
        debug_assert!(raw.abs() <= 1.0 + RANGE_SLACK, "raw correlation {raw} out of range");
        let r = raw.clamp(-1.0, 1.0);
        sum += r;
        defined += 1;
        let better = match &best {
            None => true,
            Some((bs, bi)) => {
                r > *bs || (r == *bs && pool.items[i].image_id < pool.items[*bi].image_id)
            }
        };
        if better {
            best = Some((r, i));
        }
    }
    let (max_score, argmax) = best.ok_or(SimilarityError::AllUndefined)?;
    Ok(ScoreResult {
        query_id: query_id.to_string(),
        max_score,
        argmax_image_id: pool.items[argmax].image_id.clone(),
        argmax_patient_id: pool.items[argmax].patient_id.clone(),
        mean_score: sum / defined as f64,
        defined_count: defined,
        pool_size: pool.len(),
    })
}

/// Score many queries, preserving input order. Numerically identical to
/// mapping [`score_against_pool`] over the queries.
pub fn batch_score(queries: &[Query], pool: &Pool) -> Result<Vec<ScoreResult>, SimilarityError> {
    batch_score_chunked(queries, pool, DEFAULT_CHUNK_SIZE)
}

/// Running reduction state of one query; the update sequence over pool items
/// is exactly the one [`score_against_pool`] performs.
struct QueryState {
    best: Option<(f64, usize)>,
    sum: f64,
    defined: usize,
}

impl QueryState {
    #[inline]
    fn update(&mut self, r: f64, index: usize, pool: &Pool) {
        self.sum += r;
        self.defined += 1;
        let better = match &self.best {
            None => true,
            Some((bs, bi)) => {
                r > *bs || (r == *bs && pool.items[index].image_id < pool.items[*bi].image_id)
            }
        };
        if better {
            self.best = Some((r, index));
        }
    }
}

/// [`batch_score`] with an explicit queries-per-task chunk size. Output is
/// bitwise identical for every chunk size and worker count.
///
/// Each chunk is scored as a cache block: one pass over the pool, reusing
/// every pool vector against the whole chunk while it is cache-resident.
/// Per query this performs the same dot products and the same reduction
/// sequence as [`score_against_pool`], so the tiling never changes a bit.
pub fn batch_score_chunked(
    queries: &[Query],
    pool: &Pool,
    chunk_size: usize,
) -> Result<Vec<ScoreResult>, SimilarityError> {
    let chunk = chunk_size.max(1);
    let per_query: Vec<Result<ScoreResult, SimilarityError>> = queries
        .par_chunks(chunk)
        .flat_map_iter(|block| score_query_block(block, pool))
        .collect();
    let mut out = Vec::with_capacity(per_query.len());
    for (index, result) in per_query.into_iter().enumerate() {
        match result {
            Ok(r) => out.push(r),
            Err(e) => {
                return Err(SimilarityError::Query {
                    index,
                    source: Box::new(e),
                })
            }
        }
    }
    Ok(out)
}

fn score_query_block(
    block: &[Query],
    pool: &Pool,
) -> Vec<Result<ScoreResult, SimilarityError>> {
    if pool.is_empty() {
        return block
            .iter()
            .map(|_| Err(SimilarityError::EmptyPool))
            .collect();
    }
    // Pre-normalize the block; per-query failures stay per-query.
    let prepared: Vec<Result<Vec<f64>, SimilarityError>> = block
        .iter()
        .map(|q| {
            if q.vector.len() != pool.dimension {
                return Err(SimilarityError::DimensionMismatch {
                    pool: pool.dimension,
                    query: q.vector.len(),
                });
            }
            zscore(&q.vector).ok_or(SimilarityError::AllUndefined)
        })
        .collect();
    let mut states: Vec<QueryState> = block
        .iter()
        .map(|_| QueryState {
            best: None,
            sum: 0.0,
            defined: 0,
        })
        .collect();

    for (i, item) in pool.items.iter().enumerate() {
        let Some(pz) = &item.zscored else { continue };
        for (qz, state) in prepared.iter().zip(states.iter_mut()) {
            let Ok(qz) = qz else { continue };
            let raw = dot(qz, pz);
            debug_assert!(raw.abs() <= 1.0 + RANGE_SLACK, "raw correlation {raw} out of range");
            state.update(raw.clamp(-1.0, 1.0), i, pool);
        }
    }

    block
        .iter()
        .zip(prepared)
        .zip(states)
        .map(|((q, prep), state)| {
            prep?;
            let (max_score, argmax) = state.best.ok_or(SimilarityError::AllUndefined)?;
            Ok(ScoreResult {
                query_id: q.id.clone(),
                max_score,
                argmax_image_id: pool.items[argmax].image_id.clone(),
                argmax_patient_id: pool.items[argmax].patient_id.clone(),
                mean_score: state.sum / state.defined as f64,
                defined_count: state.defined,
                pool_size: pool.len(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook two-pass oracle: means first, then covariance and variances in
    /// separate loops. Independent of the production arithmetic.
    fn oracle_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        if vx == 0.0 || vy == 0.0 {
            return None;
        }
        Some((cov / (vx.sqrt() * vy.sqrt())).clamp(-1.0, 1.0))
    }

    fn pool_of(entries: &[(&str, &str, &[f64])]) -> Pool {
        Pool::build(
            entries
                .iter()
                .map(|(id, p, v)| (id.to_string(), p.to_string(), v.to_vec())),
        )
        .unwrap()
    }

    #[test]
    fn positive_affine_image_is_one() {
        let r = pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap().unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn reversal_is_minus_one() {
        let r = pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap().unwrap();
        assert_eq!(r, -1.0);
    }

    #[test]
    fn zero_variance_is_undefined() {
        assert!(pearson(&[5.0, 5.0, 5.0], &[1.0, 2.0, 3.0])
            .unwrap()
            .is_none());
        assert!(pearson(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0])
            .unwrap()
            .is_none());
    }

    #[test]
    fn too_short_rejected() {
        assert!(matches!(
            pearson(&[1.0], &[2.0]),
            Err(SimilarityError::TooShort(1))
        ));
    }

    #[test]
    fn random_pairs_match_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let x: Vec<f64> = (0..16).map(|_| rng.random_range(-4.0..4.0)).collect();
            let y: Vec<f64> = (0..16).map(|_| rng.random_range(-4.0..4.0)).collect();
            let got = pearson(&x, &y).unwrap().unwrap();
            let want = oracle_pearson(&x, &y).unwrap();
            assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
        }
    }

    #[test]
    fn exact_pool_member_scores_one() {
        let pool = pool_of(&[
            ("m", "p0", &[1.0, 4.0, 2.0, 8.0]),
            ("n", "p1", &[3.0, -1.0, 0.5, 2.0]),
        ]);
        let r = score_against_pool("q", &[1.0, 4.0, 2.0, 8.0], &pool).unwrap();
        assert_eq!(r.max_score, 1.0);
        assert_eq!(r.argmax_image_id, "m");
        assert_eq!(r.argmax_patient_id, "p0");
        assert_eq!(r.pool_size, 2);
    }

    #[test]
    fn ties_break_to_smallest_image_id() {
        let v = [2.0, 7.0, 1.0, 5.0];
        let pool = pool_of(&[("b", "p1", &v), ("a", "p0", &v)]);
        let r = score_against_pool("q", &v, &pool).unwrap();
        assert_eq!(r.max_score, 1.0);
        assert_eq!(r.argmax_image_id, "a");
    }

    #[test]
    fn three_member_pool_matches_brute_force() {
        let pool_vecs: [(&str, &str, &[f64]); 3] = [
            ("a", "p0", &[0.5, 2.0, -1.0, 3.0]),
            ("b", "p1", &[4.0, 1.0, 1.5, -2.0]),
            ("c", "p1", &[1.0, 1.0, 2.0, 1.0]),
        ];
        let pool = pool_of(&pool_vecs);
        let q = [2.5, -0.5, 1.0, 0.75];
        let got = score_against_pool("q", &q, &pool).unwrap();

        let mut best = f64::NEG_INFINITY;
        let mut best_id = "";
        let mut sum = 0.0;
        let mut count = 0;
        for (id, _, v) in &pool_vecs {
            if let Some(r) = oracle_pearson(&q, v) {
                if r > best {
                    best = r;
                    best_id = id;
                }
                sum += r;
                count += 1;
            }
        }
        assert!((got.max_score - best).abs() < 1e-12);
        assert_eq!(got.argmax_image_id, best_id);
        assert!((got.mean_score - sum / count as f64).abs() < 1e-12);
    }

    #[test]
    fn undefined_pool_members_are_skipped() {
        let pool = pool_of(&[
            ("flat", "p0", &[3.0, 3.0, 3.0, 3.0]),
            ("ok", "p1", &[1.0, 2.0, 3.0, 4.0]),
        ]);
        let r = score_against_pool("q", &[1.0, 2.0, 3.0, 4.0], &pool).unwrap();
        assert_eq!(r.argmax_image_id, "ok");
        assert_eq!(r.defined_count, 1);
        assert_eq!(r.mean_score, 1.0);
    }

    #[test]
    fn all_undefined_pool_is_reported() {
        let pool = pool_of(&[("flat", "p0", &[3.0, 3.0, 3.0, 3.0])]);
        let err = score_against_pool("q", &[1.0, 2.0, 3.0, 4.0], &pool).unwrap_err();
        assert!(matches!(err, SimilarityError::AllUndefined));
    }

    #[test]
    fn degenerate_query_is_reported() {
        let pool = pool_of(&[("ok", "p0", &[1.0, 2.0, 3.0, 4.0])]);
        let err = score_against_pool("q", &[2.0, 2.0, 2.0, 2.0], &pool).unwrap_err();
        assert!(matches!(err, SimilarityError::AllUndefined));
    }

    #[test]
    fn batch_matches_sequential_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pool = Pool::build((0..50).map(|i| {
            let v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            (format!("img{i:03}"), format!("pat{:02}", i % 7), v)
        }))
        .unwrap();
        let queries: Vec<Query> = (0..100)
            .map(|i| {
                let v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
                Query::new(format!("q{i:03}"), v)
            })
            .collect();
        let batch = batch_score(&queries, &pool).unwrap();
        for (q, r) in queries.iter().zip(&batch) {
            let single = score_against_pool(&q.id, &q.vector, &pool).unwrap();
            assert_eq!(r, &single);
        }
    }

    #[test]
    fn chunk_size_does_not_change_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pool = Pool::build((0..20).map(|i| {
            let v: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            (format!("img{i}"), format!("pat{}", i % 3), v)
        }))
        .unwrap();
        let queries: Vec<Query> = (0..33)
            .map(|i| {
                let v: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
                Query::new(format!("q{i}"), v)
            })
            .collect();
        let one = batch_score_chunked(&queries, &pool, 1).unwrap();
        let sixty_four = batch_score_chunked(&queries, &pool, 64).unwrap();
        assert_eq!(one, sixty_four);
    }

    #[test]
    fn empty_query_list_gives_empty_output() {
        let pool = pool_of(&[("a", "p0", &[1.0, 2.0, 3.0])]);
        let out = batch_score(&[], &pool).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn per_query_error_carries_index() {
        let pool = pool_of(&[("a", "p0", &[1.0, 2.0, 3.0])]);
        let queries = vec![
            Query::new("good", vec![3.0, 1.0, 2.0]),
            Query::new("flat", vec![5.0, 5.0, 5.0]),
        ];
        let err = batch_score(&queries, &pool).unwrap_err();
        match err {
            SimilarityError::Query { index, source } => {
                assert_eq!(index, 1);
                assert!(matches!(*source, SimilarityError::AllUndefined));
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn empty_pool_rejected_at_build() {
        let err = Pool::build(Vec::<(String, String, Vec<f64>)>::new()).unwrap_err();
        assert!(matches!(err, SimilarityError::EmptyPool));
    }

    #[test]
    fn fingerprint_is_order_independent() {
        let a = pool_of(&[("x", "p", &[1.0, 2.0]), ("y", "p", &[2.0, 1.0])]);
        let b = pool_of(&[("y", "p", &[2.0, 1.0]), ("x", "p", &[1.0, 2.0])]);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }

    fn spread_vector(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f64..10.0, n..=n)
            .prop_filter("needs variance", |v| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|x| (x - m).powi(2)).sum::<f64>() > 1e-6
            })
    }

    proptest! {
        #[test]
        fn affine_invariance(
            x in spread_vector(12),
            y in spread_vector(12),
            alpha in 0.1f64..8.0,
            beta in -5.0f64..5.0,
        ) {
            let base = pearson(&x, &y).unwrap().unwrap();
            let scaled: Vec<f64> = x.iter().map(|v| alpha * v + beta).collect();
            let same = pearson(&scaled, &y).unwrap().unwrap();
            prop_assert!((base - same).abs() < 1e-9);
            let flipped: Vec<f64> = x.iter().map(|v| -alpha * v + beta).collect();
            let neg = pearson(&flipped, &y).unwrap().unwrap();
            prop_assert!((base + neg).abs() < 1e-9);
        }

        #[test]
        fn symmetry_is_bitwise(x in spread_vector(9), y in spread_vector(9)) {
            let a = pearson(&x, &y).unwrap();
            let b = pearson(&y, &x).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn scores_stay_in_range(x in spread_vector(16), y in spread_vector(16)) {
            if let Some(r) = pearson(&x, &y).unwrap() {
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }

        // Small-pool equivalence against the naive per-pair oracle.
        #[test]
        fn pool_scores_match_naive_oracle(
            pool_vecs in proptest::collection::vec(spread_vector(8), 1..12),
            query in spread_vector(8),
        ) {
            let pool = Pool::build(pool_vecs.iter().enumerate().map(|(i, v)| {
                (format!("img{i:02}"), format!("pat{i:02}"), v.clone())
            })).unwrap();
            let got = score_against_pool("q", &query, &pool).unwrap();
            let oracle: Vec<f64> = pool_vecs
                .iter()
                .map(|v| oracle_pearson(&query, v).unwrap())
                .collect();
            let best = oracle.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mean = oracle.iter().sum::<f64>() / oracle.len() as f64;
            prop_assert!((got.max_score - best).abs() < 1e-12);
            prop_assert!((got.mean_score - mean).abs() < 1e-12);
        }
    }
}
