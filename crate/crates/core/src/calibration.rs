//! Threshold calibration and flag decisions.
//!
//! The threshold tau is the nearest-rank percentile of the per-validation-image
//! maximum correlations against the training pool. A query is flagged exactly
//! when its aggregate score strictly exceeds tau; a score equal to tau is
//! accepted. [`CalibrationResult`] is immutable; batch flagging parallelizes
//! across queries under the scoring module's determinism contract.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::similarity::{
    batch_score, score_against_pool, score_against_pool_excluding, Aggregate, Pool, Query,
    ScoreResult, SimilarityError,
};

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("percentile {0} must lie within [0, 100]")]
    BadPercentile(f64),
    #[error("validation image `{image_id}`: correlation undefined against every pool member")]
    UndefinedValidationScore { image_id: String },
    #[error("validation image `{image_id}`: excluding patient `{patient_id}` empties the pool")]
    ExclusionEmptiesPool {
        image_id: String,
        patient_id: String,
    },
    #[error("query `{query_id}`: aggregate score undefined")]
    UndefinedAggregate { query_id: String },
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("calibration file parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("decision file line {line}: {message}")]
    DecisionParse { line: usize, message: String },
}

/// A calibrated threshold plus the score distribution it came from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub tau: f64,
    pub percentile: f64,
    /// SHA-256 fingerprint of the pool's image ids.
    pub pool_fingerprint: String,
    /// Per-validation-image max correlations, sorted ascending.
    pub validation_scores: Vec<f64>,
}

impl CalibrationResult {
    pub fn matches_pool(&self, pool: &Pool) -> bool {
        self.pool_fingerprint == pool.fingerprint()
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("calibration serialization");
        out.push(b'\n');
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibrationError> {
        fs::write(path, self.to_json_bytes()).map_err(|e| CalibrationError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        let raw = fs::read_to_string(path).map_err(|e| CalibrationError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(serde_json::from_str(&raw)?)
    }
}

/// 0-based index of the nearest-rank percentile in an ascending list of
/// `count` values: the smallest 1-based i with 100*i >= percentile*count,
/// clamped to [1, count].
///
/// The defining inequality is evaluated on the once-rounded product
/// `percentile * count`, so integer percentiles give the exact integer rank
/// (e.g. percentile 95 of 20 values is index 18, the 19th value).
pub fn nearest_rank_index(percentile: f64, count: usize) -> usize {
    debug_assert!(count > 0);
    let t = percentile * count as f64;
    let mut i = (t / 100.0).ceil() as i64;
    while i > 1 && (i - 1) as f64 * 100.0 >= t {
        i -= 1;
    }
    while ((i as f64) * 100.0) < t {
        i += 1;
    }
    (i.clamp(1, count as i64) as usize) - 1
}

/// Nearest-rank percentile of a score list. Returns the threshold and the
/// ascending-sorted scores.
pub fn tau_from_scores(
    scores: &[f64],
    percentile: f64,
) -> Result<(f64, Vec<f64>), CalibrationError> {
    if scores.is_empty() {
        return Err(CalibrationError::EmptyValidation);
    }
    if !(0.0..=100.0).contains(&percentile) || !percentile.is_finite() {
        return Err(CalibrationError::BadPercentile(percentile));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let tau = sorted[nearest_rank_index(percentile, sorted.len())];
    Ok((tau, sorted))
}

/// A validation image: id, owning patient, and its vector in the space the
/// pool was built in.
#[derive(Debug, Clone)]
pub struct ValidationImage {
    pub image_id: String,
    pub patient_id: String,
    pub vector: Vec<f64>,
}

/// Calibrate tau from the max correlation of every validation image against
/// the training pool. With `exclude_same_patient`, pool items of the
/// validation image's own patient are skipped when scoring it.
pub fn calibrate(
    pool: &Pool,
    validation: &[ValidationImage],
    percentile: f64,
    exclude_same_patient: bool,
) -> Result<CalibrationResult, CalibrationError> {
    if validation.is_empty() {
        return Err(CalibrationError::EmptyValidation);
    }
    let mut scores = Vec::with_capacity(validation.len());
    for img in validation {
        let result = if exclude_same_patient {
            score_against_pool_excluding(&img.image_id, &img.vector, pool, &img.patient_id)
        } else {
            score_against_pool(&img.image_id, &img.vector, pool)
        };
        match result {
            Ok(r) => scores.push(r.max_score),
            Err(SimilarityError::AllUndefined) => {
                // Distinguish "no items left after exclusion" from genuinely
                // undefined correlations.
                if exclude_same_patient
                    && pool.items().iter().all(|i| i.patient_id() == img.patient_id)
                {
                    return Err(CalibrationError::ExclusionEmptiesPool {
                        image_id: img.image_id.clone(),
                        patient_id: img.patient_id.clone(),
                    });
                }
                return Err(CalibrationError::UndefinedValidationScore {
                    image_id: img.image_id.clone(),
                });
            }
            Err(e) => return Err(e.into()),
        }
    }
    let (tau, validation_scores) = tau_from_scores(&scores, percentile)?;
    Ok(CalibrationResult {
        tau,
        percentile,
        pool_fingerprint: pool.fingerprint(),
        validation_scores,
    })
}

/// One flagging decision. `score` is the aggregate value compared to tau;
/// `max_score` is always carried for attribution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlagDecision {
    pub query_id: String,
    pub aggregate: Aggregate,
    pub score: f64,
    pub max_score: f64,
    pub argmax_image_id: String,
    pub argmax_patient_id: String,
    pub tau: f64,
    pub flagged: bool,
}

fn decision_from_score(result: ScoreResult, aggregate: Aggregate, tau: f64) -> FlagDecision {
    let score = result.aggregate_score(aggregate);
    FlagDecision {
        query_id: result.query_id,
        aggregate,
        score,
        max_score: result.max_score,
        argmax_image_id: result.argmax_image_id,
        argmax_patient_id: result.argmax_patient_id,
        tau,
        // Strictly above tau flags; equality accepts.
        flagged: score > tau,
    }
}

/// Flag one query against a pool using a calibrated threshold.
pub fn flag(
    query: &Query,
    pool: &Pool,
    calib: &CalibrationResult,
    aggregate: Aggregate,
) -> Result<FlagDecision, CalibrationError> {
    let result = score_against_pool(&query.id, &query.vector, pool).map_err(|e| match e {
        SimilarityError::AllUndefined => CalibrationError::UndefinedAggregate {
            query_id: query.id.clone(),
        },
        other => other.into(),
    })?;
    Ok(decision_from_score(result, aggregate, calib.tau))
}

/// Flag many queries; order-preserving and chunking-invariant.
pub fn flag_batch(
    queries: &[Query],
    pool: &Pool,
    calib: &CalibrationResult,
    aggregate: Aggregate,
) -> Result<Vec<FlagDecision>, CalibrationError> {
    let scored = batch_score(queries, pool).map_err(|e| match e {
        SimilarityError::Query { index, source } => match *source {
            SimilarityError::AllUndefined => CalibrationError::UndefinedAggregate {
                query_id: queries[index].id.clone(),
            },
            other => CalibrationError::Similarity(SimilarityError::Query {
                index,
                source: Box::new(other),
            }),
        },
        other => other.into(),
    })?;
    Ok(scored
        .into_iter()
        .map(|r| decision_from_score(r, aggregate, calib.tau))
        .collect())
}

/// Decisions CSV: `query_id,aggregate,score,argmax_patient_id,tau,flagged`.
pub fn decisions_csv_bytes(decisions: &[FlagDecision]) -> Vec<u8> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record([
            "query_id",
            "aggregate",
            "score",
            "argmax_patient_id",
            "tau",
            "flagged",
        ])
        .expect("vec writer");
    for d in decisions {
        writer
            .write_record([
                d.query_id.as_str(),
                d.aggregate.as_str(),
                &d.score.to_string(),
                d.argmax_patient_id.as_str(),
                &d.tau.to_string(),
                &d.flagged.to_string(),
            ])
            .expect("vec writer");
    }
    writer.into_inner().expect("vec writer")
}

/// A decision row as read back from CSV (no argmax_image_id in the file).
#[derive(Debug, Clone)]
pub struct DecisionRow {
    pub query_id: String,
    pub aggregate: Aggregate,
    pub score: f64,
    pub argmax_patient_id: String,
    pub tau: f64,
    pub flagged: bool,
}

pub fn read_decisions_csv(path: &Path) -> Result<Vec<DecisionRow>, CalibrationError> {
    let raw = fs::read_to_string(path).map_err(|e| CalibrationError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(raw.as_bytes());
    let mut rows = Vec::new();
    for (i, result) in reader.records().enumerate() {
        let line = i + 2;
        let parse_err = |message: String| CalibrationError::DecisionParse { line, message };
        let row = result.map_err(|e| parse_err(e.to_string()))?;
        let field = |idx: usize, name: &str| {
            row.get(idx)
                .map(str::to_string)
                .ok_or_else(|| parse_err(format!("missing column {name}")))
        };
        rows.push(DecisionRow {
            query_id: field(0, "query_id")?,
            aggregate: field(1, "aggregate")?
                .parse()
                .map_err(|e: String| parse_err(e))?,
            score: field(2, "score")?
                .parse()
                .map_err(|e| parse_err(format!("bad score: {e}")))?,
            argmax_patient_id: field(3, "argmax_patient_id")?,
            tau: field(4, "tau")?
                .parse()
                .map_err(|e| parse_err(format!("bad tau: {e}")))?,
            flagged: field(5, "flagged")?
                .parse()
                .map_err(|e| parse_err(format!("bad flagged: {e}")))?,
        });
    }
    Ok(rows)
}
