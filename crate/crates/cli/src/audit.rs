//! Decision auditing against a naive O(Q*P*n) oracle.
//!
//! The oracle recomputes every correlation with a direct per-pair two-pass
//! Pearson, independent of the pre-normalized kernel the pipeline uses, and
//! fails on the first mismatch.

use serde::Serialize;

use privfilter_core::calibration::{CalibrationResult, DecisionRow};
use privfilter_core::dataset::ImageRecord;
use privfilter_core::encoder::EncoderModel;
use privfilter_core::similarity::Aggregate;

use crate::CliError;

/// Score agreement tolerance between the oracle and the pipeline kernel.
pub const SCORE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub decisions_checked: usize,
    pub pool_size: usize,
}

/// Direct two-pass Pearson, kept independent of the core scoring path.
fn naive_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    for (a, b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
    }
    let mut vx = 0.0;
    for a in x {
        vx += (a - mx) * (a - mx);
    }
    let mut vy = 0.0;
    for b in y {
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some((cov / (vx.sqrt() * vy.sqrt())).clamp(-1.0, 1.0))
}

struct NaiveScores {
    max_score: f64,
    argmax_image_id: String,
    argmax_patient_id: String,
    mean_score: f64,
}

fn naive_score(query: &[f64], pool: &[(String, String, Vec<f64>)]) -> Option<NaiveScores> {
    let mut best: Option<(f64, usize)> = None;
    let mut sum = 0.0;
    let mut defined = 0usize;
    for (i, (image_id, _, vector)) in pool.iter().enumerate() {
        let Some(r) = naive_pearson(query, vector) else {
            continue;
        };
        sum += r;
        defined += 1;
        let better = match &best {
            None => true,
            Some((bs, bi)) => r > *bs || (r == *bs && *image_id < pool[*bi].0),
        };
        if better {
            best = Some((r, i));
        }
    }
    let (max_score, argmax) = best?;
    Some(NaiveScores {
        max_score,
        argmax_image_id: pool[argmax].0.clone(),
        argmax_patient_id: pool[argmax].1.clone(),
        mean_score: sum / defined as f64,
    })
}

/// Recompute every decision and compare score, flag rule, and attribution.
pub fn audit_decisions(
    decisions: &[DecisionRow],
    queries: &[(&ImageRecord, Vec<f64>)],
    pool_records: &[&ImageRecord],
    model: &EncoderModel,
    calib: &CalibrationResult,
) -> Result<AuditReport, CliError> {
    let mismatch = |msg: String| CliError::AuditFailed(msg);

    let mut pool = Vec::with_capacity(pool_records.len());
    for rec in pool_records {
        let embedded = model
            .encode_f32(&rec.vector)
            .map_err(|e| CliError::Evaluate(e.to_string()))?;
        pool.push((rec.image_id.clone(), rec.patient_id.clone(), embedded));
    }

    for row in decisions {
        if row.tau != calib.tau {
            return Err(mismatch(format!(
                "tau mismatch for query `{}`: decisions say {}, calibration file says {}",
                row.query_id, row.tau, calib.tau
            )));
        }
        let (_, embedded) = queries
            .iter()
            .find(|(rec, _)| rec.image_id == row.query_id)
            .ok_or_else(|| {
                mismatch(format!(
                    "decision query `{}` not found in the manifest",
                    row.query_id
                ))
            })?;
        let naive = naive_score(embedded, &pool).ok_or_else(|| {
            mismatch(format!(
                "query `{}`: oracle found every correlation undefined",
                row.query_id
            ))
        })?;
        let oracle_score = match row.aggregate {
            Aggregate::Max => naive.max_score,
            Aggregate::Mean => naive.mean_score,
        };
        if (row.score - oracle_score).abs() > SCORE_TOLERANCE {
            return Err(mismatch(format!(
                "score mismatch for query `{}`: recorded {}, oracle {}",
                row.query_id, row.score, oracle_score
            )));
        }
        let expected_flag = row.score > row.tau;
        if row.flagged != expected_flag {
            return Err(mismatch(format!(
                "flag mismatch for query `{}`: recorded {}, rule gives {} (score {}, tau {})",
                row.query_id, row.flagged, expected_flag, row.score, row.tau
            )));
        }
        if row.argmax_patient_id != naive.argmax_patient_id {
            return Err(mismatch(format!(
                "attribution mismatch for query `{}`: recorded `{}`, oracle `{}` (via `{}`)",
                row.query_id, row.argmax_patient_id, naive.argmax_patient_id, naive.argmax_image_id
            )));
        }
    }

    Ok(AuditReport {
        decisions_checked: decisions.len(),
        pool_size: pool.len(),
    })
}
