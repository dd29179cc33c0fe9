//! Evaluation harness: sensitivity under three pool strategies, synthetic
//! near-duplicate detection, specificity on unseen patients, N-seed
//! consistency/consensus, and encoder pair-classification metrics.
//!
//! Every report is a pure function of its inputs. Independent filters train
//! sequentially as whole units; scoring batches parallelize underneath.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::calibration::{
    calibrate, flag_batch, CalibrationError, CalibrationResult, ValidationImage,
};
use crate::dataset::{
    records_with_role, select_pool, DatasetError, DatasetManifest, ImageRecord, PoolSpec, Role,
    Space, SplitPlan,
};
use crate::encoder::{identity_encoder, train, EncoderError, EncoderModel, TrainConfig};
use crate::similarity::{pearson, Aggregate, Pool, Query, SimilarityError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error("no images with role {0} under the split plan")]
    EmptyQuerySet(Role),
    #[error("patient `{0}` has no ref_train images to form a same-patient pool")]
    EmptySamePatientPool(String),
    #[error("synthetic record `{0}` is missing source_patient_id")]
    MissingSourcePatient(String),
    #[error("consistency evaluation needs at least 2 filters, got {0}")]
    TooFewFilters(usize),
    #[error("filter {index} (seed {seed}) failed: {source}")]
    FilterFailed {
        index: usize,
        seed: u64,
        #[source]
        source: Box<EvalError>,
    },
    #[error("vote row for `{image_id}` has {got} entries, expected {expected}")]
    VoteArity {
        image_id: String,
        got: usize,
        expected: usize,
    },
    #[error("pair classification needs both a positive and a negative pair")]
    MissingPairClass,
    #[error("AUC needs at least one positive and one negative score")]
    DegenerateAuc,
    #[error("non-finite score passed to AUC")]
    NonFiniteScore,
}

/// Pool strategy for the sensitivity protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Holdout images against the combined training pool, max aggregation.
    Overall,
    /// Against the same patient's training images only, max aggregation.
    SamePatientMax,
    /// Same pool, mean aggregation.
    SamePatientMean,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Overall => "overall",
            Strategy::SamePatientMax => "same_patient_max",
            Strategy::SamePatientMean => "same_patient_mean",
        }
    }

    pub fn aggregate(self) -> Aggregate {
        match self {
            Strategy::Overall | Strategy::SamePatientMax => Aggregate::Max,
            Strategy::SamePatientMean => Aggregate::Mean,
        }
    }

    pub fn all() -> [Strategy; 3] {
        [
            Strategy::Overall,
            Strategy::SamePatientMax,
            Strategy::SamePatientMean,
        ]
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SensitivityReport {
    pub strategy: Strategy,
    pub flagged_count: usize,
    pub total: usize,
    pub flag_rate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpecificityReport {
    pub false_positive_count: usize,
    pub total: usize,
    pub fp_rate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SyntheticDuplicateReport {
    pub total: usize,
    pub flagged_count: usize,
    pub matched_count: usize,
    pub matched_flagged: usize,
    pub matched_unflagged: usize,
    /// Matched-but-unflagged image ids: near-duplicates the filter let through.
    pub leak_list: Vec<String>,
}

/// One filter's verdict on one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterVote {
    pub flagged: bool,
    pub attributed_patient: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ImageConsensus {
    pub image_id: String,
    /// Number of filters that flagged this image (0..=N).
    pub flag_votes: usize,
    /// Size of the largest subset of filters naming the same patient (1..=N).
    pub attribution_agreement: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConsensusReport {
    pub n_filters: usize,
    pub images: Vec<ImageConsensus>,
    /// Bucket v holds the number of images flagged by exactly v filters.
    pub flag_vote_histogram: Vec<usize>,
    /// Bucket a-1 holds the number of images whose largest same-attribution
    /// subset has size a.
    pub attribution_agreement_histogram: Vec<usize>,
    pub unanimous_flagged: usize,
    pub unanimous_safe: usize,
    pub unanimous_attribution: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairClassificationReport {
    pub auc: f64,
    pub precision: f64,
    pub recall: f64,
    pub threshold_used: f64,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
    /// Pairs skipped because an embedding had zero variance.
    pub degenerate_pairs: usize,
}

/// Encode pool records into a [`Pool`].
pub fn embed_pool(model: &EncoderModel, records: &[&ImageRecord]) -> Result<Pool, EvalError> {
    let mut entries = Vec::with_capacity(records.len());
    for rec in records {
        let embedding = model.encode_f32(&rec.vector)?;
        entries.push((rec.image_id.clone(), rec.patient_id.clone(), embedding));
    }
    Ok(Pool::build(entries)?)
}

/// Encode query records.
pub fn embed_queries(
    model: &EncoderModel,
    records: &[&ImageRecord],
) -> Result<Vec<Query>, EvalError> {
    records
        .iter()
        .map(|rec| {
            Ok(Query::new(
                rec.image_id.clone(),
                model.encode_f32(&rec.vector)?,
            ))
        })
        .collect()
}

/// Flag rate on holdout images of training patients under one pool strategy.
pub fn eval_sensitivity(
    manifest: &DatasetManifest,
    plan: &SplitPlan,
    model: &EncoderModel,
    calib: &CalibrationResult,
    strategy: Strategy,
) -> Result<SensitivityReport, EvalError> {
    let holdout = records_with_role(manifest, plan, Role::HoldoutSeenPatient);
    if holdout.is_empty() {
        return Err(EvalError::EmptyQuerySet(Role::HoldoutSeenPatient));
    }
    let total = holdout.len();
    let flagged_count = match strategy {
        Strategy::Overall => {
            let pool = embed_pool(model, &select_pool(manifest, plan, &PoolSpec::Combined)?)?;
            let queries = embed_queries(model, &holdout)?;
            flag_batch(&queries, &pool, calib, Aggregate::Max)?
                .iter()
                .filter(|d| d.flagged)
                .count()
        }
        Strategy::SamePatientMax | Strategy::SamePatientMean => {
            let mut by_patient: BTreeMap<&str, Vec<&ImageRecord>> = BTreeMap::new();
            for rec in &holdout {
                by_patient.entry(rec.patient_id.as_str()).or_default().push(rec);
            }
            let mut flagged = 0usize;
            for (patient, queries) in by_patient {
                let records =
                    select_pool(manifest, plan, &PoolSpec::SamePatient(patient.to_string()))?;
                if records.is_empty() {
                    return Err(EvalError::EmptySamePatientPool(patient.to_string()));
                }
                let pool = embed_pool(model, &records)?;
                let queries = embed_queries(model, &queries)?;
                flagged += flag_batch(&queries, &pool, calib, strategy.aggregate())?
                    .iter()
                    .filter(|d| d.flagged)
                    .count();
            }
            flagged
        }
    };
    Ok(SensitivityReport {
        strategy,
        flagged_count,
        total,
        flag_rate: flagged_count as f64 / total as f64,
    })
}

/// Attribute and flag synthetic near-duplicates against the combined pool.
/// "Matched" means the argmax patient equals the record's source patient.
pub fn eval_synthetic_duplicates(
    manifest: &DatasetManifest,
    plan: &SplitPlan,
    model: &EncoderModel,
    calib: &CalibrationResult,
) -> Result<SyntheticDuplicateReport, EvalError> {
    let synthetic = manifest.synthetic_records();
    if synthetic.is_empty() {
        return Err(EvalError::EmptyQuerySet(Role::Synthetic));
    }
    let mut sources = Vec::with_capacity(synthetic.len());
    for rec in &synthetic {
        match &rec.source_patient_id {
            Some(s) => sources.push(s.as_str()),
            None => return Err(EvalError::MissingSourcePatient(rec.image_id.clone())),
        }
    }
    let pool = embed_pool(model, &select_pool(manifest, plan, &PoolSpec::Combined)?)?;
    let queries = embed_queries(model, &synthetic)?;
    let decisions = flag_batch(&queries, &pool, calib, Aggregate::Max)?;

    let mut report = SyntheticDuplicateReport {
        total: decisions.len(),
        flagged_count: 0,
        matched_count: 0,
        matched_flagged: 0,
        matched_unflagged: 0,
        leak_list: Vec::new(),
    };
    for (decision, source) in decisions.iter().zip(&sources) {
        if decision.flagged {
            report.flagged_count += 1;
        }
        if decision.argmax_patient_id == *source {
            report.matched_count += 1;
            if decision.flagged {
                report.matched_flagged += 1;
            } else {
                report.matched_unflagged += 1;
                report.leak_list.push(decision.query_id.clone());
            }
        }
    }
    Ok(report)
}

/// False-positive rate on patients entirely absent from training.
pub fn eval_specificity(
    manifest: &DatasetManifest,
    plan: &SplitPlan,
    model: &EncoderModel,
    calib: &CalibrationResult,
) -> Result<SpecificityReport, EvalError> {
    let unseen = records_with_role(manifest, plan, Role::HoldoutUnseenPatient);
    if unseen.is_empty() {
        return Err(EvalError::EmptyQuerySet(Role::HoldoutUnseenPatient));
    }
    let pool = embed_pool(model, &select_pool(manifest, plan, &PoolSpec::Combined)?)?;
    let queries = embed_queries(model, &unseen)?;
    let decisions = flag_batch(&queries, &pool, calib, Aggregate::Max)?;
    let false_positive_count = decisions.iter().filter(|d| d.flagged).count();
    Ok(SpecificityReport {
        false_positive_count,
        total: decisions.len(),
        fp_rate: false_positive_count as f64 / decisions.len() as f64,
    })
}

/// One complete filter: an encoder plus its own calibrated threshold.
pub struct Filter {
    pub model: EncoderModel,
    pub calibration: CalibrationResult,
}

/// Build one filter for `space`: train an encoder (latent) or take the
/// identity map (pixel), then calibrate its own tau on the plan's validation
/// images against the combined pool.
pub fn build_filter(
    manifest: &DatasetManifest,
    plan: &SplitPlan,
    space: Space,
    config: &TrainConfig,
    percentile: f64,
) -> Result<Filter, EvalError> {
    let model = match space {
        Space::Pixel => identity_encoder(manifest.dimension(), Space::Pixel),
        Space::Latent => train(manifest, plan, Space::Latent, config)?.model,
    };
    let pool = embed_pool(&model, &select_pool(manifest, plan, &PoolSpec::Combined)?)?;
    let validation_records = records_with_role(manifest, plan, Role::RefValidation);
    if validation_records.is_empty() {
        return Err(EvalError::EmptyQuerySet(Role::RefValidation));
    }
    let mut validation = Vec::with_capacity(validation_records.len());
    for rec in &validation_records {
        validation.push(ValidationImage {
            image_id: rec.image_id.clone(),
            patient_id: rec.patient_id.clone(),
            vector: model.encode_f32(&rec.vector)?,
        });
    }
    let calibration = calibrate(&pool, &validation, percentile, false)?;
    Ok(Filter { model, calibration })
}

/// Train N filters differing only in seed and measure their agreement on the
/// given queries (flag votes and attributed patients).
pub fn eval_consistency(
    manifest: &DatasetManifest,
    plan: &SplitPlan,
    space: Space,
    configs: &[TrainConfig],
    queries: &[&ImageRecord],
    percentile: f64,
) -> Result<ConsensusReport, EvalError> {
    if configs.len() < 2 {
        return Err(EvalError::TooFewFilters(configs.len()));
    }
    if queries.is_empty() {
        return Err(EvalError::EmptyQuerySet(Role::Synthetic));
    }
    let n = configs.len();
    let mut votes: Vec<(String, Vec<FilterVote>)> = queries
        .iter()
        .map(|r| (r.image_id.clone(), Vec::with_capacity(n)))
        .collect();
    for (index, config) in configs.iter().enumerate() {
        let mut run = || -> Result<(), EvalError> {
            let filter = build_filter(manifest, plan, space, config, percentile)?;
            let pool = embed_pool(
                &filter.model,
                &select_pool(manifest, plan, &PoolSpec::Combined)?,
            )?;
            let embedded = embed_queries(&filter.model, queries)?;
            let decisions = flag_batch(&embedded, &pool, &filter.calibration, Aggregate::Max)?;
            for (slot, decision) in votes.iter_mut().zip(decisions) {
                slot.1.push(FilterVote {
                    flagged: decision.flagged,
                    attributed_patient: decision.argmax_patient_id,
                });
            }
            Ok(())
        };
        run().map_err(|e| EvalError::FilterFailed {
            index,
            seed: config.seed,
            source: Box::new(e),
        })?;
    }
    build_consensus(n, &votes)
}

/// Reduce per-filter votes to consensus counts and histograms. Attribution
/// agreement is the plurality size: the largest subset of filters naming the
/// same patient.
pub fn build_consensus(
    n_filters: usize,
    votes: &[(String, Vec<FilterVote>)],
) -> Result<ConsensusReport, EvalError> {
    if n_filters < 2 {
        return Err(EvalError::TooFewFilters(n_filters));
    }
    let mut images = Vec::with_capacity(votes.len());
    let mut flag_vote_histogram = vec![0usize; n_filters + 1];
    let mut attribution_agreement_histogram = vec![0usize; n_filters];
    let mut unanimous_flagged = 0;
    let mut unanimous_safe = 0;
    let mut unanimous_attribution = 0;

    for (image_id, row) in votes {
        if row.len() != n_filters {
            return Err(EvalError::VoteArity {
                image_id: image_id.clone(),
                got: row.len(),
                expected: n_filters,
            });
        }
        let flag_votes = row.iter().filter(|v| v.flagged).count();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for vote in row {
            *counts.entry(vote.attributed_patient.as_str()).or_insert(0) += 1;
        }
        let attribution_agreement = counts.values().copied().max().unwrap_or(1);

        flag_vote_histogram[flag_votes] += 1;
        attribution_agreement_histogram[attribution_agreement - 1] += 1;
        if flag_votes == n_filters {
            unanimous_flagged += 1;
        }
        if flag_votes == 0 {
            unanimous_safe += 1;
        }
        if attribution_agreement == n_filters {
            unanimous_attribution += 1;
        }
        images.push(ImageConsensus {
            image_id: image_id.clone(),
            flag_votes,
            attribution_agreement,
        });
    }

    Ok(ConsensusReport {
        n_filters,
        images,
        flag_vote_histogram,
        attribution_agreement_histogram,
        unanimous_flagged,
        unanimous_safe,
        unanimous_attribution,
    })
}

/// Tie-corrected rank-statistic AUC (the Mann-Whitney formulation): the
/// probability a random positive scores above a random negative, counting
/// ties as one half.
pub fn mann_whitney_auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    debug_assert_eq!(scores.len(), labels.len());
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore);
    }
    let positives = labels.iter().filter(|l| **l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::DegenerateAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Midranks over tied runs.
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0; // 1-based average rank
        for &idx in &order[i..=j] {
            ranks[idx] = midrank;
        }
        i = j + 1;
    }

    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l)
        .map(|(r, _)| r)
        .sum();
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Pair classification over holdout images: scores are embedding Pearson
/// correlations of all image pairs; positive pairs share a patient.
/// Precision/recall use the strict rule `score > threshold`.
pub fn eval_pair_classification(
    manifest: &DatasetManifest,
    plan: &SplitPlan,
    model: &EncoderModel,
    threshold: f64,
) -> Result<PairClassificationReport, EvalError> {
    let holdout = records_with_role(manifest, plan, Role::HoldoutSeenPatient);
    if holdout.len() < 2 {
        return Err(EvalError::MissingPairClass);
    }
    let embeddings: Vec<Vec<f64>> = holdout
        .iter()
        .map(|rec| model.encode_f32(&rec.vector))
        .collect::<Result<_, _>>()?;

    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut degenerate_pairs = 0usize;
    for i in 0..holdout.len() {
        for j in (i + 1)..holdout.len() {
            match pearson(&embeddings[i], &embeddings[j])? {
                Some(r) => {
                    scores.push(r);
                    labels.push(holdout[i].patient_id == holdout[j].patient_id);
                }
                None => degenerate_pairs += 1,
            }
        }
    }
    let positives = labels.iter().filter(|l| **l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::MissingPairClass);
    }

    let auc = mann_whitney_auc(&scores, &labels)?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (s, l) in scores.iter().zip(&labels) {
        let predicted = *s > threshold;
        match (predicted, *l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = tp as f64 / (tp + fn_) as f64;
    Ok(PairClassificationReport {
        auc,
        precision,
        recall,
        threshold_used: threshold,
        positive_pairs: positives,
        negative_pairs: negatives,
        degenerate_pairs,
    })
}

/// Reference metrics from the published full-scale chest X-ray study these
/// reports mirror. Desk-scale toy datasets are not expected to reproduce
/// them; they are carried in report files for side-by-side comparison.
pub mod reference {
    use serde::Serialize;

    #[derive(Debug, Clone, Copy, Serialize)]
    pub struct RatePair {
        pub pixel: f64,
        pub latent: f64,
    }

    #[derive(Debug, Clone, Copy, Serialize)]
    pub struct FullScaleReference {
        pub sensitivity_overall: RatePair,
        pub sensitivity_same_patient_max: RatePair,
        pub sensitivity_same_patient_mean: RatePair,
        pub specificity_fp_rate: RatePair,
        pub synthetic_total: u64,
        pub synthetic_matched: u64,
        pub synthetic_matched_flagged: u64,
        pub synthetic_matched_unflagged: u64,
        pub consensus_unanimous_fraction: RatePair,
        pub consensus_unanimous_safe_latent: u64,
        pub consensus_unanimous_flagged_latent: u64,
        pub consensus_unanimous_safe_pixel: u64,
        pub consensus_unanimous_flagged_pixel: u64,
        pub attribution_full_consensus_pixel: u64,
        pub attribution_full_consensus_latent: u64,
        pub pair_auc: f64,
        pub pair_recall: f64,
        pub pair_precision: f64,
    }

    /// Flagging rates and consensus counts reported for N=10 filters over
    /// 100 000 synthetic chest X-rays.
    pub const FULL_SCALE: FullScaleReference = FullScaleReference {
        sensitivity_overall: RatePair {
            pixel: 0.885,
            latent: 0.758,
        },
        sensitivity_same_patient_max: RatePair {
            pixel: 0.598,
            latent: 0.087,
        },
        sensitivity_same_patient_mean: RatePair {
            pixel: 0.242,
            latent: 0.009,
        },
        specificity_fp_rate: RatePair {
            pixel: 0.843,
            latent: 0.768,
        },
        synthetic_total: 100_000,
        synthetic_matched: 8_656,
        synthetic_matched_flagged: 7_881,
        synthetic_matched_unflagged: 775,
        consensus_unanimous_fraction: RatePair {
            pixel: 0.290,
            latent: 0.404,
        },
        consensus_unanimous_safe_latent: 39_341,
        consensus_unanimous_flagged_latent: 1_022,
        consensus_unanimous_safe_pixel: 7_534,
        consensus_unanimous_flagged_pixel: 21_453,
        attribution_full_consensus_pixel: 110,
        attribution_full_consensus_latent: 0,
        pair_auc: 0.9993,
        pair_recall: 0.9907,
        pair_precision: 0.9873,
    };
}
