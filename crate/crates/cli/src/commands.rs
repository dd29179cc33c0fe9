//! Command implementations. Every command resolves its configuration, writes
//! `run_meta.json` into the output directory, does its work, and writes each
//! report atomically.

use std::fs;
use std::path::Path;

use serde::Serialize;

use privfilter_core::calibration::{
    calibrate, decisions_csv_bytes, flag_batch, read_decisions_csv, CalibrationResult,
    ValidationImage,
};
use privfilter_core::dataset::{
    self, build_split, load_manifest, select_pool, DatasetManifest, ImageRecord, PoolSpec, Role,
    Space, SplitConfig, SplitPlan,
};
use privfilter_core::encoder::{identity_encoder, train, EncoderModel};
use privfilter_core::eval::{
    self, eval_pair_classification, eval_sensitivity, eval_specificity,
    eval_synthetic_duplicates, reference, ConsensusReport, PairClassificationReport,
    SensitivityReport, SpecificityReport, Strategy, SyntheticDuplicateReport,
};
use privfilter_core::similarity::{batch_score, Pool, Query};

use crate::args::*;
use crate::audit::audit_decisions;
use crate::output::{csv_bytes, write_atomic, write_json_atomic, write_run_meta};
use crate::toy::{generate, ToyConfig};
use crate::{render_error, CliError};

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenToy(args) => cmd_gen_toy(args),
        Command::Split(args) => cmd_split(args),
        Command::Train(args) => cmd_train(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Flag(args) => cmd_flag(args),
        Command::Score(args) => cmd_score(args),
        Command::EvalSensitivity(args) => cmd_eval_sensitivity(args),
        Command::EvalSpecificity(args) => cmd_eval_specificity(args),
        Command::EvalConsistency(args) => cmd_eval_consistency(args),
        Command::EvalPairs(args) => cmd_eval_pairs(args),
        Command::Pipeline(args) => cmd_pipeline(args),
        Command::Audit(args) => cmd_audit(args),
    }
}

fn ingest<E: std::error::Error>(e: E) -> CliError {
    CliError::Ingest(render_error(&e))
}

fn evaluate<E: std::error::Error>(e: E) -> CliError {
    CliError::Evaluate(render_error(&e))
}

fn load_manifest_checked(path: &Path) -> Result<DatasetManifest, CliError> {
    load_manifest(path).map_err(ingest)
}

fn load_plan_checked(path: &Path, manifest: &DatasetManifest) -> Result<SplitPlan, CliError> {
    let plan = SplitPlan::read(path).map_err(ingest)?;
    plan.validate_against(manifest).map_err(ingest)?;
    Ok(plan)
}

/// Load the encoder, or fall back to the identity map on the manifest's
/// dimension (the pixel-space variant).
fn load_model_or_identity(
    model_path: Option<&Path>,
    manifest: &DatasetManifest,
) -> Result<EncoderModel, CliError> {
    match model_path {
        Some(path) => {
            let model = EncoderModel::load(path).map_err(ingest)?;
            if model.input_dim() != manifest.dimension() {
                return Err(CliError::Ingest(format!(
                    "model expects dimension {}, dataset has {}",
                    model.input_dim(),
                    manifest.dimension()
                )));
            }
            Ok(model)
        }
        None => Ok(identity_encoder(manifest.dimension(), manifest.space())),
    }
}

fn queries_with_role<'a>(
    manifest: &'a DatasetManifest,
    plan: &SplitPlan,
    role: Role,
) -> Result<Vec<&'a ImageRecord>, CliError> {
    let records = dataset::records_with_role(manifest, plan, role);
    if records.is_empty() {
        return Err(CliError::Evaluate(format!(
            "no images with role {role} under the split plan"
        )));
    }
    Ok(records)
}

fn combined_pool(
    manifest: &DatasetManifest,
    plan: &SplitPlan,
    model: &EncoderModel,
) -> Result<Pool, CliError> {
    let records = select_pool(manifest, plan, &PoolSpec::Combined).map_err(evaluate)?;
    eval::embed_pool(model, &records).map_err(evaluate)
}

fn embedded_queries(
    model: &EncoderModel,
    records: &[&ImageRecord],
) -> Result<Vec<Query>, CliError> {
    eval::embed_queries(model, records).map_err(evaluate)
}

fn validation_images(
    manifest: &DatasetManifest,
    plan: &SplitPlan,
    model: &EncoderModel,
) -> Result<Vec<ValidationImage>, CliError> {
    let records = dataset::records_with_role(manifest, plan, Role::RefValidation);
    if records.is_empty() {
        return Err(CliError::Calibrate(
            "no ref_validation images under the split plan; re-split with a \
             positive --validation-fraction and single-image patients"
                .into(),
        ));
    }
    records
        .iter()
        .map(|rec| {
            Ok(ValidationImage {
                image_id: rec.image_id.clone(),
                patient_id: rec.patient_id.clone(),
                vector: model
                    .encode_f32(&rec.vector)
                    .map_err(|e| CliError::Calibrate(render_error(&e)))?,
            })
        })
        .collect()
}

pub fn cmd_gen_toy(args: GenToyArgs) -> Result<(), CliError> {
    fs::create_dir_all(&args.out).map_err(|e| crate::output::io_error(&args.out, e))?;
    write_run_meta(&args.out, "gen-toy", &args)?;
    let manifest = generate(&ToyConfig {
        patients: args.patients,
        images_per_patient: args.images_per_patient,
        single_patients: args.single_patients,
        dimension: args.dimension,
        cluster_sd: args.cluster_sd,
        near_duplicates: args.near_duplicates,
        nd_noise: args.nd_noise,
        space: args.space.into(),
        seed: args.seed,
    })?;
    let csv_path = args.out.join(format!("{}.csv", args.name));
    let json_path = args.out.join(format!("{}.json", args.name));
    let bin_path = args.out.join(format!("{}.bin", args.name));
    write_atomic(
        &csv_path,
        &dataset::manifest_csv_bytes(&manifest).map_err(ingest)?,
    )?;
    write_atomic(
        &json_path,
        &dataset::sidecar_bytes(&manifest, &format!("{}.bin", args.name)),
    )?;
    write_atomic(&bin_path, &dataset::blob_bytes(&manifest))?;
    println!(
        "gen-toy: wrote {} records (dimension {}, {} synthetic) to {}",
        manifest.len(),
        manifest.dimension(),
        manifest.synthetic_records().len(),
        csv_path.display()
    );
    Ok(())
}

pub fn cmd_split(args: SplitArgs) -> Result<(), CliError> {
    fs::create_dir_all(&args.out).map_err(|e| crate::output::io_error(&args.out, e))?;
    write_run_meta(&args.out, "split", &args)?;
    let manifest = load_manifest_checked(&args.manifest)?;
    let plan = build_split(
        &manifest,
        &SplitConfig {
            seed: args.seed,
            unseen_fraction: args.unseen_fraction,
            validation_fraction: args.validation_fraction,
            sensitivity_cap: args.sensitivity_cap,
        },
    )
    .map_err(ingest)?;
    let path = args.out.join("split.csv");
    write_atomic(&path, &plan.to_csv_bytes())?;
    let mut counts = std::collections::BTreeMap::new();
    for (_, role) in plan.assignments() {
        *counts.entry(role.as_str()).or_insert(0usize) += 1;
    }
    println!("split: wrote {}", path.display());
    for (role, count) in counts {
        println!("  {role}: {count}");
    }
    Ok(())
}

pub fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    fs::create_dir_all(&args.out).map_err(|e| crate::output::io_error(&args.out, e))?;
    write_run_meta(&args.out, "train", &args)?;
    let manifest = load_manifest_checked(&args.manifest)?;
    let plan = load_plan_checked(&args.plan, &manifest)?;
    let config = args.hyper.config(args.seed);
    let outcome = train(&manifest, &plan, args.space.into(), &config)
        .map_err(|e| CliError::Train(render_error(&e)))?;
    let path = args.out.join("model.bin");
    write_atomic(&path, &outcome.model.to_bytes())?;
    println!(
        "train: {} epochs, final mean loss {:.6}, {} degenerate pairs; wrote {}",
        config.epochs,
        outcome.final_mean_loss,
        outcome.degenerate_pairs,
        path.display()
    );
    Ok(())
}

pub fn cmd_calibrate(args: CalibrateArgs) -> Result<(), CliError> {
    fs::create_dir_all(&args.out).map_err(|e| crate::output::io_error(&args.out, e))?;
    write_run_meta(&args.out, "calibrate", &args)?;
    let manifest = load_manifest_checked(&args.manifest)?;
    let plan = load_plan_checked(&args.plan, &manifest)?;
    let model = load_model_or_identity(args.model.as_deref(), &manifest)?;
    let pool = combined_pool(&manifest, &plan, &model)
        .map_err(|e| CliError::Calibrate(e.to_string()))?;
    let validation = validation_images(&manifest, &plan, &model)?;
    let calib = calibrate(&pool, &validation, args.percentile, args.exclude_same_patient)
        .map_err(|e| CliError::Calibrate(render_error(&e)))?;
    let path = args.out.join("calibration.json");
    write_atomic(&path, &calib.to_json_bytes())?;
    println!(
        "calibrate: tau {} at percentile {} from {} validation scores; wrote {}",
        calib.tau,
        calib.percentile,
        calib.validation_scores.len(),
        path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct FlagMeta {
    pool_fingerprint: String,
    calibration_fingerprint: String,
    pool_matches_calibration: bool,
    flagged: usize,
    total: usize,
}

pub fn cmd_flag(args: FlagArgs) -> Result<(), CliError> {
    fs::create_dir_all(&args.out).map_err(|e| crate::output::io_error(&args.out, e))?;
    write_run_meta(&args.out, "flag", &args)?;
    let manifest = load_manifest_checked(&args.manifest)?;
    let plan = load_plan_checked(&args.plan, &manifest)?;
    let model = load_model_or_identity(args.model.as_deref(), &manifest)?;
    let calib = CalibrationResult::load(&args.calibration).map_err(ingest)?;
    let pool = combined_pool(&manifest, &plan, &model)?;
    let records = queries_with_role(&manifest, &plan, args.queries.role())?;
    let queries = embedded_queries(&model, &records)?;
    let decisions = flag_batch(&queries, &pool, &calib, args.aggregate.into()).map_err(evaluate)?;

    let decisions_path = args.out.join("decisions.csv");
    write_atomic(&decisions_path, &decisions_csv_bytes(&decisions))?;
    let flagged = decisions.iter().filter(|d| d.flagged).count();
    // Cross-pool use is legitimate; a fingerprint mismatch is recorded here.
    let meta = FlagMeta {
        pool_fingerprint: pool.fingerprint(),
        calibration_fingerprint: calib.pool_fingerprint.clone(),
        pool_matches_calibration: calib.matches_pool(&pool),
        flagged,
        total: decisions.len(),
    };
    write_json_atomic(&args.out.join("flag_meta.json"), &meta)?;
    println!(
        "flag: {flagged}/{} queries flagged (tau {}); wrote {}",
        decisions.len(),
        calib.tau,
        decisions_path.display()
    );
    Ok(())
}

pub fn cmd_score(args: ScoreArgs) -> Result<(), CliError> {
    fs::create_dir_all(&args.out).map_err(|e| crate::output::io_error(&args.out, e))?;
    write_run_meta(&args.out, "score", &args)?;
    let manifest = load_manifest_checked(&args.manifest)?;
    let plan = load_plan_checked(&args.plan, &manifest)?;
    let model = load_model_or_identity(args.model.as_deref(), &manifest)?;
    let spec = match (&args.same_patient, args.pool) {
        (Some(patient), _) => PoolSpec::SamePatient(patient.clone()),
        (None, PoolArg::Combined) => PoolSpec::Combined,
        (None, PoolArg::ReferenceTrain) => PoolSpec::ReferenceTrain,
    };
    let pool_records = select_pool(&manifest, &plan, &spec).map_err(evaluate)?;
    let pool = eval::embed_pool(&model, &pool_records).map_err(evaluate)?;
    let records = queries_with_role(&manifest, &plan, args.queries.role())?;
    let queries = embedded_queries(&model, &records)?;
    let results = batch_score(&queries, &pool).map_err(evaluate)?;

    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| {
            vec![
                r.query_id.clone(),
                r.max_score.to_string(),
                r.argmax_image_id.clone(),
                r.argmax_patient_id.clone(),
                r.mean_score.to_string(),
                r.pool_size.to_string(),
            ]
        })
        .collect();
    let path = args.out.join("scores.csv");
    write_atomic(
        &path,
        &csv_bytes(
            &[
                "query_id",
                "max_score",
                "argmax_image_id",
                "argmax_patient_id",
                "mean_score",
                "pool_size",
            ],
            &rows,
        ),
    )?;
    println!("score: wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

fn sensitivity_csv(report: &SensitivityReport) -> Vec<u8> {
    csv_bytes(
        &["strategy", "flagged_count", "total", "flag_rate"],
        &[vec![
            report.strategy.as_str().to_string(),
            report.flagged_count.to_string(),
            report.total.to_string(),
            report.flag_rate.to_string(),
        ]],
    )
}

#[derive(Serialize)]
struct SensitivityJson<'a> {
    reports: &'a [SensitivityReport],
    reference_full_scale: reference::FullScaleReference,
}

fn write_sensitivity_reports(
    out: &Path,
    reports: &[SensitivityReport],
) -> Result<(), CliError> {
    for report in reports {
        let path = out.join(format!("sensitivity_{}.csv", report.strategy.as_str()));
        write_atomic(&path, &sensitivity_csv(report))?;
    }
    write_json_atomic(
        &out.join("sensitivity.json"),
        &SensitivityJson {
            reports,
            reference_full_scale: reference::FULL_SCALE,
        },
    )
}

pub fn cmd_eval_sensitivity(args: EvalSensitivityArgs) -> Result<(), CliError> {
    fs::create_dir_all(&args.out).map_err(|e| crate::output::io_error(&args.out, e))?;
    write_run_meta(&args.out, "eval-sensitivity", &args)?;
    let manifest = load_manifest_checked(&args.manifest)?;
    let plan = load_plan_checked(&args.plan, &manifest)?;
    let model = load_model_or_identity(args.model.as_deref(), &manifest)?;
    let calib = CalibrationResult::load(&args.calibration).map_err(ingest)?;
    let mut reports = Vec::new();
    for strategy in args.strategy.strategies() {
        let report =
            eval_sensitivity(&manifest, &plan, &model, &calib, strategy).map_err(evaluate)?;
        println!(
            "sensitivity[{}]: {}/{} flagged ({:.1}%)",
            strategy,
            report.flagged_count,
            report.total,
            report.flag_rate * 100.0
        );
        reports.push(report);
    }
    write_sensitivity_reports(&args.out, &reports)
}

#[derive(Serialize)]
struct SpecificityJson<'a> {
    report: &'a SpecificityReport,
    reference_full_scale: reference::FullScaleReference,
}

fn specificity_csv(report: &SpecificityReport) -> Vec<u8> {
    csv_bytes(
        &["false_positive_count", "total", "fp_rate"],
        &[vec![
            report.false_positive_count.to_string(),
            report.total.to_string(),
            report.fp_rate.to_string(),
        ]],
    )
}

pub fn cmd_eval_specificity(args: EvalSpecificityArgs) -> Result<(), CliError> {
    fs::create_dir_all(&args.out).map_err(|e| crate::output::io_error(&args.out, e))?;
    write_run_meta(&args.out, "eval-specificity", &args)?;
    let manifest = load_manifest_checked(&args.manifest)?;
    let plan = load_plan_checked(&args.plan, &manifest)?;
    let model = load_model_or_identity(args.model.as_deref(), &manifest)?;
    let calib = CalibrationResult::load(&args.calibration).map_err(ingest)?;
    let report = eval_specificity(&manifest, &plan, &model, &calib).map_err(evaluate)?;
    println!(
        "specificity: {}/{} unseen-patient images flagged ({:.1}% false positives)",
        report.false_positive_count,
        report.total,
        report.fp_rate * 100.0
    );
    write_atomic(&args.out.join("specificity.csv"), &specificity_csv(&report))?;
    write_json_atomic(
        &args.out.join("specificity.json"),
        &SpecificityJson {
            report: &report,
            reference_full_scale: reference::FULL_SCALE,
        },
    )
}

#[derive(Serialize)]
struct ConsensusJson<'a> {
    report: &'a ConsensusReport,
    reference_full_scale: reference::FullScaleReference,
}

fn write_consensus_reports(out: &Path, report: &ConsensusReport) -> Result<(), CliError> {
    let flag_rows: Vec<Vec<String>> = report
        .flag_vote_histogram
        .iter()
        .enumerate()
        .map(|(votes, images)| vec![votes.to_string(), images.to_string()])
        .collect();
    write_atomic(
        &out.join("consensus_flags.csv"),
        &csv_bytes(&["flag_votes", "images"], &flag_rows),
    )?;
    let attr_rows: Vec<Vec<String>> = report
        .attribution_agreement_histogram
        .iter()
        .enumerate()
        .map(|(i, images)| vec![(i + 1).to_string(), images.to_string()])
        .collect();
    write_atomic(
        &out.join("consensus_attribution.csv"),
        &csv_bytes(&["agreement", "images"], &attr_rows),
    )?;
    write_json_atomic(
        &out.join("consensus.json"),
        &ConsensusJson {
            report,
            reference_full_scale: reference::FULL_SCALE,
        },
    )
}

pub fn cmd_eval_consistency(args: EvalConsistencyArgs) -> Result<(), CliError> {
    fs::create_dir_all(&args.out).map_err(|e| crate::output::io_error(&args.out, e))?;
    write_run_meta(&args.out, "eval-consistency", &args)?;
    let manifest = load_manifest_checked(&args.manifest)?;
    let plan = load_plan_checked(&args.plan, &manifest)?;
    let queries = queries_with_role(&manifest, &plan, args.queries.role())?;
    let configs: Vec<_> = (0..args.n_filters)
        .map(|i| args.hyper.config(args.seed.wrapping_add(i as u64)))
        .collect();
    let report = eval::eval_consistency(
        &manifest,
        &plan,
        args.space.into(),
        &configs,
        &queries,
        args.percentile,
    )
    .map_err(evaluate)?;
    println!(
        "consistency: {} filters on {} images; unanimous flagged {}, unanimous safe {}, \
         unanimous attribution {}",
        report.n_filters,
        report.images.len(),
        report.unanimous_flagged,
        report.unanimous_safe,
        report.unanimous_attribution
    );
    write_consensus_reports(&args.out, &report)
}

#[derive(Serialize)]
struct PairMetricsJson<'a> {
    report: &'a PairClassificationReport,
    reference_full_scale: reference::FullScaleReference,
}

pub fn cmd_eval_pairs(args: EvalPairsArgs) -> Result<(), CliError> {
    fs::create_dir_all(&args.out).map_err(|e| crate::output::io_error(&args.out, e))?;
    write_run_meta(&args.out, "eval-pairs", &args)?;
    let manifest = load_manifest_checked(&args.manifest)?;
    let plan = load_plan_checked(&args.plan, &manifest)?;
    let model = load_model_or_identity(args.model.as_deref(), &manifest)?;
    let threshold = match (&args.calibration, args.threshold) {
        (Some(path), _) => CalibrationResult::load(path).map_err(ingest)?.tau,
        (None, Some(t)) => t,
        (None, None) => 0.5,
    };
    let report =
        eval_pair_classification(&manifest, &plan, &model, threshold).map_err(evaluate)?;
    println!(
        "pairs: AUC {:.4}, precision {:.4}, recall {:.4} at threshold {}",
        report.auc, report.precision, report.recall, report.threshold_used
    );
    write_json_atomic(
        &args.out.join("pair_metrics.json"),
        &PairMetricsJson {
            report: &report,
            reference_full_scale: reference::FULL_SCALE,
        },
    )
}

#[derive(Serialize)]
struct SyntheticJson<'a> {
    report: &'a SyntheticDuplicateReport,
    reference_full_scale: reference::FullScaleReference,
}

fn write_synthetic_reports(
    out: &Path,
    report: &SyntheticDuplicateReport,
) -> Result<(), CliError> {
    let rows: Vec<Vec<String>> = report.leak_list.iter().map(|id| vec![id.clone()]).collect();
    write_atomic(&out.join("leak_list.csv"), &csv_bytes(&["image_id"], &rows))?;
    write_json_atomic(
        &out.join("synthetic_duplicates.json"),
        &SyntheticJson {
            report,
            reference_full_scale: reference::FULL_SCALE,
        },
    )
}

pub fn cmd_pipeline(args: PipelineArgs) -> Result<(), CliError> {
    fs::create_dir_all(&args.out).map_err(|e| crate::output::io_error(&args.out, e))?;
    write_run_meta(&args.out, "pipeline", &args)?;
    let space: Space = args.space.into();

    println!("[1/6] ingest: {}", args.manifest.display());
    let manifest = load_manifest_checked(&args.manifest)?;

    println!("[2/6] split (seed {})", args.seed);
    let plan = build_split(
        &manifest,
        &SplitConfig {
            seed: args.seed,
            unseen_fraction: args.unseen_fraction,
            validation_fraction: args.validation_fraction,
            sensitivity_cap: args.sensitivity_cap,
        },
    )
    .map_err(ingest)?;
    write_atomic(&args.out.join("split.csv"), &plan.to_csv_bytes())?;

    println!("[3/6] encoder ({space})");
    let model = match space {
        Space::Pixel => identity_encoder(manifest.dimension(), Space::Pixel),
        Space::Latent => {
            let config = args.hyper.config(args.seed);
            let outcome = train(&manifest, &plan, Space::Latent, &config)
                .map_err(|e| CliError::Train(render_error(&e)))?;
            println!("      final mean loss {:.6}", outcome.final_mean_loss);
            outcome.model
        }
    };
    write_atomic(&args.out.join("model.bin"), &model.to_bytes())?;

    println!("[4/6] calibrate (percentile {})", args.percentile);
    let pool = combined_pool(&manifest, &plan, &model)
        .map_err(|e| CliError::Calibrate(e.to_string()))?;
    let validation = validation_images(&manifest, &plan, &model)?;
    let calib = calibrate(&pool, &validation, args.percentile, args.exclude_same_patient)
        .map_err(|e| CliError::Calibrate(render_error(&e)))?;
    write_atomic(&args.out.join("calibration.json"), &calib.to_json_bytes())?;
    println!("      tau {}", calib.tau);

    let synthetic = manifest.synthetic_records();
    if !synthetic.is_empty() {
        println!("[5/6] flag {} synthetic images", synthetic.len());
        let queries = embedded_queries(&model, &synthetic)?;
        let decisions =
            flag_batch(&queries, &pool, &calib, args.aggregate.into()).map_err(evaluate)?;
        write_atomic(&args.out.join("decisions.csv"), &decisions_csv_bytes(&decisions))?;
        if args.audit {
            let rows = read_decisions_csv(&args.out.join("decisions.csv")).map_err(ingest)?;
            let embedded: Vec<(&ImageRecord, Vec<f64>)> = synthetic
                .iter()
                .map(|rec| {
                    Ok((
                        *rec,
                        model.encode_f32(&rec.vector).map_err(evaluate)?,
                    ))
                })
                .collect::<Result<_, CliError>>()?;
            let pool_records = select_pool(&manifest, &plan, &PoolSpec::Combined).map_err(evaluate)?;
            let report = audit_decisions(&rows, &embedded, &pool_records, &model, &calib)?;
            println!("      audit ok: {} decisions verified", report.decisions_checked);
        }
    } else {
        println!("[5/6] flag: no synthetic records, skipping");
    }

    println!("[6/6] evaluate");
    let mut sensitivity_reports = Vec::new();
    for strategy in Strategy::all() {
        let report =
            eval_sensitivity(&manifest, &plan, &model, &calib, strategy).map_err(evaluate)?;
        println!(
            "      sensitivity[{}]: {:.1}%",
            strategy,
            report.flag_rate * 100.0
        );
        sensitivity_reports.push(report);
    }
    write_sensitivity_reports(&args.out, &sensitivity_reports)?;

    let specificity = eval_specificity(&manifest, &plan, &model, &calib).map_err(evaluate)?;
    println!("      specificity fp rate: {:.1}%", specificity.fp_rate * 100.0);
    write_atomic(&args.out.join("specificity.csv"), &specificity_csv(&specificity))?;
    write_json_atomic(
        &args.out.join("specificity.json"),
        &SpecificityJson {
            report: &specificity,
            reference_full_scale: reference::FULL_SCALE,
        },
    )?;

    if !synthetic.is_empty() {
        let report =
            eval_synthetic_duplicates(&manifest, &plan, &model, &calib).map_err(evaluate)?;
        println!(
            "      synthetic duplicates: {} matched, {} leaked",
            report.matched_count,
            report.leak_list.len()
        );
        write_synthetic_reports(&args.out, &report)?;
    }

    let pairs = eval_pair_classification(&manifest, &plan, &model, calib.tau).map_err(evaluate)?;
    println!("      pair AUC: {:.4}", pairs.auc);
    write_json_atomic(
        &args.out.join("pair_metrics.json"),
        &PairMetricsJson {
            report: &pairs,
            reference_full_scale: reference::FULL_SCALE,
        },
    )?;

    if !args.skip_consistency && !synthetic.is_empty() && args.n_filters >= 2 {
        let configs: Vec<_> = (0..args.n_filters)
            .map(|i| args.hyper.config(args.seed.wrapping_add(i as u64)))
            .collect();
        let report = eval::eval_consistency(
            &manifest,
            &plan,
            space,
            &configs,
            &synthetic,
            args.percentile,
        )
        .map_err(evaluate)?;
        println!(
            "      consistency: unanimous on {}/{} images",
            report.unanimous_flagged + report.unanimous_safe,
            report.images.len()
        );
        write_consensus_reports(&args.out, &report)?;
    } else {
        println!("      consistency: skipped");
    }

    println!("pipeline complete: reports in {}", args.out.display());
    Ok(())
}

pub fn cmd_audit(args: AuditArgs) -> Result<(), CliError> {
    if let Some(out) = &args.out {
        fs::create_dir_all(out).map_err(|e| crate::output::io_error(out, e))?;
        write_run_meta(out, "audit", &args)?;
    }
    let manifest = load_manifest_checked(&args.manifest)?;
    let plan = match &args.plan {
        Some(path) => load_plan_checked(path, &manifest)?,
        None => SplitPlan::from_manifest_roles(&manifest),
    };
    let model = load_model_or_identity(args.model.as_deref(), &manifest)?;
    let calib = CalibrationResult::load(&args.calibration).map_err(ingest)?;
    let rows = read_decisions_csv(&args.decisions).map_err(ingest)?;

    let mut queries = Vec::with_capacity(rows.len());
    for row in &rows {
        let rec = manifest.get(&row.query_id).ok_or_else(|| {
            CliError::AuditFailed(format!(
                "decision query `{}` not found in the manifest",
                row.query_id
            ))
        })?;
        queries.push((rec, model.encode_f32(&rec.vector).map_err(evaluate)?));
    }
    let pool_records = select_pool(&manifest, &plan, &PoolSpec::Combined).map_err(evaluate)?;
    let report = audit_decisions(&rows, &queries, &pool_records, &model, &calib)?;
    println!(
        "audit ok: {} decisions verified against {} pool images",
        report.decisions_checked, report.pool_size
    );
    if let Some(out) = &args.out {
        write_json_atomic(&out.join("audit_report.json"), &report)?;
    }
    Ok(())
}
