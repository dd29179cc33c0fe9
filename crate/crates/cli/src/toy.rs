//! Deterministic toy-data generator: every patient is a Gaussian cluster in
//! feature space, and synthetic near-duplicates replay random real vectors
//! with optional noise. A desk-scale stand-in for real imaging corpora.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use privfilter_core::dataset::{DatasetManifest, ImageRecord, Role, Space};

use crate::CliError;

#[derive(Debug, Clone)]
pub struct ToyConfig {
    pub patients: usize,
    pub images_per_patient: usize,
    pub single_patients: usize,
    pub dimension: usize,
    pub cluster_sd: f64,
    pub near_duplicates: usize,
    pub nd_noise: f64,
    pub space: Space,
    pub seed: u64,
}

/// Generate the manifest. Real images start as `ref_train` (the split command
/// assigns final roles); near-duplicates carry `synthetic` plus their source
/// patient.
pub fn generate(config: &ToyConfig) -> Result<DatasetManifest, CliError> {
    if config.patients < 2 {
        return Err(CliError::Usage(format!(
            "--patients must be at least 2, got {}",
            config.patients
        )));
    }
    if config.images_per_patient < 1 {
        return Err(CliError::Usage(
            "--images-per-patient must be at least 1".into(),
        ));
    }
    if config.dimension < 2 {
        return Err(CliError::Usage(format!(
            "--dimension must be at least 2, got {}",
            config.dimension
        )));
    }
    if !(config.cluster_sd.is_finite() && config.cluster_sd >= 0.0)
        || !(config.nd_noise.is_finite() && config.nd_noise >= 0.0)
    {
        return Err(CliError::Usage(
            "--cluster-sd and --nd-noise must be non-negative".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let unit = Normal::new(0.0f64, 1.0).expect("unit normal");
    let jitter = Normal::new(0.0f64, config.cluster_sd.max(f64::MIN_POSITIVE)).expect("jitter");

    let mut records = Vec::new();
    let mut patient_index = 0usize;
    let mut cluster = |rng: &mut ChaCha8Rng, images: usize, records: &mut Vec<ImageRecord>| {
        let patient_id = format!("P{patient_index:04}");
        patient_index += 1;
        let center: Vec<f64> = (0..config.dimension).map(|_| unit.sample(rng)).collect();
        for i in 0..images {
            let vector: Vec<f32> = center
                .iter()
                .map(|c| {
                    let noise = if config.cluster_sd > 0.0 {
                        jitter.sample(rng)
                    } else {
                        0.0
                    };
                    (c + noise) as f32
                })
                .collect();
            records.push(ImageRecord {
                image_id: format!("{patient_id}_I{i:03}"),
                patient_id: patient_id.clone(),
                vector,
                space: config.space,
                role: Role::RefTrain,
                source_patient_id: None,
            });
        }
    };
    for _ in 0..config.patients {
        cluster(&mut rng, config.images_per_patient, &mut records);
    }
    for _ in 0..config.single_patients {
        cluster(&mut rng, 1, &mut records);
    }

    let real_count = records.len();
    let nd_jitter = Normal::new(0.0f64, config.nd_noise.max(f64::MIN_POSITIVE)).expect("nd");
    for q in 0..config.near_duplicates {
        let source = &records[rng.random_range(0..real_count)];
        let vector: Vec<f32> = if config.nd_noise > 0.0 {
            source
                .vector
                .iter()
                .map(|x| (*x as f64 + nd_jitter.sample(&mut rng)) as f32)
                .collect()
        } else {
            source.vector.clone()
        };
        let patient = source.patient_id.clone();
        records.push(ImageRecord {
            image_id: format!("SYN{q:05}"),
            patient_id: patient.clone(),
            vector,
            space: config.space,
            role: Role::Synthetic,
            source_patient_id: Some(patient),
        });
    }

    DatasetManifest::new(config.dimension, config.space, records)
        .map_err(|e| CliError::Ingest(e.to_string()))
}
