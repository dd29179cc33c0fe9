//! Vector dataset ingestion and role assignment.
//!
//! A dataset is a CSV manifest (`image_id,patient_id,role,source_patient_id`),
//! a JSON sidecar carrying `{dimension, space, blob_path, count}`, and a binary
//! vector blob. Loading is single-writer; a loaded [`DatasetManifest`] is
//! immutable afterward and safe to share across worker threads.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Magic bytes opening a vector blob.
pub const BLOB_MAGIC: [u8; 4] = *b"PVF1";

/// Feature space a dataset (and any encoder trained on it) lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Pixel,
    Latent,
}

impl Space {
    pub fn as_str(self) -> &'static str {
        match self {
            Space::Pixel => "pixel",
            Space::Latent => "latent",
        }
    }
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Space {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pixel" => Ok(Space::Pixel),
            "latent" => Ok(Space::Latent),
            other => Err(DatasetError::UnknownSpace(other.to_string())),
        }
    }
}

/// Role an image plays in the evaluation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    RefTrain,
    RefValidation,
    HoldoutSeenPatient,
    HoldoutUnseenPatient,
    Synthetic,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::RefTrain => "ref_train",
            Role::RefValidation => "ref_validation",
            Role::HoldoutSeenPatient => "holdout_seen_patient",
            Role::HoldoutUnseenPatient => "holdout_unseen_patient",
            Role::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ref_train" => Ok(Role::RefTrain),
            "ref_validation" => Ok(Role::RefValidation),
            "holdout_seen_patient" => Ok(Role::HoldoutSeenPatient),
            "holdout_unseen_patient" => Ok(Role::HoldoutUnseenPatient),
            "synthetic" => Ok(Role::Synthetic),
            other => Err(DatasetError::UnknownRole(other.to_string())),
        }
    }
}

/// One image: a fixed-dimension feature vector plus identity metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub patient_id: String,
    pub vector: Vec<f32>,
    pub space: Space,
    pub role: Role,
    /// Only set for `role = synthetic` near-duplicates: the patient whose
    /// training data the generator replayed.
    pub source_patient_id: Option<String>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest parse error: {0}")]
    Csv(#[from] csv::Error),
    #[error("sidecar parse error: {0}")]
    Sidecar(#[from] serde_json::Error),
    #[error("bad blob header: {0}")]
    BlobHeader(String),
    #[error("truncated blob: manifest lists {expected} records but blob holds {actual}")]
    TruncatedBlob { expected: usize, actual: usize },
    #[error("blob holds {actual} records but manifest lists only {expected}")]
    OversizedBlob { expected: usize, actual: usize },
    #[error("dimension mismatch: sidecar says {sidecar} but blob header says {blob}")]
    DimensionMismatch { sidecar: usize, blob: usize },
    #[error("dataset dimension must be at least 2, got {0}")]
    DimensionTooSmall(usize),
    #[error("record {index} (`{image_id}`): vector has {got} components, dataset dimension is {expected}")]
    RecordDimension {
        index: usize,
        image_id: String,
        got: usize,
        expected: usize,
    },
    #[error("duplicate image_id `{image_id}` at record {index}")]
    DuplicateImageId { index: usize, image_id: String },
    #[error("non-finite vector entry at record {index} (`{image_id}`), component {component}")]
    NonFiniteValue {
        index: usize,
        image_id: String,
        component: usize,
    },
    #[error("record {index} (`{image_id}`): empty patient_id")]
    EmptyPatientId { index: usize, image_id: String },
    #[error("record {index} (`{image_id}`): source_patient_id set but role is {role}")]
    SourcePatientOnNonSynthetic {
        index: usize,
        image_id: String,
        role: Role,
    },
    #[error("record {index} (`{image_id}`): space {got} does not match dataset space {expected}")]
    SpaceMismatch {
        index: usize,
        image_id: String,
        got: Space,
        expected: Space,
    },
    #[error("record count mismatch: manifest has {manifest} rows, sidecar says {sidecar}")]
    CountMismatch { manifest: usize, sidecar: usize },
    #[error("unknown role `{0}`")]
    UnknownRole(String),
    #[error("unknown space `{0}`")]
    UnknownSpace(String),
    #[error("unknown patient_id `{0}`")]
    UnknownPatient(String),
    #[error("no multi-image patient available for the sensitivity split")]
    NoMultiImagePatient,
    #[error("split plan is missing image `{0}`")]
    PlanMissingImage(String),
    #[error("split plan references unknown image `{0}`")]
    PlanUnknownImage(String),
    #[error("split plan line {0}: expected `image_id,role`")]
    PlanParse(usize),
    #[error("split plan header must start with `# seed=<u64>`")]
    PlanHeader,
    #[error("invalid {name}={value}: must lie within [0, 1]")]
    InvalidFraction { name: &'static str, value: f64 },
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    dimension: u32,
    space: Space,
    blob_path: String,
    count: u32,
}

/// A validated, immutable dataset: metadata rows plus memory-resident vectors.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    dimension: usize,
    space: Space,
    records: Vec<ImageRecord>,
    index: HashMap<String, usize>,
}

impl DatasetManifest {
    /// Build a manifest from in-memory records, validating every invariant.
    pub fn new(
        dimension: usize,
        space: Space,
        records: Vec<ImageRecord>,
    ) -> Result<Self, DatasetError> {
        if dimension < 2 {
            return Err(DatasetError::DimensionTooSmall(dimension));
        }
        let mut index = HashMap::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            if rec.vector.len() != dimension {
                return Err(DatasetError::RecordDimension {
                    index: i,
                    image_id: rec.image_id.clone(),
                    got: rec.vector.len(),
                    expected: dimension,
                });
            }
            if let Some(c) = rec.vector.iter().position(|v| !v.is_finite()) {
                return Err(DatasetError::NonFiniteValue {
                    index: i,
                    image_id: rec.image_id.clone(),
                    component: c,
                });
            }
            if rec.patient_id.is_empty() {
                return Err(DatasetError::EmptyPatientId {
                    index: i,
                    image_id: rec.image_id.clone(),
                });
            }
            if rec.source_patient_id.is_some() && rec.role != Role::Synthetic {
                return Err(DatasetError::SourcePatientOnNonSynthetic {
                    index: i,
                    image_id: rec.image_id.clone(),
                    role: rec.role,
                });
            }
            if rec.space != space {
                return Err(DatasetError::SpaceMismatch {
                    index: i,
                    image_id: rec.image_id.clone(),
                    got: rec.space,
                    expected: space,
                });
            }
            if index.insert(rec.image_id.clone(), i).is_some() {
                return Err(DatasetError::DuplicateImageId {
                    index: i,
                    image_id: rec.image_id.clone(),
                });
            }
        }
        Ok(DatasetManifest {
            dimension,
            space,
            records,
            index,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.index.get(image_id).map(|&i| &self.records[i])
    }

    /// Non-synthetic records grouped by patient, patients in sorted order.
    pub fn images_by_patient(&self) -> BTreeMap<&str, Vec<&ImageRecord>> {
        let mut map: BTreeMap<&str, Vec<&ImageRecord>> = BTreeMap::new();
        for rec in &self.records {
            if rec.role != Role::Synthetic {
                map.entry(rec.patient_id.as_str()).or_default().push(rec);
            }
        }
        map
    }

    /// Records with `role = synthetic`, in manifest order.
    pub fn synthetic_records(&self) -> Vec<&ImageRecord> {
        self.records
            .iter()
            .filter(|r| r.role == Role::Synthetic)
            .collect()
    }
}

/// Load a dataset from `manifest_path` (CSV), its `.json` sidecar, and the
/// vector blob the sidecar points to. Relative blob paths resolve against the
/// manifest's directory.
pub fn load_manifest(manifest_path: &Path) -> Result<DatasetManifest, DatasetError> {
    let sidecar_path = manifest_path.with_extension("json");
    let sidecar_raw =
        fs::read_to_string(&sidecar_path).map_err(|e| io_err(&sidecar_path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&sidecar_raw)?;
    let dimension = sidecar.dimension as usize;
    if dimension < 2 {
        return Err(DatasetError::DimensionTooSmall(dimension));
    }

    let csv_raw = fs::read_to_string(manifest_path).map_err(|e| io_err(manifest_path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(csv_raw.as_bytes());
    let mut rows: Vec<(String, String, Role, Option<String>)> = Vec::new();
    for result in reader.records() {
        let row = result?;
        let image_id = row.get(0).unwrap_or("").to_string();
        let patient_id = row.get(1).unwrap_or("").to_string();
        let role: Role = row.get(2).unwrap_or("").parse()?;
        let source = match row.get(3) {
            Some("") | None => None,
            Some(s) => Some(s.to_string()),
        };
        rows.push((image_id, patient_id, role, source));
    }
    if rows.len() != sidecar.count as usize {
        return Err(DatasetError::CountMismatch {
            manifest: rows.len(),
            sidecar: sidecar.count as usize,
        });
    }

    let blob_path = {
        let p = PathBuf::from(&sidecar.blob_path);
        if p.is_absolute() {
            p
        } else {
            manifest_path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join(p)
        }
    };
    let vectors = read_blob(&blob_path, rows.len(), dimension)?;

    let records = rows
        .into_iter()
        .zip(vectors)
        .map(|((image_id, patient_id, role, source_patient_id), vector)| ImageRecord {
            image_id,
            patient_id,
            vector,
            space: sidecar.space,
            role,
            source_patient_id,
        })
        .collect();
    DatasetManifest::new(dimension, sidecar.space, records)
}

fn read_blob(
    path: &Path,
    expected_count: usize,
    expected_dim: usize,
) -> Result<Vec<Vec<f32>>, DatasetError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 16 {
        return Err(DatasetError::BlobHeader(format!(
            "file is {} bytes, header needs 16",
            bytes.len()
        )));
    }
    if bytes[0..4] != BLOB_MAGIC {
        return Err(DatasetError::BlobHeader(format!(
            "bad magic {:02x?}",
            &bytes[0..4]
        )));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let reserved = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    if reserved != 0 {
        return Err(DatasetError::BlobHeader(format!(
            "reserved field must be 0, got {reserved}"
        )));
    }
    if dim != expected_dim {
        return Err(DatasetError::DimensionMismatch {
            sidecar: expected_dim,
            blob: dim,
        });
    }
    if count < expected_count {
        return Err(DatasetError::TruncatedBlob {
            expected: expected_count,
            actual: count,
        });
    }
    if count > expected_count {
        return Err(DatasetError::OversizedBlob {
            expected: expected_count,
            actual: count,
        });
    }
    let payload = &bytes[16..];
    let rec_bytes = dim * 4;
    let complete = if rec_bytes == 0 { 0 } else { payload.len() / rec_bytes };
    if complete < count {
        return Err(DatasetError::TruncatedBlob {
            expected: expected_count,
            actual: complete,
        });
    }
    let mut vectors = Vec::with_capacity(count);
    for r in 0..count {
        let base = r * rec_bytes;
        let mut v = Vec::with_capacity(dim);
        for c in 0..dim {
            let off = base + c * 4;
            v.push(f32::from_le_bytes(payload[off..off + 4].try_into().unwrap()));
        }
        vectors.push(v);
    }
    Ok(vectors)
}

/// Serialize the vector blob for `manifest` in record order.
pub fn blob_bytes(manifest: &DatasetManifest) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + manifest.len() * manifest.dimension() * 4);
    out.extend_from_slice(&BLOB_MAGIC);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&(manifest.dimension() as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for rec in manifest.records() {
        for v in &rec.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Serialize the manifest CSV in record order.
pub fn manifest_csv_bytes(manifest: &DatasetManifest) -> Result<Vec<u8>, DatasetError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["image_id", "patient_id", "role", "source_patient_id"])?;
    for rec in manifest.records() {
        writer.write_record([
            rec.image_id.as_str(),
            rec.patient_id.as_str(),
            rec.role.as_str(),
            rec.source_patient_id.as_deref().unwrap_or(""),
        ])?;
    }
    Ok(writer.into_inner().expect("vec writer"))
}

/// Serialize the JSON sidecar. `blob_path` is stored as given (normally the
/// blob's file name, resolved relative to the manifest at load time).
pub fn sidecar_bytes(manifest: &DatasetManifest, blob_path: &str) -> Vec<u8> {
    let sidecar = Sidecar {
        dimension: manifest.dimension() as u32,
        space: manifest.space(),
        blob_path: blob_path.to_string(),
        count: manifest.len() as u32,
    };
    let mut out = serde_json::to_vec_pretty(&sidecar).expect("sidecar serialization");
    out.push(b'\n');
    out
}

/// Write `<stem>.csv`, `<stem>.json`, and `<stem>.bin` under `dir`.
/// Returns the manifest CSV path.
pub fn write_dataset(
    manifest: &DatasetManifest,
    dir: &Path,
    stem: &str,
) -> Result<PathBuf, DatasetError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));
    let blob_path = dir.join(format!("{stem}.bin"));
    fs::write(&csv_path, manifest_csv_bytes(manifest)?).map_err(|e| io_err(&csv_path, e))?;
    fs::write(&json_path, sidecar_bytes(manifest, &format!("{stem}.bin")))
        .map_err(|e| io_err(&json_path, e))?;
    fs::write(&blob_path, blob_bytes(manifest)).map_err(|e| io_err(&blob_path, e))?;
    Ok(csv_path)
}

/// Deterministic role assignment for every image of a manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    seed: u64,
    /// (image_id, role) in manifest row order.
    roles: Vec<(String, Role)>,
    by_id: HashMap<String, Role>,
}

impl SplitPlan {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn role_of(&self, image_id: &str) -> Option<Role> {
        self.by_id.get(image_id).copied()
    }

    pub fn assignments(&self) -> &[(String, Role)] {
        &self.roles
    }

    /// CSV form: a `# seed=<u64>` comment line, a header, then one row per
    /// image in manifest order. Identical plans serialize byte-identically.
    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut out = format!("# seed={}\n", self.seed).into_bytes();
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer
            .write_record(["image_id", "role"])
            .expect("vec writer");
        for (id, role) in &self.roles {
            writer
                .write_record([id.as_str(), role.as_str()])
                .expect("vec writer");
        }
        out.extend(writer.into_inner().expect("vec writer"));
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_csv_bytes()).map_err(|e| io_err(path, e))
    }

    pub fn from_csv_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        let text = std::str::from_utf8(bytes)
            .map_err(|_| DatasetError::PlanHeader)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or(DatasetError::PlanHeader)?;
        let seed: u64 = header
            .strip_prefix("# seed=")
            .and_then(|s| s.trim().parse().ok())
            .ok_or(DatasetError::PlanHeader)?;
        let rest: String = lines.collect::<Vec<_>>().join("\n");
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(rest.as_bytes());
        let mut roles = Vec::new();
        let mut by_id = HashMap::new();
        for (i, result) in reader.records().enumerate() {
            let row = result?;
            let id = row.get(0).ok_or(DatasetError::PlanParse(i + 2))?.to_string();
            let role: Role = row.get(1).ok_or(DatasetError::PlanParse(i + 2))?.parse()?;
            by_id.insert(id.clone(), role);
            roles.push((id, role));
        }
        Ok(SplitPlan { seed, roles, by_id })
    }

    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        Self::from_csv_bytes(&bytes)
    }

    /// Adopt the roles already recorded in a manifest, seed 0.
    pub fn from_manifest_roles(manifest: &DatasetManifest) -> Self {
        let roles: Vec<(String, Role)> = manifest
            .records()
            .iter()
            .map(|r| (r.image_id.clone(), r.role))
            .collect();
        let by_id = roles.iter().cloned().collect();
        SplitPlan {
            seed: 0,
            roles,
            by_id,
        }
    }

    /// Check that the plan covers exactly the manifest's image ids.
    pub fn validate_against(&self, manifest: &DatasetManifest) -> Result<(), DatasetError> {
        for rec in manifest.records() {
            if !self.by_id.contains_key(&rec.image_id) {
                return Err(DatasetError::PlanMissingImage(rec.image_id.clone()));
            }
        }
        for (id, _) in &self.roles {
            if manifest.get(id).is_none() {
                return Err(DatasetError::PlanUnknownImage(id.clone()));
            }
        }
        Ok(())
    }
}

/// Knobs for [`build_split`].
#[derive(Debug, Clone, Serialize)]
pub struct SplitConfig {
    pub seed: u64,
    /// Fraction of patients withheld entirely (all their images become
    /// `holdout_unseen_patient`).
    pub unseen_fraction: f64,
    /// Fraction of single-image training-side patients routed to
    /// `ref_validation` (ceiling, so any positive fraction yields at least one
    /// validation image when single-image patients exist).
    pub validation_fraction: f64,
    /// Optional cap on the number of multi-image patients entering the
    /// half-split; the rest contribute all images to `ref_train`.
    pub sensitivity_cap: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            seed: 0,
            unseen_fraction: 0.0,
            validation_fraction: 0.10,
            sensitivity_cap: None,
        }
    }
}

/// Assign every image a role, deterministically in `(manifest, config)`.
///
/// Multi-image patients kept on the training side get ceil(k/2) of their k
/// images as `ref_train` and the rest as `holdout_seen_patient`. Single-image
/// training-side patients go to `ref_validation` (a configured fraction) or
/// `ref_train`. Synthetic records keep their `synthetic` role.
pub fn build_split(
    manifest: &DatasetManifest,
    config: &SplitConfig,
) -> Result<SplitPlan, DatasetError> {
    for (name, value) in [
        ("unseen_fraction", config.unseen_fraction),
        ("validation_fraction", config.validation_fraction),
    ] {
        if !(0.0..=1.0).contains(&value) || !value.is_finite() {
            return Err(DatasetError::InvalidFraction { name, value });
        }
    }

    let by_patient = manifest.images_by_patient();
    if !by_patient.values().any(|imgs| imgs.len() >= 2) {
        return Err(DatasetError::NoMultiImagePatient);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut patients: Vec<&str> = by_patient.keys().copied().collect();
    patients.shuffle(&mut rng);

    let n_unseen = ((config.unseen_fraction * patients.len() as f64).round() as usize)
        .min(patients.len());
    let (unseen, training_side) = patients.split_at(n_unseen);
    let unseen: HashSet<&str> = unseen.iter().copied().collect();

    let mut assigned: HashMap<&str, Role> = HashMap::with_capacity(manifest.len());
    for p in &unseen {
        for rec in &by_patient[p] {
            assigned.insert(rec.image_id.as_str(), Role::HoldoutUnseenPatient);
        }
    }

    let multi: Vec<&str> = training_side
        .iter()
        .copied()
        .filter(|p| by_patient[p].len() >= 2)
        .collect();
    if multi.is_empty() {
        return Err(DatasetError::NoMultiImagePatient);
    }
    let n_sensitivity = config.sensitivity_cap.unwrap_or(multi.len()).min(multi.len());
    for (i, p) in multi.iter().enumerate() {
        let mut image_ids: Vec<&str> = by_patient[p]
            .iter()
            .map(|r| r.image_id.as_str())
            .collect();
        image_ids.sort_unstable();
        if i < n_sensitivity {
            image_ids.shuffle(&mut rng);
            let k = image_ids.len();
            let n_train = k.div_ceil(2);
            for (j, id) in image_ids.iter().enumerate() {
                let role = if j < n_train {
                    Role::RefTrain
                } else {
                    Role::HoldoutSeenPatient
                };
                assigned.insert(id, role);
            }
        } else {
            for id in image_ids {
                assigned.insert(id, Role::RefTrain);
            }
        }
    }

    let singles: Vec<&str> = training_side
        .iter()
        .copied()
        .filter(|p| by_patient[p].len() == 1)
        .collect();
    let n_validation = if config.validation_fraction > 0.0 && !singles.is_empty() {
        ((config.validation_fraction * singles.len() as f64).ceil() as usize).min(singles.len())
    } else {
        0
    };
    for (i, p) in singles.iter().enumerate() {
        let role = if i < n_validation {
            Role::RefValidation
        } else {
            Role::RefTrain
        };
        assigned.insert(by_patient[p][0].image_id.as_str(), role);
    }

    let mut roles = Vec::with_capacity(manifest.len());
    let mut by_id = HashMap::with_capacity(manifest.len());
    for rec in manifest.records() {
        let role = if rec.role == Role::Synthetic {
            Role::Synthetic
        } else {
            assigned[rec.image_id.as_str()]
        };
        roles.push((rec.image_id.clone(), role));
        by_id.insert(rec.image_id.clone(), role);
    }
    Ok(SplitPlan {
        seed: config.seed,
        roles,
        by_id,
    })
}

/// Which reference pool to compare queries against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PoolSpec {
    /// `ref_train` images of patients that contributed no holdout images.
    ReferenceTrain,
    /// `ref_train` images of every patient.
    Combined,
    /// `ref_train` images of one patient.
    SamePatient(String),
}

/// Select the records forming a comparison pool, in manifest order.
pub fn select_pool<'a>(
    manifest: &'a DatasetManifest,
    plan: &SplitPlan,
    spec: &PoolSpec,
) -> Result<Vec<&'a ImageRecord>, DatasetError> {
    let role_of = |rec: &ImageRecord| plan.role_of(&rec.image_id);
    match spec {
        PoolSpec::Combined => Ok(manifest
            .records()
            .iter()
            .filter(|r| role_of(r) == Some(Role::RefTrain))
            .collect()),
        PoolSpec::SamePatient(patient) => {
            let known = manifest
                .records()
                .iter()
                .any(|r| r.role != Role::Synthetic && &r.patient_id == patient);
            if !known {
                return Err(DatasetError::UnknownPatient(patient.clone()));
            }
            Ok(manifest
                .records()
                .iter()
                .filter(|r| &r.patient_id == patient && role_of(r) == Some(Role::RefTrain))
                .collect())
        }
        PoolSpec::ReferenceTrain => {
            let mut holdout_patients: HashSet<&str> = HashSet::new();
            for rec in manifest.records() {
                if role_of(rec) == Some(Role::HoldoutSeenPatient) {
                    holdout_patients.insert(rec.patient_id.as_str());
                }
            }
            Ok(manifest
                .records()
                .iter()
                .filter(|r| {
                    role_of(r) == Some(Role::RefTrain)
                        && !holdout_patients.contains(r.patient_id.as_str())
                })
                .collect())
        }
    }
}

/// Records the plan maps to `role`, in manifest order.
pub fn records_with_role<'a>(
    manifest: &'a DatasetManifest,
    plan: &SplitPlan,
    role: Role,
) -> Vec<&'a ImageRecord> {
    manifest
        .records()
        .iter()
        .filter(|r| plan.role_of(&r.image_id) == Some(role))
        .collect()
}
