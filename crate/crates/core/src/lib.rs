//! Post-hoc privacy filtering for synthetic vector datasets.
//!
//! The pipeline: ingest feature vectors with patient metadata ([`dataset`]),
//! train a contrastive encoder or use the identity map ([`encoder`]), score
//! queries against reference pools by Pearson correlation ([`similarity`]),
//! calibrate a percentile threshold and flag ([`calibration`]), and evaluate
//! the filter's sensitivity, specificity, and seed-to-seed consistency
//! ([`eval`]).

pub mod calibration;
pub mod dataset;
pub mod encoder;
pub mod eval;
pub mod similarity;

pub use calibration::{calibrate, flag, flag_batch, CalibrationResult, FlagDecision};
pub use dataset::{
    build_split, load_manifest, select_pool, DatasetManifest, ImageRecord, PoolSpec, Role, Space,
    SplitConfig, SplitPlan,
};
pub use encoder::{
    identity_encoder, init_encoder, pair_loss, train, EncoderKind, EncoderModel, PairLabel,
    TrainConfig, TrainOutcome,
};
pub use eval::{
    ConsensusReport, PairClassificationReport, SensitivityReport, SpecificityReport, Strategy,
    SyntheticDuplicateReport,
};
pub use similarity::{
    batch_score, batch_score_chunked, pearson, score_against_pool, Aggregate, Pool, Query,
    ScoreResult,
};
