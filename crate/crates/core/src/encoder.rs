//! Contrastive feature encoder.
//!
//! A two-layer dense network (tanh hidden layer, linear output) trained so
//! that embeddings of same-patient images correlate highly while embeddings of
//! different patients fall below a margin. The training objective is the same
//! statistic the filter thresholds on: Pearson correlation of embedding pairs.
//! Training is a single-threaded deterministic loop; a trained model is
//! immutable and safe for concurrent use by `encode`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetManifest, Role, Space, SplitPlan};

/// Magic bytes opening a model file.
pub const MODEL_MAGIC: [u8; 4] = *b"PVE1";

/// Decorrelates the training-sample stream from the weight-init stream.
const SAMPLER_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("encoder dims must all be at least 1, got {0:?}")]
    ZeroDimension([usize; 3]),
    #[error("input dimension mismatch: model expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("pair vectors must both have dimension {expected}, got {got}")]
    PairDimension { expected: usize, got: usize },
    #[error("margin {0} must lie strictly inside (-1, 1)")]
    BadMargin(f64),
    #[error("batch size must be at least 1")]
    BadBatchSize,
    #[error("learning rate {0} must be positive and finite")]
    BadLearningRate(f64),
    #[error("training requires ref_train images from at least 2 patients, found {0}")]
    TooFewPatients(usize),
    #[error("no positive pairs: no training patient has 2 or more ref_train images")]
    NoPositivePairs,
    #[error("training diverged at epoch {epoch}: non-finite loss or weights")]
    Diverged { epoch: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad model file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Mlp,
    Identity,
}

/// Label of a training pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairLabel {
    /// Same patient: pull embeddings toward correlation 1.
    Positive,
    /// Different patients: push correlation below the margin.
    Negative,
}

/// A dense two-layer encoder (or the identity map for pixel-space filtering).
/// Weights are held at 64-bit precision; files store 32-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    dims: [usize; 3],
    kind: EncoderKind,
    space: Space,
    seed: u64,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl EncoderModel {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn embedding_dim(&self) -> usize {
        self.dims[2]
    }

    /// Total number of trainable parameters, flattened as [w1, b1, w2, b2].
    pub fn param_count(&self) -> usize {
        match self.kind {
            EncoderKind::Identity => 0,
            EncoderKind::Mlp => {
                let [d, h, k] = self.dims;
                h * d + h + k * h + k
            }
        }
    }

    pub fn param(&self, index: usize) -> f64 {
        let (slot, offset) = self.locate(index);
        match slot {
            0 => self.w1[offset],
            1 => self.b1[offset],
            2 => self.w2[offset],
            _ => self.b2[offset],
        }
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        let (slot, offset) = self.locate(index);
        match slot {
            0 => self.w1[offset] = value,
            1 => self.b1[offset] = value,
            2 => self.w2[offset] = value,
            _ => self.b2[offset] = value,
        }
    }

    fn locate(&self, index: usize) -> (u8, usize) {
        let [d, h, _] = self.dims;
        let mut i = index;
        if i < h * d {
            return (0, i);
        }
        i -= h * d;
        if i < h {
            return (1, i);
        }
        i -= h;
        if i < self.w2.len() {
            return (2, i);
        }
        (3, i - self.w2.len())
    }

    pub fn weights_finite(&self) -> bool {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .all(|w| w.is_finite())
    }

    /// Map an input vector to the embedding space.
    pub fn encode(&self, input: &[f64]) -> Result<Vec<f64>, EncoderError> {
        if input.len() != self.dims[0] {
            return Err(EncoderError::DimensionMismatch {
                expected: self.dims[0],
                got: input.len(),
            });
        }
        match self.kind {
            EncoderKind::Identity => Ok(input.to_vec()),
            EncoderKind::Mlp => {
                let (_, embedding) = self.forward(input);
                Ok(embedding)
            }
        }
    }

    /// Convenience for 32-bit stored vectors.
    pub fn encode_f32(&self, input: &[f32]) -> Result<Vec<f64>, EncoderError> {
        let wide: Vec<f64> = input.iter().map(|&v| v as f64).collect();
        self.encode(&wide)
    }

    /// Hidden activations and embedding for one input.
    fn forward(&self, input: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let [d, h, k] = self.dims;
        let mut hidden = Vec::with_capacity(h);
        for j in 0..h {
            let row = &self.w1[j * d..(j + 1) * d];
            let mut acc = self.b1[j];
            for i in 0..d {
                acc += row[i] * input[i];
            }
            hidden.push(acc.tanh());
        }
        let mut out = Vec::with_capacity(k);
        for c in 0..k {
            let row = &self.w2[c * h..(c + 1) * h];
            let mut acc = self.b2[c];
            for j in 0..h {
                acc += row[j] * hidden[j];
            }
            out.push(acc);
        }
        (hidden, out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let [d, h, k] = self.dims;
        let mut out = Vec::new();
        out.extend_from_slice(&MODEL_MAGIC);
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&(h as u32).to_le_bytes());
        out.extend_from_slice(&(k as u32).to_le_bytes());
        out.push(match self.kind {
            EncoderKind::Mlp => 0,
            EncoderKind::Identity => 1,
        });
        out.push(match self.space {
            Space::Pixel => 0,
            Space::Latent => 1,
        });
        out.extend_from_slice(&self.seed.to_le_bytes());
        for w in self
            .w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
        {
            out.extend_from_slice(&(*w as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EncoderError> {
        if bytes.len() < 4 + 12 + 2 + 8 {
            return Err(EncoderError::Format("file too short".into()));
        }
        if bytes[0..4] != MODEL_MAGIC {
            return Err(EncoderError::Format(format!(
                "bad magic {:02x?}",
                &bytes[0..4]
            )));
        }
        let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let k = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let kind = match bytes[16] {
            0 => EncoderKind::Mlp,
            1 => EncoderKind::Identity,
            other => return Err(EncoderError::Format(format!("bad kind byte {other}"))),
        };
        let space = match bytes[17] {
            0 => Space::Pixel,
            1 => Space::Latent,
            other => return Err(EncoderError::Format(format!("bad space byte {other}"))),
        };
        let seed = u64::from_le_bytes(bytes[18..26].try_into().unwrap());
        let expected = match kind {
            EncoderKind::Identity => 0,
            EncoderKind::Mlp => h * d + h + k * h + k,
        };
        let payload = &bytes[26..];
        if payload.len() != expected * 4 {
            return Err(EncoderError::Format(format!(
                "expected {} weight bytes, found {}",
                expected * 4,
                payload.len()
            )));
        }
        let mut weights = Vec::with_capacity(expected);
        for c in payload.chunks_exact(4) {
            weights.push(f32::from_le_bytes(c.try_into().unwrap()) as f64);
        }
        let mut it = weights.into_iter();
        let take = |it: &mut std::vec::IntoIter<f64>, n: usize| it.by_ref().take(n).collect();
        let (w1, b1, w2, b2) = match kind {
            EncoderKind::Identity => (Vec::new(), Vec::new(), Vec::new(), Vec::new()),
            EncoderKind::Mlp => (
                take(&mut it, h * d),
                take(&mut it, h),
                take(&mut it, k * h),
                take(&mut it, k),
            ),
        };
        Ok(EncoderModel {
            dims: [d, h, k],
            kind,
            space,
            seed,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        fs::write(path, self.to_bytes()).map_err(|e| EncoderError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        let bytes = fs::read(path).map_err(|e| EncoderError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Initialize an MLP encoder with seeded uniform weights scaled by
/// 1/sqrt(fan_in). Identical seeds give bitwise-identical weights.
pub fn init_encoder(
    dims: [usize; 3],
    space: Space,
    seed: u64,
) -> Result<EncoderModel, EncoderError> {
    if dims.contains(&0) {
        return Err(EncoderError::ZeroDimension(dims));
    }
    let [d, h, k] = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s1 = 1.0 / (d as f64).sqrt();
    let s2 = 1.0 / (h as f64).sqrt();
    let draw = |n: usize, s: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-s..s)).collect()
    };
    let w1 = draw(h * d, s1, &mut rng);
    let b1 = draw(h, s1, &mut rng);
    let w2 = draw(k * h, s2, &mut rng);
    let b2 = draw(k, s2, &mut rng);
    Ok(EncoderModel {
        dims,
        kind: EncoderKind::Mlp,
        space,
        seed,
        w1,
        b1,
        w2,
        b2,
    })
}

/// The exact identity map on the input space; used for pixel-space filtering.
pub fn identity_encoder(dimension: usize, space: Space) -> EncoderModel {
    EncoderModel {
        dims: [dimension, 0, dimension],
        kind: EncoderKind::Identity,
        space,
        seed: 0,
        w1: Vec::new(),
        b1: Vec::new(),
        w2: Vec::new(),
        b2: Vec::new(),
    }
}

/// Gradients with the same shape as the model weights, flattened like
/// [`EncoderModel::param`].
#[derive(Debug, Clone)]
pub struct PairGradients {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl PairGradients {
    fn zeros(model: &EncoderModel) -> Self {
        PairGradients {
            w1: vec![0.0; model.w1.len()],
            b1: vec![0.0; model.b1.len()],
            w2: vec![0.0; model.w2.len()],
            b2: vec![0.0; model.b2.len()],
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn param(&self, index: usize) -> f64 {
        let mut i = index;
        if i < self.w1.len() {
            return self.w1[i];
        }
        i -= self.w1.len();
        if i < self.b1.len() {
            return self.b1[i];
        }
        i -= self.b1.len();
        if i < self.w2.len() {
            return self.w2[i];
        }
        self.b2[i - self.w2.len()]
    }

    fn add_scaled(&mut self, other: &PairGradients, scale: f64) {
        for (a, b) in self.w1.iter_mut().zip(&other.w1) {
            *a += scale * b;
        }
        for (a, b) in self.b1.iter_mut().zip(&other.b1) {
            *a += scale * b;
        }
        for (a, b) in self.w2.iter_mut().zip(&other.w2) {
            *a += scale * b;
        }
        for (a, b) in self.b2.iter_mut().zip(&other.b2) {
            *a += scale * b;
        }
    }
}

/// Loss and per-embedding input gradients of the correlation contrastive loss:
/// `1 - r` for positive pairs, `max(0, r - margin)` for negative pairs, with
/// `r` the Pearson correlation of the two embeddings. `None` when either
/// embedding has zero variance (correlation undefined).
pub fn embedding_pair_loss(
    u: &[f64],
    v: &[f64],
    label: PairLabel,
    margin: f64,
) -> Option<(f64, Vec<f64>, Vec<f64>)> {
    debug_assert_eq!(u.len(), v.len());
    let k = u.len();
    if k < 2 {
        return None;
    }
    let n = k as f64;
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let uc: Vec<f64> = u.iter().map(|x| x - mu).collect();
    let vc: Vec<f64> = v.iter().map(|x| x - mv).collect();
    let su2: f64 = uc.iter().map(|x| x * x).sum();
    let sv2: f64 = vc.iter().map(|x| x * x).sum();
    if su2 == 0.0 || sv2 == 0.0 {
        return None;
    }
    let su = su2.sqrt();
    let sv = sv2.sqrt();
    let r: f64 = uc.iter().zip(&vc).map(|(a, b)| a * b).sum::<f64>() / (su * sv);

    // d r / d u_i = vc_i / (su sv) - r uc_i / su^2 ; the centering projection
    // vanishes because both centered vectors sum to zero.
    let dr_du: Vec<f64> = uc
        .iter()
        .zip(&vc)
        .map(|(ui, vi)| vi / (su * sv) - r * ui / su2)
        .collect();
    let dr_dv: Vec<f64> = uc
        .iter()
        .zip(&vc)
        .map(|(ui, vi)| ui / (su * sv) - r * vi / sv2)
        .collect();

    let r_clamped = r.clamp(-1.0, 1.0);
    match label {
        PairLabel::Positive => {
            let loss = 1.0 - r_clamped;
            let du = dr_du.iter().map(|g| -g).collect();
            let dv = dr_dv.iter().map(|g| -g).collect();
            Some((loss, du, dv))
        }
        PairLabel::Negative => {
            if r_clamped > margin {
                Some((r_clamped - margin, dr_du, dr_dv))
            } else {
                Some((0.0, vec![0.0; k], vec![0.0; k]))
            }
        }
    }
}

/// Loss and full weight gradients for one training pair.
#[derive(Debug, Clone)]
pub struct PairLossResult {
    pub loss: f64,
    pub gradients: PairGradients,
    /// True when a zero-variance embedding forced the contribution to 0.
    pub degenerate: bool,
}

/// Evaluate the pair loss and its exact analytic gradient with respect to
/// every model weight.
pub fn pair_loss(
    model: &EncoderModel,
    a: &[f64],
    b: &[f64],
    label: PairLabel,
    margin: f64,
) -> Result<PairLossResult, EncoderError> {
    if !(-1.0..1.0).contains(&margin) {
        return Err(EncoderError::BadMargin(margin));
    }
    let d = model.dims[0];
    if a.len() != d || b.len() != d {
        return Err(EncoderError::PairDimension {
            expected: d,
            got: if a.len() != d { a.len() } else { b.len() },
        });
    }
    let mut gradients = PairGradients::zeros(model);
    if model.kind == EncoderKind::Identity {
        let out = embedding_pair_loss(a, b, label, margin);
        let (loss, degenerate) = match out {
            Some((loss, _, _)) => (loss, false),
            None => (0.0, true),
        };
        return Ok(PairLossResult {
            loss,
            gradients,
            degenerate,
        });
    }

    let (za, u) = model.forward(a);
    let (zb, v) = model.forward(b);
    let Some((loss, du, dv)) = embedding_pair_loss(&u, &v, label, margin) else {
        return Ok(PairLossResult {
            loss: 0.0,
            gradients,
            degenerate: true,
        });
    };

    let [dim, h, k] = model.dims;
    // Output layer: shared weights see both branches.
    for c in 0..k {
        for j in 0..h {
            gradients.w2[c * h + j] = du[c] * za[j] + dv[c] * zb[j];
        }
        gradients.b2[c] = du[c] + dv[c];
    }
    // Backprop through tanh for each branch.
    let mut dpa = vec![0.0f64; h];
    let mut dpb = vec![0.0f64; h];
    for j in 0..h {
        let mut ga = 0.0;
        let mut gb = 0.0;
        for c in 0..k {
            ga += model.w2[c * h + j] * du[c];
            gb += model.w2[c * h + j] * dv[c];
        }
        dpa[j] = ga * (1.0 - za[j] * za[j]);
        dpb[j] = gb * (1.0 - zb[j] * zb[j]);
    }
    for j in 0..h {
        for i in 0..dim {
            gradients.w1[j * dim + i] = dpa[j] * a[i] + dpb[j] * b[i];
        }
        gradients.b1[j] = dpa[j] + dpb[j];
    }

    Ok(PairLossResult {
        loss,
        gradients,
        degenerate: false,
    })
}

/// Training hyperparameters. One seed drives weight init, pair sampling, and
/// shuffling, so identical configs give bitwise-identical models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub negatives_per_positive: usize,
    pub hidden_dim: usize,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 16,
            learning_rate: 0.05,
            margin: 0.2,
            negatives_per_positive: 4,
            hidden_dim: 32,
            embedding_dim: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.batch_size == 0 {
            return Err(EncoderError::BadBatchSize);
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(EncoderError::BadLearningRate(self.learning_rate));
        }
        if !(-1.0..1.0).contains(&self.margin) {
            return Err(EncoderError::BadMargin(self.margin));
        }
        if self.hidden_dim == 0 || self.embedding_dim == 0 {
            return Err(EncoderError::ZeroDimension([
                0,
                self.hidden_dim,
                self.embedding_dim,
            ]));
        }
        Ok(())
    }

    /// Same config with a different seed; used by the consistency harness.
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.clone() }
    }
}

/// A trained model plus the training-run summary.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EncoderModel,
    /// Mean pair loss of the last epoch; 0.0 when `epochs == 0`.
    pub final_mean_loss: f64,
    pub epoch_mean_losses: Vec<f64>,
    /// Pairs whose zero-variance embeddings contributed zero loss.
    pub degenerate_pairs: u64,
}

/// Train an encoder on the plan's `ref_train` images.
///
/// Each epoch visits every positive pair of every multi-image patient once;
/// each positive pair is followed by `negatives_per_positive` seeded-random
/// negative partners. Deterministic in `(manifest, plan, config)`.
pub fn train(
    manifest: &DatasetManifest,
    plan: &SplitPlan,
    space: Space,
    config: &TrainConfig,
) -> Result<TrainOutcome, EncoderError> {
    config.validate()?;
    let d = manifest.dimension();

    // The patient -> vectors map, patients sorted for a fixed iteration order.
    let mut by_patient: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for rec in manifest.records() {
        if plan.role_of(&rec.image_id) == Some(Role::RefTrain) {
            by_patient
                .entry(rec.patient_id.as_str())
                .or_default()
                .push(rec.vector.iter().map(|&v| v as f64).collect());
        }
    }
    if by_patient.len() < 2 {
        return Err(EncoderError::TooFewPatients(by_patient.len()));
    }
    let patients: Vec<&str> = by_patient.keys().copied().collect();
    let vectors: Vec<&Vec<Vec<f64>>> = patients.iter().map(|p| &by_patient[p]).collect();

    let mut positives: Vec<(usize, usize, usize)> = Vec::new();
    for (p, imgs) in vectors.iter().enumerate() {
        for i in 0..imgs.len() {
            for j in (i + 1)..imgs.len() {
                positives.push((p, i, j));
            }
        }
    }
    if positives.is_empty() {
        return Err(EncoderError::NoPositivePairs);
    }

    let mut model = init_encoder([d, config.hidden_dim, config.embedding_dim], space, config.seed)?;
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            model,
            final_mean_loss: 0.0,
            epoch_mean_losses: Vec::new(),
            degenerate_pairs: 0,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SAMPLER_SEED_SALT);
    let mut epoch_mean_losses = Vec::with_capacity(config.epochs);
    let mut degenerate_pairs = 0u64;

    struct PairRef {
        patient_a: usize,
        image_a: usize,
        patient_b: usize,
        image_b: usize,
        label: PairLabel,
    }

    for epoch in 0..config.epochs {
        let mut pairs: Vec<PairRef> = Vec::with_capacity(
            positives.len() * (1 + config.negatives_per_positive),
        );
        for &(p, i, j) in &positives {
            pairs.push(PairRef {
                patient_a: p,
                image_a: i,
                patient_b: p,
                image_b: j,
                label: PairLabel::Positive,
            });
            for _ in 0..config.negatives_per_positive {
                // Uniform over the other patients, then uniform over images.
                let mut q = rng.random_range(0..patients.len() - 1);
                if q >= p {
                    q += 1;
                }
                let img = rng.random_range(0..vectors[q].len());
                pairs.push(PairRef {
                    patient_a: p,
                    image_a: i,
                    patient_b: q,
                    image_b: img,
                    label: PairLabel::Negative,
                });
            }
        }
        pairs.shuffle(&mut rng);

        let mut epoch_loss = 0.0f64;
        for batch in pairs.chunks(config.batch_size) {
            let mut accum = PairGradients::zeros(&model);
            let mut batch_loss = 0.0f64;
            for pair in batch {
                let a = &vectors[pair.patient_a][pair.image_a];
                let b = &vectors[pair.patient_b][pair.image_b];
                let result = pair_loss(&model, a, b, pair.label, config.margin)?;
                if result.degenerate {
                    degenerate_pairs += 1;
                }
                batch_loss += result.loss;
                accum.add_scaled(&result.gradients, 1.0);
            }
            epoch_loss += batch_loss;
            let step = config.learning_rate / batch.len() as f64;
            for (w, g) in model.w1.iter_mut().zip(&accum.w1) {
                *w -= step * g;
            }
            for (w, g) in model.b1.iter_mut().zip(&accum.b1) {
                *w -= step * g;
            }
            for (w, g) in model.w2.iter_mut().zip(&accum.w2) {
                *w -= step * g;
            }
            for (w, g) in model.b2.iter_mut().zip(&accum.b2) {
                *w -= step * g;
            }
            if !batch_loss.is_finite() || !model.weights_finite() {
                return Err(EncoderError::Diverged { epoch });
            }
        }
        let mean = epoch_loss / pairs.len() as f64;
        if !mean.is_finite() {
            return Err(EncoderError::Diverged { epoch });
        }
        epoch_mean_losses.push(mean);
    }

    Ok(TrainOutcome {
        final_mean_loss: *epoch_mean_losses.last().unwrap(),
        model,
        epoch_mean_losses,
        degenerate_pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_split, DatasetManifest, ImageRecord, SplitConfig};
    use crate::similarity::pearson;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn cluster_manifest(
        patients: usize,
        images: usize,
        dim: usize,
        noise_sd: f64,
        seed: u64,
    ) -> DatasetManifest {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0f64, 1.0).unwrap();
        let noise = Normal::new(0.0f64, noise_sd).unwrap();
        let mut records = Vec::new();
        for p in 0..patients {
            let center: Vec<f64> = (0..dim).map(|_| unit.sample(&mut rng)).collect();
            for i in 0..images {
                let v: Vec<f32> = center
                    .iter()
                    .map(|c| (c + noise.sample(&mut rng)) as f32)
                    .collect();
                records.push(ImageRecord {
                    image_id: format!("P{p:02}_I{i:02}"),
                    patient_id: format!("P{p:02}"),
                    vector: v,
                    space: Space::Latent,
                    role: Role::RefTrain,
                    source_patient_id: None,
                });
            }
        }
        DatasetManifest::new(dim, Space::Latent, records).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_encoder([4, 8, 3], Space::Latent, 77).unwrap();
        let b = init_encoder([4, 8, 3], Space::Latent, 77).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn different_seeds_differ() {
        let a = init_encoder([4, 8, 3], Space::Latent, 1).unwrap();
        let b = init_encoder([4, 8, 3], Space::Latent, 2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(matches!(
            init_encoder([0, 4, 2], Space::Latent, 0),
            Err(EncoderError::ZeroDimension(_))
        ));
    }

    #[test]
    fn identity_is_exact_passthrough() {
        let model = identity_encoder(5, Space::Pixel);
        let v = vec![1.5, -2.0, 0.25, 9.0, -7.5];
        assert_eq!(model.encode(&v).unwrap(), v);
        assert_eq!(model.param_count(), 0);
    }

    #[test]
    fn zero_weights_propagate_output_bias() {
        let mut model = init_encoder([3, 4, 2], Space::Latent, 5).unwrap();
        for i in 0..model.param_count() {
            model.set_param(i, 0.0);
        }
        // Leave only the output biases.
        let base = model.param_count() - 2;
        model.set_param(base, 0.75);
        model.set_param(base + 1, -0.25);
        let out = model.encode(&[3.0, -1.0, 2.0]).unwrap();
        assert_eq!(out, vec![0.75, -0.25]);
        let out2 = model.encode(&[100.0, 50.0, -3.0]).unwrap();
        assert_eq!(out2, vec![0.75, -0.25]);
    }

    /// Straight-line re-implementation of the two-layer map, kept independent
    /// of `EncoderModel::forward`.
    fn oracle_forward(model: &EncoderModel, x: &[f64]) -> Vec<f64> {
        let [d, h, k] = model.dims();
        let mut params = Vec::with_capacity(model.param_count());
        for i in 0..model.param_count() {
            params.push(model.param(i));
        }
        let (w1, rest) = params.split_at(h * d);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(k * h);
        let mut hidden = vec![0.0f64; h];
        for j in 0..h {
            let mut s = b1[j];
            for i in 0..d {
                s += w1[j * d + i] * x[i];
            }
            hidden[j] = s.tanh();
        }
        let mut out = vec![0.0f64; k];
        for c in 0..k {
            let mut s = b2[c];
            for j in 0..h {
                s += w2[c * h + j] * hidden[j];
            }
            out[c] = s;
        }
        out
    }

    #[test]
    fn encode_matches_straight_line_oracle() {
        let model = init_encoder([6, 5, 4], Space::Latent, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = model.encode(&x).unwrap();
            let want = oracle_forward(&model, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let model = init_encoder([4, 3, 2], Space::Latent, 0).unwrap();
        assert!(matches!(
            model.encode(&[1.0, 2.0]),
            Err(EncoderError::DimensionMismatch { expected: 4, got: 2 })
        ));
    }

    #[test]
    fn positive_pair_with_equal_embeddings_has_zero_loss() {
        let model = init_encoder([4, 6, 3], Space::Latent, 3).unwrap();
        let v = vec![0.5, -1.0, 2.0, 0.25];
        let out = pair_loss(&model, &v, &v, PairLabel::Positive, 0.2).unwrap();
        assert!(!out.degenerate);
        assert!(out.loss.abs() < 1e-12, "loss {}", out.loss);
    }

    #[test]
    fn negative_pair_at_margin_has_zero_loss() {
        // Feed embeddings straight into the loss with margin set to the
        // correlation they actually attain: the hinge sits exactly at zero.
        let u = vec![1.0, -0.5, 0.25, 2.0];
        let v = vec![0.5, 1.5, -1.0, 0.75];
        let r = pearson(&u, &v).unwrap().unwrap();
        let (loss, du, dv) = embedding_pair_loss(&u, &v, PairLabel::Negative, r).unwrap();
        assert_eq!(loss, 0.0);
        assert!(du.iter().all(|g| *g == 0.0));
        assert!(dv.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn degenerate_embedding_contributes_zero_loss() {
        let mut model = init_encoder([3, 4, 2], Space::Latent, 6).unwrap();
        for i in 0..model.param_count() {
            model.set_param(i, 0.0);
        }
        // Constant embeddings: correlation undefined.
        let out = pair_loss(&model, &[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], PairLabel::Positive, 0.2)
            .unwrap();
        assert!(out.degenerate);
        assert_eq!(out.loss, 0.0);
    }

    /// Central finite differences over every weight (step 1e-5, 64-bit).
    fn finite_difference_check(
        model: &EncoderModel,
        a: &[f64],
        b: &[f64],
        label: PairLabel,
        margin: f64,
    ) -> f64 {
        let analytic = pair_loss(model, a, b, label, margin).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for p in 0..model.param_count() {
            let orig = model.param(p);
            let mut plus = model.clone();
            plus.set_param(p, orig + h);
            let mut minus = model.clone();
            minus.set_param(p, orig - h);
            let lp = pair_loss(&plus, a, b, label, margin).unwrap().loss;
            let lm = pair_loss(&minus, a, b, label, margin).unwrap().loss;
            let fd = (lp - lm) / (2.0 * h);
            let an = analytic.gradients.param(p);
            let denom = an.abs().max(fd.abs()).max(1e-6);
            worst = worst.max((an - fd).abs() / denom);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut checked = 0;
        while checked < 25 {
            let dims = [
                rng.random_range(2..5usize),
                rng.random_range(2..5usize),
                rng.random_range(2..5usize),
            ];
            let model = init_encoder(dims, Space::Latent, rng.random()).unwrap();
            let a: Vec<f64> = (0..dims[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..dims[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
            let label = if rng.random_bool(0.5) {
                PairLabel::Positive
            } else {
                PairLabel::Negative
            };
            let margin = rng.random_range(-0.5..0.5);
            // Stay off the hinge kink where the derivative jumps.
            let (ua, ub) = (model.encode(&a).unwrap(), model.encode(&b).unwrap());
            if let Ok(Some(r)) = pearson(&ua, &ub) {
                if (r - margin).abs() < 1e-2 || r.abs() > 0.999 {
                    continue;
                }
            } else {
                continue;
            }
            let worst = finite_difference_check(&model, &a, &b, label, margin);
            assert!(worst < 1e-4, "relative error {worst} for dims {dims:?}");
            checked += 1;
        }
    }

    #[test]
    fn training_separates_well_separated_clusters() {
        let manifest = cluster_manifest(4, 6, 8, 0.15, 40);
        let plan = build_split(&manifest, &SplitConfig { seed: 1, ..Default::default() }).unwrap();
        let config = TrainConfig {
            epochs: 60,
            seed: 7,
            hidden_dim: 16,
            embedding_dim: 8,
            ..TrainConfig::default()
        };
        let outcome = train(&manifest, &plan, Space::Latent, &config).unwrap();
        assert!(outcome.model.weights_finite());

        let mut pos = Vec::new();
        let mut neg = Vec::new();
        let records = manifest.records();
        for i in 0..records.len() {
            for j in (i + 1)..records.len() {
                let u = outcome.model.encode_f32(&records[i].vector).unwrap();
                let v = outcome.model.encode_f32(&records[j].vector).unwrap();
                let r = pearson(&u, &v).unwrap().unwrap();
                if records[i].patient_id == records[j].patient_id {
                    pos.push(r);
                } else {
                    neg.push(r);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let separation = mean(&pos) - mean(&neg);
        assert!(
            separation > 0.3,
            "positive-negative separation {separation} too small"
        );
    }

    #[test]
    fn zero_epochs_returns_initialized_model() {
        let manifest = cluster_manifest(3, 3, 6, 0.2, 8);
        let plan = build_split(&manifest, &SplitConfig::default()).unwrap();
        let config = TrainConfig {
            epochs: 0,
            seed: 123,
            hidden_dim: 5,
            embedding_dim: 4,
            ..TrainConfig::default()
        };
        let outcome = train(&manifest, &plan, Space::Latent, &config).unwrap();
        let fresh = init_encoder([6, 5, 4], Space::Latent, 123).unwrap();
        assert_eq!(outcome.model, fresh);
        assert_eq!(outcome.final_mean_loss, 0.0);
    }

    #[test]
    fn training_is_deterministic() {
        let manifest = cluster_manifest(3, 4, 6, 0.2, 9);
        let plan = build_split(&manifest, &SplitConfig::default()).unwrap();
        let config = TrainConfig {
            epochs: 5,
            seed: 55,
            hidden_dim: 6,
            embedding_dim: 4,
            ..TrainConfig::default()
        };
        let a = train(&manifest, &plan, Space::Latent, &config).unwrap();
        let b = train(&manifest, &plan, Space::Latent, &config).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.epoch_mean_losses, b.epoch_mean_losses);
    }

    #[test]
    fn single_patient_training_fails() {
        let manifest = cluster_manifest(1, 4, 6, 0.2, 10);
        let plan = build_split(&manifest, &SplitConfig::default()).unwrap();
        let err = train(&manifest, &plan, Space::Latent, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, EncoderError::TooFewPatients(1)));
    }

    #[test]
    fn model_file_roundtrip() {
        let model = init_encoder([4, 3, 2], Space::Latent, 99).unwrap();
        let bytes = model.to_bytes();
        let back = EncoderModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.dims(), [4, 3, 2]);
        assert_eq!(back.kind(), EncoderKind::Mlp);
        assert_eq!(back.seed(), 99);
        // Weights survive as f32.
        for i in 0..model.param_count() {
            assert_eq!(back.param(i), model.param(i) as f32 as f64);
        }
        // Identity model too.
        let ident = identity_encoder(7, Space::Pixel);
        let back = EncoderModel::from_bytes(&ident.to_bytes()).unwrap();
        assert_eq!(back, ident);
    }

    proptest! {
        // Pearson invariance of the loss under positive affine maps of either
        // embedding, checked at the loss level on fixed embeddings.
        #[test]
        fn loss_is_affine_invariant(
            u in proptest::collection::vec(-3.0f64..3.0, 6),
            v in proptest::collection::vec(-3.0f64..3.0, 6),
            alpha in 0.2f64..5.0,
            beta in -2.0f64..2.0,
            positive in any::<bool>(),
        ) {
            let label = if positive { PairLabel::Positive } else { PairLabel::Negative };
            let base = embedding_pair_loss(&u, &v, label, 0.1);
            prop_assume!(base.is_some());
            let (base_loss, _, _) = base.unwrap();
            let scaled: Vec<f64> = u.iter().map(|x| alpha * x + beta).collect();
            let (scaled_loss, _, _) =
                embedding_pair_loss(&scaled, &v, label, 0.1).unwrap();
            prop_assert!((base_loss - scaled_loss).abs() < 1e-9);
        }
    }
}
