//! The trainable classifier: an affine projection for gradient features and
//! an MLP head over the fused, normalized feature vector.

mod io;
mod mlp;
mod train;

pub use io::{load, read_manifest, save, DetectorFileManifest};
pub use mlp::Mlp;
pub use train::{train, TrainConfig};

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::features::{FeatureStore, ProjectionParams};
use crate::model::ExtractionConfig;

/// Which feature channels the classifier consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// normalize(hidden) ++ normalize(project(grad)), input dim 2H.
    Fused,
    /// normalize(hidden) only, input dim H.
    HiddenOnly,
    /// normalize(project(grad)) only, input dim H.
    GradOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormScheme {
    L2,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub seed: u64,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub epochs_run: usize,
    pub early_stopped: bool,
    pub train_data_hash: String,
    pub val_data_hash: Option<String>,
    pub final_train_accuracy: f64,
    pub best_val_accuracy: Option<f64>,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f32>,
}

/// A trained detector bound to one extraction configuration.
#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub mode: FeatureMode,
    pub hidden_dim: usize,
    pub grad_dim: usize,
    /// Present unless mode is HiddenOnly.
    pub projection: Option<ProjectionParams>,
    pub mlp: Mlp,
    pub normalization: NormScheme,
    pub extraction: ExtractionConfig,
    pub fingerprint: String,
    pub training: TrainingManifest,
    pub threshold: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Verdict {
    pub sample_id: String,
    /// Probability of "injected".
    pub score: f32,
    /// 1 when score >= threshold.
    pub label: u8,
}

#[derive(Debug, thiserror::Error)]
pub enum DetectorError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },
    #[error("training set contains a single class")]
    DegenerateLabels,
    #[error("training set is unbalanced ({positives} positive / {negatives} negative); pass allow_unbalanced to waive")]
    UnbalancedTraining { positives: usize, negatives: usize },
    #[error("fingerprint mismatch: detector is bound to {model} but features carry {features}")]
    FingerprintMismatch { model: String, features: String },
    #[error("corrupt model file {path}: {reason}")]
    CorruptModelFile { path: String, reason: String },
    #[error("unsupported model file version {found} (supported {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl DetectorModel {
    pub fn input_dim(&self) -> usize {
        match self.mode {
            FeatureMode::Fused => 2 * self.hidden_dim,
            FeatureMode::HiddenOnly | FeatureMode::GradOnly => self.hidden_dim,
        }
    }

    fn check_dims(&self, hidden: &[f32], grad: &[f32]) -> Result<(), DetectorError> {
        let uses_hidden = matches!(self.mode, FeatureMode::Fused | FeatureMode::HiddenOnly);
        let uses_grad = matches!(self.mode, FeatureMode::Fused | FeatureMode::GradOnly);
        if uses_hidden && hidden.len() != self.hidden_dim {
            return Err(DetectorError::DimensionMismatch {
                expected: format!("hidden vector of {}", self.hidden_dim),
                got: hidden.len().to_string(),
            });
        }
        if uses_grad && grad.len() != self.grad_dim {
            return Err(DetectorError::DimensionMismatch {
                expected: format!("gradient vector of {}", self.grad_dim),
                got: grad.len().to_string(),
            });
        }
        Ok(())
    }

    /// Probability that the document behind `(hidden, grad)` is injected.
    pub fn score(&self, hidden: &[f32], grad: &[f32]) -> Result<f32, DetectorError> {
        self.check_dims(hidden, grad)?;
        let hidden_m = Array2::from_shape_vec((1, hidden.len()), hidden.to_vec())
            .expect("row-major layout");
        let grad_m =
            Array2::from_shape_vec((1, grad.len()), grad.to_vec()).expect("row-major layout");
        Ok(self.score_batch(&hidden_m, &grad_m)[0])
    }

    pub fn predict(
        &self,
        sample_id: &str,
        hidden: &[f32],
        grad: &[f32],
    ) -> Result<Verdict, DetectorError> {
        let score = self.score(hidden, grad)?;
        Ok(Verdict {
            sample_id: sample_id.to_string(),
            score,
            label: u8::from(score >= self.threshold),
        })
    }

    /// Score every record of a feature store. The store must carry the exact
    /// extraction fingerprint this detector was trained on.
    pub fn score_store(&self, store: &FeatureStore) -> Result<Vec<Verdict>, DetectorError> {
        if store.manifest.fingerprint != self.fingerprint {
            return Err(DetectorError::FingerprintMismatch {
                model: self.fingerprint.clone(),
                features: store.manifest.fingerprint.clone(),
            });
        }
        if store.hidden.ncols() != self.hidden_dim || store.grad.ncols() != self.grad_dim {
            return Err(DetectorError::DimensionMismatch {
                expected: format!("store of H={} G={}", self.hidden_dim, self.grad_dim),
                got: format!("H={} G={}", store.hidden.ncols(), store.grad.ncols()),
            });
        }
        let scores = self.score_batch(&store.hidden, &store.grad);
        Ok(store
            .ids
            .iter()
            .zip(scores)
            .map(|(id, score)| Verdict {
                sample_id: id.clone(),
                score,
                label: u8::from(score >= self.threshold),
            })
            .collect())
    }

    fn score_batch(&self, hidden: &Array2<f32>, grad: &Array2<f32>) -> Vec<f32> {
        let x = assemble_inputs(self.mode, hidden, grad, self.projection.as_ref()).0;
        let (_, logits) = self.mlp.forward(&x);
        let probs = mlp::softmax_rows(&logits);
        probs.column(1).to_vec()
    }
}

/// Normalize each row to unit L2 norm; zero rows stay zero.
pub(crate) fn normalize_rows(m: &Array2<f32>) -> (Array2<f32>, Vec<f32>) {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.nrows());
    for mut row in out.rows_mut() {
        let norm_sq: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum();
        let norm = norm_sq.sqrt();
        norms.push(norm as f32);
        if norm > 0.0 {
            let inv = (1.0 / norm) as f32;
            row.mapv_inplace(|v| v * inv);
        }
    }
    (out, norms)
}

pub(crate) struct ProjCache {
    pub norms: Vec<f32>,
    /// Projected rows after normalization.
    pub normalized: Array2<f32>,
}

/// Build the classifier input block for a batch. Returns the input matrix
/// and, when the gradient path is active, the projection cache needed for
/// backpropagation.
pub(crate) fn assemble_inputs(
    mode: FeatureMode,
    hidden: &Array2<f32>,
    grad: &Array2<f32>,
    projection: Option<&ProjectionParams>,
) -> (Array2<f32>, Option<ProjCache>) {
    let hidden_n = || normalize_rows(hidden).0;
    let grad_path = |proj: &ProjectionParams| {
        let projected = grad.dot(&proj.weight);
        let (normalized, norms) = normalize_rows(&projected);
        ProjCache { norms, normalized }
    };
    match mode {
        FeatureMode::HiddenOnly => (hidden_n(), None),
        FeatureMode::GradOnly => {
            let cache = grad_path(projection.expect("grad mode has a projection"));
            (cache.normalized.clone(), Some(cache))
        }
        FeatureMode::Fused => {
            let hn = hidden_n();
            let cache = grad_path(projection.expect("fused mode has a projection"));
            let mut x = Array2::zeros((hn.nrows(), hn.ncols() + cache.normalized.ncols()));
            x.slice_mut(ndarray::s![.., ..hn.ncols()]).assign(&hn);
            x.slice_mut(ndarray::s![.., hn.ncols()..])
                .assign(&cache.normalized);
            (x, Some(cache))
        }
    }
}

/// Backward through row-wise L2 normalization:
/// `dp = (dpn - pn * <pn, dpn>) / ||p||`, with zero rows passing zero.
pub(crate) fn normalize_rows_backward(
    dpn: &Array2<f32>,
    cache: &ProjCache,
) -> Array2<f32> {
    let mut dp = Array2::zeros(dpn.raw_dim());
    for i in 0..dpn.nrows() {
        let norm = cache.norms[i];
        if norm == 0.0 {
            continue;
        }
        let pn: ArrayView1<f32> = cache.normalized.row(i);
        let d: ArrayView1<f32> = dpn.row(i);
        let dot: f32 = pn.dot(&d);
        for j in 0..dpn.ncols() {
            dp[[i, j]] = (d[j] - pn[j] * dot) / norm;
        }
    }
    dp
}
