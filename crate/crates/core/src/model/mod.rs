//! Uniform access to a causal LM's behavioral states: per-layer last-token
//! hidden states on the forward pass, and self-attention parameter gradients
//! under a teacher-forced paired response on the backward pass.
//!
//! The bundled implementation is [`TinyLm`], a small fully specified
//! transformer. Seeded at random it serves as the deterministic mock adapter
//! for CI and oracle tests; tuned on a synthetic instruction-following corpus
//! (see [`toy`]) it serves as the desk-scale stand-in for a full-size
//! instruct model. Larger models plug in behind [`ModelAdapter`].

mod tiny;
pub mod toy;

pub use tiny::{MockSpec, TinyLm, TinyLmConfig};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::features::PoolingSpec;
use crate::fingerprint;

/// Static description of a loaded model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub model_id: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    /// Shapes of the attention projection matrices, per layer, in extraction
    /// order: (name, rows, cols).
    pub attention_param_shapes: Vec<Vec<(String, usize, usize)>>,
    pub chat_template_available: bool,
}

/// How raw text is turned into model input.
#[derive(Debug, Clone, Copy)]
pub struct EncodeOptions {
    pub max_tokens: usize,
    pub use_chat_template: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self {
            max_tokens: 2048,
            use_chat_template: true,
        }
    }
}

/// Everything that determines a feature extraction, hashed into a
/// fingerprint that binds feature stores and detectors together.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub model_id: String,
    pub layer: usize,
    pub paired_response: String,
    pub max_tokens: usize,
    pub use_chat_template: bool,
    pub pooling: PoolingSpec,
}

impl ExtractionConfig {
    pub fn new(model_id: impl Into<String>, layer: usize) -> Self {
        Self {
            model_id: model_id.into(),
            layer,
            paired_response: "Sure".into(),
            max_tokens: 2048,
            use_chat_template: true,
            pooling: PoolingSpec::default(),
        }
    }

    /// Content hash over every field above.
    pub fn fingerprint(&self) -> String {
        fingerprint::sha256_fields(&[
            ("model_id", &self.model_id),
            ("layer", &self.layer.to_string()),
            ("paired_response", &self.paired_response),
            ("max_tokens", &self.max_tokens.to_string()),
            ("use_chat_template", &self.use_chat_template.to_string()),
            ("pooling_window_h", &self.pooling.window.0.to_string()),
            ("pooling_window_w", &self.pooling.window.1.to_string()),
            ("pooling_mode", &format!("{:?}", self.pooling.mode)),
        ])
    }

    pub fn encode_options(&self) -> EncodeOptions {
        EncodeOptions {
            max_tokens: self.max_tokens,
            use_chat_template: self.use_chat_template,
        }
    }
}

/// Gradients of one layer's attention projections, plus the loss they came
/// from.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub layer_index: usize,
    /// (name, gradient) in the model's declared order.
    pub matrices: Vec<(String, Array2<f64>)>,
    pub loss_value: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("layer {layer} out of range for a model with {num_layers} layers")]
    LayerOutOfRange { layer: usize, num_layers: usize },
    #[error("input tokenizes to zero tokens")]
    EmptyInput,
    #[error("gradient contained non-finite values (loss {loss})")]
    NonFiniteGradient { loss: f64 },
    #[error("unknown model id {0:?}; expected \"mock\", \"mock:key=value,...\", \"toy-instruct\" or a path to a saved model file")]
    UnknownModel(String),
    #[error("failed to load model from {path}: {reason}")]
    Load { path: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Read access to a model's behavioral states. Implementations are
/// read-only: no call mutates the weights.
///
/// Calls on one adapter value are internally pure, so one instance may be
/// shared across threads; returned values are immutable snapshots.
pub trait ModelAdapter: Send + Sync {
    fn meta(&self) -> &ModelMeta;

    /// Last-token hidden state at the output of every block, in one forward
    /// pass.
    fn hidden_states_all_layers(
        &self,
        text: &str,
        opts: &EncodeOptions,
    ) -> Result<Vec<Vec<f32>>, ModelError>;

    /// Last-token hidden state at the output of block `layer`.
    fn hidden_state(
        &self,
        text: &str,
        layer: usize,
        opts: &EncodeOptions,
    ) -> Result<Vec<f32>, ModelError> {
        let num_layers = self.meta().num_layers;
        if layer >= num_layers {
            return Err(ModelError::LayerOutOfRange { layer, num_layers });
        }
        let mut all = self.hidden_states_all_layers(text, opts)?;
        Ok(all.swap_remove(layer))
    }

    /// Gradients of block `layer`'s attention projections under the mean
    /// negative log-likelihood of `response`, teacher-forced after `text`.
    fn attention_gradients(
        &self,
        text: &str,
        response: &str,
        layer: usize,
        opts: &EncodeOptions,
    ) -> Result<GradientBundle, ModelError>;
}

/// Default extraction layer for a model of the given depth: layer 14 for a
/// 32-layer model, scaled proportionally (rounded down) otherwise.
pub fn default_layer(num_layers: usize) -> usize {
    (num_layers * 14 / 32).min(num_layers.saturating_sub(1))
}

/// Resolve a model id string into an adapter.
///
/// Supported forms:
/// - `mock` - the fixed-seed random 4-layer/64-dim transformer
/// - `mock:seed=7,layers=4,hidden=64,heads=4,sentinel=please,sentinel_scale=4.0`
/// - `toy-instruct` - the tuned desk-scale model (trained on first use and
///   cached under `cache_dir`)
/// - a filesystem path to a saved model container
pub fn resolve_model(
    id: &str,
    cache_dir: Option<&std::path::Path>,
) -> Result<Box<dyn ModelAdapter>, ModelError> {
    if id == "mock" {
        return Ok(Box::new(TinyLm::mock(&MockSpec::default())));
    }
    if let Some(args) = id.strip_prefix("mock:") {
        let spec = MockSpec::parse(args).map_err(|reason| ModelError::Load {
            path: id.to_string(),
            reason,
        })?;
        return Ok(Box::new(TinyLm::mock(&spec)));
    }
    if id == "toy-instruct" {
        return Ok(Box::new(toy::toy_instruct_model(cache_dir)?));
    }
    let path = std::path::Path::new(id);
    if path.exists() {
        return Ok(Box::new(TinyLm::load(path)?));
    }
    Err(ModelError::UnknownModel(id.to_string()))
}
