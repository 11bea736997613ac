//! The desk-scale stand-in model: a [`TinyLm`] tuned to behave like an
//! instruction follower.
//!
//! Tuning teaches one behavior: reply "Sure." when the user content carries
//! an embedded instruction, reply "Noted." when it is plain prose. A model
//! with that behavior must internally detect instructions, which is exactly
//! the state the detector reads out. The tuning corpus (documents, entities,
//! instruction pool) is disjoint from the evaluation corpora, so nothing the
//! detector is later trained or tested on was seen during tuning.
//!
//! Training is deterministic and takes about a minute of CPU; pass a cache
//! directory to persist the weights across processes.

use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::tiny::{GradScope, TinyLm, TinyLmConfig, TOKEN_EOS};
use super::{EncodeOptions, ModelError};
use crate::corpus::{insert_instructions, synth, PositionPolicy};
use crate::{fingerprint, rng};

pub const TOY_MODEL_ID: &str = "toy-instruct";
pub const REPLY_INSTRUCTED: &str = "Sure.";
pub const REPLY_PLAIN: &str = "Noted.";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyTrainConfig {
    pub seed: u64,
    /// Number of training dialogues (half instructed, half plain).
    pub examples: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    /// Training sequences are truncated to this many tokens.
    pub max_tokens: usize,
    pub model: TinyLmConfig,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            examples: 500,
            epochs: 6,
            learning_rate: 1e-3,
            grad_clip: 5.0,
            max_tokens: 256,
            model: TinyLmConfig {
                num_layers: 6,
                hidden_dim: 32,
                num_heads: 4,
                ff_dim: 128,
                max_positions: 512,
            },
        }
    }
}

impl ToyTrainConfig {
    pub fn fingerprint(&self) -> String {
        let body = serde_json::to_string(self).expect("serializable config");
        fingerprint::sha256_hex(body.as_bytes())
    }
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    fn step(&mut self, pairs: &mut [(&mut [f64], &[f64])], clip: f64) {
        if self.m.is_empty() {
            self.m = pairs.iter().map(|(p, _)| vec![0.0; p.len()]).collect();
            self.v = pairs.iter().map(|(p, _)| vec![0.0; p.len()]).collect();
        }
        let norm_sq: f64 = pairs
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|g| g * g)
            .sum();
        let scale = if clip > 0.0 && norm_sq.sqrt() > clip {
            clip / norm_sq.sqrt()
        } else {
            1.0
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (tensor_idx, (params, grads)) in pairs.iter_mut().enumerate() {
            let m = &mut self.m[tensor_idx];
            let v = &mut self.v[tensor_idx];
            for i in 0..params.len() {
                let g = grads[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// One tuning dialogue, already tokenized.
struct Dialogue {
    tokens: Vec<usize>,
    targets_from: usize,
}

fn build_dialogues(config: &ToyTrainConfig) -> Vec<Dialogue> {
    let docs = synth::synthetic_documents(
        config.examples,
        rng::derive_seed(config.seed, &["toy", "docs"]),
        synth::SynthProfile::Tuning,
    );
    let instructions = synth::builtin_instructions(synth::InstructionPool::Tuning);
    let opts = EncodeOptions {
        max_tokens: config.max_tokens,
        use_chat_template: true,
    };
    // Tokenization does not depend on weights; a throwaway model instance
    // provides the encoder.
    let encoder = TinyLm::new(config.model.clone(), 0, "encoder");

    let mut pick_rng = rng::stream(config.seed, &["toy", "pick"]);
    // Embedded instructions rotate through every position so the model
    // learns to spot an imperative anywhere, not just at the turn start.
    let policies = [
        PositionPolicy::Beginning,
        PositionPolicy::Middle,
        PositionPolicy::End,
        PositionPolicy::Random,
    ];
    docs.iter()
        .enumerate()
        .map(|(i, doc)| {
            // Half the dialogues are plain prose, three eighths carry an
            // embedded instruction, one eighth are a bare instruction; the
            // model must key on the imperative itself, not on document shape.
            let (text, reply) = match i % 8 {
                0 | 2 | 4 | 6 => (doc.text.clone(), REPLY_PLAIN),
                1 | 3 | 5 => {
                    let seed = rng::derive_seed(config.seed, &["toy", "insert", &doc.id]);
                    let sample = insert_instructions(
                        doc,
                        &instructions,
                        policies[(i / 2) % policies.len()],
                        NonZeroUsize::new(1).expect("1 > 0"),
                        seed,
                    )
                    .expect("synthetic docs segment cleanly");
                    (sample.text, REPLY_INSTRUCTED)
                }
                _ => {
                    use rand::seq::SliceRandom;
                    let instr = instructions
                        .choose(&mut pick_rng)
                        .expect("non-empty instruction pool");
                    (instr.text.clone(), REPLY_INSTRUCTED)
                }
            };
            let (mut tokens, targets_from) = encoder
                .encode_with_response(&text, Some(reply), &opts)
                .expect("non-empty synthetic text");
            tokens.push(TOKEN_EOS);
            Dialogue {
                tokens,
                targets_from,
            }
        })
        .collect()
}

/// Train the toy instruct model from scratch. Deterministic in `config`.
pub fn train_toy_model(config: &ToyTrainConfig) -> TinyLm {
    let dialogues = build_dialogues(config);
    let mut model = TinyLm::new(
        config.model.clone(),
        rng::derive_seed(config.seed, &["toy", "init"]),
        TOY_MODEL_ID,
    );
    let mut adam = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..dialogues.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::stream(
            config.seed,
            &["toy", "epoch", &epoch.to_string()],
        ));
        let mut epoch_loss = 0.0;
        for &idx in &order {
            let d = &dialogues[idx];
            let (loss, grads) = model.loss_and_grads(&d.tokens, d.targets_from, GradScope::All);
            epoch_loss += loss;
            let mut pairs = model.params_with_grads(&grads);
            adam.step(&mut pairs, config.grad_clip);
        }
        log::info!(
            "toy tuning epoch {}: mean loss {:.4}",
            epoch,
            epoch_loss / dialogues.len() as f64
        );
    }
    model
}

/// Bumped whenever the model or tokenizer code changes in a way that makes
/// previously cached weights stale.
const TOY_CACHE_VERSION: u32 = 5;

fn cache_path(dir: &Path, config: &ToyTrainConfig) -> PathBuf {
    dir.join(format!(
        "toy-instruct-v{TOY_CACHE_VERSION}-{}.sgc",
        &config.fingerprint()[..16]
    ))
}

/// The default toy model: loaded from `cache_dir` when present, trained and
/// cached otherwise.
pub fn toy_instruct_model(cache_dir: Option<&Path>) -> Result<TinyLm, ModelError> {
    let config = ToyTrainConfig::default();
    if let Some(dir) = cache_dir {
        let path = cache_path(dir, &config);
        if path.exists() {
            match TinyLm::load(&path) {
                Ok(model) => return Ok(model),
                Err(err) => log::warn!("discarding unreadable toy cache {path:?}: {err}"),
            }
        }
        let model = train_toy_model(&config);
        std::fs::create_dir_all(dir).map_err(|source| ModelError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        model.save(&path)?;
        Ok(model)
    } else {
        Ok(train_toy_model(&config))
    }
}

/// Mean response loss for a set of texts under a fixed reply; used to check
/// that tuning actually separated the two behaviors.
pub fn mean_response_loss(model: &TinyLm, texts: &[String], reply: &str, max_tokens: usize) -> f64 {
    let opts = EncodeOptions {
        max_tokens,
        use_chat_template: true,
    };
    let mut total = 0.0;
    for text in texts {
        let (tokens, from) = model
            .encode_with_response(text, Some(reply), &opts)
            .expect("non-empty text");
        total += model.loss(&tokens, from);
    }
    total / texts.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tuning_is_deterministic() {
        let config = ToyTrainConfig {
            examples: 6,
            epochs: 1,
            model: TinyLmConfig {
                num_layers: 2,
                hidden_dim: 16,
                num_heads: 2,
                ff_dim: 32,
                max_positions: 256,
            },
            ..Default::default()
        };
        let a = train_toy_model(&config);
        let b = train_toy_model(&config);
        for name in a.tensor_names() {
            assert_eq!(a.tensor(&name), b.tensor(&name), "tensor {name} differs");
        }
    }

    #[test]
    fn cache_roundtrip_reproduces_the_model() {
        let dir = tempfile::tempdir().unwrap();
        let config = ToyTrainConfig {
            examples: 4,
            epochs: 1,
            model: TinyLmConfig {
                num_layers: 2,
                hidden_dim: 16,
                num_heads: 2,
                ff_dim: 32,
                max_positions: 256,
            },
            ..Default::default()
        };
        let trained = train_toy_model(&config);
        let path = cache_path(dir.path(), &config);
        trained.save(&path).unwrap();
        let loaded = TinyLm::load(&path).unwrap();
        for name in trained.tensor_names() {
            assert_eq!(trained.tensor(&name), loaded.tensor(&name));
        }
    }
}
