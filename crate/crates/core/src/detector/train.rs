//! Joint end-to-end training of the projection and the MLP head.

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::mlp::{softmax_rows, AdamF32, Mlp};
use super::{
    assemble_inputs, normalize_rows_backward, DetectorError, DetectorModel, FeatureMode,
    NormScheme, TrainingManifest,
};
use crate::features::{FeatureStore, ProjectionParams};
use crate::{fingerprint, rng};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping. Ignored when
    /// no validation store is supplied.
    pub patience: usize,
    pub threshold: f32,
    pub mode: FeatureMode,
    /// Hidden layer widths between the input and the two logits.
    pub hidden_sizes: Vec<usize>,
    pub allow_unbalanced: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 200,
            patience: 20,
            threshold: 0.5,
            mode: FeatureMode::Fused,
            hidden_sizes: vec![1024, 256, 64, 16],
            allow_unbalanced: false,
        }
    }
}

fn data_hash(store: &FeatureStore) -> String {
    let mut bytes = Vec::with_capacity(store.len() * 8);
    for &v in store.hidden.iter().chain(store.grad.iter()) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend_from_slice(&store.labels);
    fingerprint::sha256_hex(&bytes)
}

struct Snapshot {
    projection: Option<ProjectionParams>,
    mlp: Mlp,
}

/// Train a detector on `train_store`, optionally early-stopping on
/// `val_store` accuracy. Deterministic for a fixed seed.
pub fn train(
    train_store: &FeatureStore,
    val_store: Option<&FeatureStore>,
    config: &TrainConfig,
) -> Result<DetectorModel, DetectorError> {
    let n = train_store.len();
    let positives = train_store.labels.iter().filter(|&&l| l == 1).count();
    let negatives = n - positives;
    if positives == 0 || negatives == 0 {
        return Err(DetectorError::DegenerateLabels);
    }
    if positives != negatives && !config.allow_unbalanced {
        return Err(DetectorError::UnbalancedTraining {
            positives,
            negatives,
        });
    }
    if let Some(val) = val_store {
        if val.manifest.fingerprint != train_store.manifest.fingerprint {
            return Err(DetectorError::FingerprintMismatch {
                model: train_store.manifest.fingerprint.clone(),
                features: val.manifest.fingerprint.clone(),
            });
        }
    }

    let hidden_dim = train_store.hidden.ncols();
    let grad_dim = train_store.grad.ncols();
    let input_dim = match config.mode {
        FeatureMode::Fused => 2 * hidden_dim,
        FeatureMode::HiddenOnly | FeatureMode::GradOnly => hidden_dim,
    };
    let mut dims = vec![input_dim];
    dims.extend_from_slice(&config.hidden_sizes);
    dims.push(2);

    let mut init_rng = rng::stream(config.seed, &["detector", "init"]);
    let mut projection = match config.mode {
        FeatureMode::HiddenOnly => None,
        _ => {
            // Small-variance random weights, zero bias.
            let std = 0.02f32;
            let mut p = ProjectionParams::zeros(grad_dim, hidden_dim);
            p.weight = Array2::from_shape_fn((grad_dim, hidden_dim), |_| {
                use rand::Rng;
                let u1: f32 = init_rng.gen_range(f32::MIN_POSITIVE..1.0);
                let u2: f32 = init_rng.gen();
                std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
            });
            Some(p)
        }
    };
    let mut mlp = Mlp::new_random(&dims, &mut init_rng);

    let mut adam = AdamF32::new(config.learning_rate);
    let mut order: Vec<usize> = (0..n).collect();
    let mut loss_curve = Vec::with_capacity(config.max_epochs);
    let mut best: Option<(f64, Snapshot)> = None;
    let mut epochs_since_best = 0usize;
    let mut epochs_run = 0usize;
    let mut early_stopped = false;

    for epoch in 0..config.max_epochs {
        epochs_run = epoch + 1;
        order.shuffle(&mut rng::stream(
            config.seed,
            &["detector", "epoch", &epoch.to_string()],
        ));
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let hidden = select_rows(&train_store.hidden, chunk);
            let grad = select_rows(&train_store.grad, chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train_store.labels[i] as usize).collect();

            let (x, proj_cache) = assemble_inputs(config.mode, &hidden, &grad, projection.as_ref());
            let (inputs, logits) = mlp.forward(&x);
            let probs = softmax_rows(&logits);
            let batch = labels.len() as f32;
            let mut loss = 0.0f64;
            let mut dlogits = probs;
            for (i, &y) in labels.iter().enumerate() {
                loss -= (dlogits[[i, y]].max(1e-12) as f64).ln();
                dlogits[[i, y]] -= 1.0;
            }
            dlogits.mapv_inplace(|v| v / batch);
            epoch_loss += loss / batch as f64;
            batches += 1;

            let (mlp_grads, dx) = mlp.backward(&inputs, dlogits);

            // Projection gradients flow through the normalized slice of x.
            let proj_grads = projection.as_ref().map(|_| {
                let cache = proj_cache.as_ref().expect("cache exists with projection");
                let dpn = match config.mode {
                    FeatureMode::Fused => dx.slice(ndarray::s![.., hidden_dim..]).to_owned(),
                    FeatureMode::GradOnly => dx.clone(),
                    FeatureMode::HiddenOnly => unreachable!("no projection in hidden mode"),
                };
                let dp = normalize_rows_backward(&dpn, cache);
                grad.t().dot(&dp)
            });

            let mut pairs: Vec<(&mut [f32], &[f32])> = Vec::new();
            for (layer, grads) in mlp.layers.iter_mut().zip(&mlp_grads) {
                pairs.push((
                    layer.weight.as_slice_mut().expect("contiguous"),
                    grads.weight.as_slice().expect("contiguous"),
                ));
                pairs.push((
                    layer.bias.as_slice_mut().expect("contiguous"),
                    grads.bias.as_slice().expect("contiguous"),
                ));
            }
            if let (Some(proj), Some(dw)) = (projection.as_mut(), proj_grads.as_ref()) {
                pairs.push((
                    proj.weight.as_slice_mut().expect("contiguous"),
                    dw.as_slice().expect("contiguous"),
                ));
            }
            adam.step(&mut pairs);
        }
        loss_curve.push((epoch_loss / batches.max(1) as f64) as f32);

        if let Some(val) = val_store {
            let acc = accuracy(
                config.mode,
                &mlp,
                projection.as_ref(),
                val,
                config.threshold,
            );
            let improved = best.as_ref().map(|(b, _)| acc > *b).unwrap_or(true);
            if improved {
                best = Some((
                    acc,
                    Snapshot {
                        projection: projection.clone(),
                        mlp: mlp.clone(),
                    },
                ));
                epochs_since_best = 0;
            } else {
                epochs_since_best += 1;
                if epochs_since_best >= config.patience {
                    early_stopped = true;
                    break;
                }
            }
        }
    }

    let best_val_accuracy = best.as_ref().map(|(acc, _)| *acc);
    if let Some((_, snapshot)) = best {
        projection = snapshot.projection;
        mlp = snapshot.mlp;
    }

    let final_train_accuracy = accuracy(
        config.mode,
        &mlp,
        projection.as_ref(),
        train_store,
        config.threshold,
    );
    let training = TrainingManifest {
        seed: config.seed,
        learning_rate: config.learning_rate,
        batch_size: config.batch_size,
        max_epochs: config.max_epochs,
        patience: config.patience,
        epochs_run,
        early_stopped,
        train_data_hash: data_hash(train_store),
        val_data_hash: val_store.map(data_hash),
        final_train_accuracy,
        best_val_accuracy,
        loss_curve,
    };
    Ok(DetectorModel {
        mode: config.mode,
        hidden_dim,
        grad_dim,
        projection,
        mlp,
        normalization: NormScheme::L2,
        extraction: train_store.manifest.extraction.clone(),
        fingerprint: train_store.manifest.fingerprint.clone(),
        training,
        threshold: config.threshold,
    })
}

fn select_rows(m: &Array2<f32>, idx: &[usize]) -> Array2<f32> {
    let mut out = Array2::zeros((idx.len(), m.ncols()));
    for (row, &i) in idx.iter().enumerate() {
        out.row_mut(row).assign(&m.row(i));
    }
    out
}

fn accuracy(
    mode: FeatureMode,
    mlp: &Mlp,
    projection: Option<&ProjectionParams>,
    store: &FeatureStore,
    threshold: f32,
) -> f64 {
    let (x, _) = assemble_inputs(mode, &store.hidden, &store.grad, projection);
    let (_, logits) = mlp.forward(&x);
    let probs = softmax_rows(&logits);
    let mut correct = 0usize;
    for (i, &label) in store.labels.iter().enumerate() {
        let predicted = u8::from(probs[[i, 1]] >= threshold);
        if predicted == label {
            correct += 1;
        }
    }
    correct as f64 / store.len().max(1) as f64
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::features::PoolingSpec;
    use crate::features::StoreManifest;
    use crate::model::ExtractionConfig;
    use rand::Rng;

    /// Two well-separated Gaussian blobs in both feature channels.
    pub(crate) fn blob_store(
        n_per_class: usize,
        hidden_dim: usize,
        grad_dim: usize,
        separation: f32,
        seed: u64,
    ) -> FeatureStore {
        let mut r = rng::stream(seed, &["blobs"]);
        let sigma = separation / 10.0;
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        let mut hidden = Vec::new();
        let mut grad = Vec::new();
        for i in 0..2 * n_per_class {
            let label = (i % 2) as u8;
            let center = if label == 1 { separation } else { -separation };
            ids.push(format!("blob-{i}"));
            labels.push(label);
            for _ in 0..hidden_dim {
                hidden.push(center + r.gen_range(-sigma..sigma));
            }
            for _ in 0..grad_dim {
                grad.push(-center + r.gen_range(-sigma..sigma));
            }
        }
        let config = ExtractionConfig {
            model_id: "blobs".into(),
            layer: 0,
            paired_response: "Sure".into(),
            max_tokens: 64,
            use_chat_template: true,
            pooling: PoolingSpec::default(),
        };
        let count = ids.len();
        FeatureStore {
            manifest: StoreManifest {
                format_version: 1,
                fingerprint: config.fingerprint(),
                extraction: config,
                hidden_dim,
                grad_dim,
                count,
                byte_order: "little-endian".into(),
                record_order: "ids.txt".into(),
                concat_order: "hidden-first".into(),
                attention_matrices: vec![],
                skipped: vec![],
                label_counts: Default::default(),
                source: "synthetic blobs".into(),
            },
            ids,
            labels,
            hidden: Array2::from_shape_vec((count, hidden_dim), hidden).unwrap(),
            grad: Array2::from_shape_vec((count, grad_dim), grad).unwrap(),
        }
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            max_epochs: 60,
            hidden_sizes: vec![32, 16],
            ..Default::default()
        }
    }

    #[test]
    fn separable_blobs_reach_full_training_accuracy() {
        let store = blob_store(50, 8, 12, 1.0, 3);
        let model = train(&store, None, &quick_config()).unwrap();
        assert_eq!(model.training.final_train_accuracy, 1.0);
    }

    #[test]
    fn single_class_store_is_degenerate() {
        let mut store = blob_store(10, 4, 4, 1.0, 3);
        store.labels.iter_mut().for_each(|l| *l = 1);
        assert!(matches!(
            train(&store, None, &quick_config()),
            Err(DetectorError::DegenerateLabels)
        ));
    }

    #[test]
    fn unbalanced_store_needs_waiver() {
        let mut store = blob_store(10, 4, 4, 1.0, 3);
        store.labels[0] = 1; // 11 positives, 9 negatives
        assert!(matches!(
            train(&store, None, &quick_config()),
            Err(DetectorError::UnbalancedTraining { .. })
        ));
        let mut waived = quick_config();
        waived.allow_unbalanced = true;
        assert!(train(&store, None, &waived).is_ok());
    }

    #[test]
    fn training_is_deterministic() {
        let store = blob_store(20, 6, 9, 1.0, 5);
        let a = train(&store, None, &quick_config()).unwrap();
        let b = train(&store, None, &quick_config()).unwrap();
        for (la, lb) in a.mlp.layers.iter().zip(&b.mlp.layers) {
            assert_eq!(la.weight, lb.weight);
            assert_eq!(la.bias, lb.bias);
        }
        let (pa, pb) = (a.projection.unwrap(), b.projection.unwrap());
        assert_eq!(pa.weight, pb.weight);
    }

    #[test]
    fn label_flip_flips_training_verdicts() {
        let store = blob_store(30, 6, 9, 1.0, 7);
        let mut flipped = store.clone();
        flipped.labels.iter_mut().for_each(|l| *l = 1 - *l);
        let m = train(&store, None, &quick_config()).unwrap();
        let mf = train(&flipped, None, &quick_config()).unwrap();
        let v = m.score_store(&store).unwrap();
        let vf = mf.score_store(&store).unwrap();
        for (a, b) in v.iter().zip(&vf) {
            assert_ne!(a.label, b.label, "sample {}", a.sample_id);
        }
    }

    #[test]
    fn held_out_blob_scores_with_margin() {
        let store = blob_store(50, 8, 12, 1.0, 3);
        let model = train(&store, None, &quick_config()).unwrap();
        let held_out = blob_store(5, 8, 12, 1.0, 999);
        for i in 0..held_out.len() {
            let v = model
                .predict(
                    &held_out.ids[i],
                    held_out.hidden.row(i).as_slice().unwrap(),
                    held_out.grad.row(i).as_slice().unwrap(),
                )
                .unwrap();
            if held_out.labels[i] == 1 {
                assert!(v.score > 0.9, "positive scored {}", v.score);
            } else {
                assert!(v.score < 0.1, "negative scored {}", v.score);
            }
        }
    }

    #[test]
    fn scores_are_scale_invariant_and_finite() {
        let store = blob_store(20, 6, 9, 1.0, 11);
        let model = train(&store, None, &quick_config()).unwrap();
        let h: Vec<f32> = store.hidden.row(0).to_vec();
        let g: Vec<f32> = store.grad.row(0).to_vec();
        let base = model.score(&h, &g).unwrap();
        assert!(base.is_finite());
        // Power-of-two factors scale floats without rounding, so invariance
        // is bit-exact; the linear projection and L2 normalization absorb
        // the factor structurally.
        let h2: Vec<f32> = h.iter().map(|v| v * 8.0).collect();
        let g2: Vec<f32> = g.iter().map(|v| v * 0.25).collect();
        assert_eq!(base, model.score(&h2, &g2).unwrap());
        // Arbitrary positive factors agree up to float rounding.
        let h3: Vec<f32> = h.iter().map(|v| v * 7.3).collect();
        let g3: Vec<f32> = g.iter().map(|v| v * 0.013).collect();
        let near = model.score(&h3, &g3).unwrap();
        assert!((near - base).abs() < 1e-5, "base {base} vs scaled {near}");
    }

    #[test]
    fn early_stopping_restores_best_snapshot() {
        let store = blob_store(30, 6, 9, 1.0, 13);
        let val = blob_store(10, 6, 9, 1.0, 14);
        let config = TrainConfig {
            max_epochs: 100,
            patience: 5,
            hidden_sizes: vec![16, 8],
            ..Default::default()
        };
        let model = train(&store, Some(&val), &config).unwrap();
        assert!(model.training.epochs_run <= 100);
        assert!(model.training.best_val_accuracy.unwrap() >= 0.9);
    }
}
