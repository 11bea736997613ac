//! The on-disk feature store.
//!
//! A store directory holds `manifest.json`, `hidden.f32`, `grad.f32`,
//! `labels.u8` and `ids.txt`. The float files are raw little-endian f32
//! arrays in record order; record order is the line order of `ids.txt`. The
//! manifest pins dimensions, byte order, concatenation order and the
//! extraction fingerprint, and lists any skipped samples.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{maxpool_reduce, pooled_dim, FeatureError};
use crate::corpus::LabeledSample;
use crate::model::{ExtractionConfig, ModelAdapter, ModelError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkippedSample {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoreManifest {
    pub format_version: u32,
    pub extraction: ExtractionConfig,
    pub fingerprint: String,
    pub hidden_dim: usize,
    pub grad_dim: usize,
    pub count: usize,
    pub byte_order: String,
    pub record_order: String,
    pub concat_order: String,
    pub attention_matrices: Vec<String>,
    pub skipped: Vec<SkippedSample>,
    pub label_counts: BTreeMap<String, usize>,
    /// Where the samples came from, for humans.
    pub source: String,
}

/// Extracted features for a sample list, one record per surviving sample.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    pub manifest: StoreManifest,
    pub ids: Vec<String>,
    pub labels: Vec<u8>,
    /// count x hidden_dim.
    pub hidden: Array2<f32>,
    /// count x grad_dim.
    pub grad: Array2<f32>,
}

impl FeatureStore {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn fingerprint(&self) -> &str {
        &self.manifest.fingerprint
    }
}

/// Run the extraction pipeline over `samples`.
///
/// Per sample: one forward pass for the hidden state at the configured
/// layer, one backward pass for the attention gradients under the paired
/// response, then max-pooling. Samples that fail with a non-finite gradient
/// or empty input are recorded as skipped, never silently dropped.
pub fn extract_features(
    adapter: &dyn ModelAdapter,
    config: &ExtractionConfig,
    samples: &[LabeledSample],
    source: &str,
) -> Result<FeatureStore, FeatureError> {
    let meta = adapter.meta();
    if config.model_id != meta.model_id {
        return Err(FeatureError::FingerprintMismatch {
            config_model: config.model_id.clone(),
            adapter_model: meta.model_id.clone(),
        });
    }
    if config.layer >= meta.num_layers {
        return Err(FeatureError::Model(ModelError::LayerOutOfRange {
            layer: config.layer,
            num_layers: meta.num_layers,
        }));
    }
    let shapes = &meta.attention_param_shapes[config.layer];
    let hidden_dim = meta.hidden_dim;
    let grad_dim = pooled_dim(shapes, &config.pooling);
    let opts = config.encode_options();

    let mut ids = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut hidden_flat: Vec<f32> = Vec::with_capacity(samples.len() * hidden_dim);
    let mut grad_flat: Vec<f32> = Vec::with_capacity(samples.len() * grad_dim);
    let mut skipped = Vec::new();

    for sample in samples {
        let result = (|| -> Result<(Vec<f32>, Vec<f32>), ModelError> {
            let hidden = adapter.hidden_state(&sample.text, config.layer, &opts)?;
            let bundle = adapter.attention_gradients(
                &sample.text,
                &config.paired_response,
                config.layer,
                &opts,
            )?;
            let grad = maxpool_reduce(&bundle, shapes, &config.pooling)
                .expect("bundle shapes come from the same adapter meta");
            Ok((hidden, grad))
        })();
        match result {
            Ok((hidden, grad)) => {
                debug_assert_eq!(hidden.len(), hidden_dim);
                debug_assert_eq!(grad.len(), grad_dim);
                ids.push(sample.id.clone());
                labels.push(sample.label);
                hidden_flat.extend_from_slice(&hidden);
                grad_flat.extend_from_slice(&grad);
            }
            Err(err @ (ModelError::NonFiniteGradient { .. } | ModelError::EmptyInput)) => {
                log::warn!("skipping sample {}: {err}", sample.id);
                skipped.push(SkippedSample {
                    id: sample.id.clone(),
                    reason: err.to_string(),
                });
            }
            Err(fatal) => return Err(fatal.into()),
        }
    }

    let count = ids.len();
    let mut label_counts = BTreeMap::new();
    for l in &labels {
        *label_counts.entry(l.to_string()).or_insert(0usize) += 1;
    }
    let manifest = StoreManifest {
        format_version: 1,
        extraction: config.clone(),
        fingerprint: config.fingerprint(),
        hidden_dim,
        grad_dim,
        count,
        byte_order: "little-endian".into(),
        record_order: "ids.txt".into(),
        concat_order: "hidden-first".into(),
        attention_matrices: shapes.iter().map(|(n, _, _)| n.clone()).collect(),
        skipped,
        label_counts,
        source: source.into(),
    };
    Ok(FeatureStore {
        manifest,
        ids,
        labels,
        hidden: Array2::from_shape_vec((count, hidden_dim), hidden_flat)
            .expect("row-major layout"),
        grad: Array2::from_shape_vec((count, grad_dim), grad_flat).expect("row-major layout"),
    })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> FeatureError + '_ {
    move |source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_store(dir: &Path, store: &FeatureStore) -> Result<(), FeatureError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;

    let manifest_path = dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&store.manifest).expect("serializable manifest");
    std::fs::write(&manifest_path, body).map_err(io_err(&manifest_path))?;

    let ids_path = dir.join("ids.txt");
    let mut ids_file = std::io::BufWriter::new(
        std::fs::File::create(&ids_path).map_err(io_err(&ids_path))?,
    );
    for id in &store.ids {
        writeln!(ids_file, "{id}").map_err(io_err(&ids_path))?;
    }
    ids_file.flush().map_err(io_err(&ids_path))?;

    let labels_path = dir.join("labels.u8");
    std::fs::write(&labels_path, &store.labels).map_err(io_err(&labels_path))?;

    for (name, array) in [("hidden.f32", &store.hidden), ("grad.f32", &store.grad)] {
        let path = dir.join(name);
        let mut bytes = Vec::with_capacity(array.len() * 4);
        for &v in array.as_slice().expect("contiguous") {
            debug_assert!(v.is_finite(), "non-finite value in {name}");
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    Ok(())
}

pub fn read_store(dir: &Path) -> Result<FeatureStore, FeatureError> {
    let bad = |reason: String| FeatureError::BadStore {
        path: dir.display().to_string(),
        reason,
    };
    let manifest_path = dir.join("manifest.json");
    let body = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: StoreManifest =
        serde_json::from_str(&body).map_err(|e| bad(format!("manifest: {e}")))?;

    let ids_path = dir.join("ids.txt");
    let ids_body = std::fs::read_to_string(&ids_path).map_err(io_err(&ids_path))?;
    let ids: Vec<String> = ids_body.lines().map(str::to_string).collect();

    let labels_path = dir.join("labels.u8");
    let labels = std::fs::read(&labels_path).map_err(io_err(&labels_path))?;

    if ids.len() != manifest.count || labels.len() != manifest.count {
        return Err(bad(format!(
            "count mismatch: manifest {} ids {} labels {}",
            manifest.count,
            ids.len(),
            labels.len()
        )));
    }

    let read_f32 = |name: &str, cols: usize| -> Result<Array2<f32>, FeatureError> {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        if bytes.len() != manifest.count * cols * 4 {
            return Err(bad(format!(
                "{name} holds {} bytes, expected {}",
                bytes.len(),
                manifest.count * cols * 4
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("{name} contains non-finite values")));
        }
        Array2::from_shape_vec((manifest.count, cols), values)
            .map_err(|e| bad(format!("{name}: {e}")))
    };
    let hidden = read_f32("hidden.f32", manifest.hidden_dim)?;
    let grad = read_f32("grad.f32", manifest.grad_dim)?;

    Ok(FeatureStore {
        manifest,
        ids,
        labels,
        hidden,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth, PositionPolicy};
    use crate::model::{MockSpec, TinyLm};

    fn samples() -> Vec<LabeledSample> {
        let docs = synth::synthetic_documents(4, 3, synth::SynthProfile::Eval);
        docs.iter()
            .enumerate()
            .map(|(i, d)| LabeledSample {
                id: format!("s{i}"),
                text: d.text.clone(),
                label: (i % 2) as u8,
                injected_spans: vec![],
                origin_doc_id: d.id.clone(),
                position_policy: PositionPolicy::Random,
                instruction_count: 0,
            })
            .map(|mut s| {
                // Keep the invariant label==1 <=> spans non-empty out of the
                // way; extraction does not depend on it.
                s.label = 0;
                s
            })
            .collect()
    }

    fn tiny_config() -> (TinyLm, ExtractionConfig) {
        let model = TinyLm::mock(&MockSpec {
            seed: 9,
            layers: 2,
            hidden: 16,
            heads: 2,
            sentinel: None,
            sentinel_scale: 0.0,
        });
        let mut config = ExtractionConfig::new(model.meta().model_id.clone(), 1);
        config.pooling = crate::features::PoolingSpec::new(5, 5, crate::features::PoolMode::Raw);
        (model, config)
    }

    #[test]
    fn extraction_produces_one_record_per_sample() {
        let (model, config) = tiny_config();
        let store = extract_features(&model, &config, &samples(), "test").unwrap();
        assert_eq!(store.len(), 4);
        assert_eq!(store.hidden.ncols(), 16);
        // Four 16x16 matrices pooled 5x5: 4 * ceil(16/5)^2 = 4 * 16.
        assert_eq!(store.grad.ncols(), 64);
        assert_eq!(store.manifest.grad_dim, 64);
    }

    #[test]
    fn extraction_is_deterministic_and_roundtrips() {
        let (model, config) = tiny_config();
        let store1 = extract_features(&model, &config, &samples(), "test").unwrap();
        let store2 = extract_features(&model, &config, &samples(), "test").unwrap();
        assert_eq!(store1.hidden, store2.hidden);
        assert_eq!(store1.grad, store2.grad);

        let dir = tempfile::tempdir().unwrap();
        write_store(dir.path(), &store1).unwrap();
        let read = read_store(dir.path()).unwrap();
        assert_eq!(read.hidden, store1.hidden);
        assert_eq!(read.grad, store1.grad);
        assert_eq!(read.ids, store1.ids);
        assert_eq!(read.manifest.fingerprint, store1.manifest.fingerprint);

        // Byte-identical files on a second write.
        let dir2 = tempfile::tempdir().unwrap();
        write_store(dir2.path(), &store2).unwrap();
        for name in ["hidden.f32", "grad.f32", "labels.u8", "ids.txt"] {
            assert_eq!(
                std::fs::read(dir.path().join(name)).unwrap(),
                std::fs::read(dir2.path().join(name)).unwrap(),
                "file {name} differs"
            );
        }
    }

    #[test]
    fn record_matches_standalone_hidden_state_call() {
        let (model, config) = tiny_config();
        let set = samples();
        let store = extract_features(&model, &config, &set, "test").unwrap();
        use crate::model::ModelAdapter;
        let standalone = model
            .hidden_state(&set[2].text, config.layer, &config.encode_options())
            .unwrap();
        assert_eq!(store.hidden.row(2).to_vec(), standalone);
    }

    #[test]
    fn mismatched_model_id_is_rejected() {
        let (model, mut config) = tiny_config();
        config.model_id = "some-other-model".into();
        let err = extract_features(&model, &config, &samples(), "test").unwrap_err();
        assert!(matches!(err, FeatureError::FingerprintMismatch { .. }));
    }

    #[test]
    fn empty_document_is_skipped_and_recorded() {
        let (model, config) = tiny_config();
        let mut set = samples();
        set[1].text = String::new();
        let store = extract_features(&model, &config, &set, "test").unwrap();
        assert_eq!(store.len(), 3);
        assert_eq!(store.manifest.skipped.len(), 1);
        assert_eq!(store.manifest.skipped[0].id, "s1");
    }
}
