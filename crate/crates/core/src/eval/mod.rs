//! Measurement protocols: detection accuracy, single-feature ablations,
//! layer sweeps, paired-response and insertion ablations, prompt baselines,
//! and the attack-success-rate harness.

mod asr;
mod baselines;
mod chat;

pub use asr::{
    asr_eval, attack_samples, AlwaysFlag, AsrEvaluation, ASRReport, AttackOutcome, AttackSample,
    Defense, DetectorDefense, TaskPrompt, DEFAULT_TASK_TEMPLATE,
};
pub use baselines::{
    baseline_few_shot, baseline_response_check, baseline_zero_shot, few_shot_examples,
    parse_binary_verdict, render_few_shot, render_response_check, render_zero_shot,
    BaselineVerdict, Judge, JUDGE_RUBRIC_VERSION,
};
pub use chat::{
    ChatError, ChatMessage, ChatModel, ChatRole, HttpChat, ScriptRule, ScriptedChat, TinyChat,
};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_corpus, CorpusConfig, CorpusSplit, Document, InstructionRecord, LabeledSample,
    PositionPolicy,
};
use crate::detector::{train, DetectorError, DetectorModel, FeatureMode, TrainConfig, Verdict};
use crate::features::{extract_features, FeatureError, FeatureStore, StoreManifest};
use crate::model::{ExtractionConfig, ModelAdapter, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Chat(#[from] ChatError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("attack sample {id} is not an injected sample with recorded spans")]
    InvalidAttackSample { id: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Accuracy and confusion counts over one dataset combination.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_tag: String,
    pub n: usize,
    pub accuracy: f64,
    #[serde(rename = "tp")]
    pub true_positives: usize,
    #[serde(rename = "tn")]
    pub true_negatives: usize,
    #[serde(rename = "fp")]
    pub false_positives: usize,
    #[serde(rename = "fn")]
    pub false_negatives: usize,
    pub config_fingerprint: String,
}

impl EvalReport {
    pub fn from_verdicts(
        dataset_tag: impl Into<String>,
        verdicts: &[Verdict],
        labels: &[u8],
        fingerprint: impl Into<String>,
    ) -> Self {
        assert_eq!(verdicts.len(), labels.len());
        let mut tp = 0;
        let mut tn = 0;
        let mut fp = 0;
        let mut fn_ = 0;
        for (v, &label) in verdicts.iter().zip(labels) {
            match (v.label, label) {
                (1, 1) => tp += 1,
                (0, 0) => tn += 1,
                (1, 0) => fp += 1,
                (0, 1) => fn_ += 1,
                _ => unreachable!("labels are binary"),
            }
        }
        let n = verdicts.len();
        Self {
            dataset_tag: dataset_tag.into(),
            n,
            accuracy: if n == 0 {
                0.0
            } else {
                (tp + tn) as f64 / n as f64
            },
            true_positives: tp,
            true_negatives: tn,
            false_positives: fp,
            false_negatives: fn_,
            config_fingerprint: fingerprint.into(),
        }
    }
}

/// Score a feature store with a trained detector.
pub fn detection_accuracy(
    model: &DetectorModel,
    store: &FeatureStore,
    dataset_tag: &str,
) -> Result<EvalReport, EvalError> {
    let verdicts = model.score_store(store)?;
    Ok(EvalReport::from_verdicts(
        dataset_tag,
        &verdicts,
        &store.labels,
        store.manifest.fingerprint.clone(),
    ))
}

/// Retrain with one feature channel and evaluate on the same split.
pub fn ablate_single_feature(
    train_store: &FeatureStore,
    val_store: Option<&FeatureStore>,
    test_store: &FeatureStore,
    kind: FeatureMode,
    base_config: &TrainConfig,
    dataset_tag: &str,
) -> Result<(DetectorModel, EvalReport), EvalError> {
    let mut config = base_config.clone();
    config.mode = kind;
    let model = train(train_store, val_store, &config)?;
    let report = detection_accuracy(&model, test_store, dataset_tag)?;
    Ok((model, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Hidden,
    Gradient,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSweepResult {
    pub feature_kind: FeatureKind,
    pub per_layer_accuracy: Vec<(usize, f64)>,
    pub best_layer: usize,
}

/// Argmax over `(layer, accuracy)` pairs; ties go to the lower layer index.
pub(crate) fn best_layer(per_layer: &[(usize, f64)]) -> usize {
    let mut best = per_layer[0];
    for &(layer, acc) in &per_layer[1..] {
        if acc > best.1 || (acc == best.1 && layer < best.0) {
            best = (layer, acc);
        }
    }
    best.0
}

/// Train one small classifier per layer and report validation accuracy.
///
/// Hidden features for every layer come from a single forward pass per
/// sample; gradient features need one backward pass per layer.
pub fn layer_sweep(
    adapter: &dyn ModelAdapter,
    base_config: &ExtractionConfig,
    train_samples: &[LabeledSample],
    validation: &[LabeledSample],
    kind: FeatureKind,
    layers: std::ops::Range<usize>,
    sweep_train: &TrainConfig,
) -> Result<LayerSweepResult, EvalError> {
    assert!(!validation.is_empty(), "layer sweep needs a validation split");
    let meta = adapter.meta();
    let hidden_dim = meta.hidden_dim;
    let opts = base_config.encode_options();

    let mut per_layer_accuracy = Vec::new();
    match kind {
        FeatureKind::Hidden => {
            // One forward per sample, reused across all layers.
            let collect = |samples: &[LabeledSample]| -> Result<(Vec<Vec<Vec<f32>>>, Vec<u8>), EvalError> {
                let mut all = Vec::with_capacity(samples.len());
                let mut labels = Vec::with_capacity(samples.len());
                for s in samples {
                    all.push(adapter.hidden_states_all_layers(&s.text, &opts)?);
                    labels.push(s.label);
                }
                Ok((all, labels))
            };
            let (train_states, train_labels) = collect(train_samples)?;
            let (val_states, val_labels) = collect(validation)?;
            for layer in layers {
                let mut config = base_config.clone();
                config.layer = layer;
                let train_store =
                    hidden_only_store(&config, &train_states, &train_labels, hidden_dim, layer);
                let val_store =
                    hidden_only_store(&config, &val_states, &val_labels, hidden_dim, layer);
                let mut tc = sweep_train.clone();
                tc.mode = FeatureMode::HiddenOnly;
                let model = train(&train_store, None, &tc)?;
                let report = detection_accuracy(&model, &val_store, "sweep")?;
                per_layer_accuracy.push((layer, report.accuracy));
            }
        }
        FeatureKind::Gradient => {
            for layer in layers {
                let mut config = base_config.clone();
                config.layer = layer;
                let train_store =
                    extract_features(adapter, &config, train_samples, "sweep-train")?;
                let val_store = extract_features(adapter, &config, validation, "sweep-val")?;
                let mut tc = sweep_train.clone();
                tc.mode = FeatureMode::GradOnly;
                let model = train(&train_store, None, &tc)?;
                let report = detection_accuracy(&model, &val_store, "sweep")?;
                per_layer_accuracy.push((layer, report.accuracy));
            }
        }
    }
    Ok(LayerSweepResult {
        feature_kind: kind,
        best_layer: best_layer(&per_layer_accuracy),
        per_layer_accuracy,
    })
}

/// Build a hidden-only feature store for one layer from pre-collected
/// all-layer states.
fn hidden_only_store(
    config: &ExtractionConfig,
    states: &[Vec<Vec<f32>>],
    labels: &[u8],
    hidden_dim: usize,
    layer: usize,
) -> FeatureStore {
    let count = states.len();
    let mut hidden = Vec::with_capacity(count * hidden_dim);
    for s in states {
        hidden.extend_from_slice(&s[layer]);
    }
    let mut label_counts = std::collections::BTreeMap::new();
    for l in labels {
        *label_counts.entry(l.to_string()).or_insert(0usize) += 1;
    }
    FeatureStore {
        manifest: StoreManifest {
            format_version: 1,
            fingerprint: config.fingerprint(),
            extraction: config.clone(),
            hidden_dim,
            grad_dim: 1,
            count,
            byte_order: "little-endian".into(),
            record_order: "ids.txt".into(),
            concat_order: "hidden-first".into(),
            attention_matrices: vec![],
            skipped: vec![],
            label_counts,
            source: "layer-sweep".into(),
        },
        ids: (0..count).map(|i| format!("sweep-{i}")).collect(),
        labels: labels.to_vec(),
        hidden: Array2::from_shape_vec((count, hidden_dim), hidden).expect("row-major layout"),
        grad: Array2::zeros((count, 1)),
    }
}

/// The candidate paired responses compared in the response ablation, in
/// report order. "Sure" is the production default.
pub const DEFAULT_RESPONSE_CANDIDATES: [&str; 4] = ["I'm sorry", "Hello", "Yes", "Sure"];

/// One full extract/train/eval cycle per candidate paired response.
pub fn response_ablation(
    adapter: &dyn ModelAdapter,
    corpus: &CorpusSplit,
    base_config: &ExtractionConfig,
    candidates: &[String],
    train_config: &TrainConfig,
) -> Result<Vec<(String, EvalReport)>, EvalError> {
    assert!(!candidates.is_empty(), "need at least one candidate response");
    let mut reports = Vec::with_capacity(candidates.len());
    for candidate in candidates {
        let mut config = base_config.clone();
        config.paired_response = candidate.clone();
        let train_store = extract_features(adapter, &config, &corpus.train, "ablation-train")?;
        let val_store = if corpus.validation.is_empty() {
            None
        } else {
            Some(extract_features(
                adapter,
                &config,
                &corpus.validation,
                "ablation-val",
            )?)
        };
        let test_store = extract_features(adapter, &config, &corpus.test, "ablation-test")?;
        let model = train(&train_store, val_store.as_ref(), train_config)?;
        let report = detection_accuracy(&model, &test_store, &format!("response={candidate}"))?;
        reports.push((candidate.clone(), report));
    }
    Ok(reports)
}

/// Regenerate the test corpus for each insertion-count and position cell and
/// score it with one fixed trained model. The training corpus never changes.
pub fn insertion_ablation(
    adapter: &dyn ModelAdapter,
    model: &DetectorModel,
    externals: &[Document],
    instructions: &[InstructionRecord],
    base_corpus: &CorpusConfig,
    counts: &[usize],
    positions: &[PositionPolicy],
) -> Result<Vec<EvalReport>, EvalError> {
    let config = &model.extraction;
    let mut reports = Vec::new();
    let mut run_cell = |corpus_config: CorpusConfig, tag: String| -> Result<(), EvalError> {
        let split = build_corpus(externals, instructions, &corpus_config)?;
        let store = extract_features(adapter, config, &split.test, &tag)?;
        reports.push(detection_accuracy(model, &store, &tag)?);
        Ok(())
    };
    for &count in counts {
        let mut cell = base_corpus.clone();
        cell.test_count = count;
        run_cell(cell, format!("count={count}"))?;
    }
    for &position in positions {
        let mut cell = base_corpus.clone();
        cell.test_policy = position;
        run_cell(cell, format!("position={position}"))?;
    }
    Ok(reports)
}

/// Render reports as an aligned text table.
pub fn render_report_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let tag_width = reports
        .iter()
        .map(|r| r.dataset_tag.len())
        .max()
        .unwrap_or(8)
        .max(8);
    out.push_str(&format!(
        "{:<tag_width$}  {:>6}  {:>8}  {:>5} {:>5} {:>5} {:>5}\n",
        "dataset", "n", "accuracy", "tp", "tn", "fp", "fn"
    ));
    for r in reports {
        out.push_str(&format!(
            "{:<tag_width$}  {:>6}  {:>7.2}%  {:>5} {:>5} {:>5} {:>5}\n",
            r.dataset_tag,
            r.n,
            r.accuracy * 100.0,
            r.true_positives,
            r.true_negatives,
            r.false_positives,
            r.false_negatives,
        ));
    }
    out
}

/// Write a layer sweep as `layer,accuracy` CSV.
pub fn write_sweep_csv(
    path: &std::path::Path,
    sweep: &LayerSweepResult,
) -> Result<(), EvalError> {
    let map_err = |source: std::io::Error| EvalError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut writer = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => map_err(source),
        other => map_err(std::io::Error::other(format!("{other:?}"))),
    })?;
    writer
        .write_record(["layer", "accuracy"])
        .map_err(|e| map_err(std::io::Error::other(e.to_string())))?;
    for (layer, acc) in &sweep.per_layer_accuracy {
        writer
            .write_record([layer.to_string(), format!("{acc:.6}")])
            .map_err(|e| map_err(std::io::Error::other(e.to_string())))?;
    }
    writer
        .flush()
        .map_err(|e| map_err(std::io::Error::other(e.to_string())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn best_layer_breaks_ties_toward_lower_index() {
        assert_eq!(best_layer(&[(0, 0.5), (1, 0.9), (2, 0.9)]), 1);
        assert_eq!(best_layer(&[(3, 0.7), (1, 0.7), (2, 0.6)]), 1);
        assert_eq!(best_layer(&[(0, 0.2)]), 0);
    }

    #[test]
    fn report_counts_add_up() {
        let verdicts = vec![
            Verdict {
                sample_id: "a".into(),
                score: 0.9,
                label: 1,
            },
            Verdict {
                sample_id: "b".into(),
                score: 0.2,
                label: 0,
            },
            Verdict {
                sample_id: "c".into(),
                score: 0.7,
                label: 1,
            },
            Verdict {
                sample_id: "d".into(),
                score: 0.1,
                label: 0,
            },
        ];
        let labels = vec![1, 0, 0, 1];
        let report = EvalReport::from_verdicts("t", &verdicts, &labels, "fp");
        assert_eq!(report.true_positives, 1);
        assert_eq!(report.true_negatives, 1);
        assert_eq!(report.false_positives, 1);
        assert_eq!(report.false_negatives, 1);
        assert_eq!(report.accuracy, 0.5);
        assert_eq!(
            report.true_positives
                + report.true_negatives
                + report.false_positives
                + report.false_negatives,
            report.n
        );
    }

    #[test]
    fn report_json_uses_short_confusion_keys() {
        let report = EvalReport::from_verdicts("t", &[], &[], "fp");
        let json = serde_json::to_value(&report).unwrap();
        assert!(json.get("tp").is_some());
        assert!(json.get("fn").is_some());
    }
}
