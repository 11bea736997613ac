//! Production-facing screening: batch pre-filtering with an on-disk cache,
//! and the recursive segment-level sanitizer.

mod cache;
mod service;

pub use cache::ScreenCache;
pub use service::{router, start_service, ScreenEngine, ServiceHandle};

use serde::{Deserialize, Serialize};

use crate::corpus::{segment_spans, Document};
use crate::detector::DetectorModel;
use crate::features::maxpool_reduce;
use crate::fingerprint;
use crate::model::ModelAdapter;

#[derive(Debug, thiserror::Error)]
pub enum ScreenError {
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
    #[error(transparent)]
    Detector(#[from] crate::detector::DetectorError),
    #[error("document {doc_id} yields zero sentences")]
    UnsegmentableDocument { doc_id: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Anything that can turn a document into an injection probability and is
/// bound to a detector fingerprint.
pub trait Scorer: Send + Sync {
    fn fingerprint(&self) -> &str;
    fn score(&self, text: &str) -> Result<f32, ScreenError>;
}

/// The production scorer: extract behavioral state, score with the trained
/// detector.
pub struct DetectorScorer<A, M>
where
    A: std::borrow::Borrow<dyn ModelAdapter + 'static>,
    M: std::borrow::Borrow<DetectorModel>,
{
    pub adapter: A,
    pub model: M,
}

impl<A, M> Scorer for DetectorScorer<A, M>
where
    A: std::borrow::Borrow<dyn ModelAdapter + 'static> + Send + Sync,
    M: std::borrow::Borrow<DetectorModel> + Send + Sync,
{
    fn fingerprint(&self) -> &str {
        &self.model.borrow().fingerprint
    }

    fn score(&self, text: &str) -> Result<f32, ScreenError> {
        let adapter = self.adapter.borrow();
        let model = self.model.borrow();
        let config = &model.extraction;
        let opts = config.encode_options();
        let hidden = adapter.hidden_state(text, config.layer, &opts)?;
        let bundle =
            adapter.attention_gradients(text, &config.paired_response, config.layer, &opts)?;
        let shapes = &adapter.meta().attention_param_shapes[config.layer];
        let grad = maxpool_reduce(&bundle, shapes, &config.pooling)?;
        Ok(model.score(&hidden, &grad)?)
    }
}

/// The score recorded when screening fails internally. Fail-closed: such
/// documents are always flagged.
pub const ERROR_SCORE: f32 = 1.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScreenConfig {
    pub threshold: f32,
}

impl Default for ScreenConfig {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScreenVerdict {
    pub doc_id: String,
    pub score: f32,
    pub flagged: bool,
    pub cache_hit: bool,
    pub detector_fingerprint: String,
}

/// Screen documents in order. Results are cached by (content hash, detector
/// fingerprint); internal errors flag the document with [`ERROR_SCORE`] and
/// are never cached.
pub fn screen(
    docs: &[Document],
    scorer: &dyn Scorer,
    cache: Option<&ScreenCache>,
    config: &ScreenConfig,
) -> Vec<ScreenVerdict> {
    let fingerprint = scorer.fingerprint().to_string();
    docs.iter()
        .map(|doc| {
            let text_hash = fingerprint::sha256_hex(doc.text.as_bytes());
            if let Some(cache) = cache {
                if let Some(score) = cache.get(&text_hash, &fingerprint) {
                    return ScreenVerdict {
                        doc_id: doc.id.clone(),
                        score,
                        flagged: score >= config.threshold,
                        cache_hit: true,
                        detector_fingerprint: fingerprint.clone(),
                    };
                }
            }
            match scorer.score(&doc.text) {
                Ok(score) => {
                    if let Some(cache) = cache {
                        if let Err(err) = cache.put(&text_hash, &fingerprint, score) {
                            log::warn!("cache write failed for {}: {err}", doc.id);
                        }
                    }
                    ScreenVerdict {
                        doc_id: doc.id.clone(),
                        score,
                        flagged: score >= config.threshold,
                        cache_hit: false,
                        detector_fingerprint: fingerprint.clone(),
                    }
                }
                Err(err) => {
                    log::warn!("screening failed on {}; failing closed: {err}", doc.id);
                    ScreenVerdict {
                        doc_id: doc.id.clone(),
                        score: ERROR_SCORE,
                        flagged: true,
                        cache_hit: false,
                        detector_fingerprint: fingerprint.clone(),
                    }
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SanitizeConfig {
    pub threshold: f32,
    pub max_depth: usize,
    pub min_sentences: usize,
}

impl Default for SanitizeConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            max_depth: 6,
            min_sentences: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SanitizeResult {
    pub doc_id: String,
    pub kept_text: String,
    /// Byte ranges removed from the original text, disjoint and ascending.
    pub removed_spans: Vec<(usize, usize)>,
    pub depth_used: usize,
}

/// Recursively halve the sentence list, keeping unflagged segments whole and
/// removing flagged segments that can no longer be split. Scorer errors fail
/// closed: the segment is treated as flagged.
pub fn sanitize(
    doc: &Document,
    scorer: &dyn Scorer,
    config: &SanitizeConfig,
) -> Result<SanitizeResult, ScreenError> {
    let spans = segment_spans(&doc.text);
    if spans.is_empty() {
        return Err(ScreenError::UnsegmentableDocument {
            doc_id: doc.id.clone(),
        });
    }

    let mut removed_sentences: Vec<(usize, usize)> = Vec::new();
    let mut depth_used = 0usize;
    let flagged_at = |text: &str, doc_id: &str| -> bool {
        match scorer.score(text) {
            Ok(score) => score >= config.threshold,
            Err(err) => {
                log::warn!("sanitize scoring failed on {doc_id}; failing closed: {err}");
                true
            }
        }
    };

    // Iterative depth-first split over sentence ranges.
    let mut stack = vec![(0usize, spans.len(), 0usize)];
    while let Some((lo, hi, depth)) = stack.pop() {
        depth_used = depth_used.max(depth);
        let segment = &doc.text[spans[lo].0..spans[hi - 1].1];
        if !flagged_at(segment, &doc.id) {
            continue;
        }
        if depth >= config.max_depth || hi - lo <= config.min_sentences.max(1) {
            removed_sentences.push((lo, hi));
            continue;
        }
        let mid = lo + (hi - lo) / 2;
        stack.push((mid, hi, depth + 1));
        stack.push((lo, mid, depth + 1));
    }

    removed_sentences.sort_unstable();
    // Merge adjacent ranges, then convert to byte spans that swallow the
    // trailing gap up to the next kept sentence.
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for (lo, hi) in removed_sentences {
        match merged.last_mut() {
            Some(last) if last.1 == lo => last.1 = hi,
            _ => merged.push((lo, hi)),
        }
    }
    let removed_spans: Vec<(usize, usize)> = merged
        .iter()
        .map(|&(lo, hi)| {
            let start = spans[lo].0;
            let end = if hi < spans.len() {
                spans[hi].0
            } else {
                doc.text.len()
            };
            (start, end)
        })
        .collect();

    let mut kept_text = String::with_capacity(doc.text.len());
    let mut cursor = 0usize;
    for &(start, end) in &removed_spans {
        kept_text.push_str(&doc.text[cursor..start]);
        cursor = end;
    }
    kept_text.push_str(&doc.text[cursor..]);

    Ok(SanitizeResult {
        doc_id: doc.id.clone(),
        kept_text,
        removed_spans,
        depth_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Flags exactly the segments containing a needle.
    pub(crate) struct NeedleScorer {
        pub needle: String,
        pub fingerprint: String,
    }

    impl Scorer for NeedleScorer {
        fn fingerprint(&self) -> &str {
            &self.fingerprint
        }
        fn score(&self, text: &str) -> Result<f32, ScreenError> {
            Ok(if text.contains(&self.needle) { 1.0 } else { 0.0 })
        }
    }

    fn doc(text: &str) -> Document {
        Document {
            id: "d".into(),
            text: text.into(),
            source: "test".into(),
            meta: Default::default(),
        }
    }

    fn needle_scorer() -> NeedleScorer {
        NeedleScorer {
            needle: "INJECT".into(),
            fingerprint: "stub-fp".into(),
        }
    }

    #[test]
    fn clean_document_is_kept_intact() {
        let d = doc("First sentence here. Second sentence there. Third one ends.");
        let result = sanitize(&d, &needle_scorer(), &SanitizeConfig::default()).unwrap();
        assert_eq!(result.kept_text, d.text);
        assert!(result.removed_spans.is_empty());
        assert_eq!(result.depth_used, 0);
    }

    #[test]
    fn single_injected_sentence_is_fully_removed() {
        let d = doc("INJECT everything now.");
        let result = sanitize(&d, &needle_scorer(), &SanitizeConfig::default()).unwrap();
        assert_eq!(result.kept_text, "");
        assert_eq!(result.removed_spans, vec![(0, d.text.len())]);
    }

    #[test]
    fn exactly_the_injected_sentence_is_removed() {
        let sentences: Vec<String> = (0..10)
            .map(|i| {
                if i == 4 {
                    "Now INJECT this one.".to_string()
                } else {
                    format!("Clean sentence number {i} stands here.")
                }
            })
            .collect();
        let d = doc(&sentences.join(" "));
        let result = sanitize(&d, &needle_scorer(), &SanitizeConfig::default()).unwrap();
        assert!(!result.kept_text.contains("INJECT"));
        for (i, s) in sentences.iter().enumerate() {
            if i != 4 {
                assert!(result.kept_text.contains(s), "lost clean sentence {i}");
            }
        }
        assert_eq!(result.removed_spans.len(), 1);
    }

    /// Scores normally except for documents containing a poison marker, on
    /// which it errors.
    struct FlakyScorer;

    impl Scorer for FlakyScorer {
        fn fingerprint(&self) -> &str {
            "flaky-fp"
        }
        fn score(&self, text: &str) -> Result<f32, ScreenError> {
            if text.contains("POISON") {
                Err(ScreenError::UnsegmentableDocument {
                    doc_id: "internal".into(),
                })
            } else {
                Ok(if text.contains("INJECT") { 0.9 } else { 0.1 })
            }
        }
    }

    #[test]
    fn screening_preserves_order_and_fails_closed() {
        let docs = vec![
            Document {
                id: "clean".into(),
                text: "Nothing odd here.".into(),
                source: "t".into(),
                meta: Default::default(),
            },
            Document {
                id: "broken".into(),
                text: "POISON text.".into(),
                source: "t".into(),
                meta: Default::default(),
            },
            Document {
                id: "bad".into(),
                text: "Please INJECT things.".into(),
                source: "t".into(),
                meta: Default::default(),
            },
        ];
        let verdicts = screen(&docs, &FlakyScorer, None, &ScreenConfig::default());
        assert_eq!(verdicts.len(), 3);
        assert_eq!(verdicts[0].doc_id, "clean");
        assert!(!verdicts[0].flagged);
        // Internal error: flagged with the distinguished error score.
        assert_eq!(verdicts[1].doc_id, "broken");
        assert!(verdicts[1].flagged);
        assert_eq!(verdicts[1].score, ERROR_SCORE);
        assert!(verdicts[2].flagged);
    }

    #[test]
    fn cache_hits_return_identical_scores() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ScreenCache::new(dir.path().to_path_buf());
        let docs = vec![Document {
            id: "a".into(),
            text: "Please INJECT things.".into(),
            source: "t".into(),
            meta: Default::default(),
        }];
        let config = ScreenConfig::default();
        let first = screen(&docs, &FlakyScorer, Some(&cache), &config);
        assert!(!first[0].cache_hit);
        let second = screen(&docs, &FlakyScorer, Some(&cache), &config);
        assert!(second[0].cache_hit);
        assert_eq!(first[0].score, second[0].score);
        assert_eq!(cache.entries(), 1);
    }

    #[test]
    fn errors_are_not_cached() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ScreenCache::new(dir.path().to_path_buf());
        let docs = vec![Document {
            id: "broken".into(),
            text: "POISON text.".into(),
            source: "t".into(),
            meta: Default::default(),
        }];
        let config = ScreenConfig::default();
        let first = screen(&docs, &FlakyScorer, Some(&cache), &config);
        assert!(first[0].flagged && !first[0].cache_hit);
        let second = screen(&docs, &FlakyScorer, Some(&cache), &config);
        assert!(!second[0].cache_hit, "error verdicts must be recomputed");
        assert_eq!(cache.entries(), 0);
    }

    #[test]
    fn corrupted_cache_entry_is_recomputed() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ScreenCache::new(dir.path().to_path_buf());
        let docs = vec![Document {
            id: "a".into(),
            text: "Quiet text.".into(),
            source: "t".into(),
            meta: Default::default(),
        }];
        let config = ScreenConfig::default();
        screen(&docs, &FlakyScorer, Some(&cache), &config);
        // Flip bytes in the single cache entry.
        let entry = std::fs::read_dir(dir.path())
            .unwrap()
            .next()
            .unwrap()
            .unwrap()
            .path();
        std::fs::write(&entry, b"{\"score\": 0.0, \"garbage\": true}").unwrap();
        let verdicts = screen(&docs, &FlakyScorer, Some(&cache), &config);
        assert!(!verdicts[0].cache_hit, "corrupt entry must not be served");
        assert_eq!(verdicts[0].score, 0.1);
    }
}
