//! Corpus construction: balanced clean/injected document sets with exact
//! injected-span provenance.

mod build;
mod insert;
mod load;
mod segment;
pub mod synth;

pub use build::{
    build_corpus, filter_overlong, label_counts, read_split, write_corpus, Composition,
    CorpusConfig, CorpusManifest, CorpusSplit, SplitCounts,
};
pub use insert::{insert_instructions, make_negative, strip_injections};
pub use load::{load_documents_dir, load_documents_jsonl, load_instructions_jsonl};
pub use segment::{segment_sentences, segment_spans};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// One external document before labeling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    /// Origin tag, e.g. "wikipedia", "news", "user", "synthetic".
    pub source: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

/// A self-contained imperative instruction used for injection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: String,
    pub text: String,
    /// Origin tag, e.g. "lamini", "bipia", "custom".
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

/// Where instructions are inserted relative to the document's sentences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionPolicy {
    Beginning,
    Middle,
    End,
    Random,
}

impl std::fmt::Display for PositionPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PositionPolicy::Beginning => "beginning",
            PositionPolicy::Middle => "middle",
            PositionPolicy::End => "end",
            PositionPolicy::Random => "random",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for PositionPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "beginning" => Ok(PositionPolicy::Beginning),
            "middle" => Ok(PositionPolicy::Middle),
            "end" => Ok(PositionPolicy::End),
            "random" => Ok(PositionPolicy::Random),
            other => Err(format!("unknown position policy {other:?}")),
        }
    }
}

/// Byte range of one injected instruction inside a sample's text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectedSpan {
    /// Byte offset of the first byte of the instruction text.
    pub start: usize,
    /// Byte offset one past the last byte.
    pub end: usize,
    pub instruction_id: String,
}

/// One labeled sample: a document either left intact (label 0) or with
/// instructions inserted at sentence boundaries (label 1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledSample {
    pub id: String,
    pub text: String,
    /// 0 = clean, 1 = injected.
    pub label: u8,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub injected_spans: Vec<InjectedSpan>,
    pub origin_doc_id: String,
    pub position_policy: PositionPolicy,
    pub instruction_count: usize,
}

impl LabeledSample {
    /// Check the structural invariants that every sample must satisfy.
    pub fn check_invariants(&self) -> Result<(), String> {
        if (self.label == 1) != !self.injected_spans.is_empty() {
            return Err(format!(
                "sample {}: label {} inconsistent with {} spans",
                self.id,
                self.label,
                self.injected_spans.len()
            ));
        }
        if self.instruction_count != self.injected_spans.len() {
            return Err(format!(
                "sample {}: instruction_count {} != {} spans",
                self.id,
                self.instruction_count,
                self.injected_spans.len()
            ));
        }
        for span in &self.injected_spans {
            if span.start >= span.end || span.end > self.text.len() {
                return Err(format!(
                    "sample {}: span {}..{} out of bounds for text of {} bytes",
                    self.id,
                    span.start,
                    span.end,
                    self.text.len()
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("requested {requested} instructions but only {available} supplied")]
    TooFewInstructions { requested: usize, available: usize },
    #[error("document {doc_id} yields zero sentences")]
    UnsegmentableDocument { doc_id: String },
    #[error("document {doc_id} has {available} candidate boundaries for {requested} insertions")]
    NotEnoughBoundaries {
        doc_id: String,
        requested: usize,
        available: usize,
    },
    #[error("not enough documents: need {needed}, have {available} (short by {})", needed - available)]
    InsufficientData { needed: usize, available: usize },
    #[error("split size {size} for {split} is not even; clean/injected halves must balance")]
    UnevenSplit { split: &'static str, size: usize },
    #[error(transparent)]
    Jsonl(#[from] crate::jsonl::JsonlError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
