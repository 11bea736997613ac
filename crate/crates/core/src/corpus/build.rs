//! Corpus assembly: sampling documents into disjoint balanced splits.

use std::collections::BTreeMap;
use std::num::NonZeroUsize;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::insert::{insert_instructions, make_negative};
use super::{CorpusError, Document, InstructionRecord, LabeledSample, PositionPolicy};
use crate::{jsonl, rng};

/// Sizing and insertion settings for one corpus build.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusConfig {
    /// Total train samples; half clean, half injected.
    pub train: usize,
    /// Total validation samples; half clean, half injected.
    pub validation: usize,
    /// Total test samples; half clean, half injected.
    pub test: usize,
    /// Instructions per injected train/validation sample.
    pub train_count: usize,
    pub train_policy: PositionPolicy,
    /// Instructions per injected test sample.
    pub test_count: usize,
    pub test_policy: PositionPolicy,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train: 200,
            validation: 100,
            test: 200,
            train_count: 1,
            train_policy: PositionPolicy::Random,
            test_count: 1,
            test_policy: PositionPolicy::Random,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Composition {
    pub train: SplitCounts,
    pub validation: SplitCounts,
    pub test: SplitCounts,
}

/// The built corpus: three splits disjoint by origin document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<LabeledSample>,
    pub validation: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub seed: u64,
    pub composition: Composition,
}

/// Sidecar manifest describing how a corpus directory was produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub config: CorpusConfig,
    pub externals_source: String,
    pub instructions_source: String,
    pub document_count: usize,
    pub instruction_count: usize,
    pub composition: Composition,
}

/// Drop documents whose token count (under the supplied counter) exceeds
/// `max_tokens`, and documents that are empty after trimming.
pub fn filter_overlong(
    docs: Vec<Document>,
    count_tokens: &dyn Fn(&str) -> usize,
    max_tokens: usize,
) -> Vec<Document> {
    docs.into_iter()
        .filter(|d| !d.text.trim().is_empty() && count_tokens(&d.text) <= max_tokens)
        .collect()
}

/// Build balanced splits from `externals` and `instructions`.
///
/// Each sample consumes one distinct document; no document is reused within
/// or across splits. Per-document randomness is derived from
/// `(config.seed, doc.id)`, so the result is a pure function of its inputs.
pub fn build_corpus(
    externals: &[Document],
    instructions: &[InstructionRecord],
    config: &CorpusConfig,
) -> Result<CorpusSplit, CorpusError> {
    for (name, size) in [
        ("train", config.train),
        ("validation", config.validation),
        ("test", config.test),
    ] {
        if size % 2 != 0 {
            return Err(CorpusError::UnevenSplit { split: name, size });
        }
    }
    let needed = config.train + config.validation + config.test;
    if externals.len() < needed {
        return Err(CorpusError::InsufficientData {
            needed,
            available: externals.len(),
        });
    }
    let max_count = config.train_count.max(config.test_count).max(1);
    if instructions.len() < max_count {
        return Err(CorpusError::TooFewInstructions {
            requested: max_count,
            available: instructions.len(),
        });
    }

    let mut order: Vec<usize> = (0..externals.len()).collect();
    order.shuffle(&mut rng::stream(config.seed, &["corpus", "doc-order"]));
    let mut cursor = order.into_iter();
    let mut take = |n: usize| -> Vec<&Document> {
        (&mut cursor).take(n).map(|i| &externals[i]).collect()
    };

    let mut composition = Composition::default();
    let mut build_split = |n: usize,
                           count: usize,
                           policy: PositionPolicy,
                           counts: &mut SplitCounts|
     -> Result<Vec<LabeledSample>, CorpusError> {
        let half = n / 2;
        let mut out = Vec::with_capacity(n);
        for doc in take(half) {
            let count = NonZeroUsize::new(count.max(1)).expect("count >= 1");
            let seed = rng::derive_seed(config.seed, &["insert", &doc.id]);
            out.push(insert_instructions(doc, instructions, policy, count, seed)?);
            counts.positives += 1;
        }
        for doc in take(half) {
            out.push(make_negative(doc));
            counts.negatives += 1;
        }
        // Interleave labels deterministically rather than leaving a block of
        // positives followed by a block of negatives.
        out.shuffle(&mut rng::stream(config.seed, &["corpus", "sample-order"]));
        Ok(out)
    };

    let train = build_split(
        config.train,
        config.train_count,
        config.train_policy,
        &mut composition.train,
    )?;
    let validation = build_split(
        config.validation,
        config.train_count,
        config.train_policy,
        &mut composition.validation,
    )?;
    let test = build_split(
        config.test,
        config.test_count,
        config.test_policy,
        &mut composition.test,
    )?;

    Ok(CorpusSplit {
        train,
        validation,
        test,
        seed: config.seed,
        composition,
    })
}

/// Write `train.jsonl`, `validation.jsonl`, `test.jsonl` and `manifest.json`
/// into `dir`.
pub fn write_corpus(
    dir: &Path,
    split: &CorpusSplit,
    manifest: &CorpusManifest,
) -> Result<(), CorpusError> {
    std::fs::create_dir_all(dir).map_err(|source| CorpusError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    jsonl::write(&dir.join("train.jsonl"), &split.train)?;
    jsonl::write(&dir.join("validation.jsonl"), &split.validation)?;
    jsonl::write(&dir.join("test.jsonl"), &split.test)?;
    let manifest_path = dir.join("manifest.json");
    let body = serde_json::to_string_pretty(manifest).expect("serializable manifest");
    std::fs::write(&manifest_path, body).map_err(|source| CorpusError::Io {
        path: manifest_path.display().to_string(),
        source,
    })?;
    Ok(())
}

/// Read a corpus directory written by [`write_corpus`].
pub fn read_split(dir: &Path) -> Result<(CorpusSplit, CorpusManifest), CorpusError> {
    let manifest_path = dir.join("manifest.json");
    let body = std::fs::read_to_string(&manifest_path).map_err(|source| CorpusError::Io {
        path: manifest_path.display().to_string(),
        source,
    })?;
    let manifest: CorpusManifest =
        serde_json::from_str(&body).map_err(|e| CorpusError::Io {
            path: manifest_path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })?;
    let train: Vec<LabeledSample> = jsonl::read(&dir.join("train.jsonl"))?;
    let validation: Vec<LabeledSample> = jsonl::read(&dir.join("validation.jsonl"))?;
    let test: Vec<LabeledSample> = jsonl::read(&dir.join("test.jsonl"))?;
    let composition = manifest.composition.clone();
    Ok((
        CorpusSplit {
            train,
            validation,
            test,
            seed: manifest.config.seed,
            composition,
        },
        manifest,
    ))
}

/// Count labels in a sample list.
pub fn label_counts(samples: &[LabeledSample]) -> BTreeMap<u8, usize> {
    let mut counts = BTreeMap::new();
    for s in samples {
        *counts.entry(s.label).or_insert(0) += 1;
    }
    counts
}
