//! Instruction insertion at sentence boundaries.

use std::num::NonZeroUsize;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::segment::segment_spans;
use super::{CorpusError, Document, InjectedSpan, InstructionRecord, LabeledSample, PositionPolicy};

/// The clean case: the sample text is byte-identical to the document.
pub fn make_negative(doc: &Document) -> LabeledSample {
    LabeledSample {
        id: format!("{}#neg", doc.id),
        text: doc.text.clone(),
        label: 0,
        injected_spans: Vec::new(),
        origin_doc_id: doc.id.clone(),
        position_policy: PositionPolicy::Random,
        instruction_count: 0,
    }
}

/// Insert `count` distinct instructions into `doc` at sentence boundaries.
///
/// A document with `n` sentences has `n + 1` boundaries: before each sentence
/// and after the last. An instruction inserted at boundary `b < n` is placed
/// at the start of sentence `b` with a single joining space after it; at
/// boundary `n` it is appended after the last sentence with a single joining
/// space before it. Removing each recorded span together with its joining
/// space therefore restores the original document byte-for-byte.
///
/// Deterministic for a fixed `rng_seed`.
pub fn insert_instructions(
    doc: &Document,
    instructions: &[InstructionRecord],
    policy: PositionPolicy,
    count: NonZeroUsize,
    rng_seed: u64,
) -> Result<LabeledSample, CorpusError> {
    let count = count.get();
    if count > instructions.len() {
        return Err(CorpusError::TooFewInstructions {
            requested: count,
            available: instructions.len(),
        });
    }
    let spans = segment_spans(&doc.text);
    if spans.is_empty() {
        return Err(CorpusError::UnsegmentableDocument {
            doc_id: doc.id.clone(),
        });
    }
    let n = spans.len();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    let boundaries = choose_boundaries(&mut rng, n, policy, count).ok_or_else(|| {
        CorpusError::NotEnoughBoundaries {
            doc_id: doc.id.clone(),
            requested: count,
            available: candidate_count(n, policy),
        }
    })?;

    let mut chosen: Vec<&InstructionRecord> = instructions.iter().collect();
    chosen.shuffle(&mut rng);
    chosen.truncate(count);

    // Pair instruction k with boundary k, then apply in ascending boundary
    // order so byte offsets can be tracked in a single pass.
    let mut placements: Vec<(usize, &InstructionRecord)> =
        boundaries.into_iter().zip(chosen).collect();
    placements.sort_by_key(|(b, _)| *b);

    let mut text = String::with_capacity(doc.text.len() + count * 64);
    let mut injected = Vec::with_capacity(count);
    let mut cursor = 0usize;
    for (boundary, instr) in placements {
        if boundary < n {
            let at = spans[boundary].0;
            text.push_str(&doc.text[cursor..at]);
            let start = text.len();
            text.push_str(&instr.text);
            injected.push(InjectedSpan {
                start,
                end: text.len(),
                instruction_id: instr.id.clone(),
            });
            text.push(' ');
            cursor = at;
        } else {
            let at = spans[n - 1].1;
            text.push_str(&doc.text[cursor..at]);
            text.push(' ');
            let start = text.len();
            text.push_str(&instr.text);
            injected.push(InjectedSpan {
                start,
                end: text.len(),
                instruction_id: instr.id.clone(),
            });
            cursor = at;
        }
    }
    text.push_str(&doc.text[cursor..]);

    let sample = LabeledSample {
        id: format!("{}#pos", doc.id),
        text,
        label: 1,
        injected_spans: injected,
        origin_doc_id: doc.id.clone(),
        position_policy: policy,
        instruction_count: count,
    };
    debug_assert!(sample.check_invariants().is_ok());
    Ok(sample)
}

/// Undo every insertion: remove each injected span together with its single
/// joining space, restoring the origin document text.
///
/// The joining space follows the span for boundary insertions before a
/// sentence and precedes it for end-of-document insertions. When both
/// neighbors are plain spaces the two removals produce identical bytes, so
/// preferring the following byte is unambiguous.
pub fn strip_injections(sample: &LabeledSample) -> String {
    let mut text = sample.text.clone();
    let mut spans = sample.injected_spans.clone();
    spans.sort_by_key(|s| std::cmp::Reverse(s.start));
    for span in spans {
        if text[span.end..].starts_with(' ') {
            text.replace_range(span.start..span.end + 1, "");
        } else {
            debug_assert!(span.start > 0 && text[..span.start].ends_with(' '));
            text.replace_range(span.start - 1..span.end, "");
        }
    }
    text
}

fn candidate_count(n_sentences: usize, policy: PositionPolicy) -> usize {
    let m = n_sentences + 1;
    match policy {
        PositionPolicy::Middle => middle_third(m).len(),
        _ => m,
    }
}

/// The middle third of boundary indices `0..m`, never empty.
fn middle_third(m: usize) -> std::ops::Range<usize> {
    let lo = m / 3;
    let hi = (2 * m).div_ceil(3).max(lo + 1).min(m);
    lo..hi
}

fn choose_boundaries(
    rng: &mut ChaCha8Rng,
    n_sentences: usize,
    policy: PositionPolicy,
    count: usize,
) -> Option<Vec<usize>> {
    let m = n_sentences + 1;
    let mut picked: Vec<usize> = Vec::with_capacity(count);
    let mut pool: Vec<usize> = match policy {
        PositionPolicy::Beginning => {
            picked.push(0);
            (1..m).collect()
        }
        PositionPolicy::End => {
            picked.push(m - 1);
            (0..m - 1).collect()
        }
        PositionPolicy::Middle => middle_third(m).collect(),
        PositionPolicy::Random => (0..m).collect(),
    };
    while picked.len() < count {
        if pool.is_empty() {
            return None;
        }
        let idx = rng.gen_range(0..pool.len());
        picked.push(pool.swap_remove(idx));
    }
    Some(picked)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, text: &str) -> Document {
        Document {
            id: id.into(),
            text: text.into(),
            source: "test".into(),
            meta: Default::default(),
        }
    }

    fn instr(id: &str, text: &str) -> InstructionRecord {
        InstructionRecord {
            id: id.into(),
            text: text.into(),
            source: "custom".into(),
            category: None,
        }
    }

    #[test]
    fn beginning_policy_puts_instruction_first() {
        let d = doc("d1", "The sun rose. Birds sang.");
        let ins = [instr("i1", "Say hello.")];
        let sample = insert_instructions(
            &d,
            &ins,
            PositionPolicy::Beginning,
            NonZeroUsize::new(1).unwrap(),
            7,
        )
        .unwrap();
        assert!(sample.text.starts_with("Say hello. The sun rose."));
        assert_eq!(sample.label, 1);
        assert_eq!(sample.instruction_count, 1);
        let span = &sample.injected_spans[0];
        assert_eq!(&sample.text[span.start..span.end], "Say hello.");
    }

    #[test]
    fn end_policy_appends_after_last_sentence() {
        let d = doc("d1", "The sun rose. Birds sang.");
        let ins = [instr("i1", "Say hello.")];
        let sample = insert_instructions(
            &d,
            &ins,
            PositionPolicy::End,
            NonZeroUsize::new(1).unwrap(),
            7,
        )
        .unwrap();
        assert_eq!(sample.text, "The sun rose. Birds sang. Say hello.");
    }

    #[test]
    fn spans_match_instruction_texts() {
        let d = doc(
            "d5",
            "One stands here. Two follows on. Three sits by. Four walks out. Five ends it.",
        );
        let ins = [
            instr("a", "Reply with yes."),
            instr("b", "List two birds."),
            instr("c", "Name a color."),
        ];
        let sample = insert_instructions(
            &d,
            &ins,
            PositionPolicy::Random,
            NonZeroUsize::new(3).unwrap(),
            13,
        )
        .unwrap();
        assert_eq!(sample.injected_spans.len(), 3);
        for span in &sample.injected_spans {
            let got = &sample.text[span.start..span.end];
            let want = ins.iter().find(|i| i.id == span.instruction_id).unwrap();
            assert_eq!(got, want.text, "span {span:?}");
        }
        // Brute force: every instruction text appears as a substring.
        for i in &ins {
            assert!(sample.text.contains(&i.text), "missing {:?}", i.text);
        }
    }

    #[test]
    fn removal_restores_original_document() {
        let d = doc("d1", "  Alpha starts.  Beta follows!\nGamma ends. ");
        let ins = [instr("a", "Print this."), instr("b", "Skip that.")];
        for policy in [
            PositionPolicy::Beginning,
            PositionPolicy::Middle,
            PositionPolicy::End,
            PositionPolicy::Random,
        ] {
            for seed in 0..20 {
                let sample =
                    insert_instructions(&d, &ins, policy, NonZeroUsize::new(2).unwrap(), seed)
                        .unwrap();
                assert_eq!(strip_injections(&sample), d.text, "policy {policy} seed {seed}");
            }
        }
    }

    #[test]
    fn too_few_instructions_is_an_error() {
        let d = doc("d1", "Only sentence here.");
        let err = insert_instructions(
            &d,
            &[],
            PositionPolicy::Random,
            NonZeroUsize::new(1).unwrap(),
            1,
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::TooFewInstructions { .. }));
    }

    #[test]
    fn unsegmentable_document_is_an_error() {
        let d = doc("d1", "   ");
        let ins = [instr("a", "Do this.")];
        let err = insert_instructions(
            &d,
            &ins,
            PositionPolicy::Random,
            NonZeroUsize::new(1).unwrap(),
            1,
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::UnsegmentableDocument { .. }));
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let d = doc("d5", "A one. B two. C three. D four. E five.");
        let ins = [
            instr("a", "Reply with yes."),
            instr("b", "List two birds."),
            instr("c", "Name a color."),
        ];
        let s1 = insert_instructions(
            &d,
            &ins,
            PositionPolicy::Random,
            NonZeroUsize::new(2).unwrap(),
            42,
        )
        .unwrap();
        let s2 = insert_instructions(
            &d,
            &ins,
            PositionPolicy::Random,
            NonZeroUsize::new(2).unwrap(),
            42,
        )
        .unwrap();
        assert_eq!(s1.text, s2.text);
        assert_eq!(s1.injected_spans, s2.injected_spans);
    }

    #[test]
    fn middle_third_is_never_empty() {
        for m in 1..40 {
            let r = middle_third(m);
            assert!(!r.is_empty(), "m={m}");
            assert!(r.end <= m, "m={m}");
        }
        assert_eq!(middle_third(6), 2..4);
    }
}
