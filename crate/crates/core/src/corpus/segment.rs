//! Rule-based sentence segmentation.
//!
//! Segmentation is lossless: sentences are byte spans of the input with the
//! inter-sentence whitespace left out, so the original text can always be
//! reconstructed from the spans plus the gaps between them. Boundaries fall
//! only after terminal punctuation (`.`, `!`, `?`, optionally followed by
//! closing quotes or brackets) when the next non-space character starts a new
//! sentence. A small abbreviation list keeps "Dr. Smith" together.

/// Tokens before a period that do not end a sentence.
const ABBREVIATIONS: &[&str] = &[
    "dr", "mr", "mrs", "ms", "prof", "rev", "hon", "st", "jr", "sr", "vs", "etc", "e.g", "i.e",
    "cf", "al", "inc", "ltd", "co", "corp", "no", "nos", "fig", "figs", "dept", "est", "approx",
    "mt", "ft", "u.s", "u.k", "a.m", "p.m",
];

const CLOSERS: &[char] = &['"', '\'', ')', ']', '\u{201d}', '\u{2019}'];

/// Byte spans of the sentences in `text`, in order. Spans never include the
/// whitespace that separates sentences.
pub fn segment_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let bytes = text.as_bytes();
    let len = bytes.len();

    let mut pos = skip_whitespace(text, 0);
    while pos < len {
        let start = pos;
        let mut end = None;
        let mut cursor = pos;
        while cursor < len {
            let ch = text[cursor..].chars().next().expect("in-bounds char");
            let ch_len = ch.len_utf8();
            if ch == '.' || ch == '!' || ch == '?' {
                let mut after = cursor + ch_len;
                // Swallow a run of terminal punctuation ("?!", "...").
                while after < len {
                    let c = text[after..].chars().next().expect("in-bounds char");
                    if c == '.' || c == '!' || c == '?' {
                        after += c.len_utf8();
                    } else {
                        break;
                    }
                }
                // And any closing quotes/brackets.
                while after < len {
                    let c = text[after..].chars().next().expect("in-bounds char");
                    if CLOSERS.contains(&c) {
                        after += c.len_utf8();
                    } else {
                        break;
                    }
                }
                if is_boundary(text, start, cursor, after, ch) {
                    end = Some(after);
                    break;
                }
                cursor = after;
            } else {
                cursor += ch_len;
            }
        }
        match end {
            Some(e) => {
                spans.push((start, e));
                pos = skip_whitespace(text, e);
            }
            None => {
                // Trailing fragment without terminal punctuation.
                let e = trailing_end(text, start);
                if e > start {
                    spans.push((start, e));
                }
                break;
            }
        }
    }
    spans
}

/// The sentences of `text` as owned strings.
pub fn segment_sentences(text: &str) -> Vec<String> {
    segment_spans(text)
        .into_iter()
        .map(|(s, e)| text[s..e].to_string())
        .collect()
}

fn skip_whitespace(text: &str, mut pos: usize) -> usize {
    while pos < text.len() {
        let ch = text[pos..].chars().next().expect("in-bounds char");
        if ch.is_whitespace() {
            pos += ch.len_utf8();
        } else {
            break;
        }
    }
    pos
}

fn trailing_end(text: &str, start: usize) -> usize {
    let tail = &text[start..];
    start + tail.trim_end().len()
}

fn is_boundary(text: &str, sent_start: usize, punct_pos: usize, after: usize, punct: char) -> bool {
    if punct == '.' && preceded_by_abbreviation(text, sent_start, punct_pos) {
        return false;
    }
    if after >= text.len() {
        return true;
    }
    let next = text[after..].chars().next().expect("in-bounds char");
    if !next.is_whitespace() {
        // Mid-token period: decimals, versions, domain names.
        return false;
    }
    let next_word = skip_whitespace(text, after);
    if next_word >= text.len() {
        return true;
    }
    let first = text[next_word..].chars().next().expect("in-bounds char");
    first.is_uppercase() || first.is_numeric() || first == '"' || first == '\u{201c}'
}

fn preceded_by_abbreviation(text: &str, sent_start: usize, punct_pos: usize) -> bool {
    let token_start = text[sent_start..punct_pos]
        .rfind(|c: char| c.is_whitespace())
        .map(|i| sent_start + i + 1)
        .unwrap_or(sent_start);
    let token = &text[token_start..punct_pos];
    if token.is_empty() {
        return false;
    }
    // Single capital letter: an initial like "J." in "J. K. Rowling".
    let mut chars = token.chars();
    if let (Some(c), None) = (chars.next(), chars.next()) {
        if c.is_uppercase() {
            return true;
        }
    }
    let lowered = token.to_lowercase();
    ABBREVIATIONS.contains(&lowered.as_str())
}
