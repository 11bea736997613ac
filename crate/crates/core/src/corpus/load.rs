//! Loading documents and instructions from local files.

use std::path::Path;

use super::{CorpusError, Document, InstructionRecord};
use crate::jsonl;

/// Read documents from a JSONL file with fields `{id, text, source, meta}`.
pub fn load_documents_jsonl(path: &Path) -> Result<Vec<Document>, CorpusError> {
    Ok(jsonl::read(path)?)
}

/// Ingest a directory of plain-text files: one file per document, the file
/// name (without extension) as the id.
pub fn load_documents_dir(dir: &Path) -> Result<Vec<Document>, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut docs = Vec::new();
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(io_err)?
        .collect::<Result<_, _>>()
        .map_err(io_err)?;
    entries.sort_by_key(|e| e.path());
    for entry in entries {
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        docs.push(Document {
            id,
            text,
            source: "file".into(),
            meta: Default::default(),
        });
    }
    Ok(docs)
}

/// Read instructions from a JSONL file with fields
/// `{id, text, source, category?}`.
pub fn load_instructions_jsonl(path: &Path) -> Result<Vec<InstructionRecord>, CorpusError> {
    Ok(jsonl::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_ingestion_uses_file_stems_as_ids() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("b.txt"), "Second doc.").unwrap();
        std::fs::write(dir.path().join("a.txt"), "First doc.").unwrap();
        let docs = load_documents_dir(dir.path()).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].id, "a");
        assert_eq!(docs[0].text, "First doc.");
        assert_eq!(docs[1].id, "b");
    }
}
