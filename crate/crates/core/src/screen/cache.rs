//! On-disk score cache: one JSON file per (content hash, detector
//! fingerprint) key, integrity-checked so a damaged entry is recomputed
//! instead of served.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::fingerprint;

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    format_version: u32,
    text_hash: String,
    detector_fingerprint: String,
    score: f32,
    checksum: String,
}

impl CacheEntry {
    fn compute_checksum(&self) -> String {
        fingerprint::sha256_fields(&[
            ("text_hash", &self.text_hash),
            ("detector_fingerprint", &self.detector_fingerprint),
            ("score", &format!("{:.9e}", self.score)),
        ])
    }
}

/// A directory of hash-named cache entries. Reads are lock-free; writes go
/// through a temp file plus rename so concurrent readers never see a torn
/// entry.
pub struct ScreenCache {
    dir: PathBuf,
}

impl ScreenCache {
    pub fn new(dir: PathBuf) -> Self {
        Self { dir }
    }

    pub fn dir(&self) -> &std::path::Path {
        &self.dir
    }

    fn entry_path(&self, text_hash: &str, detector_fingerprint: &str) -> PathBuf {
        let key = fingerprint::sha256_fields(&[
            ("text_hash", text_hash),
            ("detector_fingerprint", detector_fingerprint),
        ]);
        self.dir.join(format!("{key}.json"))
    }

    /// A verified score, or None when the entry is absent or damaged.
    pub fn get(&self, text_hash: &str, detector_fingerprint: &str) -> Option<f32> {
        let path = self.entry_path(text_hash, detector_fingerprint);
        let body = std::fs::read_to_string(&path).ok()?;
        let entry: CacheEntry = match serde_json::from_str(&body) {
            Ok(e) => e,
            Err(err) => {
                log::warn!("unreadable cache entry {path:?}: {err}");
                return None;
            }
        };
        let intact = entry.format_version == 1
            && entry.text_hash == text_hash
            && entry.detector_fingerprint == detector_fingerprint
            && entry.checksum == entry.compute_checksum();
        if !intact {
            log::warn!("cache entry {path:?} failed verification; recomputing");
            return None;
        }
        Some(entry.score)
    }

    pub fn put(
        &self,
        text_hash: &str,
        detector_fingerprint: &str,
        score: f32,
    ) -> std::io::Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        let mut entry = CacheEntry {
            format_version: 1,
            text_hash: text_hash.to_string(),
            detector_fingerprint: detector_fingerprint.to_string(),
            score,
            checksum: String::new(),
        };
        entry.checksum = entry.compute_checksum();
        let path = self.entry_path(text_hash, detector_fingerprint);
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(&entry).expect("serializable entry"))?;
        std::fs::rename(&tmp, &path)
    }

    /// Number of entries on disk.
    pub fn entries(&self) -> usize {
        std::fs::read_dir(&self.dir)
            .map(|entries| {
                entries
                    .filter_map(Result::ok)
                    .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
                    .count()
            })
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_fingerprint_isolation() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ScreenCache::new(dir.path().to_path_buf());
        cache.put("hash-a", "fp-1", 0.75).unwrap();
        assert_eq!(cache.get("hash-a", "fp-1"), Some(0.75));
        // A different detector fingerprint is a different key.
        assert_eq!(cache.get("hash-a", "fp-2"), None);
        assert_eq!(cache.get("hash-b", "fp-1"), None);
    }

    #[test]
    fn tampered_entry_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ScreenCache::new(dir.path().to_path_buf());
        cache.put("hash-a", "fp-1", 0.25).unwrap();
        let path = cache.entry_path("hash-a", "fp-1");
        let body = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, body.replace("0.25", "0.05")).unwrap();
        assert_eq!(cache.get("hash-a", "fp-1"), None);
    }
}
