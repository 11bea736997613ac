//! Single-file container for model parameters: a JSON header followed by raw
//! little-endian float blocks, integrity-checked with a SHA-256 checksum.
//!
//! Layout:
//!
//! ```text
//! magic "SGC1" | u32 LE header length | header JSON | block bytes...
//! ```
//!
//! The header declares every block (name, shape, dtype, element count) in
//! file order, so the parameter layout is readable without touching the
//! payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::fingerprint::sha256_hex;

const MAGIC: &[u8; 4] = b"SGC1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub format_version: u32,
    /// What the container holds, e.g. "tiny-lm" or "detector".
    pub kind: String,
    /// Free-form metadata owned by the writer.
    pub meta: serde_json::Value,
    pub blocks: Vec<BlockInfo>,
    /// SHA-256 over the concatenated block bytes.
    pub checksum: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    /// Shape hints; zero when the block is naturally one-dimensional.
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub enum BlockData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct Block {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: BlockData,
}

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt container {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("unsupported container version {found} in {path} (supported: {supported})")]
    VersionMismatch {
        path: String,
        found: u32,
        supported: u32,
    },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ContainerError + '_ {
    move |source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> ContainerError {
    ContainerError::Corrupt {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn block_bytes(data: &BlockData) -> Vec<u8> {
    match data {
        BlockData::F32(values) => {
            let mut out = Vec::with_capacity(values.len() * 4);
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out
        }
        BlockData::F64(values) => {
            let mut out = Vec::with_capacity(values.len() * 8);
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out
        }
    }
}

pub fn write(
    path: &Path,
    kind: &str,
    meta: serde_json::Value,
    blocks: &[Block],
) -> Result<(), ContainerError> {
    let mut payload = Vec::new();
    let mut infos = Vec::with_capacity(blocks.len());
    for block in blocks {
        let bytes = block_bytes(&block.data);
        let (dtype, count) = match &block.data {
            BlockData::F32(v) => ("f32", v.len()),
            BlockData::F64(v) => ("f64", v.len()),
        };
        infos.push(BlockInfo {
            name: block.name.clone(),
            rows: block.rows,
            cols: block.cols,
            dtype: dtype.into(),
            count,
        });
        payload.extend_from_slice(&bytes);
    }
    let header = ContainerHeader {
        format_version: FORMAT_VERSION,
        kind: kind.into(),
        meta,
        blocks: infos,
        checksum: sha256_hex(&payload),
    };
    let header_json = serde_json::to_vec(&header).expect("serializable header");

    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(io_err(path))?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())
        .map_err(io_err(path))?;
    w.write_all(&header_json).map_err(io_err(path))?;
    w.write_all(&payload).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Read just the header; the parameter payload is not touched.
pub fn read_header(path: &Path) -> Result<ContainerHeader, ContainerError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    read_header_from(&mut r, path)
}

fn read_header_from(
    r: &mut impl Read,
    path: &Path,
) -> Result<ContainerHeader, ContainerError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| corrupt(path, "file too short for magic"))?;
    if &magic != MAGIC {
        return Err(corrupt(path, "bad magic"));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)
        .map_err(|_| corrupt(path, "file too short for header length"))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json)
        .map_err(|_| corrupt(path, "file too short for header"))?;
    let header: ContainerHeader = serde_json::from_slice(&header_json)
        .map_err(|e| corrupt(path, format!("header json: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(ContainerError::VersionMismatch {
            path: path.display().to_string(),
            found: header.format_version,
            supported: FORMAT_VERSION,
        });
    }
    Ok(header)
}

pub fn read(path: &Path) -> Result<(ContainerHeader, Vec<Block>), ContainerError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let header = read_header_from(&mut r, path)?;

    let total: usize = header
        .blocks
        .iter()
        .map(|b| b.count * if b.dtype == "f64" { 8 } else { 4 })
        .sum();
    let mut payload = vec![0u8; total];
    r.read_exact(&mut payload)
        .map_err(|_| corrupt(path, "truncated parameter payload"))?;
    if sha256_hex(&payload) != header.checksum {
        return Err(corrupt(path, "checksum mismatch"));
    }

    let mut blocks = Vec::with_capacity(header.blocks.len());
    let mut offset = 0;
    for info in &header.blocks {
        let data = match info.dtype.as_str() {
            "f32" => {
                let bytes = &payload[offset..offset + info.count * 4];
                offset += info.count * 4;
                BlockData::F32(
                    bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                        .collect(),
                )
            }
            "f64" => {
                let bytes = &payload[offset..offset + info.count * 8];
                offset += info.count * 8;
                BlockData::F64(
                    bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                        .collect(),
                )
            }
            other => return Err(corrupt(path, format!("unknown dtype {other:?}"))),
        };
        blocks.push(Block {
            name: info.name.clone(),
            rows: info.rows,
            cols: info.cols,
            data,
        });
    }
    Ok((header, blocks))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_blocks_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.sgc");
        let blocks = vec![
            Block {
                name: "a".into(),
                rows: 2,
                cols: 2,
                data: BlockData::F32(vec![1.0, 2.0, 3.0, 4.0]),
            },
            Block {
                name: "b".into(),
                rows: 0,
                cols: 0,
                data: BlockData::F64(vec![-0.5, 0.25]),
            },
        ];
        write(&path, "test", serde_json::json!({"k": 7}), &blocks).unwrap();

        let header = read_header(&path).unwrap();
        assert_eq!(header.kind, "test");
        assert_eq!(header.meta["k"], 7);
        assert_eq!(header.blocks.len(), 2);

        let (_, read_blocks) = read(&path).unwrap();
        match &read_blocks[0].data {
            BlockData::F32(v) => assert_eq!(v, &vec![1.0, 2.0, 3.0, 4.0]),
            _ => panic!("wrong dtype"),
        }
        match &read_blocks[1].data {
            BlockData::F64(v) => assert_eq!(v, &vec![-0.5, 0.25]),
            _ => panic!("wrong dtype"),
        }
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.sgc");
        let blocks = vec![Block {
            name: "a".into(),
            rows: 0,
            cols: 0,
            data: BlockData::F32(vec![1.0; 64]),
        }];
        write(&path, "test", serde_json::json!({}), &blocks).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            read(&path),
            Err(ContainerError::Corrupt { .. })
        ));
    }

    #[test]
    fn flipped_payload_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.sgc");
        let blocks = vec![Block {
            name: "a".into(),
            rows: 0,
            cols: 0,
            data: BlockData::F32(vec![1.0; 8]),
        }];
        write(&path, "test", serde_json::json!({}), &blocks).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        match read(&path) {
            Err(ContainerError::Corrupt { reason, .. }) => {
                assert!(reason.contains("checksum"), "reason: {reason}")
            }
            other => panic!("expected corrupt, got {other:?}"),
        }
    }
}
