//! Detector persistence: a JSON header with dimensions, fingerprint and
//! training manifest, followed by raw little-endian f32 parameter blocks.
//! The header alone describes the model; `read_manifest` never touches the
//! parameter payload.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::mlp::{Dense, Mlp};
use super::{DetectorError, DetectorModel, FeatureMode, NormScheme, TrainingManifest};
use crate::container::{self, Block, BlockData, ContainerError};
use crate::features::ProjectionParams;
use crate::model::ExtractionConfig;

/// Everything the header records about a saved detector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorFileManifest {
    pub mode: FeatureMode,
    pub hidden_dim: usize,
    pub grad_dim: usize,
    pub mlp_dims: Vec<usize>,
    pub normalization: NormScheme,
    pub extraction: ExtractionConfig,
    pub fingerprint: String,
    pub training: TrainingManifest,
    pub threshold: f32,
}

fn map_container_err(err: ContainerError) -> DetectorError {
    match err {
        ContainerError::VersionMismatch { found, supported, .. } => {
            DetectorError::VersionMismatch { found, supported }
        }
        ContainerError::Corrupt { path, reason } => DetectorError::CorruptModelFile { path, reason },
        ContainerError::Io { path, source } => DetectorError::Io { path, source },
    }
}

pub fn save(model: &DetectorModel, path: &Path) -> Result<(), DetectorError> {
    let manifest = DetectorFileManifest {
        mode: model.mode,
        hidden_dim: model.hidden_dim,
        grad_dim: model.grad_dim,
        mlp_dims: model.mlp.dims(),
        normalization: model.normalization,
        extraction: model.extraction.clone(),
        fingerprint: model.fingerprint.clone(),
        training: model.training.clone(),
        threshold: model.threshold,
    };
    let meta = serde_json::to_value(&manifest).expect("serializable manifest");

    let mut blocks = Vec::new();
    if let Some(proj) = &model.projection {
        blocks.push(Block {
            name: "projection.weight".into(),
            rows: proj.weight.nrows(),
            cols: proj.weight.ncols(),
            data: BlockData::F32(proj.weight.as_slice().expect("contiguous").to_vec()),
        });
    }
    for (i, layer) in model.mlp.layers.iter().enumerate() {
        blocks.push(Block {
            name: format!("mlp.{i}.weight"),
            rows: layer.weight.nrows(),
            cols: layer.weight.ncols(),
            data: BlockData::F32(layer.weight.as_slice().expect("contiguous").to_vec()),
        });
        blocks.push(Block {
            name: format!("mlp.{i}.bias"),
            rows: 0,
            cols: layer.bias.len(),
            data: BlockData::F32(layer.bias.to_vec()),
        });
    }
    container::write(path, "detector", meta, &blocks).map_err(map_container_err)
}

/// Read the header only: dimensions, extraction config (layer, paired
/// response), training manifest. No parameters are loaded.
pub fn read_manifest(path: &Path) -> Result<DetectorFileManifest, DetectorError> {
    let header = container::read_header(path).map_err(map_container_err)?;
    if header.kind != "detector" {
        return Err(DetectorError::CorruptModelFile {
            path: path.display().to_string(),
            reason: format!("container kind {:?}", header.kind),
        });
    }
    serde_json::from_value(header.meta).map_err(|e| DetectorError::CorruptModelFile {
        path: path.display().to_string(),
        reason: format!("manifest: {e}"),
    })
}

pub fn load(path: &Path) -> Result<DetectorModel, DetectorError> {
    let corrupt = |reason: String| DetectorError::CorruptModelFile {
        path: path.display().to_string(),
        reason,
    };
    let (header, blocks) = container::read(path).map_err(map_container_err)?;
    if header.kind != "detector" {
        return Err(corrupt(format!("container kind {:?}", header.kind)));
    }
    let manifest: DetectorFileManifest =
        serde_json::from_value(header.meta).map_err(|e| corrupt(format!("manifest: {e}")))?;

    let mut projection = None;
    let mut dense: Vec<Option<Dense>> = vec![None; manifest.mlp_dims.len() - 1];
    let take_f32 = |data: BlockData, name: &str| -> Result<Vec<f32>, DetectorError> {
        match data {
            BlockData::F32(v) => Ok(v),
            BlockData::F64(_) => Err(corrupt(format!("block {name} is f64, expected f32"))),
        }
    };
    for block in blocks {
        if block.name == "projection.weight" {
            let values = take_f32(block.data, "projection.weight")?;
            let weight = Array2::from_shape_vec((block.rows, block.cols), values)
                .map_err(|e| corrupt(format!("projection.weight: {e}")))?;
            projection = Some(ProjectionParams { weight });
        } else if let Some(rest) = block.name.strip_prefix("mlp.") {
            let (idx, field) = rest
                .split_once('.')
                .ok_or_else(|| corrupt(format!("bad block name mlp.{rest}")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| corrupt(format!("bad layer index in mlp.{rest}")))?;
            if idx >= dense.len() {
                return Err(corrupt(format!("layer index {idx} out of range")));
            }
            let name = block.name.clone();
            let rows = block.rows;
            let cols = block.cols;
            let values = take_f32(block.data, &name)?;
            let entry = dense[idx].get_or_insert_with(|| Dense {
                weight: Array2::zeros((0, 0)),
                bias: Array1::zeros(0),
            });
            match field {
                "weight" => {
                    entry.weight = Array2::from_shape_vec((rows, cols), values)
                        .map_err(|e| corrupt(format!("{name}: {e}")))?
                }
                "bias" => entry.bias = Array1::from_vec(values),
                other => return Err(corrupt(format!("unknown block field {other:?}"))),
            }
        } else {
            return Err(corrupt(format!("unexpected block {:?}", block.name)));
        }
    }
    let layers: Vec<Dense> = dense
        .into_iter()
        .enumerate()
        .map(|(i, d)| d.ok_or_else(|| corrupt(format!("missing mlp layer {i}"))))
        .collect::<Result<_, _>>()?;
    let mlp = Mlp { layers };
    if mlp.dims() != manifest.mlp_dims {
        return Err(corrupt(format!(
            "parameter dims {:?} disagree with manifest {:?}",
            mlp.dims(),
            manifest.mlp_dims
        )));
    }
    if matches!(manifest.mode, FeatureMode::Fused | FeatureMode::GradOnly)
        && projection.is_none()
    {
        return Err(corrupt("missing projection block".into()));
    }

    Ok(DetectorModel {
        mode: manifest.mode,
        hidden_dim: manifest.hidden_dim,
        grad_dim: manifest.grad_dim,
        projection,
        mlp,
        normalization: manifest.normalization,
        extraction: manifest.extraction,
        fingerprint: manifest.fingerprint,
        training: manifest.training,
        threshold: manifest.threshold,
    })
}
